"""Optimizer, losses, training loop, and the metrics suite.

Losses are tape ops like everything else: categorical cross-entropy
for classification, BCE plus soft-Dice (equal weights, smoothing 1.0)
for segmentation. Metrics follow the usual conventions: accuracy from
the confusion trace, macro recall/F1 over classes present in the
ground truth (a weighted variant sits behind a flag), per-image IoU
and Dice with the empty-vs-empty pair scored 1.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from . import ops
from .autodiff import Tape, backward, register_backward
from .data import Sample, SplitDataset
from .ops import _find_tape, _lift, _val
from .tensor import Rng

__all__ = [
    "History",
    "MetricsReport",
    "TrainConfig",
    "adam_init",
    "adam_step",
    "bce",
    "confusion_matrix",
    "cross_entropy",
    "dice_loss",
    "evaluate_cls",
    "evaluate_seg",
    "iou_dsc_from_counts",
    "mask_overlap_counts",
    "train",
    "write_history_csv",
]

PROB_CLIP = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class TrainConfig:
    task: str  # "cls" | "seg"
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.task not in ("cls", "seg"):
            raise ValueError("task must be 'cls' or 'seg'")


@dataclass
class MetricsReport:
    accuracy: float | None = None
    recall: float | None = None
    f1: float | None = None
    iou: float | None = None
    dsc: float | None = None
    per_class: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "recall": self.recall, "f1": self.f1,
                "iou": self.iou, "dsc": self.dsc}


# ---------------------------------------------------------------------------
# losses

def cross_entropy(probs, labels, name=None):
    """Mean negative log-likelihood of integer labels; probs clipped at 1e-7."""
    tape = _find_tape(probs)
    pv = _val(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if pv.ndim != 2 or labels.shape != (pv.shape[0],):
        raise ValueError(f"cross_entropy shapes: probs {pv.shape}, labels {labels.shape}")
    picked = pv[np.arange(pv.shape[0]), labels]
    out = np.asarray(-np.mean(np.log(np.maximum(picked, PROB_CLIP))))
    if tape is None:
        return out
    return tape.record("cross_entropy", [_lift(tape, probs)], out,
                       {"probs": pv, "labels": labels}, name=name)


@register_backward("cross_entropy")
def _ce_bwd(node, g):
    pv, labels = node.ctx["probs"], node.ctx["labels"]
    n = pv.shape[0]
    grad = np.zeros_like(pv)
    picked = pv[np.arange(n), labels]
    live = picked > PROB_CLIP  # clipped entries have zero slope
    grad[np.arange(n)[live], labels[live]] = -1.0 / (n * picked[live])
    return [grad * g]


def bce(probs, masks, name=None):
    """Mean binary cross-entropy over all elements, probs clipped to
    [1e-7, 1 - 1e-7]."""
    tape = _find_tape(probs)
    pv, mv = _val(probs), np.asarray(_val(masks))
    if pv.shape != mv.shape:
        raise ValueError(f"bce shape mismatch: {pv.shape} vs {mv.shape}")
    pc = np.clip(pv, PROB_CLIP, 1.0 - PROB_CLIP)
    out = np.asarray(-np.mean(mv * np.log(pc) + (1.0 - mv) * np.log(1.0 - pc)))
    if tape is None:
        return out
    return tape.record("bce", [_lift(tape, probs)], out,
                       {"p": pv, "pc": pc, "m": mv}, name=name)


@register_backward("bce")
def _bce_bwd(node, g):
    p, pc, m = node.ctx["p"], node.ctx["pc"], node.ctx["m"]
    live = (p > PROB_CLIP) & (p < 1.0 - PROB_CLIP)
    grad = np.where(live, (pc - m) / (pc * (1.0 - pc)) / p.size, 0.0)
    return [grad * g]


def dice_loss(probs, masks, smooth: float = DICE_SMOOTH, name=None):
    """1 - soft Dice, averaged per sample over the batch."""
    tape = _find_tape(probs)
    pv, mv = _val(probs), np.asarray(_val(masks))
    if pv.shape != mv.shape:
        raise ValueError(f"dice_loss shape mismatch: {pv.shape} vs {mv.shape}")
    n = pv.shape[0]
    flat_p = pv.reshape(n, -1)
    flat_m = mv.reshape(n, -1)
    inter = np.sum(flat_p * flat_m, axis=1)
    sums = np.sum(flat_p, axis=1) + np.sum(flat_m, axis=1)
    out = np.asarray(np.mean(1.0 - (2.0 * inter + smooth) / (sums + smooth)))
    if tape is None:
        return out
    ctx = {"m": mv, "inter": inter, "sums": sums, "smooth": smooth, "shape": pv.shape}
    return tape.record("dice_loss", [_lift(tape, probs)], out, ctx, name=name)


@register_backward("dice_loss")
def _dice_bwd(node, g):
    m, inter, sums = node.ctx["m"], node.ctx["inter"], node.ctx["sums"]
    smooth, shape = node.ctx["smooth"], node.ctx["shape"]
    n = shape[0]
    denom = (sums + smooth)[:, None]
    numer = 2.0 * m.reshape(n, -1) * denom - (2.0 * inter + smooth)[:, None]
    grad = (-(numer / denom ** 2) / n).reshape(shape)
    return [grad * g]


def seg_loss(probs, masks, name=None):
    """Equally weighted BCE + Dice."""
    return ops.add(bce(probs, masks), dice_loss(probs, masks), name=name)


# ---------------------------------------------------------------------------
# Adam

def adam_init(params: dict) -> dict:
    return {"m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()},
            "t": 0}


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              t: int | None = None) -> dict:
    """Bias-corrected Adam update, in place over the params dict."""
    if t is None:
        state["t"] += 1
        t = state["t"]
    else:
        state["t"] = t
    if t < 1:
        raise ValueError("step index t must be >= 1")
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for '{k}'")
        m = state["m"][k]
        v = state["v"][k]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p[...] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return state


# ---------------------------------------------------------------------------
# metrics

def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(np.asarray(y_true), np.asarray(y_pred)):
        cm[int(t), int(p)] += 1
    return cm


def _recall_f1(cm: np.ndarray, weighted: bool = False):
    present = np.nonzero(cm.sum(axis=1) > 0)[0]
    per_class = {}
    recalls, f1s, weights = [], [], []
    for c in present:
        tp = cm[c, c]
        fn = cm[c].sum() - tp
        fp = cm[:, c].sum() - tp
        recall = tp / (tp + fn)
        precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        per_class[int(c)] = {"recall": float(recall), "precision": float(precision),
                             "f1": float(f1)}
        recalls.append(recall)
        f1s.append(f1)
        weights.append(cm[c].sum())
    if weighted:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
        return float(np.dot(w, recalls)), float(np.dot(w, f1s)), per_class
    return float(np.mean(recalls)), float(np.mean(f1s)), per_class


def _batched_forward(model, inputs: np.ndarray, batch: int = 32) -> np.ndarray:
    outs = [M.forward(model, inputs[i:i + batch], mode="infer")
            for i in range(0, inputs.shape[0], batch)]
    return np.concatenate(outs, axis=0)


def evaluate_cls(model, samples: list[Sample], weighted: bool = False) -> MetricsReport:
    if not samples:
        raise ValueError("empty sample list")
    x = np.stack([s.input for s in samples])
    labels = np.asarray([s.target for s in samples], dtype=np.int64)
    probs = _batched_forward(model, x)
    preds = np.argmax(probs, axis=1)
    cm = confusion_matrix(labels, preds, probs.shape[1])
    accuracy = float(np.trace(cm) / cm.sum())
    recall, f1, per_class = _recall_f1(cm, weighted)
    return MetricsReport(accuracy=accuracy, recall=recall, f1=f1, per_class=per_class)


def mask_overlap_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    """(intersection, |pred|, |gt|) pixel counts of two binary masks."""
    pb = pred.astype(bool)
    gb = gt.astype(bool)
    return int(np.sum(pb & gb)), int(pb.sum()), int(gb.sum())


def iou_dsc_from_counts(inter: int, p: int, g: int) -> tuple[float, float]:
    union = p + g - inter
    if union == 0:
        return 1.0, 1.0  # empty prediction vs empty truth
    return inter / union, 2.0 * inter / (p + g)


def evaluate_seg(model, samples: list[Sample], threshold: float = 0.5) -> MetricsReport:
    if not samples:
        raise ValueError("empty sample list")
    x = np.stack([s.input for s in samples])
    gt = np.stack([s.target for s in samples])
    probs = _batched_forward(model, x, batch=8)
    pred = probs >= threshold
    ious, dscs, accs = [], [], []
    for i in range(x.shape[0]):
        inter, p, g = mask_overlap_counts(pred[i], gt[i])
        iou, dsc = iou_dsc_from_counts(inter, p, g)
        ious.append(iou)
        dscs.append(dsc)
        accs.append(float(np.mean(pred[i] == gt[i].astype(bool))))
    return MetricsReport(accuracy=float(np.mean(accs)), iou=float(np.mean(ious)),
                         dsc=float(np.mean(dscs)))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class History:
    rows: list = field(default_factory=list)  # one dict per epoch
    test: MetricsReport | None = None
    test_loss: float | None = None

    def __len__(self):
        return len(self.rows)


def _stack_batch(samples: list[Sample], task: str):
    x = np.stack([s.input for s in samples])
    if task == "cls":
        return x, np.asarray([s.target for s in samples], dtype=np.int64)
    return x, np.stack([s.target for s in samples])


def _loss_value(model, samples, task, batch: int = 32) -> float:
    total, count = 0.0, 0
    for i in range(0, len(samples), batch):
        x, y = _stack_batch(samples[i:i + batch], task)
        out = M.forward(model, x, mode="infer")
        loss = cross_entropy(out, y) if task == "cls" else seg_loss(out, y)
        total += float(loss) * len(samples[i:i + batch])
        count += len(samples[i:i + batch])
    return total / count


def train(model, split: SplitDataset, config: TrainConfig,
          checkpoint_dir: str | None = None, log_fn=None):
    """Seeded minibatch training; returns (model, History).

    Per epoch: shuffled batches, taped forward in train mode, reverse
    pass, Adam step; then validation loss/metrics appended to the
    history. A non-finite loss dumps a checkpoint (when a directory is
    given) and raises FloatingPointError.
    """
    rng = Rng(config.seed)
    shuffle_rng = rng.child(1)
    dropout_rng = rng.child(2)
    state = adam_init(model.params)
    history = History()
    n = len(split.train)
    if n == 0:
        raise ValueError("empty training split")
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = [split.train[i] for i in order[start:start + config.batch_size]]
            x, y = _stack_batch(batch, config.task)
            tape = Tape()
            pv = M.lift_params(tape, model)
            out = M.forward(model, tape.leaf(x), mode="train", rng=dropout_rng, params=pv)
            loss = cross_entropy(out, y) if config.task == "cls" else seg_loss(out, y)
            loss_val = float(loss.value)
            if not math.isfinite(loss_val):
                if checkpoint_dir:
                    M.save_model(os.path.join(checkpoint_dir, "abort.ckpt"), model)
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads = backward(tape, loss)
            grad_by_name = {k: grads[v.nid] for k, v in pv.items()}
            adam_step(model.params, grad_by_name, state, config.learning_rate,
                      config.beta1, config.beta2, config.eps)
            epoch_loss += loss_val * len(batch)
            seen += len(batch)
        row = {"epoch": epoch, "train_loss": epoch_loss / seen,
               "val_loss": None, "val": None}
        if split.val:
            row["val_loss"] = _loss_value(model, split.val, config.task)
            row["val"] = (evaluate_cls(model, split.val) if config.task == "cls"
                          else evaluate_seg(model, split.val))
        history.rows.append(row)
        if log_fn:
            log_fn(f"epoch {epoch}/{config.epochs} "
                   f"train_loss={row['train_loss']:.4f}"
                   + (f" val_loss={row['val_loss']:.4f}" if row["val_loss"] is not None else ""))
    if split.test:
        history.test = (evaluate_cls(model, split.test) if config.task == "cls"
                        else evaluate_seg(model, split.test))
        history.test_loss = _loss_value(model, split.test, config.task)
    return model, history


HISTORY_COLUMNS = ["epoch", "split", "loss", "accuracy", "recall", "f1", "iou", "dsc"]


def _fmt(v) -> str:
    return "" if v is None else f"{v:.10g}"


def write_history_csv(path: str, history: History) -> None:
    """CSV rows per epoch for the train and val splits plus a final test row;
    metric cells stay empty where they do not apply."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for row in history.rows:
            w.writerow([row["epoch"], "train", _fmt(row["train_loss"]), "", "", "", "", ""])
            if row["val"] is not None:
                m = row["val"]
                w.writerow([row["epoch"], "val", _fmt(row["val_loss"]), _fmt(m.accuracy),
                            _fmt(m.recall), _fmt(m.f1), _fmt(m.iou), _fmt(m.dsc)])
        if history.test is not None:
            m = history.test
            w.writerow([len(history.rows), "test", _fmt(history.test_loss), _fmt(m.accuracy),
                        _fmt(m.recall), _fmt(m.f1), _fmt(m.iou), _fmt(m.dsc)])
