"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``ablate``, ``param-count``,
``grad-check``, ``explain``. Every run creates ``<out>/<timestamp>-<tag>/``
holding ``resolved-config.txt`` (the fully resolved settings, so any run
is reproducible from its artifacts) plus the command's outputs.

Option precedence: per-task defaults < ``--config`` file (UTF-8
``key = value`` lines, ``#`` comments) < explicit flags. Exit codes:
0 success, 1 configuration error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from . import data as D
from . import explain as E
from . import models as M
from . import ops
from . import training as TR
from .autodiff import grad_check
from .tensor import Rng

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

TASK_DEFAULTS = {
    # per-task experimental defaults: cls 30 epochs / batch 16 / lr 1e-4,
    # seg 100 epochs / batch 8 / lr 1e-5
    "cls": {"epochs": 30, "batch": 16, "lr": 1e-4, "image_size": 28, "synth_n": 200},
    "seg": {"epochs": 100, "batch": 8, "lr": 1e-5, "image_size": 128, "synth_n": 64},
}


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    task: str = "cls"
    model: str = "medic"
    involutions: int = 1
    data: str = "synth"
    epochs: int = 0
    batch: int = 0
    lr: float = 0.0
    seed: int = 0
    out: str = "runs"
    image_size: int = 0
    synth_n: int = 0
    widths: str = ""
    extra_conv: bool = False
    num_classes: int = 0  # 0 = infer from data
    checkpoint: str = ""
    method: str = "kernel-map"
    layer: str = "inv1"
    input: str = "synth:0"
    target: int = 0
    seeds: int = 3
    tag: str = ""

    def lines(self) -> list[str]:
        return [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    t = _CONFIG_TYPES.get(key)
    if t is None:
        raise ConfigError(f"unknown config key '{key}'")
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    if t == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return raw


def _read_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = _coerce(key, value)
    return out


def _resolve(args: argparse.Namespace) -> RunConfig:
    task = args.task if getattr(args, "task", None) else "cls"
    merged = dict(TASK_DEFAULTS[task]) if task in TASK_DEFAULTS else {}
    if getattr(args, "config", None):
        file_vals = _read_config_file(args.config)
        if "task" in file_vals and not getattr(args, "task", None):
            task = file_vals["task"]
            merged = dict(TASK_DEFAULTS.get(task, {}))
        merged.update(file_vals)
    for key, value in vars(args).items():
        if key in ("config", "func") or value is None:
            continue
        merged[key] = value
    merged["task"] = task if "task" not in merged else merged["task"]
    cfg = RunConfig(command=args.command)
    for key, value in merged.items():
        if key == "command":
            continue
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown option '{key}'")
        setattr(cfg, key, value)
    if cfg.task not in ("cls", "seg"):
        raise ConfigError(f"task must be cls or seg, got '{cfg.task}'")
    if cfg.model not in ("medic", "cnn", "inn", "unet"):
        raise ConfigError(f"unknown model '{cfg.model}'")
    if cfg.task == "seg" and cfg.model in ("cnn", "inn"):
        raise ConfigError(f"model '{cfg.model}' is classification-only")
    return cfg


def _make_run_dir(cfg: RunConfig) -> str:
    tag = cfg.tag or f"{cfg.command}-{cfg.task}-{cfg.model}"
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(cfg.out, f"{stamp}-{tag}")
    n = 0
    while os.path.exists(path):  # same-second runs get a suffix
        n += 1
        path = os.path.join(cfg.out, f"{stamp}-{tag}.{n}")
    os.makedirs(path)
    with open(os.path.join(path, "resolved-config.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(cfg.lines()) + "\n")
    for line in cfg.lines():
        print(f"  {line}")
    print(f"run dir: {path}")
    return path


# ---------------------------------------------------------------------------
# data / model assembly

def _load_samples(cfg: RunConfig) -> list[D.Sample]:
    if cfg.data == "synth":
        return D.synth_blobs(cfg.task, cfg.synth_n, cfg.image_size, seed=cfg.seed)
    if cfg.data.startswith("dir:"):
        root = cfg.data[4:]
        if not os.path.isdir(root):
            raise DataError(f"dataset directory not found: {root}")
        try:
            if cfg.task == "cls":
                samples = D.load_classification_dataset(root)
            else:
                images, masks = os.path.join(root, "images"), os.path.join(root, "masks")
                if not (os.path.isdir(images) and os.path.isdir(masks)):
                    raise DataError(f"expected {root}/images and {root}/masks")
                samples = D.load_segmentation_dataset(images, masks)
        except ValueError as e:
            raise DataError(str(e)) from e
        if not samples:
            raise DataError(f"no usable samples under {root}")
        return [D.resize_sample(s, cfg.image_size) for s in samples]
    raise ConfigError(f"--data must be 'synth' or 'dir:<path>', got '{cfg.data}'")


def _num_classes(cfg: RunConfig, samples) -> int:
    if cfg.num_classes:
        return cfg.num_classes
    return int(max(s.target for s in samples)) + 1


def _widths(cfg: RunConfig) -> tuple:
    if not cfg.widths:
        return (16, 32, 64, 128, 256, 512)
    try:
        widths = tuple(int(w) for w in cfg.widths.split(","))
    except ValueError as e:
        raise ConfigError(f"bad --widths '{cfg.widths}'") from e
    if len(widths) != 6:
        raise ConfigError("--widths needs six comma-separated integers")
    return widths


def _build_model(cfg: RunConfig, num_classes: int = 2) -> M.Model:
    shape = (cfg.image_size, cfg.image_size, 3)
    if cfg.task == "seg":
        n_inv = 0 if cfg.model == "unet" else cfg.involutions
        return M.build_medic_seg(input_shape=shape, n_involutions=n_inv,
                                 widths=_widths(cfg), seed=cfg.seed,
                                 extra_convs=cfg.extra_conv)
    if cfg.model == "medic":
        return M.build_medic_cls(input_shape=shape, num_classes=num_classes,
                                 n_involutions=cfg.involutions, seed=cfg.seed)
    if cfg.model == "cnn":
        return M.build_cnn_baseline(input_shape=shape, num_classes=num_classes,
                                    seed=cfg.seed)
    if cfg.model == "inn":
        return M.build_inn_baseline(input_shape=shape, num_classes=num_classes,
                                    seed=cfg.seed)
    raise ConfigError(f"model '{cfg.model}' not valid for task cls")


def _write_metrics(path: str, report: TR.MetricsReport, extra: dict | None = None):
    with open(path, "w", encoding="utf-8") as f:
        for key, value in (extra or {}).items():
            f.write(f"{key}={value}\n")
        for key, value in report.as_dict().items():
            if value is not None:
                f.write(f"{key}={value:.10g}\n")


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg: RunConfig) -> int:
    run_dir = _make_run_dir(cfg)
    samples = _load_samples(cfg)
    split = D.split_dataset(samples, seed=cfg.seed, stratified=(cfg.task == "cls"))
    model = _build_model(cfg, _num_classes(cfg, samples) if cfg.task == "cls" else 2)
    tcfg = TR.TrainConfig(cfg.task, epochs=cfg.epochs, batch_size=cfg.batch,
                          learning_rate=cfg.lr, seed=cfg.seed)
    model, history = TR.train(model, split, tcfg, checkpoint_dir=run_dir, log_fn=print)
    M.save_model(os.path.join(run_dir, "model.ckpt"), model)
    TR.write_history_csv(os.path.join(run_dir, "history.csv"), history)
    if history.test is not None:
        _write_metrics(os.path.join(run_dir, "metrics.txt"), history.test,
                       {"params": M.count_parameters(model)})
        print("test metrics:", {k: round(v, 4) for k, v in history.test.as_dict().items()
                                if v is not None})
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    run_dir = _make_run_dir(cfg)
    try:
        model = M.load_model(cfg.checkpoint)
    except FileNotFoundError as e:
        raise ConfigError(f"checkpoint not found: {cfg.checkpoint}") from e
    cfg.image_size = model.input_shape[0]
    samples = _load_samples(cfg)
    report = (TR.evaluate_cls(model, samples) if cfg.task == "cls"
              else TR.evaluate_seg(model, samples))
    _write_metrics(os.path.join(run_dir, "metrics.txt"), report)
    for key, value in report.as_dict().items():
        if value is not None:
            print(f"{key}={value:.10g}")
    return EXIT_OK


def _ablation_ladder(cfg: RunConfig) -> list[tuple[str, dict]]:
    if cfg.task == "seg":
        ladder = [("unet", {"model": "unet", "involutions": 0})]
        if cfg.extra_conv:
            ladder.append(("unet-extra", {"model": "unet", "involutions": 0,
                                          "extra_conv": True}))
        ladder += [(f"hybrid-{n}", {"model": "medic", "involutions": n})
                   for n in (1, 2, 3)]
        return ladder
    return ([(f"hybrid-{n}", {"model": "medic", "involutions": n}) for n in (1, 2, 3)]
            + [("cnn", {"model": "cnn"}), ("inn", {"model": "inn"})])


def cmd_ablate(cfg: RunConfig) -> int:
    run_dir = _make_run_dir(cfg)
    samples = _load_samples(cfg)
    split = D.split_dataset(samples, seed=cfg.seed, stratified=(cfg.task == "cls"))
    ncls = _num_classes(cfg, samples) if cfg.task == "cls" else 2
    rows = []
    for name, overrides in _ablation_ladder(cfg):
        variant = RunConfig(**{**vars(cfg)})
        for key, value in overrides.items():
            setattr(variant, key, value)
        variant.extra_conv = overrides.get("extra_conv", False)
        model = _build_model(variant, ncls)
        tcfg = TR.TrainConfig(cfg.task, epochs=cfg.epochs, batch_size=cfg.batch,
                              learning_rate=cfg.lr, seed=cfg.seed)
        print(f"[{name}] params={M.count_parameters(model)}")
        model, history = TR.train(model, split, tcfg, log_fn=None)
        report = history.test or TR.MetricsReport()
        rows.append((name, M.count_parameters(model), report))
    metric_cols = (["accuracy", "recall", "f1"] if cfg.task == "cls"
                   else ["accuracy", "iou", "dsc"])
    csv_path = os.path.join(run_dir, "ablation.csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("model,params," + ",".join(metric_cols) + "\n")
        for name, params, report in rows:
            vals = [f"{getattr(report, c):.6g}" if getattr(report, c) is not None else ""
                    for c in metric_cols]
            f.write(f"{name},{params}," + ",".join(vals) + "\n")
    widths = [max(len(r[0]) for r in rows) + 2, 12] + [10] * len(metric_cols)
    header = ["model", "params"] + metric_cols
    lines = ["".join(h.ljust(w) for h, w in zip(header, widths))]
    for name, params, report in rows:
        cells = [name, str(params)] + [
            f"{getattr(report, c):.4f}" if getattr(report, c) is not None else "-"
            for c in metric_cols]
        lines.append("".join(c.ljust(w) for c, w in zip(cells, widths)))
    table = "\n".join(lines)
    with open(os.path.join(run_dir, "ablation.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    print(table)
    return EXIT_OK


def cmd_param_count(cfg: RunConfig) -> int:
    run_dir = _make_run_dir(cfg)
    model = _build_model(cfg, cfg.num_classes or 2)
    per_layer = M.per_layer_param_counts(model)
    lines = [f"{name:24s} {count:>12,d}" for name, count in per_layer.items() if count]
    total = M.count_parameters(model)
    lines.append(f"{'total':24s} {total:>12,d}")
    lines.append(f"{'total+running-stats':24s} {M.count_parameters(model, True):>12,d}")
    report = "\n".join(lines)
    print(report)
    with open(os.path.join(run_dir, "param-count.txt"), "w", encoding="utf-8") as f:
        f.write(report + "\n")
    return EXIT_OK


def _grad_check_suite(seeds: int) -> list[tuple[str, float]]:
    results = []

    def involution_case(rng):
        p = ops.init_involution_params(rng, 2, reduction=2)
        x = rng.normal([1, 4, 4, 2])

        def f(xv, w0, b0, w1, b1):
            q = ops.InvolutionParams(3, 1, 2, w0=w0, b0=b0, w1=w1, b1=b1)
            return ops.mean(ops.involution2d(xv, q))

        return f, [x, p.w0, p.b0, p.w1, p.b1]

    def conv_case(rng):
        k, b = rng.normal([3, 3, 2, 3]), rng.normal([3])
        x = rng.normal([1, 4, 4, 2])
        return (lambda xv, kv, bv: ops.mean(ops.conv2d(xv, ops.ConvParams(kv, bv))),
                [x, k, b])

    def convT_case(rng):
        k, b = rng.normal([2, 2, 3, 2]), rng.normal([3])
        x = rng.normal([1, 3, 3, 2])
        return (lambda xv, kv, bv: ops.mean(
            ops.conv2d_transpose(xv, ops.ConvParams(kv, bv, stride=2))), [x, k, b])

    def dense_case(rng):
        x, w, b = rng.normal([3, 4]), rng.normal([4, 5]), rng.normal([5])
        return (lambda xv, wv, bv: ops.mean(ops.dense(xv, wv, bv)), [x, w, b])

    def bn_case(rng):
        x = rng.normal([3, 3, 3, 2])
        gamma, beta = 1.0 + rng.uniform([2]), rng.normal([2])
        probe = rng.normal([3, 3, 3, 2])

        def f(xv, gv, bv):
            state = {"mean": np.zeros(2), "var": np.ones(2)}
            return ops.mean(ops.mul(ops.batchnorm(xv, gv, bv, state, "train"), probe))

        return f, [x, gamma, beta]

    def softmax_ce_case(rng):
        z = rng.normal([3, 4])
        labels = rng.integers(0, 4, size=3)
        return (lambda zv: TR.cross_entropy(ops.softmax(zv), labels), [z])

    def bce_case(rng):
        z = rng.normal([2, 3, 3, 1])
        masks = (rng.uniform([2, 3, 3, 1]) > 0.5).astype(float)
        return (lambda zv: TR.bce(ops.sigmoid(zv), masks), [z])

    def dice_case(rng):
        z = rng.normal([2, 3, 3, 1])
        masks = (rng.uniform([2, 3, 3, 1]) > 0.5).astype(float)
        return (lambda zv: TR.dice_loss(ops.sigmoid(zv), masks), [z])

    cases = [("involution2d", involution_case), ("conv2d", conv_case),
             ("conv2d_transpose", convT_case), ("dense", dense_case),
             ("batchnorm-train", bn_case), ("softmax+cross_entropy", softmax_ce_case),
             ("bce", bce_case), ("dice_loss", dice_case)]
    for name, case in cases:
        worst = 0.0
        for seed in range(seeds):
            f, params = case(Rng(seed))
            worst = max(worst, grad_check(f, params))
        results.append((name, worst))
    return results


def cmd_grad_check(cfg: RunConfig) -> int:
    run_dir = _make_run_dir(cfg)
    results = _grad_check_suite(cfg.seeds)
    ok = True
    lines = []
    for name, err in results:
        status = "ok" if err < 1e-4 else "FAIL"
        ok &= err < 1e-4
        lines.append(f"{name:24s} max_rel_error={err:.3e}  {status}")
    report = "\n".join(lines)
    print(report)
    with open(os.path.join(run_dir, "grad-check.txt"), "w", encoding="utf-8") as f:
        f.write(report + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_explain(cfg: RunConfig) -> int:
    run_dir = _make_run_dir(cfg)
    if cfg.checkpoint:
        model = M.load_model(cfg.checkpoint)
        cfg.image_size = model.input_shape[0]
    else:
        model = _build_model(cfg, cfg.num_classes or 2)
    if cfg.input.startswith("synth:"):
        idx = int(cfg.input.split(":", 1)[1])
        samples = D.synth_blobs(cfg.task, idx + 1, cfg.image_size, seed=cfg.seed)
        image = samples[idx].input
        input_id = samples[idx].source_id
    else:
        if not os.path.exists(cfg.input):
            raise DataError(f"input image not found: {cfg.input}")
        image = D.resize_bilinear(D.load_image(cfg.input), cfg.image_size, cfg.image_size)
        input_id = os.path.splitext(os.path.basename(cfg.input))[0]
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    try:
        if cfg.method == "kernel-map":
            hm = E.involution_kernel_map(model, image, cfg.layer, input_id=input_id)
        elif cfg.method == "grad-cam":
            target = cfg.target if cfg.task == "cls" else None
            hm = E.grad_cam(model, image, target, cfg.layer, input_id=input_id)
        else:
            raise ConfigError(f"unknown method '{cfg.method}'")
    except KeyError as e:
        raise ConfigError(f"layer not found: {e}") from e
    path = os.path.join(run_dir, f"{input_id}_{cfg.layer}_{cfg.method}.pgm")
    E.write_heatmap(hm, path, "gray")
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--task", choices=["cls", "seg"], default=None)
    p.add_argument("--model", choices=["medic", "cnn", "inn", "unet"], default=None)
    p.add_argument("--involutions", type=int, default=None)
    p.add_argument("--data", default=None, help="synth | dir:<path>")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="parent directory for run dirs")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--tag", default=None, help="run directory suffix")
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--synth-n", dest="synth_n", type=int, default=None)
    p.add_argument("--num-classes", dest="num_classes", type=int, default=None)
    p.add_argument("--widths", default=None, help="six encoder widths, comma-separated")
    p.add_argument("--extra-conv", dest="extra_conv", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invomed",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("ablate", cmd_ablate),
                     ("param-count", cmd_param_count)):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(func=fn)
    p = sub.add_parser("eval")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("grad-check")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--all", action="store_true", help="run every op (always on)")
    p.set_defaults(func=cmd_grad_check)
    p = sub.add_parser("explain")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--method", choices=["kernel-map", "grad-cam"], default=None)
    p.add_argument("--layer", default=None)
    p.add_argument("--input", default=None, help="image path or synth:<index>")
    p.add_argument("--target", type=int, default=None, help="class index for grad-cam")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if hasattr(args, "all"):
        del args.all
    try:
        cfg = _resolve(args)
        return args.func(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
