"""Architecture builders, the layer-graph executor, and checkpoints.

A model is an ordered list of :class:`LayerSpec` records plus flat
dicts of parameter / running-stat arrays keyed ``"<layer>/<field>"``.
Skip connections are expressed as ``concat_skip`` layers that name the
encoder layer whose cached output they concatenate.

Builders cover the classifier with a leading involution stack
(``build_medic_cls``, hybrid depths 1-3), its CNN-only and
involution-only baselines, and the encoder-decoder segmentation net
(``build_medic_seg``) whose involution count 0-3 spans the ablation
ladder (0 = plain U-Net).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tape, Var
from .tensor import Rng, load_tensor, normal_init, save_tensor

__all__ = [
    "LayerSpec",
    "Model",
    "build_cnn_baseline",
    "build_inn_baseline",
    "build_medic_cls",
    "build_medic_seg",
    "count_parameters",
    "forward",
    "lift_params",
    "load_model",
    "per_layer_param_counts",
    "propagate_shapes",
    "save_model",
    "BUILDERS",
]

CKPT_MAGIC = b"MDIC-CKPT"
CKPT_VERSION = 1


@dataclass
class LayerSpec:
    kind: str
    name: str
    cfg: dict = field(default_factory=dict)


@dataclass
class Model:
    kind: str
    input_shape: tuple
    specs: list[LayerSpec]
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]
    hparams: dict

    def layer(self, name: str) -> LayerSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(f"no layer named '{name}'")


# ---------------------------------------------------------------------------
# shape propagation

def _pool_out(extent: int, window: int, ceil_mode: bool) -> int:
    return -(-extent // window) if ceil_mode else extent // window


def propagate_shapes(specs: list[LayerSpec], input_shape: tuple) -> dict[str, tuple]:
    """Symbolically push the (H, W, C) / (F,) shape through every layer.

    Returns output shape per layer name; raises ValueError naming the
    first offending layer.
    """
    shape = tuple(input_shape)
    shapes: dict[str, tuple] = {}
    for s in specs:
        try:
            shape = _layer_out_shape(s, shape, shapes)
        except (ValueError, KeyError) as e:
            raise ValueError(f"layer '{s.name}': {e}") from e
        shapes[s.name] = shape
    return shapes


def _layer_out_shape(s: LayerSpec, shape: tuple, shapes: dict) -> tuple:
    kind, cfg = s.kind, s.cfg
    if kind == "involution":
        h, w, c = shape
        if c != cfg["channels"]:
            raise ValueError(f"expected {cfg['channels']} channels, got {c}")
        st = cfg.get("stride", 1)
        return (-(-h // st), -(-w // st), c)
    if kind == "conv":
        h, w, c = shape
        if c != cfg["in_channels"]:
            raise ValueError(f"expected {cfg['in_channels']} channels, got {c}")
        st = cfg.get("stride", 1)
        return (-(-h // st), -(-w // st), cfg["out_channels"])
    if kind == "conv_transpose":
        h, w, c = shape
        if c != cfg["in_channels"]:
            raise ValueError(f"expected {cfg['in_channels']} channels, got {c}")
        st = cfg.get("stride", 2)
        return (h * st, w * st, cfg["out_channels"])
    if kind == "maxpool":
        h, w, c = shape
        k = cfg.get("window", 2)
        return (_pool_out(h, k, cfg.get("ceil_mode", False)),
                _pool_out(w, k, cfg.get("ceil_mode", False)), c)
    if kind in ("batchnorm", "dropout", "activation"):
        return shape
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "dense":
        if len(shape) != 1 or shape[0] != cfg["in_features"]:
            raise ValueError(f"expected flat {cfg['in_features']}, got {shape}")
        return (cfg["out_features"],)
    if kind == "concat_skip":
        h, w, c = shape
        sh = shapes[cfg["source"]]
        if sh[:2] != (h, w):
            raise ValueError(f"skip from '{cfg['source']}' has spatial {sh[:2]}, need {(h, w)}")
        return (h, w, c + sh[2])
    raise ValueError(f"unknown layer kind '{kind}'")


# ---------------------------------------------------------------------------
# parameter counting

def per_layer_param_counts(model: Model, include_running_stats: bool = False) -> dict[str, int]:
    """Closed-form learnable count per layer from the specs alone."""
    out = {}
    for s in model.specs:
        cfg = s.cfg
        if s.kind == "involution":
            n = ops.involution_param_count(
                cfg["channels"], cfg["kernel_size"], cfg["groups"], cfg["reduction"],
                cfg["with_bias"], cfg["sigma"], include_running_stats)
        elif s.kind == "conv":
            n = ops.conv_param_count(cfg["kernel_size"], cfg["kernel_size"],
                                     cfg["in_channels"], cfg["out_channels"])
        elif s.kind == "conv_transpose":
            n = ops.conv_param_count(cfg["kernel_size"], cfg["kernel_size"],
                                     cfg["in_channels"], cfg["out_channels"])
        elif s.kind == "batchnorm":
            n = 2 * cfg["channels"] + (2 * cfg["channels"] if include_running_stats else 0)
        elif s.kind == "dense":
            n = ops.dense_param_count(cfg["in_features"], cfg["out_features"])
        else:
            n = 0
        out[s.name] = n
    return out


def count_parameters(model: Model, include_running_stats: bool = False) -> int:
    """Total learnable scalars; running stats only when explicitly asked."""
    total = sum(int(v.size) for v in model.params.values())
    if include_running_stats:
        total += sum(int(v.size) for v in model.state.values())
    return total


# ---------------------------------------------------------------------------
# builder plumbing

class _Builder:
    def __init__(self, kind: str, input_shape, hparams: dict, seed: int):
        self.model = Model(kind, tuple(input_shape), [], {}, {}, dict(hparams))
        self.rng = Rng(seed)
        self.shape = tuple(input_shape)

    def _add(self, kind, name, cfg):
        spec = LayerSpec(kind, name, cfg)
        self.shape = _layer_out_shape(spec, self.shape, self._shapes())
        self.model.specs.append(spec)
        return spec

    def _shapes(self):
        return propagate_shapes(self.model.specs, self.model.input_shape)

    def involution(self, name, kernel_size=3, groups=1, reduction=None, stride=1,
                   sigma="relu", with_bias=True):
        c = self.shape[2]
        r = ops.default_reduction(c) if reduction is None else reduction
        self._add("involution", name, {
            "channels": c, "kernel_size": kernel_size, "groups": groups,
            "reduction": r, "stride": stride, "sigma": sigma, "with_bias": with_bias,
        })
        p = ops.init_involution_params(self.rng, c, kernel_size, groups, r,
                                       stride, sigma, with_bias)
        m = self.model
        m.params[f"{name}/w0"] = p.w0
        m.params[f"{name}/w1"] = p.w1
        if with_bias:
            m.params[f"{name}/b0"] = p.b0
            m.params[f"{name}/b1"] = p.b1
        if sigma == "bn_relu":
            m.params[f"{name}/gamma0"] = p.gamma0
            m.params[f"{name}/beta0"] = p.beta0
            m.state[f"{name}/run_mean"] = p.run_mean
            m.state[f"{name}/run_var"] = p.run_var

    def conv(self, name, out_channels, kernel_size=3, stride=1, padding="same"):
        c = self.shape[2]
        self._add("conv", name, {
            "in_channels": c, "out_channels": out_channels,
            "kernel_size": kernel_size, "stride": stride, "padding": padding,
        })
        k = normal_init(self.rng, (kernel_size, kernel_size, c, out_channels),
                        kernel_size * kernel_size * c)
        self.model.params[f"{name}/kernel"] = k
        self.model.params[f"{name}/bias"] = np.zeros(out_channels)

    def conv_transpose(self, name, out_channels, kernel_size=2, stride=2):
        c = self.shape[2]
        self._add("conv_transpose", name, {
            "in_channels": c, "out_channels": out_channels,
            "kernel_size": kernel_size, "stride": stride,
        })
        k = normal_init(self.rng, (kernel_size, kernel_size, out_channels, c),
                        kernel_size * kernel_size * c)
        self.model.params[f"{name}/kernel"] = k
        self.model.params[f"{name}/bias"] = np.zeros(out_channels)

    def maxpool(self, name, window=2, ceil_mode=False):
        self._add("maxpool", name, {"window": window, "ceil_mode": ceil_mode})

    def batchnorm(self, name):
        c = self.shape[2]
        self._add("batchnorm", name, {"channels": c})
        self.model.params[f"{name}/gamma"] = np.ones(c)
        self.model.params[f"{name}/beta"] = np.zeros(c)
        self.model.state[f"{name}/mean"] = np.zeros(c)
        self.model.state[f"{name}/var"] = np.ones(c)

    def dropout(self, name, rate=0.10):
        self._add("dropout", name, {"rate": rate})

    def activation(self, name, fn):
        self._add("activation", name, {"fn": fn})

    def flatten(self, name="flatten"):
        self._add("flatten", name, {})

    def dense(self, name, out_features, role="hidden"):
        f = self.shape[0]
        self._add("dense", name, {"in_features": f, "out_features": out_features,
                                  "role": role})
        self.model.params[f"{name}/w"] = normal_init(self.rng, (f, out_features), f)
        self.model.params[f"{name}/b"] = np.zeros(out_features)

    def concat_skip(self, name, source):
        self._add("concat_skip", name, {"source": source})


def _dense_head(b: _Builder, num_classes: int):
    for i, width in enumerate((256, 192, 96, 64), start=1):
        b.dense(f"dense{i}", width)
        b.activation(f"dense{i}_relu", "relu")
    b.dense("classifier", num_classes, role="classifier")
    b.activation("softmax", "softmax")


def _inv_kwargs(hp: dict) -> dict:
    return {"kernel_size": hp["inv_kernel"], "groups": hp["inv_groups"],
            "reduction": hp["inv_reduction"], "sigma": hp["inv_sigma"],
            "with_bias": hp["inv_bias"]}


# ---------------------------------------------------------------------------
# builders

def build_medic_cls(input_shape=(28, 28, 3), num_classes=2, n_involutions=1, *,
                    seed=0, inv_kernel=3, inv_groups=1, inv_reduction=None,
                    inv_bias=True, inv_sigma="relu", pool_ceil=False) -> Model:
    """Involution-then-CNN classifier; n_involutions in {1,2,3} gives the
    hybrid-1/2/3 variants (extra involutions stack before the CNN so each
    adds an identical parameter budget)."""
    if n_involutions not in (1, 2, 3):
        raise ValueError("n_involutions must be 1, 2 or 3")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    hp = {"input_shape": tuple(input_shape), "num_classes": num_classes,
          "n_involutions": n_involutions, "seed": seed, "inv_kernel": inv_kernel,
          "inv_groups": inv_groups, "inv_reduction": inv_reduction,
          "inv_bias": inv_bias, "inv_sigma": inv_sigma, "pool_ceil": pool_ceil}
    b = _Builder("medic-cls", input_shape, hp, seed)
    for i in range(1, n_involutions + 1):
        b.involution(f"inv{i}", **_inv_kwargs(hp))
    b.activation("inv_relu", "relu")
    b.maxpool("pool1", ceil_mode=pool_ceil)
    b.batchnorm("bn1")
    for j, width in enumerate((64, 128), start=1):
        b.conv(f"conv{j}", width)
        b.activation(f"conv{j}_relu", "relu")
        b.maxpool(f"pool{j + 1}", ceil_mode=pool_ceil)
        b.batchnorm(f"bn{j + 1}")
    b.dropout("drop", 0.10)
    b.flatten()
    _dense_head(b, num_classes)
    return b.model


def build_cnn_baseline(input_shape=(28, 28, 3), num_classes=2, *, seed=0,
                       pool_ceil=False) -> Model:
    """Three conv blocks (64, 128, 256) with the same dense head."""
    hp = {"input_shape": tuple(input_shape), "num_classes": num_classes,
          "seed": seed, "pool_ceil": pool_ceil}
    b = _Builder("cnn", input_shape, hp, seed)
    for j, width in enumerate((64, 128, 256), start=1):
        b.conv(f"conv{j}", width)
        b.activation(f"conv{j}_relu", "relu")
        b.maxpool(f"pool{j}", ceil_mode=pool_ceil)
        b.batchnorm(f"bn{j}")
    b.dropout("drop", 0.10)
    b.flatten()
    _dense_head(b, num_classes)
    return b.model


def build_inn_baseline(input_shape=(28, 28, 3), num_classes=2, *, seed=0,
                       inv_kernel=3, inv_groups=1, inv_reduction=None,
                       inv_bias=True, inv_sigma="relu", pool_ceil=False) -> Model:
    """Single involution block with the same dense head, no convs."""
    hp = {"input_shape": tuple(input_shape), "num_classes": num_classes,
          "seed": seed, "inv_kernel": inv_kernel, "inv_groups": inv_groups,
          "inv_reduction": inv_reduction, "inv_bias": inv_bias,
          "inv_sigma": inv_sigma, "pool_ceil": pool_ceil}
    b = _Builder("inn", input_shape, hp, seed)
    b.involution("inv1", **_inv_kwargs(hp))
    b.activation("inv_relu", "relu")
    b.maxpool("pool1", ceil_mode=pool_ceil)
    b.batchnorm("bn1")
    b.dropout("drop", 0.10)
    b.flatten()
    _dense_head(b, num_classes)
    return b.model


def build_medic_seg(input_shape=(128, 128, 3), n_involutions=1, *, seed=0,
                    widths=(16, 32, 64, 128, 256, 512), extra_convs=False,
                    inv_kernel=3, inv_groups=1, inv_reduction=None,
                    inv_bias=True, inv_sigma="relu", dropout_rate=0.10) -> Model:
    """Six-encoder / five-decoder segmentation net with skip concatenations.

    ``n_involutions=0`` is the plain U-Net; 1-3 stack involutions on the
    input ahead of the first encoder block. ``extra_convs`` widens the
    bottleneck block from one to three convolutions (the heavy baseline).
    """
    if n_involutions not in (0, 1, 2, 3):
        raise ValueError("n_involutions must be 0..3")
    if len(widths) != 6:
        raise ValueError("need six encoder widths")
    hp = {"input_shape": tuple(input_shape), "n_involutions": n_involutions,
          "seed": seed, "widths": tuple(widths), "extra_convs": extra_convs,
          "inv_kernel": inv_kernel, "inv_groups": inv_groups,
          "inv_reduction": inv_reduction, "inv_bias": inv_bias,
          "inv_sigma": inv_sigma, "dropout_rate": dropout_rate}
    b = _Builder("medic-seg", input_shape, hp, seed)
    for i in range(1, n_involutions + 1):
        b.involution(f"inv{i}", **_inv_kwargs(hp))
    for i, width in enumerate(widths, start=1):
        n_convs = 3 if (i < 6 or extra_convs) else 1
        for j in range(1, n_convs + 1):
            b.conv(f"enc{i}_conv{j}", width)
            b.activation(f"enc{i}_conv{j}_relu", "relu")
        b.dropout(f"enc{i}_drop", dropout_rate)
        if i < 6:
            b.maxpool(f"pool{i}")
    for i, width in enumerate(reversed(widths[:5]), start=1):
        b.conv_transpose(f"dec{i}_up", width)
        b.concat_skip(f"dec{i}_cat", source=f"enc{6 - i}_drop")
        for j in range(1, 4):
            b.conv(f"dec{i}_conv{j}", width)
            b.activation(f"dec{i}_conv{j}_relu", "relu")
        b.dropout(f"dec{i}_drop", dropout_rate)
    b.conv("head_logits", 1, kernel_size=1)
    b.activation("sigmoid", "sigmoid")
    return b.model


BUILDERS = {
    "medic-cls": build_medic_cls,
    "medic-seg": build_medic_seg,
    "cnn": build_cnn_baseline,
    "inn": build_inn_baseline,
}


# ---------------------------------------------------------------------------
# execution

def lift_params(tape: Tape, model: Model) -> dict[str, Var]:
    """Wrap every parameter array as a tape leaf (training entry point)."""
    return {k: tape.leaf(v, name=k) for k, v in model.params.items()}


def forward(model: Model, x, mode: str = "infer", rng: Rng | None = None,
            params: dict | None = None):
    """Run the layer stack; ``params`` may hold tape Vars for training.

    ``x`` may itself be a Var (e.g. for input-gradient work); in train
    mode an ``rng`` is required whenever the model contains dropout.
    """
    pv = model.params if params is None else params
    xv = x.value if isinstance(x, Var) else x
    if tuple(xv.shape[1:]) != model.input_shape:
        raise ValueError(f"input shape {xv.shape[1:]} != declared {model.input_shape}")
    needed = {s.cfg["source"] for s in model.specs if s.kind == "concat_skip"}
    cache: dict[str, object] = {}
    out = x
    for s in model.specs:
        name, cfg = s.name, s.cfg
        try:
            if s.kind == "involution":
                p = ops.InvolutionParams(
                    cfg["kernel_size"], cfg["groups"], cfg["reduction"], cfg["stride"],
                    cfg["sigma"], cfg["with_bias"],
                    w0=pv[f"{name}/w0"], w1=pv[f"{name}/w1"],
                    b0=pv.get(f"{name}/b0"), b1=pv.get(f"{name}/b1"),
                    gamma0=pv.get(f"{name}/gamma0"), beta0=pv.get(f"{name}/beta0"),
                    run_mean=model.state.get(f"{name}/run_mean"),
                    run_var=model.state.get(f"{name}/run_var"))
                out = ops.involution2d(out, p, mode=mode, name=name)
            elif s.kind == "conv":
                p = ops.ConvParams(pv[f"{name}/kernel"], pv[f"{name}/bias"],
                                   cfg["stride"], cfg["padding"])
                out = ops.conv2d(out, p, name=name)
            elif s.kind == "conv_transpose":
                p = ops.ConvParams(pv[f"{name}/kernel"], pv[f"{name}/bias"],
                                   cfg["stride"])
                out = ops.conv2d_transpose(out, p, name=name)
            elif s.kind == "maxpool":
                out, _ = ops.maxpool2d(out, cfg["window"], cfg["window"],
                                       cfg["ceil_mode"], name=name)
            elif s.kind == "batchnorm":
                state = {"mean": model.state[f"{name}/mean"],
                         "var": model.state[f"{name}/var"]}
                out = ops.batchnorm(out, pv[f"{name}/gamma"], pv[f"{name}/beta"],
                                    state, mode=mode, name=name)
            elif s.kind == "dropout":
                if mode == "train" and rng is None and cfg["rate"] > 0:
                    raise ValueError("train mode needs an rng for dropout")
                out, _ = ops.dropout(out, cfg["rate"], rng, mode, name=name)
            elif s.kind == "dense":
                out = ops.dense(out, pv[f"{name}/w"], pv[f"{name}/b"], name=name)
            elif s.kind == "activation":
                fn = {"relu": ops.relu, "sigmoid": ops.sigmoid, "softmax": ops.softmax}[cfg["fn"]]
                out = fn(out, name=name)
            elif s.kind == "flatten":
                out = ops.flatten(out, name=name)
            elif s.kind == "concat_skip":
                out = ops.concat(out, cache[cfg["source"]], name=name)
            else:
                raise ValueError(f"unknown layer kind '{s.kind}'")
        except ValueError as e:
            raise ValueError(f"layer '{name}': {e}") from e
        if name in needed:
            cache[name] = out
    return out


# ---------------------------------------------------------------------------
# checkpoints

def save_model(f, model: Model) -> None:
    """MDIC-CKPT container: header JSON (kind + hparams) then named tensors."""
    if isinstance(f, str):
        with open(f, "wb") as fh:
            save_model(fh, model)
        return
    header = json.dumps({"kind": model.kind, "hparams": _jsonable(model.hparams)},
                        sort_keys=True).encode()
    f.write(CKPT_MAGIC)
    f.write(struct.pack("<I", CKPT_VERSION))
    f.write(struct.pack("<Q", len(header)))
    f.write(header)
    records = [(k, v) for k, v in sorted(model.params.items())]
    records += [(f"state:{k}", v) for k, v in sorted(model.state.items())]
    f.write(struct.pack("<I", len(records)))
    for name, arr in records:
        nb = name.encode()
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        save_tensor(f, arr)


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def load_model(f) -> Model:
    if isinstance(f, str):
        with open(f, "rb") as fh:
            return load_model(fh)
    if f.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ValueError("bad checkpoint magic")
    (version,) = struct.unpack("<I", f.read(4))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", f.read(8))
    header = json.loads(f.read(hlen).decode())
    kind = header["kind"]
    if kind not in BUILDERS:
        raise ValueError(f"unknown model kind '{kind}'")
    hp = dict(header["hparams"])
    for k in ("input_shape", "widths"):
        if k in hp and isinstance(hp[k], list):
            hp[k] = tuple(hp[k])
    model = BUILDERS[kind](**hp)
    (count,) = struct.unpack("<I", f.read(4))
    for _ in range(count):
        (nlen,) = struct.unpack("<I", f.read(4))
        name = f.read(nlen).decode()
        arr = load_tensor(f)
        target = model.state if name.startswith("state:") else model.params
        key = name.removeprefix("state:")
        if key not in target:
            raise ValueError(f"checkpoint tensor '{key}' not in rebuilt model")
        if target[key].shape != arr.shape:
            raise ValueError(f"shape mismatch for '{key}'")
        target[key][...] = arr
    return model


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    save_model(buf, model)
    return buf.getvalue()
