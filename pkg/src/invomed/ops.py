"""Layer primitives: forward math plus registered backward rules.

Every op accepts either plain arrays (pure forward, nothing recorded)
or :class:`~invomed.autodiff.Var` handles; mixing is fine — plain
arrays are lifted to tape leaves when at least one argument is a Var.
Image tensors are laid out N x H x W x C throughout.

The involution operator generates one K x K kernel per output position
from that position's own feature vector through a two-projection
bottleneck (C -> C/r -> K^2*G), shares it across the C/G channels of
each group, and applies it over a zero-padded K x K neighborhood.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tape, Var, register_backward
from .tensor import Rng, normal_init

__all__ = [
    "ConvParams",
    "InvolutionParams",
    "add",
    "batchnorm",
    "concat",
    "conv2d",
    "conv2d_transpose",
    "conv_param_count",
    "default_reduction",
    "dense",
    "dense_param_count",
    "dropout",
    "flatten",
    "init_conv_params",
    "init_involution_params",
    "involution2d",
    "involution_param_count",
    "maxpool2d",
    "mean",
    "mul",
    "relu",
    "sigmoid",
    "softmax",
    "sub",
    "tsum",
]

BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# tape plumbing

def _find_tape(*args) -> Optional[Tape]:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _val(a):
    return a.value if isinstance(a, Var) else a


def _lift(tape: Tape, a) -> Var:
    if isinstance(a, Var):
        if a.tape is not tape:
            raise ValueError("operands live on different tapes")
        return a
    return tape.leaf(np.asarray(a, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    if np.shape(g) == tuple(shape):
        return g
    if shape == () or shape == (1,):
        s = np.sum(g)
        return np.float64(s).reshape(shape) if shape else np.asarray(s)
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / reduction ops (used by losses, tests, grad-cam scalars)

def _binary(op_name, fn, a, b, name=None):
    tape = _find_tape(a, b)
    av, bv = np.asarray(_val(a), dtype=np.float64), np.asarray(_val(b), dtype=np.float64)
    out = fn(av, bv)
    if tape is None:
        return out
    va, vb = _lift(tape, a), _lift(tape, b)
    return tape.record(op_name, [va, vb], out, {"a": av, "b": bv}, name=name)


def add(a, b, name=None):
    return _binary("add", np.add, a, b, name)


def sub(a, b, name=None):
    return _binary("sub", np.subtract, a, b, name)


def mul(a, b, name=None):
    return _binary("mul", np.multiply, a, b, name)


@register_backward("add")
def _add_bwd(node, g):
    return [_unbroadcast(g, node.ctx["a"].shape), _unbroadcast(g, node.ctx["b"].shape)]


@register_backward("sub")
def _sub_bwd(node, g):
    return [_unbroadcast(g, node.ctx["a"].shape), _unbroadcast(-g, node.ctx["b"].shape)]


@register_backward("mul")
def _mul_bwd(node, g):
    a, b = node.ctx["a"], node.ctx["b"]
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def tsum(x, name=None):
    """Full sum to a scalar node."""
    tape = _find_tape(x)
    xv = _val(x)
    out = np.asarray(np.sum(xv))
    if tape is None:
        return out
    return tape.record("sum", [_lift(tape, x)], out, {"shape": xv.shape}, name=name)


def mean(x, name=None):
    tape = _find_tape(x)
    xv = _val(x)
    out = np.asarray(np.mean(xv))
    if tape is None:
        return out
    return tape.record("mean", [_lift(tape, x)], out, {"shape": xv.shape}, name=name)


@register_backward("sum")
def _sum_bwd(node, g):
    return [np.broadcast_to(g, node.ctx["shape"]).copy()]


@register_backward("mean")
def _mean_bwd(node, g):
    shape = node.ctx["shape"]
    return [np.broadcast_to(g / np.prod(shape), shape).copy()]


def flatten(x, name=None):
    """Row-major flatten of all but the leading (batch) axis."""
    tape = _find_tape(x)
    xv = _val(x)
    out = np.ascontiguousarray(xv).reshape(xv.shape[0], -1)
    if tape is None:
        return out
    return tape.record("flatten", [_lift(tape, x)], out, {"shape": xv.shape}, name=name)


@register_backward("flatten")
def _flatten_bwd(node, g):
    return [g.reshape(node.ctx["shape"])]


# ---------------------------------------------------------------------------
# activations

def relu(x, name=None):
    tape = _find_tape(x)
    xv = _val(x)
    out = np.maximum(xv, 0.0)
    if tape is None:
        return out
    return tape.record("relu", [_lift(tape, x)], out, {"x": xv}, name=name)


@register_backward("relu")
def _relu_bwd(node, g):
    # subgradient 0 at the kink
    return [g * (node.ctx["x"] > 0.0)]


def sigmoid(x, name=None):
    tape = _find_tape(x)
    xv = _val(x)
    out = 1.0 / (1.0 + np.exp(-xv))
    if tape is None:
        return out
    return tape.record("sigmoid", [_lift(tape, x)], out, {"y": out}, name=name)


@register_backward("sigmoid")
def _sigmoid_bwd(node, g):
    y = node.ctx["y"]
    return [g * y * (1.0 - y)]


def softmax(x, axis: int = -1, name=None):
    tape = _find_tape(x)
    xv = _val(x)
    shifted = xv - np.max(xv, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    if tape is None:
        return out
    return tape.record("softmax", [_lift(tape, x)], out, {"y": out, "axis": axis}, name=name)


@register_backward("softmax")
def _softmax_bwd(node, g):
    y, axis = node.ctx["y"], node.ctx["axis"]
    dot = np.sum(g * y, axis=axis, keepdims=True)
    return [y * (g - dot)]


# ---------------------------------------------------------------------------
# dense

def dense(x, w, b, name=None):
    """Affine map [N, F_in] @ [F_in, F_out] + [F_out]."""
    tape = _find_tape(x, w, b)
    xv, wv, bv = _val(x), _val(w), _val(b)
    if xv.shape[1] != wv.shape[0]:
        raise ValueError(f"dense shape mismatch: {xv.shape} x {wv.shape}")
    out = xv @ wv + bv
    if tape is None:
        return out
    return tape.record("dense", [_lift(tape, x), _lift(tape, w), _lift(tape, b)],
                       out, {"x": xv, "w": wv}, name=name)


@register_backward("dense")
def _dense_bwd(node, g):
    x, w = node.ctx["x"], node.ctx["w"]
    return [g @ w.T, x.T @ g, g.sum(axis=0)]


def dense_param_count(fan_in: int, fan_out: int, with_bias: bool = True) -> int:
    return fan_in * fan_out + (fan_out if with_bias else 0)


# ---------------------------------------------------------------------------
# convolution

@dataclass
class ConvParams:
    """Cross-correlation kernel [K_h, K_w, C_in, C_out] plus bias.

    The same record drives :func:`conv2d` (maps C_in -> C_out) and
    :func:`conv2d_transpose` (its exact adjoint, maps C_out -> C_in;
    ``bias`` then has C_in entries).
    """

    kernel: object  # ndarray or Var
    bias: object
    stride: int = 1
    padding: str = "same"


def init_conv_params(rng: Rng, c_in: int, c_out: int, kernel_size: int = 3,
                     stride: int = 1, padding: str = "same",
                     transpose: bool = False) -> ConvParams:
    kh = kw = kernel_size
    if transpose:
        # kernel [K,K,C_out,C_in]; fan-in of the adjoint is K^2*C_in/stride^2 taps,
        # plain K^2*c_in keeps init magnitudes consistent with the forward conv.
        kernel = normal_init(rng, (kh, kw, c_out, c_in), kh * kw * c_in)
        bias = np.zeros(c_out)
    else:
        kernel = normal_init(rng, (kh, kw, c_in, c_out), kh * kw * c_in)
        bias = np.zeros(c_out)
    return ConvParams(kernel, bias, stride, padding)


def conv_param_count(kh: int, kw: int, c_in: int, c_out: int, with_bias: bool = True) -> int:
    return kh * kw * c_in * c_out + (c_out if with_bias else 0)


def _same_pad(extent: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-extent // s)  # ceil
    total = max((out - 1) * s + k - extent, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h, w, kh, kw, s, padding):
    if padding == "same":
        ho, pt, pb = _same_pad(h, kh, s)
        wo, pl, pr = _same_pad(w, kw, s)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ValueError("input smaller than kernel for valid padding")
        ho, wo = (h - kh) // s + 1, (w - kw) // s + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding mode '{padding}'")
    return ho, wo, pt, pb, pl, pr


def _pad_input(x, pt, pb, pl, pr):
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _tap_slice(xp, u, v, s, ho, wo):
    return xp[:, u:u + s * ho:s, v:v + s * wo:s, :]


def _conv_taps_forward(xp, kernel, s, ho, wo):
    # one batched GEMM per kernel tap keeps everything in BLAS without
    # materializing im2col patches
    kh, kw = kernel.shape[0], kernel.shape[1]
    out = None
    for u in range(kh):
        for v in range(kw):
            t = _tap_slice(xp, u, v, s, ho, wo) @ kernel[u, v]
            if out is None:
                out = t
            else:
                np.add(out, t, out=out)
    return out


def conv2d(x, p: ConvParams, name=None):
    """Cross-correlation with zero padding; stride 1 + 'same' keeps H x W."""
    tape = _find_tape(x, p.kernel, p.bias)
    xv, kv, bv = _val(x), _val(p.kernel), _val(p.bias)
    n, h, w, ci = xv.shape
    kh, kw, kci, co = kv.shape
    if kci != ci:
        raise ValueError(f"conv2d channel mismatch: input {ci}, kernel {kci}")
    s = p.stride
    ho, wo, pt, pb, pl, pr = _conv_geometry(h, w, kh, kw, s, p.padding)
    xp = _pad_input(xv, pt, pb, pl, pr)
    out = _conv_taps_forward(xp, kv, s, ho, wo) + bv
    if tape is None:
        return out
    ctx = {"x": xv, "kernel": kv, "geom": (s, pt, pb, pl, pr, ho, wo)}
    return tape.record("conv2d", [_lift(tape, x), _lift(tape, p.kernel), _lift(tape, p.bias)],
                       out, ctx, name=name)


def _conv_input_grad(g, kv, x_shape, geom):
    n, h, w, ci = x_shape
    kh, kw = kv.shape[0], kv.shape[1]
    s, pt, pb, pl, pr, ho, wo = geom
    if s == 1 and pt == pb and pl == pr and (ho, wo) == (h, w):
        # stride-1 symmetric padding: the adjoint is itself a same-padded
        # correlation with the spatially flipped, channel-transposed kernel
        kf = kv[::-1, ::-1].transpose(0, 1, 3, 2)
        return _conv_taps_forward(_pad_input(g, pt, pt, pl, pl), kf, 1, h, w)
    gxp = np.zeros((n, h + pt + pb, w + pl + pr, ci))
    for u in range(kh):
        for v in range(kw):
            np.add(_tap_slice(gxp, u, v, s, ho, wo), g @ kv[u, v].T,
                   out=_tap_slice(gxp, u, v, s, ho, wo))
    return gxp[:, pt:pt + h, pl:pl + w, :] if (pt or pb or pl or pr) else gxp


def _conv_kernel_grad(xp, g, kh, kw, s, ho, wo):
    gk = np.empty((kh, kw, xp.shape[3], g.shape[3]))
    for u in range(kh):
        for v in range(kw):
            gk[u, v] = np.tensordot(_tap_slice(xp, u, v, s, ho, wo), g,
                                    axes=([0, 1, 2], [0, 1, 2]))
    return gk


@register_backward("conv2d")
def _conv2d_bwd(node, g):
    x, kv = node.ctx["x"], node.ctx["kernel"]
    geom = node.ctx["geom"]
    s, pt, pb, pl, pr, ho, wo = geom
    kh, kw, ci, co = kv.shape
    xp = _pad_input(x, pt, pb, pl, pr)
    gk = _conv_kernel_grad(xp, g, kh, kw, s, ho, wo)
    gb = g.sum(axis=(0, 1, 2))
    gx = _conv_input_grad(g, kv, x.shape, geom)
    return [gx, gk, gb]


def conv2d_transpose(x, p: ConvParams, name=None):
    """Adjoint of :func:`conv2d` with the same kernel; stride s scales H, W by s.

    Input channels are ``kernel.shape[3]``, output channels
    ``kernel.shape[2]``; ``bias`` (length = output channels) is added last.
    """
    tape = _find_tape(x, p.kernel, p.bias)
    xv, kv, bv = _val(x), _val(p.kernel), _val(p.bias)
    n, hi, wi, ci = xv.shape
    kh, kw, co, kci = kv.shape
    if kci != ci:
        raise ValueError(f"conv2d_transpose channel mismatch: input {ci}, kernel {kci}")
    s = p.stride
    h, w = hi * s, wi * s
    ho, pt, pb = _same_pad(h, kh, s)
    wo_, pl, pr = _same_pad(w, kw, s)
    if (ho, wo_) != (hi, wi):  # geometry of the adjoint forward conv must round-trip
        raise ValueError("transpose geometry mismatch")
    geom = (s, pt, pb, pl, pr, hi, wi)
    # forward-conv kernel layout for the adjoint: [K,K,co,ci] with ci as "out"
    out = _conv_input_grad(xv, kv, (n, h, w, co), geom) + bv
    if tape is None:
        return out
    ctx = {"x": xv, "kernel": kv, "geom": geom, "hw": (h, w)}
    return tape.record("conv2d_transpose",
                       [_lift(tape, x), _lift(tape, p.kernel), _lift(tape, p.bias)],
                       out, ctx, name=name)


@register_backward("conv2d_transpose")
def _conv2d_transpose_bwd(node, g):
    x, kv = node.ctx["x"], node.ctx["kernel"]
    s, pt, pb, pl, pr, ho, wo = node.ctx["geom"]
    # adjoint of the adjoint is the forward conv
    gp = _pad_input(g, pt, pb, pl, pr)
    gx = _conv_taps_forward(gp, kv, s, ho, wo)
    gk = _conv_kernel_grad(gp, x, kv.shape[0], kv.shape[1], s, ho, wo)
    gb = g.sum(axis=(0, 1, 2))
    return [gx, gk, gb]


# ---------------------------------------------------------------------------
# pooling

def maxpool2d(x, window: int = 2, stride: int = 2, ceil_mode: bool = False, name=None):
    """Non-overlapping max pooling; returns (pooled, argmax indices).

    ``ceil_mode=False`` drops trailing rows/cols when H or W is odd
    (floor semantics); ``ceil_mode=True`` pads with -inf instead.
    Ties route to the lowest flat input index. Indices are flat over
    H x W per (sample, channel) and drive the backward scatter.
    """
    if window != stride:
        raise ValueError("only window == stride pooling is supported")
    tape = _find_tape(x)
    xv = _val(x)
    n, h, w, c = xv.shape
    k = window
    if ceil_mode:
        ho, wo = -(-h // k), -(-w // k)
        xw = np.full((n, ho * k, wo * k, c), -np.inf)
        xw[:, :h, :w, :] = xv
    else:
        ho, wo = h // k, w // k
        xw = xv[:, :ho * k, :wo * k, :]
    tiles = xw.reshape(n, ho, k, wo, k, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, k * k)
    local = np.argmax(tiles, axis=-1)  # first max = lowest (u,v), i.e. lowest flat index
    out = np.take_along_axis(tiles, local[..., None], axis=-1)[..., 0]
    iu, jv = local // k, local % k
    ii = np.arange(ho)[None, :, None, None] * k + iu
    jj = np.arange(wo)[None, None, :, None] * k + jv
    indices = ii * w + jj  # flat into the *unpadded* input (padded cells never win)
    if tape is None:
        return out, indices
    ctx = {"indices": indices, "in_shape": xv.shape}
    return tape.record("maxpool2d", [_lift(tape, x)], out, ctx, name=name), indices


@register_backward("maxpool2d")
def _maxpool_bwd(node, g):
    n, h, w, c = node.ctx["in_shape"]
    idx = node.ctx["indices"]
    gx = np.zeros((n, h * w, c))
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, None, None, :]
    # windows never overlap, so plain assignment is collision-free
    gx[ni, idx, ci] = g
    return [gx.reshape(n, h, w, c)]


# ---------------------------------------------------------------------------
# batchnorm

def batchnorm(x, gamma, beta, state: dict, mode: str = "train",
              momentum: float = 0.9, eps: float = BN_EPS, name=None):
    """Per-channel batch normalization over the N, H, W axes.

    ``state`` holds ``mean``/``var`` running arrays; train mode uses
    batch moments and folds them into the running stats in place,
    infer mode reads the running stats.
    """
    tape = _find_tape(x, gamma, beta)
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    if xv.ndim != 4:
        raise ValueError("batchnorm expects [N,H,W,C] input")
    axes = (0, 1, 2)
    m = xv.shape[0] * xv.shape[1] * xv.shape[2]
    if m == 0:
        raise ValueError("batchnorm on an empty batch")
    if mode == "train":
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        state["mean"][:] = momentum * state["mean"] + (1.0 - momentum) * mu
        state["var"][:] = momentum * state["var"] + (1.0 - momentum) * var
    elif mode == "infer":
        mu, var = state["mean"], state["var"]
    else:
        raise ValueError(f"unknown mode '{mode}'")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv_std
    out = gv * xhat + bv
    if tape is None:
        return out
    ctx = {"xhat": xhat, "inv_std": inv_std, "gamma": gv, "m": m, "mode": mode}
    return tape.record("batchnorm", [_lift(tape, x), _lift(tape, gamma), _lift(tape, beta)],
                       out, ctx, name=name)


def _bn_input_grad(gy, xhat, inv_std, gamma, m, mode):
    if mode == "infer":
        return gy * gamma * inv_std
    gxhat = gy * gamma
    term = gxhat - gxhat.mean(axis=(0, 1, 2)) - xhat * (gxhat * xhat).mean(axis=(0, 1, 2))
    return term * inv_std


@register_backward("batchnorm")
def _batchnorm_bwd(node, g):
    c = node.ctx
    gx = _bn_input_grad(g, c["xhat"], c["inv_std"], c["gamma"], c["m"], c["mode"])
    ggamma = (g * c["xhat"]).sum(axis=(0, 1, 2))
    gbeta = g.sum(axis=(0, 1, 2))
    return [gx, ggamma, gbeta]


# ---------------------------------------------------------------------------
# dropout

def dropout(x, rate: float, rng: Rng | None = None, mode: str = "train", name=None):
    """Inverted dropout; returns (output, keep mask)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    tape = _find_tape(x)
    xv = _val(x)
    if mode == "infer" or rate == 0.0:
        mask = np.ones_like(xv)
        out = xv.copy()
    else:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = rng.uniform(xv.shape) >= rate
        mask = keep / (1.0 - rate)
        out = xv * mask
    if tape is None:
        return out, mask
    return tape.record("dropout", [_lift(tape, x)], out, {"mask": mask}, name=name), mask


@register_backward("dropout")
def _dropout_bwd(node, g):
    return [g * node.ctx["mask"]]


# ---------------------------------------------------------------------------
# concat

def concat(a, b, name=None):
    """Channel concatenation of [N,H,W,C1] and [N,H,W,C2]."""
    tape = _find_tape(a, b)
    av, bv = _val(a), _val(b)
    if av.shape[:-1] != bv.shape[:-1]:
        raise ValueError(f"concat spatial mismatch: {av.shape} vs {bv.shape}")
    out = np.concatenate([av, bv], axis=-1)
    if tape is None:
        return out
    return tape.record("concat", [_lift(tape, a), _lift(tape, b)], out,
                       {"c1": av.shape[-1]}, name=name)


@register_backward("concat")
def _concat_bwd(node, g):
    c1 = node.ctx["c1"]
    return [g[..., :c1], g[..., c1:]]


# ---------------------------------------------------------------------------
# involution

def default_reduction(channels: int) -> int:
    """Largest divisor of C that is <= 4 (keeps the bottleneck >= 1 wide)."""
    for r in (4, 3, 2, 1):
        if channels % r == 0:
            return r
    return 1


@dataclass
class InvolutionParams:
    """Hyperparameters and meta-weights of one involution layer.

    ``w0``/``b0`` project C -> C/r, ``w1``/``b1`` project C/r -> K^2*G.
    ``sigma`` selects the bottleneck nonlinearity: plain ReLU, or
    batch-normalized ReLU (``"bn_relu"``, adds gamma0/beta0 plus running
    stats). Generated kernels have shape [H', W', K, K, G] per sample
    and are shared across the C/G channels of each group.
    """

    kernel_size: int
    groups: int
    reduction: int
    stride: int = 1
    sigma: str = "relu"
    with_bias: bool = True
    w0: object = None  # [C/r, C]
    b0: object = None  # [C/r]
    w1: object = None  # [K^2*G, C/r]
    b1: object = None  # [K^2*G]
    gamma0: object = None  # [C/r], bn_relu only
    beta0: object = None
    run_mean: np.ndarray | None = None
    run_var: np.ndarray | None = None


def _check_involution(c: int, p: InvolutionParams):
    if p.kernel_size % 2 == 0 or p.kernel_size < 1:
        raise ValueError(f"kernel size must be odd, got {p.kernel_size}")
    if c % p.groups != 0:
        raise ValueError(f"groups {p.groups} must divide channels {c}")
    if c % p.reduction != 0:
        raise ValueError(f"reduction {p.reduction} must divide channels {c}")
    if p.sigma not in ("relu", "bn_relu"):
        raise ValueError(f"unknown sigma '{p.sigma}'")


def init_involution_params(rng: Rng, channels: int, kernel_size: int = 3,
                           groups: int = 1, reduction: int | None = None,
                           stride: int = 1, sigma: str = "relu",
                           with_bias: bool = True) -> InvolutionParams:
    r = default_reduction(channels) if reduction is None else reduction
    p = InvolutionParams(kernel_size, groups, r, stride, sigma, with_bias)
    _check_involution(channels, p)
    cb = channels // r
    m = kernel_size * kernel_size * groups
    p.w0 = normal_init(rng, (cb, channels), channels)
    p.w1 = normal_init(rng, (m, cb), cb) * 0.1
    if with_bias:
        p.b0 = np.zeros(cb)
        # center-tap delta: the layer starts as a near-identity map, which
        # keeps gradients alive even when the bottleneck ReLU starts dark
        p.b1 = np.zeros(m)
        pad = kernel_size // 2
        for gg in range(groups):
            p.b1[(pad * kernel_size + pad) * groups + gg] = 1.0
    if sigma == "bn_relu":
        p.gamma0 = np.ones(cb)
        p.beta0 = np.zeros(cb)
        p.run_mean = np.zeros(cb)
        p.run_var = np.ones(cb)
    return p


def involution_param_count(channels: int, kernel_size: int, groups: int,
                           reduction: int, with_bias: bool,
                           sigma: str = "relu",
                           include_running_stats: bool = False) -> int:
    """Closed-form scalar count of one involution layer's weights."""
    p = InvolutionParams(kernel_size, groups, reduction, sigma=sigma, with_bias=with_bias)
    _check_involution(channels, p)
    cb = channels // reduction
    m = kernel_size * kernel_size * groups
    count = channels * cb + cb * m
    if with_bias:
        count += cb + m
    if sigma == "bn_relu":
        count += 2 * cb
        if include_running_stats:
            count += 2 * cb
    return count


def _group_of_channel(k: int, c: int, g: int) -> int:
    # ceil((k+1)*G/C) - 1 for 0-based channel index k
    return -(-(k + 1) * g // c) - 1


def involution2d(x, p: InvolutionParams, mode: str = "train", name=None):
    """Position-wise dynamic-kernel convolution counterpart.

    For every output position (i, j) a kernel vector
    ``w1 @ sigma(w0 @ x[i*s, j*s] + b0) + b1`` is generated, reshaped
    row-major to K x K x G, and applied over the zero-padded K x K
    neighborhood; channel k uses the kernel of group ceil((k+1)G/C)-1.
    Stride 1 keeps the spatial dims.
    """
    tape = _find_tape(x, p.w0, p.b0, p.w1, p.b1, p.gamma0, p.beta0)
    xv = _val(x)
    n, h, w, c = xv.shape
    _check_involution(c, p)
    k, g, s = p.kernel_size, p.groups, p.stride
    pad = k // 2
    w0, w1 = _val(p.w0), _val(p.w1)
    b0 = _val(p.b0) if p.with_bias else 0.0
    b1 = _val(p.b1) if p.with_bias else 0.0

    xs = np.ascontiguousarray(xv[:, ::s, ::s, :])
    ho, wo = xs.shape[1], xs.shape[2]
    z = xs @ w0.T + b0  # [n,ho,wo,cb]

    bn = None
    if p.sigma == "bn_relu":
        gamma0, beta0 = _val(p.gamma0), _val(p.beta0)
        if mode == "train":
            mu = z.mean(axis=(0, 1, 2))
            var = z.var(axis=(0, 1, 2))
            if p.run_mean is not None:
                p.run_mean[:] = 0.9 * p.run_mean + 0.1 * mu
                p.run_var[:] = 0.9 * p.run_var + 0.1 * var
        else:
            mu, var = p.run_mean, p.run_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        zhat = (z - mu) * inv_std
        pre = gamma0 * zhat + beta0
        bn = {"zhat": zhat, "inv_std": inv_std, "gamma0": gamma0, "mode": mode}
    else:
        pre = z
    a = np.maximum(pre, 0.0)

    kernels = (a @ w1.T + b1).reshape(n, ho, wo, k, k, g)
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]  # [n,ho,wo,c,k,k]
    patches = np.moveaxis(win, 3, 5)  # [n,ho,wo,k,k,c] (view)
    hc = np.repeat(kernels, c // g, axis=5)  # group kernel broadcast over its channels
    out = np.einsum("nijuvc,nijuvc->nijc", hc, patches, optimize=True)

    if tape is None:
        return out
    inputs = [_lift(tape, x), _lift(tape, p.w0)]
    slots = ["x", "w0"]
    if p.with_bias:
        inputs.append(_lift(tape, p.b0))
        slots.append("b0")
    inputs.append(_lift(tape, p.w1))
    slots.append("w1")
    if p.with_bias:
        inputs.append(_lift(tape, p.b1))
        slots.append("b1")
    if p.sigma == "bn_relu":
        inputs += [_lift(tape, p.gamma0), _lift(tape, p.beta0)]
        slots += ["gamma0", "beta0"]
    ctx = {
        "x": xv, "xs": xs, "z": z, "pre": pre, "a": a, "kernels": kernels,
        "w0": w0, "w1": w1, "cfg": (k, g, s, pad), "bn": bn, "slots": slots,
    }
    return tape.record("involution2d", inputs, out, ctx, name=name)


@register_backward("involution2d")
def _involution_bwd(node, gy):
    c = node.ctx
    x, xs, z, pre, a, kernels = c["x"], c["xs"], c["z"], c["pre"], c["a"], c["kernels"]
    w0, w1 = c["w0"], c["w1"]
    k, g, s, pad = c["cfg"]
    n, h, w, ch = x.shape
    ho, wo = xs.shape[1], xs.shape[2]
    cpg = ch // g

    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    gxp = np.zeros_like(xp)
    gkern = np.empty((n, ho, wo, k, k, g))
    # per-tap: value-path grads into the kernels and, via the kernels,
    # back into the padded input
    for u in range(k):
        for v in range(k):
            tap = _tap_slice(xp, u, v, s, ho, wo)
            prod = gy * tap
            gkern[:, :, :, u, v, :] = prod.reshape(n, ho, wo, g, cpg).sum(axis=4)
            hc_uv = np.repeat(kernels[:, :, :, u, v, :], cpg, axis=3)
            out_view = _tap_slice(gxp, u, v, s, ho, wo)
            np.add(out_view, gy * hc_uv, out=out_view)
    gx = gxp[:, pad:pad + h, pad:pad + w, :]

    gkflat = gkern.reshape(n, ho, wo, k * k * g)
    gw1 = np.tensordot(gkflat, a, axes=([0, 1, 2], [0, 1, 2]))
    gb1 = gkflat.sum(axis=(0, 1, 2))
    ga = gkflat @ w1
    gpre = ga * (pre > 0.0)
    bn = c["bn"]
    ggamma0 = gbeta0 = None
    if bn is not None:
        ggamma0 = (gpre * bn["zhat"]).sum(axis=(0, 1, 2))
        gbeta0 = gpre.sum(axis=(0, 1, 2))
        gz = _bn_input_grad(gpre, bn["zhat"], bn["inv_std"], bn["gamma0"],
                            z.shape[0] * z.shape[1] * z.shape[2], bn["mode"])
    else:
        gz = gpre
    gw0 = np.tensordot(gz, xs, axes=([0, 1, 2], [0, 1, 2]))
    gb0 = gz.sum(axis=(0, 1, 2))
    gxs = gz @ w0
    gx[:, ::s, ::s, :] += gxs

    by_slot = {"x": gx, "w0": gw0, "b0": gb0, "w1": gw1, "b1": gb1,
               "gamma0": ggamma0, "beta0": gbeta0}
    return [by_slot[slot] for slot in c["slots"]]
