"""Reverse-mode autodiff over a linear tape.

A :class:`Tape` records every differentiable operation in creation
order; node inputs always have smaller ids than the node itself, so the
reverse pass is a single walk from the loss id down to 0. Backward
rules are registered per op name in :data:`BACKWARD_RULES` and receive
the node (whose ``ctx`` carries whatever the forward pass saved: input
values, pooling indices, dropout masks, generated involution kernels)
plus the incoming gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = ["Tape", "TapeNode", "Var", "BACKWARD_RULES", "backward", "grad_check"]


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int, ...]
    output: np.ndarray
    ctx: dict = field(default_factory=dict)
    name: str | None = None


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].output

    def __repr__(self):
        node = self.tape.nodes[self.nid]
        return f"Var(#{self.nid} {node.op} {np.shape(node.output)})"


class Tape:
    def __init__(self):
        self.nodes: list[TapeNode] = []

    def leaf(self, value: np.ndarray, name: str | None = None) -> Var:
        return self.record("leaf", [], np.asarray(value, dtype=np.float64), name=name)

    def record(self, op: str, inputs: Sequence[Var], output: np.ndarray,
               ctx: dict | None = None, name: str | None = None) -> Var:
        ids = tuple(v.nid for v in inputs)
        assert all(i < len(self.nodes) for i in ids)
        self.nodes.append(TapeNode(op, ids, output, ctx or {}, name))
        return Var(self, len(self.nodes) - 1)

    def find(self, name: str) -> Var:
        for nid, node in enumerate(self.nodes):
            if node.name == name:
                return Var(self, nid)
        raise KeyError(f"no tape node named '{name}'")


# op name -> fn(node, grad_wrt_output) -> list of grads aligned with node.inputs
# (None entries mean "no gradient for that input").
BACKWARD_RULES: dict[str, Callable[[TapeNode, np.ndarray], list]] = {}


def register_backward(op: str):
    def deco(fn):
        BACKWARD_RULES[op] = fn
        return fn

    return deco


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Reverse accumulation from a scalar loss node.

    Returns gradients for every node that influences the loss plus
    exact zeros for leaves that do not (constant-in-parameter case).
    """
    root = tape.nodes[loss.nid]
    if np.size(root.output) != 1:
        raise ValueError(f"loss must be scalar, got shape {np.shape(root.output)}")
    grads: dict[int, np.ndarray] = {loss.nid: np.ones_like(root.output)}
    for nid in range(loss.nid, -1, -1):
        node = tape.nodes[nid]
        g = grads.get(nid)
        if g is None or not node.inputs:
            continue
        rule = BACKWARD_RULES.get(node.op)
        if rule is None:
            raise KeyError(f"no backward rule registered for op '{node.op}'")
        for in_id, gi in zip(node.inputs, rule(node, g)):
            if gi is None:
                continue
            if in_id in grads:
                grads[in_id] = grads[in_id] + gi
            else:
                grads[in_id] = gi
    for nid in range(loss.nid + 1):
        node = tape.nodes[nid]
        if node.op == "leaf" and nid not in grads:
            grads[nid] = np.zeros_like(node.output)
    return grads


def grad_check(forward_fn, params: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients against central finite differences.

    ``forward_fn(*vars) -> scalar Var`` is re-run on fresh tapes for
    each probe; returns max_i |g_ad,i - g_fd,i| / max(1, |g_fd,i|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps out of the supported [1e-7, 1e-3] range")
    params = [np.asarray(p, dtype=np.float64) for p in params]

    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    out = forward_fn(*leaves)
    grads = backward(tape, out)
    g_ad = [grads[v.nid] for v in leaves]

    def value_at(probe: list[np.ndarray]) -> float:
        t = Tape()
        v = forward_fn(*[t.leaf(p) for p in probe])
        val = float(np.asarray(v.value))
        if not np.isfinite(val):
            raise FloatingPointError("non-finite value during finite differencing")
        return val

    max_rel = 0.0
    for i, p in enumerate(params):
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            probe = [q.copy() for q in params]
            probe[i].reshape(-1)[j] = orig + eps
            f_plus = value_at(probe)
            probe[i].reshape(-1)[j] = orig - eps
            f_minus = value_at(probe)
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            g = g_ad[i].reshape(-1)[j]
            if not np.isfinite(g):
                raise FloatingPointError("non-finite analytic gradient")
            rel = abs(g - g_fd) / max(1.0, abs(g_fd))
            if rel > max_rel:
                max_rel = rel
    return max_rel
