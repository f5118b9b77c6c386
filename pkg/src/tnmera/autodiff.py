"""Reverse-mode differentiation over a tape of tensor operations.

The tape records one node per binary contraction, permutation or reshape.
``backward`` walks it in reverse, applying the vector-Jacobian rule of each
node. The only fused operation is the softmax cross-entropy loss, which is
evaluated outside the tape and supplies the seed cotangent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, TensorError, contract, inverse_permutation, permute, reshape

log = logging.getLogger(__name__)

GradientSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class Step:
    """One schedule entry: ``out = op(*args)``.

    ``args`` name parameters, inputs or outputs of earlier steps.
    """

    op: str
    out: str
    args: tuple[str, ...]
    pairs: tuple[tuple[int, int], ...] = ()
    batch: tuple[tuple[int, int], ...] = ()
    perm: tuple[int, ...] = ()
    shape: tuple[int, ...] = ()


@dataclass
class Node:
    op: str
    args: tuple[int, ...]
    value: np.ndarray
    name: str | None = None
    attrs: dict = field(default_factory=dict)


def _as_float(value) -> np.ndarray:
    arr = np.asarray(value)
    return arr if np.issubdtype(arr.dtype, np.floating) else arr.astype(float)


class Tape:
    """Ordered record of a forward pass.

    Leaves are either parameters (which receive gradients) or inputs. Nodes are
    appended in evaluation order, so operands always precede their consumers.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        self.inputs: dict[str, int] = {}

    def __len__(self):
        return sum(1 for n in self.nodes if n.op not in ("param", "input"))

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, name: str, value) -> int:
        if name in self.params:
            return self.params[name]
        idx = self._push(Node("param", (), _as_float(value), name))
        self.params[name] = idx
        return idx

    def input(self, name: str, value) -> int:
        if name in self.inputs:
            return self.inputs[name]
        idx = self._push(Node("input", (), _as_float(value), name))
        self.inputs[name] = idx
        return idx

    def contract(self, i: int, j: int, pairs, batch=()) -> int:
        pairs = tuple((int(p), int(q)) for p, q in pairs)
        batch = tuple((int(p), int(q)) for p, q in batch)
        value = contract(self.nodes[i].value, self.nodes[j].value, pairs, batch)
        return self._push(Node("contract", (i, j), value, attrs={"pairs": pairs, "batch": batch}))

    def permute(self, i: int, perm) -> int:
        perm = tuple(int(p) for p in perm)
        return self._push(Node("permute", (i,), permute(self.nodes[i].value, perm), attrs={"perm": perm}))

    def reshape(self, i: int, shape) -> int:
        shape = tuple(int(s) for s in shape)
        return self._push(Node("reshape", (i,), reshape(self.nodes[i].value, shape), attrs={"shape": shape}))

    @property
    def output(self) -> np.ndarray:
        return self.nodes[-1].value

    def replay(self, params: Mapping[str, np.ndarray] | None = None,
               inputs: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        """Re-evaluate every node, optionally with new leaf values."""
        params = params or {}
        inputs = inputs or {}
        for node in self.nodes:
            if node.op == "param" and node.name in params:
                node.value = _as_float(params[node.name])
            elif node.op == "input" and node.name in inputs:
                node.value = _as_float(inputs[node.name])
            elif node.op == "contract":
                a, b = (self.nodes[k].value for k in node.args)
                node.value = contract(a, b, node.attrs["pairs"], node.attrs["batch"])
            elif node.op == "permute":
                node.value = permute(self.nodes[node.args[0]].value, node.attrs["perm"])
            elif node.op == "reshape":
                node.value = reshape(self.nodes[node.args[0]].value, node.attrs["shape"])
        return self.output


def _lookup(env: dict, name: str, step: Step):
    try:
        return env[name]
    except KeyError:
        raise TensorError(f"step {step.out!r} references undeclared tensor {name!r}") from None


def evaluate(params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray],
             schedule: Sequence[Step]) -> np.ndarray:
    """Un-taped evaluation of a schedule."""
    env = {**params, **inputs}
    out = None
    for step in schedule:
        vals = [_lookup(env, a, step) for a in step.args]
        if step.op == "contract":
            out = contract(vals[0], vals[1], step.pairs, step.batch)
        elif step.op == "permute":
            out = permute(vals[0], step.perm)
        elif step.op == "reshape":
            out = reshape(vals[0], step.shape)
        else:
            raise TensorError(f"unknown op {step.op!r}")
        env[step.out] = out
    return out


def record_forward(params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray],
                   schedule: Sequence[Step]) -> tuple[Tape, np.ndarray]:
    """Evaluate ``schedule`` while recording a tape.

    The output is the value of the final step and equals ``evaluate`` bit for
    bit, since both run the same kernels in the same order.
    """
    tape = Tape()
    ids: dict[str, int] = {}

    def ref(name, step):
        if name in ids:
            return ids[name]
        if name in params:
            ids[name] = tape.param(name, params[name])
        elif name in inputs:
            ids[name] = tape.input(name, inputs[name])
        else:
            raise TensorError(f"step {step.out!r} references undeclared tensor {name!r}")
        return ids[name]

    for step in schedule:
        args = [ref(a, step) for a in step.args]
        if step.op == "contract":
            ids[step.out] = tape.contract(args[0], args[1], step.pairs, step.batch)
        elif step.op == "permute":
            ids[step.out] = tape.permute(args[0], step.perm)
        elif step.op == "reshape":
            ids[step.out] = tape.reshape(args[0], step.shape)
        else:
            raise TensorError(f"unknown op {step.op!r}")
    if not schedule:
        raise TensorError("empty schedule")
    return tape, tape.output


def _contract_vjp(g, a, b, pairs, batch):
    ba = [i for i, _ in batch]
    bb = [j for _, j in batch]
    ca = [i for i, _ in pairs]
    cb = [j for _, j in pairs]
    free_a = [k for k in range(a.ndim) if k not in ba and k not in ca]
    free_b = [k for k in range(b.ndim) if k not in bb and k not in cb]
    nb, na = len(batch), len(free_a)
    partner_of_b = {j: i for i, j in pairs}
    partner_of_a = {i: j for i, j in pairs}

    # d/da: contract g's b-free axes against b, keep batch axes
    ga = contract(
        g, b,
        [(nb + na + k, j) for k, j in enumerate(free_b)],
        [(k, j) for k, j in enumerate(bb)],
    )
    layout = ba + free_a + [partner_of_b[j] for j in sorted(cb)]
    ga = permute(ga, [layout.index(k) for k in range(a.ndim)])

    # d/db: contract a's free axes against g's a-free axes
    gb = contract(
        a, g,
        [(i, nb + k) for k, i in enumerate(free_a)],
        [(i, k) for k, i in enumerate(ba)],
    )
    layout = bb + [partner_of_a[i] for i in sorted(ca)] + free_b
    gb = permute(gb, [layout.index(k) for k in range(b.ndim)])
    return ga, gb


VJP_OVERRIDES: dict[str, object] = {}
"""Test hook: maps an op name to a replacement VJP function."""


def backward(tape: Tape, seed, include_inputs: bool = False) -> GradientSet:
    """Gradients of ``<seed, output>`` with respect to every parameter."""
    seed = _as_float(seed)
    if seed.shape != tape.output.shape:
        raise TensorError(f"seed shape {seed.shape} != output shape {tape.output.shape}")
    cot: dict[int, np.ndarray] = {len(tape.nodes) - 1: seed}
    for idx in range(len(tape.nodes) - 1, -1, -1):
        g = cot.pop(idx, None)
        node = tape.nodes[idx]
        if g is None or node.op in ("param", "input"):
            if g is not None:
                cot[idx] = g
            continue
        if node.op in VJP_OVERRIDES:
            grads = VJP_OVERRIDES[node.op](g, node, tape)
        elif node.op == "contract":
            a, b = (tape.nodes[k].value for k in node.args)
            grads = _contract_vjp(g, a, b, node.attrs["pairs"], node.attrs["batch"])
        elif node.op == "permute":
            grads = (permute(g, inverse_permutation(node.attrs["perm"])),)
        elif node.op == "reshape":
            grads = (reshape(g, tape.nodes[node.args[0]].value.shape),)
        else:
            raise TensorError(f"no VJP for op {node.op!r}")
        for k, gk in zip(node.args, grads):
            cot[k] = cot[k] + gk if k in cot else gk

    out: GradientSet = {}
    for name, k in tape.params.items():
        out[name] = cot.get(k, np.zeros_like(tape.nodes[k].value))
    if include_inputs:
        for name, k in tape.inputs.items():
            out[name] = cot.get(k, np.zeros_like(tape.nodes[k].value))
    return out


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(float)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    """Loss ``-log softmax(logits)[label]`` and its gradient in the logits."""
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 1:
        raise TensorError(f"logits must be rank 1, got shape {logits.shape}")
    if not 0 <= int(label) < logits.shape[0]:
        raise TensorError(f"label {label} out of range for {logits.shape[0]} classes")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    z = logits - np.max(logits)
    lse = math.log(float(np.sum(np.exp(z))))
    loss = lse - float(z[label])
    grad = softmax(logits)
    grad[label] -= 1.0
    return max(loss, 0.0), grad


def batch_softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean loss over a batch of rows and the gradient of that mean.

    Floating dtypes are preserved, so extended-precision logits give an
    extended-precision loss.
    """
    logits = np.asarray(logits)
    if not np.issubdtype(logits.dtype, np.floating):
        logits = logits.astype(float)
    labels = np.asarray(labels, dtype=int)
    n, c = logits.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= c):
        raise TensorError("labels out of range or wrong length")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    z = logits - np.max(logits, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1))
    losses = np.maximum(lse - z[np.arange(n), labels], 0.0)
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return np.mean(losses), grad / n


def _check_grads(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> bool:
    for name, g in grads.items():
        if name not in params:
            raise TensorError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise TensorError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])} for {name!r}")
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        log.warning("non-finite gradient in %s; step skipped", ", ".join(sorted(bad)))
        return False
    return True


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """Plain gradient descent ``theta - lr * g``; parameters without a gradient are kept."""
    if not lr >= 0:
        raise TensorError("learning rate must be non-negative")
    if not _check_grads(params, grads):
        return dict(params)
    return {k: (v - lr * grads[k] if k in grads else v) for k, v in params.items()}


class Adam:
    """Momentum plus per-coordinate scaling (Kingma & Ba)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        if not _check_grads(params, grads):
            return dict(params)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = dict(params)
        for k, g in grads.items():
            m = self.m.get(k)
            v = self.v.get(k)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


class SGD:
    def __init__(self, lr=1e-5):
        self.lr = lr

    def step(self, params, grads):
        return sgd_step(params, grads, self.lr)


def tree_reduce(grad_sets: Sequence[GradientSet]) -> GradientSet:
    """Sum gradient sets with a fixed pairwise tree.

    The association order depends only on the number of sets, so the result is
    the same regardless of how the per-chunk gradients were scheduled.
    """
    level = list(grad_sets)
    if not level:
        return {}
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            a, b = level[i], level[i + 1]
            nxt.append({k: a[k] + b[k] for k in a})
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def scale_grads(grads: GradientSet, alpha: float) -> GradientSet:
    return {k: alpha * v for k, v in grads.items()}


def all_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)
