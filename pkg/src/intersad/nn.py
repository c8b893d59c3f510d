"""Minimal reverse-mode differentiation kernel on float64 numpy arrays.

Everything trainable in this package runs through the small op set below:
dense layers, a two-gate recurrent cell, elementwise nonlinearities and the
reductions needed for the losses. Each op has two behaviours selected by its
argument types. Called on plain ndarrays it is just numpy, which keeps
rollouts and evaluation cheap. Called on at least one :class:`Var` it records
the operation on an implicit tape (the graph of ``Var`` nodes) so that
:func:`backward` can accumulate gradients for scalar losses.

Design constraints honoured throughout:

* float64 everywhere; inputs are coerced on wrap.
* Gradients accumulate additively; a parameter that does not reach the loss
  receives an exactly-zero gradient.
* All randomness enters through explicitly passed generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CheckpointError, ContractViolation, NumericError

PARAMSTORE_FORMAT_VERSION = 1


class Var:
    """Node of the recorded computation graph.

    ``parents`` holds the Var operands and ``vjp`` routes an upstream
    gradient to one gradient per parent, in the same order. Leaves carry
    no recorded operation.
    """

    __slots__ = ("value", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaf={self.vjp is None})"


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, vjp_a, vjp_b):
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    if not (is_var(a) or is_var(b)):
        return out
    pa = a if is_var(a) else Var(av)
    pb = b if is_var(b) else Var(bv)

    def vjp(g):
        return (
            _unbroadcast(vjp_a(g, av, bv), av.shape),
            _unbroadcast(vjp_b(g, av, bv), bv.shape),
        )

    return Var(out, parents=(pa, pb), vjp=vjp)


def add(a, b):
    return _binary(a, b, np.add, lambda g, av, bv: g, lambda g, av, bv: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, av, bv: g, lambda g, av, bv: -g)


def mul(a, b):
    return _binary(
        a, b, np.multiply, lambda g, av, bv: g * bv, lambda g, av, bv: g * av
    )


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if not (is_var(a) or is_var(b)):
        return out
    pa = a if is_var(a) else Var(av)
    pb = b if is_var(b) else Var(bv)

    def vjp(g):
        g = np.asarray(g)
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        raise ContractViolation(
            f"matmul supports 1-D/2-D operands, got {av.ndim}-D @ {bv.ndim}-D"
        )

    return Var(out, parents=(pa, pb), vjp=vjp)


def _unary(x, fwd, dfdx):
    xv = value_of(x)
    out = fwd(xv)
    if not is_var(x):
        return out

    def vjp(g):
        return (g * dfdx(xv, out),)

    return Var(out, parents=(x,), vjp=vjp)


def tanh(x):
    return _unary(x, np.tanh, lambda xv, out: 1.0 - out * out)


def logistic(x):
    def fwd(xv):
        # stable on both tails: exp argument is never positive
        z = np.exp(-np.abs(xv))
        return np.where(xv >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    return _unary(x, fwd, lambda xv, out: out * (1.0 - out))


def sqrt(x):
    """Elementwise square root with subgradient 0 at exactly zero."""

    def dfdx(xv, out):
        safe = np.where(out > 0.0, out, 1.0)
        return np.where(out > 0.0, 0.5 / safe, 0.0)

    return _unary(x, np.sqrt, dfdx)


def asum(x, axis=None):
    """Sum over all entries (scalar) or along one axis."""
    xv = value_of(x)
    out = xv.sum(axis=axis)
    if not is_var(x):
        return out

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return Var(out, parents=(x,), vjp=vjp)


def concat_cols(parts: Sequence):
    """Concatenate 2-D blocks along the column axis."""
    vals = [value_of(p) for p in parts]
    if not vals:
        raise ContractViolation("concat_cols needs at least one block")
    if any(v.ndim != 2 for v in vals):
        raise ContractViolation("concat_cols expects 2-D blocks")
    out = np.concatenate(vals, axis=1)
    if not any(is_var(p) for p in parts):
        return out
    parents = tuple(p if is_var(p) else Var(v) for p, v in zip(parts, vals))
    widths = [v.shape[1] for v in vals]

    def vjp(g):
        outs = []
        start = 0
        for w in widths:
            outs.append(g[:, start : start + w])
            start += w
        return tuple(outs)

    return Var(out, parents=parents, vjp=vjp)


def _topo_order(root: Var) -> list[Var]:
    """Iterative post-order over the graph; recursion would overflow on
    long rollout chains."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` for each node in ``wrt``.

    Gradients accumulate additively across every path from a node to the
    loss. Nodes that never reach the loss get exact zeros.
    """
    if not is_var(loss):
        raise ContractViolation("backward expects a Var loss")
    if loss.value.shape != ():
        raise ContractViolation(
            f"backward expects a scalar loss, got shape {loss.value.shape}"
        )
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=np.float64)
    return [
        grads.get(id(w), np.zeros_like(w.value)).reshape(w.value.shape) for w in wrt
    ]


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ParamStore:
    """Named float64 parameter tensors with a flat serialized view.

    Insertion order is authoritative: the flat vector concatenates raveled
    tensors in that order, and the JSON form records names and shapes so a
    reload reproduces the store bit for bit.
    """

    params: dict[str, np.ndarray]

    def __post_init__(self):
        clean: dict[str, np.ndarray] = {}
        for name, arr in self.params.items():
            clean[name] = np.array(arr, dtype=np.float64)
        self.params = clean

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def size(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def copy(self) -> "ParamStore":
        return ParamStore({n: a.copy() for n, a in self.params.items()})

    def flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.params.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size(),):
            raise ContractViolation(
                f"flat vector has shape {vec.shape}, store holds {self.size()} entries"
            )
        start = 0
        for name, arr in self.params.items():
            stop = start + arr.size
            self.params[name] = vec[start:stop].reshape(arr.shape).copy()
            start = stop

    def leaves(self) -> dict[str, Var]:
        return {n: Var(a) for n, a in self.params.items()}

    def to_json_dict(self) -> dict:
        return {
            "format_version": PARAMSTORE_FORMAT_VERSION,
            "names": self.names(),
            "shapes": [list(a.shape) for a in self.params.values()],
            "flat_values": [float(v) for v in self.flat()],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ParamStore":
        if not isinstance(d, dict):
            raise CheckpointError("parameter payload is not an object")
        for key in ("format_version", "names", "shapes", "flat_values"):
            if key not in d:
                raise CheckpointError(f"parameter payload missing key '{key}'")
        if d["format_version"] != PARAMSTORE_FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported format_version {d['format_version']!r}, "
                f"expected {PARAMSTORE_FORMAT_VERSION}"
            )
        names, shapes = d["names"], d["shapes"]
        if len(names) != len(shapes):
            raise CheckpointError("names and shapes disagree in length")
        flat = np.asarray(d["flat_values"], dtype=np.float64)
        total = int(sum(int(np.prod(s)) for s in shapes))
        if flat.shape != (total,):
            raise CheckpointError(
                f"flat_values holds {flat.size} entries, shapes require {total}"
            )
        params: dict[str, np.ndarray] = {}
        start = 0
        for name, shape in zip(names, shapes):
            n = int(np.prod(shape))
            params[name] = flat[start : start + n].reshape([int(s) for s in shape])
            start += n
        return ParamStore(params)


def init_dense(
    rng: np.random.Generator, d_in: int, d_out: int, gain: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Weight ~ gain * U(-sqrt(1/fan_in), +sqrt(1/fan_in)), bias zero."""
    if d_in < 1 or d_out < 1:
        raise ContractViolation(f"dense dims must be positive, got {d_in}x{d_out}")
    if not np.isfinite(gain) or gain <= 0.0:
        raise ContractViolation(f"init gain must be positive and finite, got {gain}")
    bound = gain * math.sqrt(1.0 / d_in)
    w = rng.uniform(-bound, bound, size=(d_in, d_out))
    return w, np.zeros(d_out)


# ---------------------------------------------------------------------------
# layers

_ACTIVATIONS: dict[str, Callable] = {
    "tanh": tanh,
    "logistic": logistic,
    "identity": lambda x: x,
}


def dense_forward(x, weights, bias, activation: str = "identity"):
    """activation(x @ W + b); works on Vars and ndarrays alike."""
    if activation not in _ACTIVATIONS:
        raise ContractViolation(
            f"unknown activation '{activation}', expected one of {sorted(_ACTIVATIONS)}"
        )
    return _ACTIVATIONS[activation](add(matmul(x, weights), bias))


def recurrent_cell_init(
    rng: np.random.Generator,
    d_in: int,
    hidden: int,
    prefix: str = "cell",
    update_bias: float = 0.0,
) -> dict[str, np.ndarray]:
    """Parameters for the two-gate recurrent cell.

    ``update_bias`` presets the update gate's bias. A negative value opens
    the cell with slow forgetting (z near logistic(update_bias)), so the
    state integrates over many steps instead of tracking only the latest
    few; persistent input offsets then accumulate while step-to-step noise
    averages out.
    """
    params: dict[str, np.ndarray] = {}
    for gate in ("z", "r", "h"):
        w, b = init_dense(rng, d_in, hidden)
        u, _ = init_dense(rng, hidden, hidden)
        params[f"{prefix}_W{gate}"] = w
        params[f"{prefix}_U{gate}"] = u
        params[f"{prefix}_b{gate}"] = b
    params[f"{prefix}_bz"] = np.full(hidden, float(update_bias))
    return params


def recurrent_cell(params, x, h, prefix: str = "cell"):
    """One step of a gated recurrent update.

    Two gates: an update gate z blending old and candidate state, and a
    reset gate r masking the old state inside the candidate. With all-zero
    inputs and an all-zero hidden state the output stays exactly zero.
    """
    z = logistic(add(add(matmul(x, params[f"{prefix}_Wz"]), matmul(h, params[f"{prefix}_Uz"])), params[f"{prefix}_bz"]))
    r = logistic(add(add(matmul(x, params[f"{prefix}_Wr"]), matmul(h, params[f"{prefix}_Ur"])), params[f"{prefix}_br"]))
    cand = tanh(add(add(matmul(x, params[f"{prefix}_Wh"]), matmul(mul(r, h), params[f"{prefix}_Uh"])), params[f"{prefix}_bh"]))
    return add(mul(sub(1.0, z), h), mul(z, cand))


def recurrent_encode(steps: Sequence, params, prefix: str = "cell"):
    """Fold a step sequence through the cell from a zero hidden state.

    ``steps`` is a sequence of equally shaped (batch, d_in) blocks or
    (d_in,) vectors; the final hidden state is returned.
    """
    steps = list(steps)
    if not steps:
        raise ContractViolation("recurrent_encode requires a non-empty sequence")
    hidden = value_of(params[f"{prefix}_Uz"]).shape[0]
    first = value_of(steps[0])
    if first.ndim == 2:
        h = np.zeros((first.shape[0], hidden))
    else:
        h = np.zeros(hidden)
    for x in steps:
        h = recurrent_cell(params, x, h, prefix=prefix)
    return h


# ---------------------------------------------------------------------------
# gradients and optimizer


def grad(loss_fn: Callable, store: ParamStore) -> dict[str, np.ndarray]:
    """Gradient map of a scalar loss over every parameter in ``store``.

    ``loss_fn`` receives a dict of leaf Vars (same names as the store) and
    must return a scalar built from kernel ops. Parameters the loss never
    touches get zero gradients.
    """
    leaves = store.leaves()
    loss = loss_fn(leaves)
    if not is_var(loss):
        raise ContractViolation("loss_fn must return a Var built from kernel ops")
    gs = backward(loss, list(leaves.values()))
    return {name: g for name, g in zip(leaves, gs)}


def value_and_grad(loss_fn: Callable, store: ParamStore) -> tuple[float, dict[str, np.ndarray]]:
    leaves = store.leaves()
    loss = loss_fn(leaves)
    if not is_var(loss):
        raise ContractViolation("loss_fn must return a Var built from kernel ops")
    gs = backward(loss, list(leaves.values()))
    return float(loss.value), {name: g for name, g in zip(leaves, gs)}


@dataclass
class Adam:
    """Adaptive moment optimizer with bias correction.

    First step moves each coordinate by about -lr * sign(g); zero gradients
    leave parameters exactly unchanged.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)
    _t: int = 0

    def step(self, store: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self._t += 1
        t = self._t
        for name, p in store.params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self._m[name] = m
                self._v[name] = np.zeros_like(p)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FdReport:
    """Outcome of a finite-difference gradient audit."""

    max_rel_err: float
    worst_param: str
    passed: bool
    n_checked: int

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (
            f"finite-diff {status}: max rel err {self.max_rel_err:.3e} "
            f"at {self.worst_param} over {self.n_checked} entries"
        )


def finite_diff_check(
    loss_fn: Callable,
    store: ParamStore,
    step: float = 1e-5,
    rel_tol: float = 1e-4,
    grads: dict[str, np.ndarray] | None = None,
) -> FdReport:
    """Compare analytic gradients against central differences.

    Relative error uses max(|analytic|, |fd|, 1e-3) as denominator; the
    floor turns entries with near-zero gradient into an absolute check at
    rel_tol * 1e-3, far above central-difference roundoff but tight enough
    to catch genuine backward-pass defects. A pure relative comparison
    would amplify floating-point noise on saturated gates whose true
    gradient is legitimately tiny. Pass an explicit ``grads`` map to audit
    externally computed gradients, e.g. to confirm the check catches a
    corrupted entry.
    """
    if grads is None:
        grads = grad(loss_fn, store)
    work = store.copy()

    def eval_loss() -> float:
        out = loss_fn({n: a for n, a in work.params.items()})
        val = value_of(out)
        if val.shape != ():
            raise ContractViolation("finite_diff_check expects a scalar loss")
        if not np.isfinite(val):
            raise NumericError("loss is non-finite during finite-difference check")
        return float(val)

    max_rel = 0.0
    worst = "<none>"
    n_checked = 0
    for name, arr in work.params.items():
        flat = arr.ravel()
        gflat = np.asarray(grads[name], dtype=np.float64).ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = eval_loss()
            flat[idx] = orig - step
            f_minus = eval_loss()
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            a = gflat[idx]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{idx}]"
    return FdReport(
        max_rel_err=max_rel,
        worst_param=worst,
        passed=max_rel < rel_tol,
        n_checked=n_checked,
    )
