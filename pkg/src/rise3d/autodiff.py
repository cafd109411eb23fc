"""Reverse-mode differentiation on a flat tape of numpy primitives.

A :class:`Tape` records every primitive operation (value, op name, parent
node indices) in execution order, so the graph is acyclic by construction
and can be replayed to verify the recorded forward values. :class:`Var` is
a lightweight handle (tape, node index) with operator overloading; all
values are float64 ndarrays. One tape per optimization instance; recording
and backward are single-threaded, independent tapes may run in parallel.

Scatter-add accumulation follows ``np.add.at``, which applies updates in
index order, so repeated backward passes are bit-for-bit reproducible on
one platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericError

_LN2 = float(np.log(2.0))


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _scatter_add_forward(a: np.ndarray, aux) -> np.ndarray:
    index, size = aux
    out = np.zeros((size,) + a.shape[1:], dtype=np.float64)
    np.add.at(out, index, a)
    return out


# Forward rules, shared by recording and replay.  Each takes the parent
# values and the node's aux payload and returns the node value.
_FORWARD: dict[str, Callable[..., np.ndarray]] = {
    "add": lambda a, b, aux: a + b,
    "sub": lambda a, b, aux: a - b,
    "mul": lambda a, b, aux: a * b,
    "div": lambda a, b, aux: a / b,
    "neg": lambda a, aux: -a,
    "exp": lambda a, aux: np.exp(a),
    "log": lambda a, aux: np.log(a),
    "sigmoid": lambda a, aux: expit(a),
    "softplus": lambda a, aux: np.logaddexp(0.0, a),
    "pow": lambda a, aux: a ** aux,
    "sum": lambda a, aux: np.asarray(a.sum()),
    "matmul": lambda a, b, aux: a @ b,
    "reshape": lambda a, aux: a.reshape(aux),
    "gather": lambda a, aux: a[aux],
    "scatter_add": _scatter_add_forward,
}


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    aux: Any = None
    needs_grad: bool = False


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _coerce(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ContractError("operands live on different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape._apply("add", (self, self._coerce(other)))

    def __radd__(self, other):
        return self._coerce(other) + self

    def __sub__(self, other):
        return self.tape._apply("sub", (self, self._coerce(other)))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        return self.tape._apply("mul", (self, self._coerce(other)))

    def __rmul__(self, other):
        return self._coerce(other) * self

    def __truediv__(self, other):
        return self.tape._apply("div", (self, self._coerce(other)))

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __matmul__(self, other):
        return self.tape._apply("matmul", (self, self._coerce(other)))

    def __pow__(self, exponent):
        return self.tape._apply("pow", (self,), aux=float(exponent))

    def __neg__(self):
        return self.tape._apply("neg", (self,))

    def exp(self):
        return self.tape._apply("exp", (self,))

    def log(self):
        return self.tape._apply("log", (self,))

    def sigmoid(self):
        return self.tape._apply("sigmoid", (self,))

    def softplus(self):
        return self.tape._apply("softplus", (self,))

    def shifted_softplus(self):
        """ln(0.5 e^x + 0.5); smooth, zero at zero."""
        return self.softplus() - _LN2

    def sum(self):
        return self.tape._apply("sum", (self,))

    def reshape(self, shape):
        return self.tape._apply("reshape", (self,), aux=tuple(shape))


def gather(v: Var, index: np.ndarray) -> Var:
    """Index rows of ``v``: out[k] = v[index[k]]."""
    return v.tape._apply("gather", (v,), aux=np.asarray(index, dtype=np.intp))


def scatter_add(v: Var, index: np.ndarray, size: int) -> Var:
    """Accumulate rows of ``v`` into a zero array of leading dim ``size``."""
    aux = (np.asarray(index, dtype=np.intp), int(size))
    return v.tape._apply("scatter_add", (v,), aux=aux)


class Tape:
    """Append-only record of primitive operations and their values."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_names: dict[int, str] = {}

    def leaf(self, value, name: str | None = None) -> Var:
        """A differentiable input. Named leaves appear in backward's result."""
        idx = len(self.nodes)
        self.nodes.append(_Node("leaf", (), _as_array(value), name, needs_grad=True))
        if name is not None:
            if name in self._leaf_names.values():
                raise ContractError(f"duplicate leaf name {name!r}")
            self._leaf_names[idx] = name
        return Var(self, idx)

    def constant(self, value) -> Var:
        """A non-differentiable input; gradients never flow into it."""
        idx = len(self.nodes)
        self.nodes.append(_Node("const", (), _as_array(value)))
        return Var(self, idx)

    def _apply(self, op: str, parents: tuple[Var, ...], aux=None) -> Var:
        pvals = tuple(self.nodes[p.idx].value for p in parents)
        value = _FORWARD[op](*pvals, aux)
        idx = len(self.nodes)
        needs = any(self.nodes[p.idx].needs_grad for p in parents)
        self.nodes.append(_Node(op, tuple(p.idx for p in parents), _as_array(value), aux, needs))
        return Var(self, idx)

    def replay(self) -> float:
        """Recompute every non-leaf value; return the max relative deviation."""
        values: list[np.ndarray] = []
        worst = 0.0
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                values.append(node.value)
                continue
            new = _as_array(_FORWARD[node.op](*(values[p] for p in node.parents), node.aux))
            denom = np.maximum(np.abs(node.value), 1e-300)
            dev = np.abs(new - node.value) / denom
            if dev.size:
                worst = max(worst, float(dev.max()))
            values.append(new)
        return worst


def backward(tape: Tape, output: Var) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of a scalar output.

    Returns one gradient array per *named* leaf (zeros when the leaf does
    not reach the output). Raises :class:`NumericError` naming the
    primitive if a non-finite adjoint appears.
    """
    out_node = tape.nodes[output.idx]
    if out_node.value.size != 1:
        raise ContractError("backward requires a scalar output node")
    if not np.all(np.isfinite(out_node.value)):
        raise NumericError(f"non-finite value at primitive {out_node.op!r}")

    adj: list[np.ndarray | None] = [None] * len(tape.nodes)
    adj[output.idx] = np.ones_like(out_node.value)

    for idx in range(output.idx, -1, -1):
        g = adj[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        if not node.needs_grad:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at primitive {node.op!r}")
        if node.op in ("leaf", "const"):
            continue
        _accumulate(tape, node, g, adj)

    grads: dict[str, np.ndarray] = {}
    for idx, name in tape._leaf_names.items():
        g = adj[idx]
        grads[name] = np.zeros_like(tape.nodes[idx].value) if g is None else g
    return grads


def _add_into(adj: list, idx: int, g: np.ndarray) -> None:
    adj[idx] = g if adj[idx] is None else adj[idx] + g


def _accumulate(tape: Tape, node: _Node, g: np.ndarray, adj: list) -> None:
    op, parents, aux = node.op, node.parents, node.aux
    pv = [tape.nodes[p].value for p in parents]
    needs = [tape.nodes[p].needs_grad for p in parents]

    if op == "add":
        if needs[0]:
            _add_into(adj, parents[0], _unbroadcast(g, pv[0].shape))
        if needs[1]:
            _add_into(adj, parents[1], _unbroadcast(g, pv[1].shape))
    elif op == "sub":
        if needs[0]:
            _add_into(adj, parents[0], _unbroadcast(g, pv[0].shape))
        if needs[1]:
            _add_into(adj, parents[1], _unbroadcast(-g, pv[1].shape))
    elif op == "mul":
        if needs[0]:
            _add_into(adj, parents[0], _unbroadcast(g * pv[1], pv[0].shape))
        if needs[1]:
            _add_into(adj, parents[1], _unbroadcast(g * pv[0], pv[1].shape))
    elif op == "div":
        if needs[0]:
            _add_into(adj, parents[0], _unbroadcast(g / pv[1], pv[0].shape))
        if needs[1]:
            _add_into(adj, parents[1], _unbroadcast(-g * pv[0] / (pv[1] * pv[1]), pv[1].shape))
    elif op == "neg":
        _add_into(adj, parents[0], -g)
    elif op == "exp":
        _add_into(adj, parents[0], g * node.value)
    elif op == "log":
        _add_into(adj, parents[0], g / pv[0])
    elif op == "sigmoid":
        _add_into(adj, parents[0], g * node.value * (1.0 - node.value))
    elif op == "softplus":
        _add_into(adj, parents[0], g * expit(pv[0]))
    elif op == "pow":
        _add_into(adj, parents[0], g * aux * pv[0] ** (aux - 1.0))
    elif op == "sum":
        _add_into(adj, parents[0], np.broadcast_to(g, pv[0].shape))
    elif op == "reshape":
        _add_into(adj, parents[0], g.reshape(pv[0].shape))
    elif op == "gather":
        out = np.zeros_like(pv[0])
        np.add.at(out, aux, g)
        _add_into(adj, parents[0], out)
    elif op == "scatter_add":
        index, _ = aux
        _add_into(adj, parents[0], g[index])
    elif op == "matmul":
        a, b = pv
        if needs[0]:
            if b.ndim == 1:
                ga = np.outer(g, b) if a.ndim == 2 else g * b
            else:
                ga = g @ b.T if g.ndim >= 1 else g * b
            _add_into(adj, parents[0], _unbroadcast(np.asarray(ga), a.shape))
        if needs[1]:
            if a.ndim == 1:
                gb = np.outer(a, g) if b.ndim == 2 else g * a
            else:
                gb = a.T @ g
            _add_into(adj, parents[1], _unbroadcast(np.asarray(gb), b.shape))
    else:  # pragma: no cover - every recorded op has a rule
        raise NumericError(f"no backward rule for primitive {op!r}")


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic: np.ndarray,
    epsilon: float = 1e-5,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(|analytic|, 1e-8).

    ``f`` must be evaluable at ``params +- epsilon * e_i`` for every
    coordinate; a NaN at a probe point raises :class:`NumericError`.
    """
    params = _as_array(params).copy()
    analytic = _as_array(analytic)
    if analytic.shape != params.shape:
        raise ContractError("analytic gradient shape does not match params")
    worst = 0.0
    flat = params.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(f(params))
        flat[i] = orig - epsilon
        fm = float(f(params))
        flat[i] = orig
        if np.isnan(fp) or np.isnan(fm):
            raise NumericError(f"objective returned NaN at probe coordinate {i}")
        fd = (fp - fm) / (2.0 * epsilon)
        a = float(analytic.ravel()[i])
        worst = max(worst, abs(a - fd) / max(abs(a), 1e-8))
    return worst
