"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation builds an implicit graph of ``Tensor`` nodes;
``backward`` linearizes the graph reachable from a scalar loss into a
:class:`Tape` and sweeps it once in reverse. Gradients accumulate additively,
so callers zero them between optimizer steps.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "tanh",
    "softmax_lastdim",
    "absolute",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "swapaxes",
    "gather_rows",
    "temporal_conv",
    "backward",
    "linearize",
    "grad_check",
    "GradCheckReport",
]

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "flowcast_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / inference)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _recording() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    """A dense multi-dimensional float64 array that can participate in autodiff.

    ``grad`` is populated by :func:`backward` for every tensor with
    ``requires_grad`` reachable from the loss, and always has the same shape
    as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_rule")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _track(*tensors: Tensor) -> bool:
    return _recording() and any(t.requires_grad for t in tensors)


def _attach(out: Tensor, parents: tuple[Tensor, ...], rule) -> Tensor:
    out._parents = parents
    out._backward_rule = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# Backward rules live at module level (looked up by name at call time) so a
# test harness can hook or corrupt an individual rule.

def _matmul_backward(a: np.ndarray, b: np.ndarray, dy: np.ndarray):
    da = _unbroadcast(dy @ b.swapaxes(-1, -2), a.shape)
    db = _unbroadcast(a.swapaxes(-1, -2) @ dy, b.shape)
    return da, db


def _add_backward(a_shape, b_shape, dy):
    return _unbroadcast(dy, a_shape), _unbroadcast(dy, b_shape)


def _sub_backward(a_shape, b_shape, dy):
    return _unbroadcast(dy, a_shape), _unbroadcast(-dy, b_shape)


def _mul_backward(a: np.ndarray, b: np.ndarray, dy):
    return _unbroadcast(dy * b, a.shape), _unbroadcast(dy * a, b.shape)


def _relu_backward(x: np.ndarray, dy):
    # gradient is 0 at exactly 0 (subgradient convention)
    return (dy * (x > 0.0),)


def _sigmoid_backward(y: np.ndarray, dy):
    return (dy * y * (1.0 - y),)


def _tanh_backward(y: np.ndarray, dy):
    return (dy * (1.0 - y * y),)


def _softmax_backward(y: np.ndarray, dy):
    inner = (dy * y).sum(axis=-1, keepdims=True)
    return (y * (dy - inner),)


def _abs_backward(x: np.ndarray, dy):
    return (dy * np.sign(x),)


def _gather_backward(rows: int, table_shape, idx: np.ndarray, dy):
    grad = np.zeros(table_shape, dtype=np.float64)
    np.add.at(grad, idx.reshape(-1), dy.reshape(-1, table_shape[-1]))
    return (grad,)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the two trailing axes.

    Leading axes broadcast; backward accumulates ``dA = dC·Bᵀ`` and
    ``dB = Aᵀ·dC`` summed back over broadcast axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc
    out = Tensor(data, requires_grad=_track(a, b))
    if out.requires_grad:
        _attach(out, (a, b), lambda dy: _matmul_backward(a.data, b.data, dy))
    return out


def _elementwise(a, b, fwd, rule_factory) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"shapes not broadcastable: {a.shape} vs {b.shape}") from exc
    out = Tensor(data, requires_grad=_track(a, b))
    if out.requires_grad:
        _attach(out, (a, b), rule_factory(a, b))
    return out


def add(a, b) -> Tensor:
    return _elementwise(
        a, b, np.add, lambda a, b: lambda dy: _add_backward(a.shape, b.shape, dy)
    )


def sub(a, b) -> Tensor:
    return _elementwise(
        a, b, np.subtract, lambda a, b: lambda dy: _sub_backward(a.shape, b.shape, dy)
    )


def mul(a, b) -> Tensor:
    return _elementwise(
        a, b, np.multiply, lambda a, b: lambda dy: _mul_backward(a.data, b.data, dy)
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=_track(x))
    if out.requires_grad:
        _attach(out, (x,), lambda dy: _relu_backward(x.data, dy))
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # two-branch form avoids overflow for large |x|
    data = np.where(
        x.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x.data))),
        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
    )
    out = Tensor(data, requires_grad=_track(x))
    if out.requires_grad:
        _attach(out, (x,), lambda dy: _sigmoid_backward(out.data, dy))
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.tanh(x.data), requires_grad=_track(x))
    if out.requires_grad:
        _attach(out, (x,), lambda dy: _tanh_backward(out.data, dy))
    return out


def softmax_lastdim(x) -> Tensor:
    """Stabilized softmax over the last axis; each slice sums to 1."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    data = ex / ex.sum(axis=-1, keepdims=True)
    out = Tensor(data, requires_grad=_track(x))
    if out.requires_grad:
        _attach(out, (x,), lambda dy: _softmax_backward(out.data, dy))
    return out


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.abs(x.data), requires_grad=_track(x))
    if out.requires_grad:
        _attach(out, (x,), lambda dy: _abs_backward(x.data, dy))
    return out


def tensor_sum(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(), requires_grad=_track(x))
    if out.requires_grad:
        _attach(out, (x,), lambda dy: (np.broadcast_to(dy, x.shape).astype(np.float64),))
    return out


def tensor_mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    out = Tensor(x.data.mean(), requires_grad=_track(x))
    if out.requires_grad:
        _attach(out, (x,), lambda dy: (np.broadcast_to(dy / n, x.shape).astype(np.float64),))
    return out


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(n) for n in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    out = Tensor(data, requires_grad=_track(x))
    if out.requires_grad:
        old = x.shape
        _attach(out, (x,), lambda dy: (dy.reshape(old),))
    return out


def swapaxes(x, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.swapaxes(axis1, axis2), requires_grad=_track(x))
    if out.requires_grad:
        _attach(out, (x,), lambda dy: (dy.swapaxes(axis1, axis2),))
    return out


def gather_rows(table, indices) -> Tensor:
    """Look up rows of a 2-d table; backward scatter-adds into the table."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"row index out of range [0, {table.shape[0]}): {int(idx.min())}..{int(idx.max())}"
        )
    out = Tensor(table.data[idx], requires_grad=_track(table))
    if out.requires_grad:
        _attach(
            out,
            (table,),
            lambda dy: _gather_backward(table.shape[0], table.shape, idx, dy),
        )
    return out


def temporal_conv(x, kernel, out_len: int, out_feat: int) -> Tensor:
    """Per-node dense linear map from a (time, feature) block to another.

    ``x`` has trailing axes (t_in, f_in); the kernel maps the flattened block
    to (out_len, out_feat). Realizes every "1D convolution" of the model.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim < 2:
        raise ShapeError(f"temporal_conv input needs >=2 axes, got {x.shape}")
    t_in, f_in = x.shape[-2], x.shape[-1]
    expected = (t_in * f_in, out_len * out_feat)
    if kernel.shape != expected:
        raise ShapeError(
            f"temporal_conv kernel shape {kernel.shape} inconsistent with "
            f"{(t_in, f_in)} -> {(out_len, out_feat)}; expected {expected}"
        )
    flat = reshape(x, x.shape[:-2] + (t_in * f_in,))
    # promote to a matrix so matmul treats the flattened block as columns
    squeeze = flat.ndim == 1
    if squeeze:
        flat = reshape(flat, (1, t_in * f_in))
    mixed = matmul(flat, kernel)
    if squeeze:
        mixed = reshape(mixed, (out_len * out_feat,))
    return reshape(mixed, mixed.shape[:-1] + (out_len, out_feat))


@dataclass
class Tape:
    """Topological linearization of the graph below a root tensor.

    ``nodes`` lists every reachable tensor with parents before consumers;
    ``run`` sweeps it exactly once in reverse, accumulating gradients.
    """

    nodes: list[Tensor] = field(default_factory=list)

    @property
    def entries(self) -> list[tuple[Tensor, tuple[Tensor, ...]]]:
        """(output, inputs) pairs for the recorded operations, in order."""
        return [(n, n._parents) for n in self.nodes if n._backward_rule is not None]

    def run(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            rule = node._backward_rule
            if rule is None:
                continue
            parent_grads = rule(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def linearize(root: Tensor) -> Tape:
    """Depth-first post-order walk of the graph reachable from ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return Tape(order)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from a scalar loss."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    linearize(loss).run(loss)


@dataclass
class GradCheckReport:
    """Per-input maximum relative error between autodiff and central differences."""

    errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e <= self.tol for e in self.errors.values())

    def failures(self) -> list[tuple[str, float]]:
        return [(k, v) for k, v in self.errors.items() if not (np.isfinite(v) and v <= self.tol)]


def _relative_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float((np.abs(a - n) / denom).max(initial=0.0))


def grad_check(
    f: Callable[[], Tensor],
    inputs: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 1234,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f`` against central differences.

    ``f`` must be deterministic and close over the given tensors; the checker
    perturbs their ``data`` in place. The output is reduced to a scalar with a
    fixed random projection so the whole Jacobian is exercised.
    """
    named = dict(inputs)
    rng = np.random.default_rng(seed)

    out = f()
    weights = Tensor(rng.standard_normal(out.shape))

    def scalar_from(t: Tensor) -> Tensor:
        return tensor_sum(mul(t, weights))

    for t in named.values():
        t.zero_grad()
    loss = scalar_from(f())
    backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in named.items()
    }

    errors: dict[str, float] = {}
    with no_grad():
        for name, t in named.items():
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h
                up = float((f().data * weights.data).sum())
                flat[i] = saved - h
                down = float((f().data * weights.data).sum())
                flat[i] = saved
                num_flat[i] = (up - down) / (2.0 * h)
            errors[name] = _relative_error(analytic[name], numeric)
    return GradCheckReport(errors=errors, tol=tol)
