"""Dense float64 tensors with a small reverse-mode differentiation tape.

Every operation that touches a tensor requiring gradients records a node
holding its parents and a closure mapping the output gradient to parent
gradients.  Nodes created while a :class:`Tape` is active are registered on
it, so a caller can drop a whole frame's graph with :meth:`Tape.release`
once its backward pass is done.
"""

from __future__ import annotations

import contextvars
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericalError


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "tempoflow_active_tape", default=None
)

# Incremented whenever masked_nmse sees an empty mask.
empty_mask_warnings = 0
_warn_lock = threading.Lock()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        if not np.all(np.isfinite(data)):
            raise NumericalError("operation produced non-finite values")
        out.data = data
        out.grad = None
        track = [p for p in parents if p.requires_grad]
        out.requires_grad = bool(track)
        if track:
            out._parents = tuple(parents)
            out._backward = backward
            tape = _active_tape.get()
            if tape is not None:
                tape._nodes.append(out)
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


class Tape:
    """Owns the nodes recorded while it is active.

    ``Tape.live`` counts tapes that were entered and not yet released;
    ``Tape.peak`` is the high-water mark since the last ``reset_stats``.
    """

    live = 0
    peak = 0
    _lock = threading.Lock()

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._token = None
        self._released = True

    def __enter__(self) -> "Tape":
        with Tape._lock:
            Tape.live += 1
            Tape.peak = max(Tape.peak, Tape.live)
        self._released = False
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        # the graph stays alive until release() so backward can still run
        return False

    @property
    def size(self) -> int:
        return len(self._nodes)

    def release(self) -> None:
        for node in self._nodes:
            node._parents = ()
            node._backward = None
        self._nodes.clear()
        if not self._released:
            self._released = True
            with Tape._lock:
                Tape.live -= 1

    @classmethod
    def reset_stats(cls) -> None:
        with cls._lock:
            cls.peak = cls.live


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.array(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.data.ndim == 0
    return np.ndim(x) == 0


def _check_pair(a: Tensor, b) -> None:
    if _is_scalar(b):
        return
    if a.shape != _as_tensor(b).shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {_as_tensor(b).shape}")


def _reduce_to(g: np.ndarray, target: Tensor) -> np.ndarray:
    # gradient flowing into a 0-d operand broadcast against a full tensor
    if target.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def add(a: Tensor, b) -> Tensor:
    _check_pair(a, b)
    b = _as_tensor(b)
    return Tensor._from_op(
        a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b))
    )


def sub(a: Tensor, b) -> Tensor:
    _check_pair(a, b)
    b = _as_tensor(b)
    return Tensor._from_op(
        a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b))
    )


def mul(a: Tensor, b) -> Tensor:
    _check_pair(a, b)
    b = _as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._from_op(
        ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b))
    )


def div(a: Tensor, b) -> Tensor:
    _check_pair(a, b)
    b = _as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ContractError("division by zero")
    return Tensor._from_op(
        ad / bd,
        (a, b),
        lambda g: (_reduce_to(g / bd, a), _reduce_to(-g * ad / (bd * bd), b)),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def elementwise(op_kind: str, a: Tensor, b) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op_kind not in ops:
        raise ContractError(f"unknown op_kind {op_kind!r}")
    return ops[op_kind](a, b)


def tanh_act(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("sqrt needs strictly positive input")
    y = np.sqrt(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * 0.5 / y,))


def sin(a: Tensor) -> Tensor:
    c = np.cos(a.data)
    return Tensor._from_op(np.sin(a.data), (a,), lambda g: (g * c,))


def arccos(a: Tensor) -> Tensor:
    x = a.data
    if np.any(np.abs(x) >= 1.0):
        raise ContractError("arccos derivative undefined at |x| >= 1")
    return Tensor._from_op(
        np.arccos(x), (a,), lambda g: (-g / np.sqrt(1.0 - x * x),)
    )


def clamp_st(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside (lo, hi)."""
    inside = (a.data > lo) & (a.data < hi)
    return Tensor._from_op(
        np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),)
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def dot(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b)
    ad, bd = a.data, b.data
    return Tensor._from_op(
        np.asarray(np.dot(ad.ravel(), bd.ravel())), (a, b), lambda g: (g * bd, g * ad)
    )


def full_like_plane(value: float, shape) -> Tensor:
    return Tensor(np.full(shape, float(value)))


def conv2d(x: Tensor, kernel) -> Tensor:
    """3x3 cross-correlation with zero padding 1; differentiable in ``x`` only."""
    k = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel, dtype=np.float64)
    if x.data.ndim != 3:
        raise ContractError(f"conv2d input must be [C,H,W], got {x.shape}")
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ContractError(f"conv2d kernel must be [Co,Ci,3,3], got {k.shape}")
    c_in, h, w = x.shape
    if k.shape[1] != c_in:
        raise ContractError(f"kernel expects {k.shape[1]} input channels, got {c_in}")
    c_out = k.shape[0]
    xp = np.zeros((c_in, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x.data
    out = np.zeros((c_out, h, w))
    # fixed accumulation order (i, ky, kx) so results match a scalar loop bit-for-bit;
    # overflow surfaces as NumericalError in _from_op
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(c_in):
            for ky in range(3):
                for kx in range(3):
                    out += k[:, i, ky, kx, None, None] * xp[i, ky:ky + h, kx:kx + w]

    def _back(g):
        gp = np.zeros((c_in, h + 2, w + 2))
        for ky in range(3):
            for kx in range(3):
                gp[:, ky:ky + h, kx:kx + w] += np.tensordot(k[:, :, ky, kx], g, axes=(0, 0))
        return (gp[:, 1:-1, 1:-1],)

    return Tensor._from_op(out, (x,), _back)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_channels needs at least one part")
    spatial = parts[0].shape[1:]
    for p in parts:
        if p.data.ndim != 3 or p.shape[1:] != spatial:
            raise ContractError("concat_channels parts must share H, W")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def _back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=0), parts, _back)


def gather_pixels(frame: Tensor, rows: np.ndarray, cols: np.ndarray, valid: np.ndarray) -> Tensor:
    """out[c, p] = frame[c, rows[p], cols[p]] where valid[p], else 0."""
    c, h, w = frame.shape
    r = np.where(valid, rows, 0)
    q = np.where(valid, cols, 0)
    out = frame.data[:, r, q] * valid

    def _back(g):
        gf = np.zeros((c, h * w))
        flat = (r * w + q)[valid]
        for ch in range(c):
            np.add.at(gf[ch], flat, g[ch][valid])
        return (gf.reshape(c, h, w),)

    return Tensor._from_op(out, (frame,), _back)


def masked_nmse(a: Tensor, b, mask: np.ndarray) -> Tensor:
    """Squared error over masked pixels divided by the number of masked scalars."""
    global empty_mask_warnings
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    mask = np.asarray(mask, dtype=bool)
    if a.data.ndim != 3 or mask.shape != a.shape[1:]:
        raise ContractError("masked_nmse expects [C,H,W] tensors and an [H,W] mask")
    count = int(mask.sum()) * a.shape[0]
    if count == 0:
        with _warn_lock:
            empty_mask_warnings += 1
        return Tensor._from_op(
            np.asarray(0.0), (a, b), lambda g: (np.zeros(a.shape), np.zeros(b.shape))
        )
    diff = (a.data - b.data) * mask
    val = np.asarray((diff * diff).sum() / count)

    def _back(g):
        ga = g * 2.0 * diff / count
        return ga, -ga

    return Tensor._from_op(val, (a, b), _back)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros(param.shape), np.zeros(param.shape), **hyper)


def adam_step(param: Tensor, state: AdamState) -> None:
    """In-place bias-corrected Adam update; the caller zeroes ``param.grad``."""
    if param.grad is None:
        raise ContractError("adam_step called on a parameter without a gradient")
    if state.first_moment.shape != param.shape:
        raise ContractError("Adam state does not match parameter shape")
    g = param.grad
    state.step_count += 1
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (g * g)
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    m_hat = state.first_moment / bc1
    v_hat = state.second_moment / bc2
    param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out
