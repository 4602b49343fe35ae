"""Dense tensors with reverse-mode differentiation.

A Tensor wraps a contiguous numpy array (float32 or complex64; scalar
reduction results are kept in float64 so loss values are accumulated in
double precision even though storage is single precision). Operations from
:mod:`ttt_recon.diffcore.ops` record a tape; ``backward`` replays it in
reverse topological order.

Complex tensors are differentiated by treating the real and imaginary
channels as independent real variables: the gradient of a complex tensor is
stored as a complex array whose real/imag parts are the partials with
respect to the real/imag parts of the data.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError

REAL = np.float32
COMPLEX = np.complex64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _normalize(data, keep_dtype: bool) -> np.ndarray:
    arr = np.asarray(data)
    if not keep_dtype:
        arr = arr.astype(COMPLEX if np.iscomplexobj(arr) else REAL, copy=False)
    if arr.ndim > 0 and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, *, _keep_dtype: bool = False):
        self.data = _normalize(data, _keep_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def clone(self) -> "Tensor":
        t = Tensor(self.data.copy(), self.requires_grad, _keep_dtype=True)
        return t

    def detach(self) -> "Tensor":
        return Tensor(self.data, False, _keep_dtype=True)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------
    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of this (scalar) tensor into the graph leaves."""
        if seed is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        order = _toposort(self)
        acc: dict[int, np.ndarray] = {id(self): np.asarray(seed)}
        for node in order:
            g = acc.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not _needs_grad(parent):
                        continue
                    pg = _coerce_grad(pg, parent.data)
                    prev = acc.get(id(parent))
                    acc[id(parent)] = pg if prev is None else prev + pg
            elif node.requires_grad:
                gt = _coerce_grad(g, node.data)
                if node.grad is None:
                    node.grad = Tensor(gt.copy(), _keep_dtype=True)
                else:
                    node.grad.data += gt


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._vjp is not None


def _coerce_grad(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    g = np.asarray(g)
    if g.dtype != like.dtype:
        if np.iscomplexobj(like):
            g = g.astype(COMPLEX)
        elif np.iscomplexobj(g):
            raise ContractError("complex gradient flowed into a real tensor")
        else:
            g = g.astype(like.dtype)
    if g.shape != like.shape:
        g = np.broadcast_to(g, like.shape).copy()
    return g


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), iterative to spare the stack."""
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    order.reverse()
    return order


def record(
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
) -> Tensor:
    """Create an op output, attaching tape state when gradients are live."""
    out = Tensor(out_data, _keep_dtype=True)
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
        out.requires_grad = True
    return out


def value_and_grad(loss_fn: Callable[[list[Tensor]], Tensor], params: list[Tensor]):
    """Evaluate ``loss_fn(params)`` and return (scalar value, gradients).

    The loss must be a real scalar composed of registered primitives;
    gradients are exact reverse-mode, with the l1 subgradient convention
    sign(0) = 0. Parameters unused by the loss get zero gradients.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = loss_fn(params)
    if not isinstance(out, Tensor):
        raise ContractError("loss_fn must return a Tensor")
    if out.data.size != 1 or np.iscomplexobj(out.data):
        raise ContractError("loss_fn must return a real scalar")
    out.backward()
    value = out.item()
    grads = [p.grad if p.grad is not None else Tensor(np.zeros_like(p.data), _keep_dtype=True) for p in params]
    return value, grads


def inner(a: np.ndarray | Tensor, b: np.ndarray | Tensor) -> float:
    """Real inner product treating complex arrays as interleaved real pairs."""
    av = a.data if isinstance(a, Tensor) else np.asarray(a)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b)
    if np.iscomplexobj(av) != np.iscomplexobj(bv):
        raise ContractError("inner product requires matching real/complex kinds")
    if np.iscomplexobj(av):
        return float(np.sum(av.real.astype(np.float64) * bv.real) + np.sum(av.imag.astype(np.float64) * bv.imag))
    return float(np.sum(av.astype(np.float64) * bv))
