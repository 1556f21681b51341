"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a closure that maps the output gradient to parent
gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order. Leaf gradients accumulate additively, so callers must
call :meth:`Tensor.zero_grad` (or :func:`zero_grads`) once per iteration.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

_GRAD_ENABLED = True

# largest float64 strictly below 1.0
_ONE_MINUS = float(np.nextafter(1.0, 0.0))
_TINY = float(np.finfo(np.float64).tiny)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_spent")
    # make ndarray <op> Tensor dispatch to the Tensor reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, name or "tensor constructor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._spent = False

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- differentiation ----------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        The graph is released afterwards; a second call on the same graph
        raises ContractError instead of silently double counting.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._spent:
            raise ContractError("backward() already ran on this graph; re-run the forward pass")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        order = _toposort(self)
        for node in order:
            if not node.is_leaf:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            g = node.grad
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"{node._op}: gradient shape {pg.shape} != parent shape {parent.shape}")
                if not np.isfinite(pg).all():
                    label = parent.name or parent._op
                    raise NumericError(f"non-finite gradient flowing from {node._op} into {label}")
                parent.grad = pg if parent.grad is None else parent.grad + pg
        for node in order:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._spent = True


def _raise_not_scalar(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


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
        if node._spent:
            raise ContractError("graph contains tensors already consumed by backward(); re-run the forward pass")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._spent = False
    out._op = op
    need = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = need
    if need:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    data = a.data ** exponent
    return _result(data, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,), "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    data = np.sqrt(a.data)

    def backward(g):
        safe = np.where(data > 0, data, 1.0)
        return (np.where(data > 0, 0.5 * g / safe, 0.0),)

    return _result(data, (a,), backward, "sqrt")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(data, (a,), lambda g: (g * inside,), "clip")


# -- activations ---------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) even for large inputs."""
    a = as_tensor(a)
    s = np.clip(expit(a.data), _TINY, _ONE_MINUS)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    t = np.clip(np.tanh(a.data), -_ONE_MINUS, _ONE_MINUS)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


# -- reductions and shape ops -------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _result(data, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    data = a.data[index]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(data, copy=True), (a,), backward, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather along axis 0; repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    data = a.data[indices]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return _result(data, (a,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, ts, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in ts]}") from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(data, ts, backward, "stack")


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis; subgradient 0 at the origin."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (scale[..., None] * a.data,)

    return _result(n, (a,), backward, "row_norm")


# -- layers --------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Shared per-row affine map: ``out[..., :] = x[..., :] @ weight + bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    data = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(data, parents, backward, "linear")


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise DimensionError(
            f"conv3d: extent (N + 2*padding - k)/stride + 1 = ({n} + {2 * padding} - {k})/{stride} + 1 "
            "is not a positive integer")
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int]:
    """(B,C,D,D,D) padded volume -> (B*O^3, C*k^3) patch matrix."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    o = win.shape[2]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b * o ** 3, c * k ** 3)
    return cols, o


def _col2im(cols_t: np.ndarray, b: int, c: int, o: int, k: int, stride: int, full: int) -> np.ndarray:
    """Adjoint of _im2col, taking the patch matrix transposed: (C*k^3, B*O^3) -> (B,C,full^3) view."""
    patches = cols_t.reshape(c, k, k, k, b, o, o, o)
    vol = np.zeros((c, b, full, full, full))
    reach = stride * (o - 1) + 1
    for i in range(k):
        for j in range(k):
            for l in range(k):
                vol[:, :, i:i + reach:stride, j:j + reach:stride, l:l + reach:stride] += patches[:, i, j, l]
    return vol.transpose(1, 0, 2, 3, 4)


def _check_cube(x: Tensor, what: str) -> None:
    if x.ndim != 5 or not (x.shape[2] == x.shape[3] == x.shape[4]):
        raise DimensionError(f"{what}: expected (B, C, N, N, N) input, got {x.shape}")


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (B,C_in,N,N,N) volume with a (C_out,C_in,k,k,k) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_cube(x, "conv3d")
    if kernel.ndim != 5 or kernel.shape[1] != x.shape[1] or len(set(kernel.shape[2:])) != 1:
        raise DimensionError(f"conv3d: kernel {kernel.shape} incompatible with input {x.shape}")
    b, cin, n = x.shape[0], x.shape[1], x.shape[2]
    cout, k = kernel.shape[0], kernel.shape[2]
    o = _out_extent(n, k, stride, padding)
    pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    xp = np.pad(x.data, pad) if padding else x.data
    cols, o2 = _im2col(xp, k, stride)
    assert o2 == o
    kmat = kernel.data.reshape(cout, cin * k ** 3)
    out = (cols @ kmat.T).reshape(b, o, o, o, cout).transpose(0, 4, 1, 2, 3)

    def backward(g):
        gm_t = g.transpose(1, 0, 2, 3, 4).reshape(cout, -1)
        gk = (gm_t @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            full = n + 2 * padding
            vol = _col2im(kmat.T @ gm_t, b, cin, o, k, stride, full)
            gx = vol[:, :, padding:padding + n, padding:padding + n, padding:padding + n] if padding else vol
            gx = np.ascontiguousarray(gx)
        return gx, gk

    return _result(np.ascontiguousarray(out), (x, kernel), backward, "conv3d")


def conv3d_transposed(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv3d` for the same kernel array and geometry.

    ``kernel`` has shape (C_in, C_out, k, k, k); the output extent is
    ``(M - 1) * stride - 2 * padding + k``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_cube(x, "conv3d_transposed")
    if kernel.ndim != 5 or kernel.shape[0] != x.shape[1] or len(set(kernel.shape[2:])) != 1:
        raise DimensionError(f"conv3d_transposed: kernel {kernel.shape} incompatible with input {x.shape}")
    b, cin, m = x.shape[0], x.shape[1], x.shape[2]
    cout, k = kernel.shape[1], kernel.shape[2]
    full = (m - 1) * stride + k
    n_out = full - 2 * padding
    if n_out <= 0:
        raise DimensionError(f"conv3d_transposed: non-positive output extent {n_out}")
    kmat = kernel.data.reshape(cin, cout * k ** 3)
    xm_t = x.data.transpose(1, 0, 2, 3, 4).reshape(cin, -1)
    vol = _col2im(kmat.T @ xm_t, b, cout, m, k, stride, full)
    out = vol[:, :, padding:padding + n_out, padding:padding + n_out, padding:padding + n_out] if padding else vol

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else g
        gcols, o = _im2col(gp, k, stride)
        assert o == m
        gx = None
        if x.requires_grad:
            gx = (gcols @ kmat.T).reshape(b, m, m, m, cin).transpose(0, 4, 1, 2, 3)
            gx = np.ascontiguousarray(gx)
        gk = (xm_t @ gcols).reshape(kernel.shape) if kernel.requires_grad else None
        return gx, gk

    return _result(np.ascontiguousarray(out), (x, kernel), backward, "conv3d_transposed")


def grid_max_pool(features: Tensor, cells: np.ndarray, n_cells: int) -> Tensor:
    """Max-reduce per-point features into cells.

    features: (B, P, C); cells: (B, P) integer cell ids in [0, n_cells).
    Returns (B, C, n_cells). Empty cells hold zeros. Tied maxima share the
    gradient equally.
    """
    features = as_tensor(features)
    if features.ndim != 3:
        raise DimensionError(f"grid_max_pool: expected (B, P, C) features, got {features.shape}")
    cells = np.asarray(cells, dtype=np.intp)
    if cells.shape != features.shape[:2]:
        raise DimensionError(f"grid_max_pool: cells {cells.shape} vs features {features.shape}")
    b, p, c = features.shape
    key = (np.arange(b)[:, None] * n_cells + cells).reshape(-1)
    order = np.argsort(key, kind="stable")
    skey = key[order]
    feats = features.data.reshape(b * p, c)[order]
    starts = np.flatnonzero(np.r_[True, skey[1:] != skey[:-1]])
    seg_max = np.maximum.reduceat(feats, starts, axis=0)
    seg_keys = skey[starts]
    pooled = np.zeros((b * n_cells, c))
    pooled[seg_keys] = seg_max
    data = pooled.reshape(b, n_cells, c).transpose(0, 2, 1)

    def backward(g):
        seg_id = np.cumsum(np.r_[True, skey[1:] != skey[:-1]]) - 1
        hit = feats == seg_max[seg_id]
        counts = np.add.reduceat(hit.astype(np.float64), starts, axis=0)
        gseg = g.transpose(0, 2, 1).reshape(b * n_cells, c)[seg_keys] / counts
        gsorted = hit * gseg[seg_id]
        gfeat = np.empty_like(gsorted)
        gfeat[order] = gsorted
        return (gfeat.reshape(b, p, c),)

    return _result(np.ascontiguousarray(data), (features,), backward, "grid_max_pool")


# -- utilities -----------------------------------------------------------------

def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def numerical_grad(fn: Callable[[], Tensor], wrt: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``wrt``."""
    out = np.zeros_like(wrt.data)
    flat = wrt.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
              floor: float = 1e-6) -> float:
    """Worst relative error between backward() and central differences over ``inputs``."""
    for t in inputs:
        t.zero_grad()
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numerical_grad(fn, t, step)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst
