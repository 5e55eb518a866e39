"""Reverse-mode differentiable array engine.

A ``Tensor`` wraps a numpy array plus an optional gradient.  Operations
build an implicit computation record (each output keeps references to its
parents and a closure propagating the chain rule); ``Tensor.backward``
walks that record in reverse topological order.  The engine is only as
general as the convolutional encoder and the contrastive loss require:
elementwise arithmetic with numpy broadcasting, reductions, 2-D matmul,
conv2d, pooling, softmax.

Training runs in single precision; gradient checks must run in double
(finite differences are not trustworthy in float32).
"""

from __future__ import annotations

import numpy as np

from soi import _kernels
from soi.errors import DomainError, NumericFault, ShapeError, ZeroNormError

_DEBUG_NUMERICS = False


def set_debug_numerics(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every committed op (off by default)."""
    global _DEBUG_NUMERICS
    _DEBUG_NUMERICS = bool(enabled)


def _committed(data: np.ndarray) -> np.ndarray:
    if _DEBUG_NUMERICS and not np.all(np.isfinite(data)):
        raise NumericFault("non-finite value produced by a tensor op")
    return data


class Tensor:
    """Dense n-d array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)  # materializes broadcast views
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    # -- autodiff machinery ----------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar loss to every reachable grad leaf.

        Leaves with ``requires_grad=False`` (e.g. the gradient-blocked target
        network) never receive a gradient; unreachable leaves keep grad None.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
                if _DEBUG_NUMERICS:
                    for p in node._parents:
                        if p.grad is not None and not np.all(np.isfinite(p.grad)):
                            raise NumericFault("non-finite gradient during backward")
                # interior grads are single-use; free them to cap peak memory
                node.grad = None
                node._backward = None
                node._parents = ()

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        return _elementwise(self, other, np.add, lambda a, b, g: (g, g))

    __radd__ = __add__

    def __mul__(self, other):
        return _elementwise(self, other, np.multiply, lambda a, b, g: (g * b, g * a))

    __rmul__ = __mul__

    def __sub__(self, other):
        return _elementwise(self, other, np.subtract, lambda a, b, g: (g, -g))

    def __rsub__(self, other):
        return (-self) + other

    def __truediv__(self, other):
        return _elementwise(self, other, np.divide, lambda a, b, g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return self ** -1.0 * other

    def __neg__(self):
        return self * -1.0

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        if p != int(p) and np.any(self.data < 0):
            raise DomainError("fractional power of a negative value")
        out = _make(np.power(self.data, p), (self,))
        if out.requires_grad:
            def bw():
                self._accum(out.grad * p * np.power(self.data, p - 1))
            out._backward = bw
        return out

    def relu(self) -> "Tensor":
        out = _make(np.maximum(self.data, 0), (self,))
        if out.requires_grad:
            mask = self.data > 0  # subgradient at 0 is 0
            def bw():
                self._accum(out.grad * mask)
            out._backward = bw
        return out

    def exp(self) -> "Tensor":
        out = _make(np.exp(self.data), (self,))
        if out.requires_grad:
            def bw():
                self._accum(out.grad * out.data)
            out._backward = bw
        return out

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise DomainError("log requires strictly positive inputs")
        out = _make(np.log(self.data), (self,))
        if out.requires_grad:
            def bw():
                self._accum(out.grad / self.data)
            out._backward = bw
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def bw():
                self._accum(_spread(out.grad, self.data.shape, axis, keepdims))
            out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _make(self.data.mean(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            count = self.data.size // out.data.size
            def bw():
                self._accum(_spread(out.grad, self.data.shape, axis, keepdims) / count)
            out._backward = bw
        return out

    # -- structure ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        if out.requires_grad:
            def bw():
                self._accum(out.grad.reshape(self.data.shape))
            out._backward = bw
        return out

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError("T is defined for 2-D tensors")
        out = _make(np.ascontiguousarray(self.data.T), (self,))
        if out.requires_grad:
            def bw():
                self._accum(out.grad.T)
            out._backward = bw
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        out = _make(y, (self,))
        if out.requires_grad:
            def bw():
                g = out.grad
                self._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))
            out._backward = bw
        return out

    def max_pool2d(self, ksize: int, stride: int | None = None) -> "Tensor":
        stride = ksize if stride is None else stride
        _check_pool(self.data.shape, ksize, stride)
        data, arg = _kernels.maxpool2d_forward(self.data, ksize, stride)
        out = _make(data, (self,))
        if out.requires_grad:
            shape = self.data.shape
            def bw():
                self._accum(_kernels.maxpool2d_backward(shape, ksize, stride, arg, out.grad))
            out._backward = bw
        return out

    def avg_pool2d(self, ksize: int, stride: int | None = None) -> "Tensor":
        stride = ksize if stride is None else stride
        _check_pool(self.data.shape, ksize, stride)
        out = _make(_kernels.avgpool2d_forward(self.data, ksize, stride), (self,))
        if out.requires_grad:
            shape = self.data.shape
            def bw():
                self._accum(_kernels.avgpool2d_backward(shape, ksize, stride, out.grad))
            out._backward = bw
        return out


# -- free functions -------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(_committed(data))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting introduced or expanded."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _elementwise(a: Tensor, b, fwd, grads) -> Tensor:
    # Non-Tensor operands stay raw so python scalars keep numpy's weak
    # promotion (a float32 graph must not silently become float64).
    bt = b if isinstance(b, Tensor) else None
    bval = b.data if bt is not None else b
    try:
        data = fwd(a.data, bval)
    except (ValueError, TypeError) as exc:
        raise ShapeError(str(exc)) from None
    parents = (a, bt) if bt is not None else (a,)
    out = _make(data, parents)
    if out.requires_grad:
        def bw():
            ga, gb = grads(a.data, bval, out.grad)
            if a.requires_grad:
                a._accum(_unbroadcast(ga, a.data.shape))
            if bt is not None and bt.requires_grad:
                bt._accum(_unbroadcast(gb, bt.data.shape))
        out._backward = bw
    return out


def _spread(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _check_pool(shape, ksize, stride):
    if len(shape) != 4:
        raise ShapeError("pooling expects a (B,C,H,W) tensor")
    h, w = shape[2], shape[3]
    if h < ksize or w < ksize or (h - ksize) % stride or (w - ksize) % stride:
        raise ShapeError(f"window {ksize}/stride {stride} does not tile {h}x{w}")


def topo_order(root: Tensor) -> list[Tensor]:
    """Computation record ending at ``root``: every node's inputs precede it."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def matmul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul is defined for 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape} do not align")
    out = _make(a.data @ b.data, (a, b))
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)
        out._backward = bw
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (B,C,H,W) with kernel (F,C,kh,kw)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects (B,C,H,W) input and (F,C,kh,kw) kernel")
    if x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {x.data.shape[1]}, kernel expects {kernel.data.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    _, _, h, w = x.data.shape
    _, _, kh, kw = kernel.data.shape
    for name, extent, k in (("height", h, kh), ("width", w, kw)):
        span = extent + 2 * padding - k
        if span < 0 or span % stride:
            raise ShapeError(f"non-integral output {name}: ({extent} + 2*{padding} - {k}) / {stride}")
    out = _make(_kernels.conv2d_forward(x.data, kernel.data, stride, padding), (x, kernel))
    if out.requires_grad:
        def bw():
            gx, gw = _kernels.conv2d_backward(
                x.data, kernel.data, stride, padding, out.grad,
                need_gx=x.requires_grad, need_gw=kernel.requires_grad,
            )
            if x.requires_grad:
                x._accum(gx)
            if kernel.requires_grad:
                kernel._accum(gw)
        out._backward = bw
    return out


def l2_normalize(v: Tensor, axis: int = -1) -> Tensor:
    """Scale to unit Euclidean norm along ``axis``; rejects zero vectors."""
    v = _as_tensor(v)
    norms = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if np.any(norms == 0):
        raise ZeroNormError("cannot normalize a zero-norm vector")
    sq = (v * v).sum(axis=axis, keepdims=True)
    return v / sq ** 0.5


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """dot(a,b) / (|a| |b|) for 1-D tensors; scalar in [-1, 1]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError("cosine_similarity expects two 1-D tensors of equal length")
    if not np.linalg.norm(a.data) or not np.linalg.norm(b.data):
        raise ZeroNormError("cosine similarity of a zero vector is undefined")
    dot = (a * b).sum()
    return dot / ((a * a).sum() ** 0.5 * (b * b).sum() ** 0.5)


def grad_check(fn, *inputs: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must map the given tensors to a scalar Tensor and be pure; run it
    in double precision (single-precision differences are dominated by
    rounding noise).  Per coordinate the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise DomainError("grad_check requires float64 inputs")
        t.zero_grad()
    out = fn(*inputs)
    if out.data.size != 1:
        raise ShapeError("grad_check target must be scalar; compose with sum()")
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        numeric = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(*inputs).data)
            flat[i] = orig - eps
            lo = float(fn(*inputs).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        worst = max(worst, float((np.abs(a - numeric) / denom).max()))
    return worst
