"""Reverse-mode automatic differentiation over numpy arrays.

Tape-based engine providing exactly the operations the distillation
pipeline needs: elementwise arithmetic, reductions, matmul, 3x3-style
convolution, average pooling, softmax variants, row gathering and a
stop-gradient. float32 is the working precision; float64 is supported so
verification utilities (finite differences) can run at higher accuracy.
"""

from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d array plus optional gradient and tape link.

    Gradients accumulate across backward calls until `zero_grad`; this is
    deliberate so callers control when buffers reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # make numpy defer to the reflected operators instead of broadcasting
    # elementwise over the Tensor object
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate gradients for all reachable tensors; loss must be scalar."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; full definitions live at module level
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
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
    return list(reversed(order))


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def square(a) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data * a.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(2.0 * g * a.data)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data)

    return _make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0)
    mask = out_data > 0

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _make(out_data, (a,), backward)


def clip_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient flows only where a exceeds lo."""
    a = _as_tensor(a)
    mask = a.data > lo
    out_data = np.where(mask, a.data, lo)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _make(out_data, (a,), backward)


def stop_gradient(a) -> Tensor:
    """Constant view of a: blocks all gradient flow."""
    return Tensor(_as_tensor(a).data)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else _axis_size(a.shape, axis)

    def backward(g):
        if not a.requires_grad:
            return
        gs = g / n
        if axis is None:
            a.accumulate_grad(np.broadcast_to(gs, a.shape))
            return
        if not keepdims:
            gs = np.expand_dims(gs, axis)
        a.accumulate_grad(np.broadcast_to(gs, a.shape))

    return _make(out_data, (a,), backward)


def _axis_size(shape, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def gather_rows(a, idx) -> Tensor:
    """Select rows a[idx] along axis 0; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a.accumulate_grad(ga)

    return _make(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a.accumulate_grad(out_data * (g - dot))

    return _make(out_data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# spatial ops


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Sliding 3x3-style windows of a padded NCHW array, as a strided view."""
    b, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh, sw),
        writeable=False,
    )


def _conv_fwd(x: np.ndarray, w: np.ndarray, padding: int):
    """Correlation with stride 1; returns (output, im2col matrix)."""
    b, cin, _, _ = x.shape
    cout, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = x.shape[2] - kh + 1, x.shape[3] - kw + 1
    cols = (
        _im2col(x, kh, kw)
        .transpose(0, 4, 5, 1, 2, 3)
        .reshape(b * ho * wo, cin * kh * kw)
    )
    out = (cols @ w.reshape(cout, -1).T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d(x, w, padding: int = 1) -> Tensor:
    """2-d convolution, stride 1, square kernel, no bias (BN follows)."""
    x, w = _as_tensor(x), _as_tensor(w)
    b, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    out_data, cols = _conv_fwd(x.data, w.data, padding)
    ho, wo = out_data.shape[2], out_data.shape[3]

    def backward(g):
        if w.requires_grad:
            g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
            w.accumulate_grad((g2.T @ cols).reshape(w.shape))
        if x.requires_grad:
            # gradient wrt input is correlation of g with the spatially
            # flipped kernel, channels swapped, at complementary padding
            w_flip = np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            )
            gx, _ = _conv_fwd(np.ascontiguousarray(g), w_flip, kh - 1 - padding)
            x.accumulate_grad(gx)

    return _make(out_data, (x, w), backward)


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial dims {(h, w)} not divisible by {k}")
    ho, wo = h // k, w // k
    out_data = x.data.reshape(b, c, ho, k, wo, k).mean(axis=(3, 5))

    def backward(g):
        if x.requires_grad:
            gs = (g / (k * k))[:, :, :, None, :, None]
            gx = np.broadcast_to(gs, (b, c, ho, k, wo, k)).reshape(b, c, h, w)
            x.accumulate_grad(gx)

    return _make(out_data, (x,), backward)


def channel_mean(x) -> Tensor:
    """Per-channel mean of an NCHW tensor over batch and spatial axes."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    n = b * h * w
    out_data = x.data.mean(axis=(0, 2, 3))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g[None, :, None, None] / n, x.shape))

    return _make(out_data, (x,), backward)


def channel_var(x) -> Tensor:
    """Per-channel population variance over batch and spatial axes.

    d var / d x_i = 2 (x_i - mean) / n; the mean's own dependence cancels
    because the centered values sum to zero.
    """
    x = _as_tensor(x)
    b, c, h, w = x.shape
    n = b * h * w
    m = x.data.mean(axis=(0, 2, 3))
    centered = x.data - m[None, :, None, None]
    out_data = np.mean(centered * centered, axis=(0, 2, 3))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad((2.0 / n) * g[None, :, None, None] * centered)

    return _make(out_data, (x,), backward)


def channel_affine(x, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """x * scale + shift with constant per-channel coefficients."""
    x = _as_tensor(x)
    s = np.asarray(scale, dtype=x.dtype)[None, :, None, None]
    out_data = x.data * s + np.asarray(shift, dtype=x.dtype)[None, :, None, None]

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * s)

    return _make(out_data, (x, ), backward)


def batch_norm_train(x, gamma, beta, eps: float):
    """Fused training-mode batch norm over an NCHW tensor.

    Returns (out, batch_mean, batch_var) with the statistics as plain numpy
    (training losses never differentiate through them; capture mode builds
    differentiable statistics from primitives instead).
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    b, c, h, w = x.shape
    n = b * h * w
    m = x.data.mean(axis=(0, 2, 3))
    centered = x.data - m[None, :, None, None]
    v = np.mean(centered * centered, axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(v + eps)
    xh = centered * inv[None, :, None, None]
    out_data = xh * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad(np.sum(g * xh, axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(np.sum(g, axis=(0, 2, 3)))
        if x.requires_grad:
            dxh = g * gamma.data[None, :, None, None]
            s1 = np.sum(dxh, axis=(0, 2, 3))[None, :, None, None]
            s2 = np.sum(dxh * xh, axis=(0, 2, 3))[None, :, None, None]
            gx = (inv[None, :, None, None] / n) * (n * dxh - s1 - xh * s2)
            x.accumulate_grad(gx)

    return _make(out_data, (x, gamma, beta), backward), m, v


def l2_norm(a) -> Tensor:
    """Euclidean norm over all elements, with zero subgradient at the origin."""
    a = _as_tensor(a)
    norm = float(np.sqrt((a.data.astype(np.float64) ** 2).sum()))
    out_data = np.asarray(norm, dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            if norm > 0:
                a.accumulate_grad(g * a.data / out_data)
            # at exactly zero the subgradient 0 is used

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    The check is run in float64 regardless of x's dtype: float32 rounding in
    f(x + eps) - f(x - eps) would otherwise swamp the 1e-3 tolerances this
    utility is meant to certify. x's values are preserved exactly.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(x64)
    if out.data.size != 1:
        raise ValueError("finite_diff_check expects a scalar-valued function")
    if not np.isfinite(out.data):
        raise FloatingPointError("function returned a non-finite value")
    out.backward()
    if x64.grad is None:
        analytic = np.zeros(x64.data.size)
    else:
        analytic = x64.grad.reshape(-1).copy()

    flat = x64.data.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x64).data)
            flat[i] = orig - eps
            lo = float(f(x64).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("function returned a non-finite value")
            numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
