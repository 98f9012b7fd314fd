"""Minimal reverse-mode differentiation over dense float32 arrays.

Only the operations the depth network, the prompt parameterizations and the
losses need are provided. Broadcasting is limited to scalars and to
same-rank operands whose mismatched dimensions are 1 (keepdims style).
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

DTYPE = np.float32
_PRECISION = contextvars.ContextVar("promptdepth_precision", default=DTYPE)


def _dt():
    return _PRECISION.get()


@contextlib.contextmanager
def precision(dtype):
    """Evaluate graphs in another float type within this context (verification only).

    Production code always runs in float32; finite-difference oracles promote
    to float64 so that rounding of the scalar output does not swamp small
    directional derivatives.
    """
    token = _PRECISION.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _PRECISION.reset(token)


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=_dt())


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    """A node in the computation graph.

    ``data`` is a float32 ndarray; ``grad`` is populated by :meth:`backward`
    for every tensor that ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        arr = _as_array(data)
        if op == "leaf":
            _check_finite(arr, "leaf")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate gradients of this tensor into every upstream leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads = {id(self): _as_array(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.astype(_dt(), copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list:
    """Parents-before-children order of the graph reachable from ``root``."""
    order, seen = [], set()
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    data = _check_finite(np.asarray(data, dtype=_dt()), op)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _backward=backward if needs else None, op=op)


# ---------------------------------------------------------------- broadcasting

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if len(a) != len(b):
        raise ValueError(f"shape mismatch: {a} vs {b}")
    out = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"shape mismatch: {a} vs {b}")
        out.append(max(da, db))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return g.sum(dtype=_dt()).reshape(shape)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True, dtype=_dt())


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    with np.errstate(all="ignore"):  # non-finite results are reported by _make
        out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = _dt()(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.data < 0).any():
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(a.data)
    # zero subgradient at the origin instead of an infinite one
    inv = np.where(out > 0, 0.5 / np.where(out > 0, out, 1), 0).astype(_dt())
    return _make(out, (a,), lambda g: (g * inv,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):  # non-finite results are reported by _make
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = (1.0 / (1.0 + np.exp(-a.data.astype(np.float64)))).astype(_dt())
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make(np.where(on, a.data, 0), (a,), lambda g: (g * on,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, _dt()(1.0), _dt()(slope))
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def elementwise(kind: str, *inputs, c: float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, sigmoid, relu, leaky_relu, square, scale."""
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div,
        "sigmoid": sigmoid, "relu": relu, "leaky_relu": leaky_relu,
        "square": square, "sqrt": sqrt, "exp": exp,
    }
    if kind == "scale":
        return scale(inputs[0], c)
    if kind not in table:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return table[kind](*inputs)


# ---------------------------------------------------------------- structure

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros(a.shape, dtype=_dt())
        np.add.at(out, index, g) if _is_fancy(index) else out.__setitem__(index, g)
        return (out,)

    return _make(a.data[index], (a,), backward, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` is a per-axis list of (before, after)."""
    a = as_tensor(a)
    inner = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[inner],), "pad")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b`` (mask is a constant)."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    shape = _broadcast_shape(a.shape, b.shape)
    out = np.where(m, a.data, b.data)
    if out.shape != shape:
        raise ValueError(f"shape mismatch: mask {m.shape} vs operands {shape}")

    def backward(g):
        return _unbroadcast(np.where(m, g, 0), a.shape), _unbroadcast(np.where(m, 0, g), b.shape)

    return _make(out, (a, b), backward, "where")


# ---------------------------------------------------------------- reductions

def reduce(kind: str, a, axis=None, mask=None, keepdims: bool = False) -> Tensor:
    """sum / mean / min / max, optionally restricted to ``mask`` (same shape as ``a``).

    min and max route the gradient to the first attaining element in
    row-major order within each reduced slice.
    """
    a = as_tensor(a)
    x = a.data
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        axes = tuple(ax % x.ndim for ax in (axis if isinstance(axis, tuple) else (axis,)))
    m = None
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        counts = m.sum(axis=axes, keepdims=True)
        if (counts == 0).any():
            raise ValueError("empty selection in masked reduction")
    if kind in ("sum", "mean"):
        xm = x if m is None else np.where(m, x, 0)
        out = xm.sum(axis=axes, keepdims=True, dtype=_dt())
        denom = None
        if kind == "mean":
            denom = _dt()(np.prod([x.shape[ax] for ax in axes])) if m is None else counts.astype(_dt())
            out = out / denom

        def backward(g):
            g = g.reshape(out.shape)
            if denom is not None:
                g = g / denom
            full = np.broadcast_to(g, x.shape)
            return ((full if m is None else np.where(m, full, 0)).astype(_dt()),)

    elif kind in ("min", "max"):
        keep = [ax for ax in range(x.ndim) if ax not in axes]
        perm = keep + list(axes)
        xp = np.transpose(x, perm)
        lead = xp.shape[: len(keep)]
        flat = xp.reshape(int(np.prod(lead)) if lead else 1, -1)
        if m is not None:
            fill = np.inf if kind == "min" else -np.inf
            flat = np.where(np.transpose(m, perm).reshape(flat.shape), flat, fill)
        idx = flat.argmin(axis=1) if kind == "min" else flat.argmax(axis=1)
        vals = flat[np.arange(flat.shape[0]), idx]
        out_shape = tuple(1 if ax in axes else x.shape[ax] for ax in range(x.ndim))
        out = vals.reshape(out_shape)

        def backward(g):
            gflat = np.zeros(flat.shape, dtype=_dt())
            gflat[np.arange(flat.shape[0]), idx] = g.reshape(-1)
            gp = gflat.reshape(xp.shape)
            return (np.transpose(gp, np.argsort(perm)),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")

    result = _make(out, (a,), backward, kind)
    if not keepdims:
        squeezed = tuple(s for ax, s in enumerate(out.shape) if ax not in axes)
        result = reshape(result, squeezed)
    return result


def sum(a, axis=None, mask=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", a, axis=axis, mask=mask, keepdims=keepdims)


def mean(a, axis=None, mask=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axis=axis, mask=mask, keepdims=keepdims)


# ---------------------------------------------------------------- convolution

def _im2col(xl: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Channels-last input [N,H,W,C] to columns [N*Ho*Wo, k*k*C]."""
    if padding > 0:
        xl = np.pad(xl, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xl, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``w`` [O,C,k,k], optional bias [O]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("degenerate conv2d output size")
    xl = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    cols = _im2col(xl, k, stride, padding)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = cols @ wmat
    if b is not None:
        b = as_tensor(b)
        out += b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = gl.reshape(n * ho * wo, o)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            if stride == 1:
                # transposed convolution: correlate with the spatially flipped kernel
                gcols = _im2col(gl, k, 1, k - 1 - padding)
                wflip = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * o, c)
                gx = (gcols @ wflip).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
            else:
                gcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, c)
                gxp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c), dtype=_dt())
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
                gx = gxp[:, padding:padding + h, padding:padding + wd, :].transpose(0, 3, 1, 2)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "conv2d")


def resample2(a, mode: str) -> Tensor:
    """``nearest_up2`` replicates each pixel 2x2; ``avgpool_down2`` takes 2x2 means."""
    a = as_tensor(a)
    h, w = a.shape[-2:]
    if mode == "nearest_up2":
        out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

        def backward(g):
            return (g.reshape(*g.shape[:-2], h, 2, w, 2).sum(axis=(-3, -1)),)

    elif mode == "avgpool_down2":
        if h % 2 or w % 2:
            raise ValueError(f"avgpool_down2 needs even spatial dims, got {h}x{w}")
        out = a.data.reshape(*a.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

        def backward(g):
            return ((0.25 * g).repeat(2, axis=-2).repeat(2, axis=-1),)

    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return _make(out, (a,), backward, mode)


# ---------------------------------------------------------------- spectral

def _is_pow2(v: int) -> bool:
    return v > 0 and v & (v - 1) == 0


def ifft2(real, imag) -> Tensor:
    """Real part of the per-channel 2-D inverse DFT, normalized by 1/(H*W)."""
    real, imag = as_tensor(real), as_tensor(imag)
    if real.shape != imag.shape:
        raise ValueError(f"shape mismatch: {real.shape} vs {imag.shape}")
    h, w = real.shape[-2:]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"ifft2 needs power-of-two dims, got {h}x{w}")
    spec = real.data.astype(np.float64) + 1j * imag.data.astype(np.float64)
    out = np.fft.ifft2(spec, axes=(-2, -1)).real

    def backward(g):
        gs = np.fft.fft2(g.astype(np.float64), axes=(-2, -1)) / (h * w)
        return gs.real.astype(_dt()), gs.imag.astype(_dt())

    return _make(out, (real, imag), backward, "ifft2")


# ---------------------------------------------------------------- verification

def gradient_check(fn, point, eps: float = 1e-3, indices=None, oracle_dtype=None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor. ``indices`` optionally restricts
    the finite-difference probes to a subset of flat coordinates. The
    reverse-mode gradient is always taken in the current precision; with
    ``oracle_dtype`` (e.g. float64) only the finite differences are promoted.
    """
    x0 = _as_array(point.data if isinstance(point, Tensor) else point).copy()
    x = Tensor(x0.copy(), requires_grad=True)
    out = fn(x)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("gradient_check: non-finite function value")
    if out.requires_grad:
        out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)
    scope = precision(oracle_dtype) if oracle_dtype is not None else contextlib.nullcontext()
    worst = 0.0
    with scope:
        flat = _as_array(x0).reshape(-1)
        probe = range(flat.size) if indices is None else indices
        for i in probe:
            vals, coords = [], []
            for sign in (1.0, -1.0):
                xp = flat.copy()
                xp[i] = flat[i] + sign * eps
                coords.append(float(xp[i]))
                v = fn(Tensor(xp.reshape(x0.shape))).data
                if not np.isfinite(v).all():
                    raise NonFiniteError("gradient_check: non-finite function value")
                vals.append(float(np.asarray(v, dtype=np.float64).reshape(-1)[0]))
            # divide by the step actually taken after rounding of x +- eps
            numeric = (vals[0] - vals[1]) / (coords[0] - coords[1])
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
