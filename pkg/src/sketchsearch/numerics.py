"""Minimal dense tensor engine with reverse-mode automatic differentiation.

Supplies exactly the operations the embedding encoder and its training
loss need: 3x3 convolution, 2x2 max-pooling, dense layers, ReLU,
elementwise arithmetic, sum reduction and square root, plus a gradient
tape and a plain SGD step.

Conventions:
  - Tensors are float32 by default; pass float64 arrays to run the whole
    graph in double precision (gradient checks do this).
  - Ops record onto the innermost active ``Tape``. With no tape active a
    forward pass is pure and allocation-free of any bookkeeping, so
    inference is safe to run from concurrent callers.
  - Every op validates that its result is finite and raises ValueError
    otherwise.
"""

from __future__ import annotations

import numpy as np

_ACTIVE_TAPES: list["Tape"] = []

GRAD_EPS = 1e-12  # damping inside the sqrt derivative at zero


class Tensor:
    """A dense n-dimensional value with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_on_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor initialized with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._on_tape = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are promoted to the tensor's dtype.
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

    def sum(self) -> "Tensor":
        return tensor_sum(self)


class Tape:
    """Ordered record of executed differentiable ops.

    Ops are appended in execution order, which is already topological:
    every op's inputs exist before it runs. ``backward`` walks the record
    once in reverse and then clears it; a tape is single-use and confined
    to one thread.
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._records)


def _active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _tracked(t) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t._on_tape)


def _record(out: Tensor, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None and any(_tracked(t) for t in inputs):
        out._on_tape = True
        tape._records.append((out, inputs, backward_fn))


def _accumulate(t: Tensor, g: np.ndarray):
    if not _tracked(t):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{op} produced non-finite values")


def _coerce_pair(a, b):
    """Promote a scalar operand to a 0-d tensor matching its partner."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to a 0-d operand's shape if one was promoted."""
    if g.shape == tuple(shape):
        return g
    return g.sum().reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = Tensor(a.data + b.data)
    _check_finite(out.data, "add")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    _record(out, (a, b), bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = Tensor(a.data - b.data)
    _check_finite(out.data, "sub")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    _record(out, (a, b), bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = Tensor(a.data * b.data)
    _check_finite(out.data, "mul")

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    _record(out, (a, b), bwd)
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, v); the subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g):
        _accumulate(x, g * (x.data > 0))

    _record(out, (x,), bwd)
    return out


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root.

    The forward value is exact; the derivative denominator is damped by
    GRAD_EPS so a zero input yields a large finite gradient instead of an
    infinite one.
    """
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative input")
    out = Tensor(np.sqrt(x.data))

    def bwd(g):
        _accumulate(x, g * 0.5 / np.sqrt(x.data + GRAD_EPS))

    _record(out, (x,), bwd)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    """Reduce to a 0-d scalar; the sum itself runs in double precision."""
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype))
    _check_finite(out.data, "sum")

    def bwd(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    _record(out, (x,), bwd)
    return out


def add_n(tensors) -> Tensor:
    """Sum a list of same-shape tensors, accumulating in double precision."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("add_n of empty list")
    shape = tensors[0].data.shape
    for t in tensors:
        if t.data.shape != shape:
            raise ValueError("add_n operands must share a shape")
    acc = np.zeros(shape, dtype=np.float64)
    for t in tensors:
        acc += t.data
    out = Tensor(acc.astype(tensors[0].data.dtype))
    _check_finite(out.data, "add_n")

    def bwd(g):
        for t in tensors:
            _accumulate(t, g)

    _record(out, tuple(tensors), bwd)
    return out


def flatten(x: Tensor) -> Tensor:
    """Reshape to 1-D in C order (channel-major, then row-major)."""
    out = Tensor(x.data.reshape(-1).copy())

    def bwd(g):
        _accumulate(x, g.reshape(x.data.shape))

    _record(out, (x,), bwd)
    return out


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully-connected layer: w @ x + b for x[N], w[M,N], b[M]."""
    if x.data.ndim != 1 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("dense expects x[N], w[M,N], b[M]")
    m, n = w.data.shape
    if x.data.shape[0] != n or b.data.shape[0] != m:
        raise ValueError(
            f"dense shape mismatch: x{x.data.shape}, w{w.data.shape}, b{b.data.shape}"
        )
    out = Tensor(w.data @ x.data + b.data)
    _check_finite(out.data, "dense")

    def bwd(g):
        _accumulate(x, w.data.T @ g)
        _accumulate(w, np.outer(g, x.data))
        _accumulate(b, g)

    _record(out, (x, w, b), bwd)
    return out


def _im2col3(padded: np.ndarray, h: int, w: int) -> np.ndarray:
    """[C, H+2, W+2] -> [C*9, H*W] patch matrix for a 3x3 window."""
    c = padded.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    # win: [C, H, W, 3, 3] -> [C, 3, 3, H, W]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * 9, h * w)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1.

    x[C_in,H,W], w[C_out,C_in,3,3], b[C_out] -> [C_out,H,W].
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ValueError("conv2d expects x[Cin,H,W], w[Cout,Cin,3,3], b[Cout]")
    cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if (kh, kw) != (3, 3):
        raise ValueError("conv2d kernel must be 3x3")
    if cin_w != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    if b.data.shape[0] != cout:
        raise ValueError("conv2d bias length must equal output channels")

    padded = np.zeros((cin, h + 2, wd + 2), dtype=x.data.dtype)
    padded[:, 1 : h + 1, 1 : wd + 1] = x.data
    cols = _im2col3(padded, h, wd)
    w2 = w.data.reshape(cout, cin * 9)
    out = Tensor((w2 @ cols + b.data[:, None]).reshape(cout, h, wd))
    _check_finite(out.data, "conv2d")

    def bwd(g):
        g2 = g.reshape(cout, h * wd)
        _accumulate(b, g2.sum(axis=1))
        _accumulate(w, (g2 @ cols.T).reshape(w.data.shape))
        gcols = (w2.T @ g2).reshape(cin, 3, 3, h, wd)
        gpad = np.zeros_like(padded)
        for di in range(3):
            for dj in range(3):
                gpad[:, di : di + h, dj : dj + wd] += gcols[:, di, dj]
        _accumulate(x, gpad[:, 1 : h + 1, 1 : wd + 1])

    _record(out, (x, w, b), bwd)
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd dims padded right/bottom with -inf.

    The gradient routes to the argmax of each window, ties going to the
    first element in row-major window order.
    """
    if x.data.ndim != 3:
        raise ValueError("maxpool2 expects x[C,H,W]")
    c, h, w = x.data.shape
    hp, wp = h + (h % 2), w + (w % 2)
    if (hp, wp) != (h, w):
        buf = np.full((c, hp, wp), -np.inf, dtype=x.data.dtype)
        buf[:, :h, :w] = x.data
    else:
        buf = x.data
    h2, w2 = hp // 2, wp // 2
    # windows[..., k] enumerates each 2x2 window in row-major order
    windows = buf.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    idx = np.argmax(windows, axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])
    _check_finite(out.data, "maxpool2")

    def bwd(g):
        gwin = np.zeros((c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gbuf = gwin.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, hp, wp)
        _accumulate(x, gbuf[:, :h, :w])

    _record(out, (x,), bwd)
    return out


def backward(tape: Tape, loss: Tensor):
    """Populate gradients of every requires_grad tensor reachable from loss.

    The tape is cleared afterwards; it cannot be replayed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    recorded_outs = {id(out) for out, _, _ in tape._records}
    if id(loss) not in recorded_outs:
        raise ValueError("loss is not a product of this tape (detached graph)")

    loss.grad = np.ones_like(loss.data)
    for out, inputs, bwd in reversed(tape._records):
        if out.grad is None:
            continue
        bwd(out.grad)
    # Drop intermediate gradients; leaf parameters keep theirs.
    for out, _, _ in tape._records:
        if not out.requires_grad:
            out.grad = None
        out._on_tape = False
    tape._records.clear()


def sgd_step(params, lr: float):
    """p <- p - lr * grad(p) for each parameter; gradients are zeroed."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step on parameter with no gradient")
    for p in params:
        p.data -= np.asarray(lr, dtype=p.data.dtype) * p.grad
        p.grad = None
