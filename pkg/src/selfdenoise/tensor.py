"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (NCHW row-major for images). Gradients are computed
by recording every primitive operation on a ``Tape`` during the forward pass
and replaying the tape in reverse. Node ids are unique per process, so a
recorded tape doubles as an explicit computation graph that can be inspected
structurally (see ``model.assert_no_skip_connections``).

Determinism: all kernels are plain numpy reductions / BLAS contractions with
a fixed evaluation order, so two backward passes over the same tape produce
bit-identical gradients. float32 is the training precision; build graphs in
float64 when checking gradients against finite differences.
"""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

_node_counter = itertools.count()
_active_tape: "Tape | None" = None


class Variable:
    """A tensor value that can participate in the recorded graph.

    Leaves created with ``requires_grad=True`` (model parameters, or inputs
    being differentiated against) receive accumulated gradients in ``.grad``
    after ``backward``. Intermediate results are also ``Variable``s but keep
    their gradient only transiently inside the backward sweep.
    """

    __slots__ = ("value", "grad", "requires_grad", "node_id", "op")

    def __init__(self, value, requires_grad: bool = False, dtype=None):
        self.value = np.asarray(value, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)
        self.op: str | None = None  # name of the producing op; None for leaves

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def detach(self) -> np.ndarray:
        return self.value

    def sum(self) -> "Variable":
        return vsum(self)

    def mean(self) -> "Variable":
        return vmean(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __repr__(self):
        return f"Variable(shape={tuple(self.shape)}, dtype={self.dtype}, id={self.node_id})"


class TapeEntry:
    """One recorded primitive: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    @property
    def input_ids(self):
        return tuple(v.node_id for v in self.inputs)

    @property
    def output_id(self):
        return self.output.node_id


class Tape:
    """Ordered record of primitives, in topological (execution) order."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def record(self, op: str, inputs: tuple[Variable, ...], output: Variable,
               backward_fn: Callable[[np.ndarray], tuple]):
        output.op = op
        self.entries.append(TapeEntry(op, inputs, output, backward_fn))

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active; nesting is not supported")
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = None
        return False

    def __len__(self):
        return len(self.entries)


def active_tape() -> Tape | None:
    return _active_tape


def backward(loss: Variable, tape: Tape):
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``.

    Gradients accumulate additively across fan-out and across repeated calls;
    call ``zero_grad`` on the parameters between optimization steps.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    pending = {loss.node_id: np.ones_like(loss.value)}
    for entry in reversed(tape.entries):
        g_out = pending.pop(entry.output_id, None)
        if g_out is None:
            continue
        grads_in = entry.backward_fn(g_out)
        for var, g in zip(entry.inputs, grads_in):
            if g is None:
                continue
            if var.is_leaf:
                if var.requires_grad:
                    var.accumulate_grad(g)
            else:
                if var.node_id in pending:
                    pending[var.node_id] += g
                else:
                    pending[var.node_id] = g


def _wrap(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _result(op: str, inputs: tuple[Variable, ...], value: np.ndarray,
            backward_fn: Callable) -> Variable:
    tape = _active_tape
    needs = tape is not None and any(v.requires_grad for v in inputs)
    out = Variable(value, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution kernels (im2col + BLAS contraction; no python pixel loops)
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding-window view [N,C,kh,kw,Ho,Wo] over a padded NCHW array."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, ho, wo),
        (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _corr(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlation of x[N,C,H,W] with w[F,C,kh,kw] -> [N,F,Ho,Wo]."""
    kh, kw = w.shape[2:]
    cols = _im2col(_pad_hw(x, padding), kh, kw, stride)
    y = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # [F,N,Ho,Wo]
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3))


def _corr_grad_w(x: np.ndarray, dy: np.ndarray, kh: int, kw: int,
                 stride: int, padding: int) -> np.ndarray:
    cols = _im2col(_pad_hw(x, padding), kh, kw, stride)
    return np.tensordot(dy, cols, axes=([0, 2, 3], [0, 4, 5]))  # [F,C,kh,kw]


def _corr_grad_x(dy: np.ndarray, w: np.ndarray, stride: int, padding: int,
                 out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_corr`` w.r.t. its input; also the transpose-conv forward.

    Scatter-accumulate expressed as a dense correlation: dilate dy by the
    stride, pad by (k-1) plus the rows/cols the strided forward never reached,
    and correlate with the flipped, channel-swapped kernel. Everything stays
    a BLAS contraction.
    """
    h, w_out = out_hw
    f, c, kh, kw = w.shape
    n, _, ho, wo = dy.shape
    rh = h + 2 * padding - kh - (ho - 1) * stride
    rw = w_out + 2 * padding - kw - (wo - 1) * stride
    if stride == 1 and rh == 0 and rw == 0:
        dyd = dy
    else:
        dyd = np.zeros((n, f, (ho - 1) * stride + 1 + rh, (wo - 1) * stride + 1 + rw),
                       dtype=dy.dtype)
        dyd[:, :, ::stride, ::stride][:, :, :ho, :wo] = dy
    dyp = np.pad(dyd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].swapaxes(0, 1))  # [C,F,kh,kw]
    dxp = _corr(dyp, wf, 1, 0)  # [N,C,h+2p,w+2p]
    if padding:
        dxp = dxp[:, :, padding:padding + h, padding:padding + w_out]
    return np.ascontiguousarray(dxp)


def _check_conv_args(x, kernel, bias, stride, padding, transpose=False):
    if stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(
            f"expected 4-d input and kernel (NCHW), got input {x.shape} kernel {kernel.shape}")
    ch_axis = 0 if transpose else 1
    if x.shape[1] != kernel.shape[ch_axis]:
        raise ValueError(
            f"input has {x.shape[1]} channels but kernel {tuple(kernel.shape)} expects "
            f"{kernel.shape[ch_axis]}")
    nbias = kernel.shape[1] if transpose else kernel.shape[0]
    if bias.shape != (nbias,):
        raise ValueError(f"bias shape {bias.shape} does not match {nbias} output channels")


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Variable:
    """2-d cross-correlation, NCHW: x[N,C,H,W] * kernel[F,C,kh,kw] + bias[F]."""
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    _check_conv_args(x.value, kernel.value, bias.value, stride, padding)
    n, c, h, w_in = x.shape
    f, _, kh, kw = kernel.shape
    if kh > h + 2 * padding or kw > w_in + 2 * padding:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w_in + 2 * padding}")
    y = _corr(x.value, kernel.value, stride, padding)
    y += bias.value.reshape(1, f, 1, 1)
    xv, wv = x.value, kernel.value

    def bwd(dy):
        dx = _corr_grad_x(dy, wv, stride, padding, (h, w_in)) if x.requires_grad else None
        dw = _corr_grad_w(xv, dy, kh, kw, stride, padding)
        db = dy.sum(axis=(0, 2, 3))
        return dx, dw, db

    return _result("conv2d", (x, kernel, bias), y, bwd)


def conv2d_transpose(x, kernel, bias, stride: int = 1, padding: int = 0) -> Variable:
    """Transposed convolution (adjoint of conv2d), kernel[Cin,Cout,kh,kw].

    Output spatial size is (H-1)*stride - 2*padding + kh.
    """
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    _check_conv_args(x.value, kernel.value, bias.value, stride, padding, transpose=True)
    n, cin, h, w_in = x.shape
    _, cout, kh, kw = kernel.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w_in - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ValueError(f"transpose conv would produce empty output {ho}x{wo}")
    y = _corr_grad_x(x.value, kernel.value, stride, padding, (ho, wo))
    y += bias.value.reshape(1, cout, 1, 1)
    xv, wv = x.value, kernel.value

    def bwd(dy):
        dx = _corr(dy, wv, stride, padding) if x.requires_grad else None
        dw = _corr_grad_w(dy, xv, kh, kw, stride, padding)
        db = dy.sum(axis=(0, 2, 3))
        return dx, dw, db

    return _result("conv2d_transpose", (x, kernel, bias), y, bwd)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------

def leaky_relu(x, slope: float = 0.01) -> Variable:
    """x if x >= 0 else slope*x. Subgradient at 0 is the negative-side slope."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must be in [0, 1), got {slope}")
    x = _wrap(x)
    v = x.value
    s = v.dtype.type(slope)
    y = np.where(v >= 0, v, v * s)

    def bwd(dy):
        return (dy * np.where(v > 0, v.dtype.type(1), s),)

    return _result("leaky_relu", (x,), y, bwd)


def avg_pool2(x) -> Variable:
    """2x2 mean pooling; requires even spatial extents."""
    x = _wrap(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even extents, got {h}x{w}")
    y = x.value.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    quarter = x.value.dtype.type(0.25)

    def bwd(dy):
        return (np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * quarter,)

    return _result("avg_pool2", (x,), y, bwd)


def l1_loss(pred, target) -> Variable:
    """Mean absolute difference; subgradient 0 at exact ties."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.value - target.value
    y = np.abs(diff).mean()
    inv_n = diff.dtype.type(1.0 / diff.size)

    def bwd(dy):
        g = np.sign(diff) * (inv_n * dy)
        return g, -g

    return _result("l1_loss", (pred, target), np.asarray(y), bwd)


def add(a, b) -> Variable:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result("add", (a, b), a.value + b.value, lambda dy: (dy, dy))


def sub(a, b) -> Variable:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _result("sub", (a, b), a.value - b.value, lambda dy: (dy, -dy))


def mul(a, b) -> Variable:
    """Elementwise (same shape) or scalar-constant multiply."""
    if np.isscalar(b):
        a = _wrap(a)
        c = a.value.dtype.type(b)
        return _result("scale", (a,), a.value * c, lambda dy: (dy * c,))
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _result("mul", (a, b), av * bv, lambda dy: (dy * bv, dy * av))


def vsum(x) -> Variable:
    x = _wrap(x)
    v = x.value
    return _result("sum", (x,), np.asarray(v.sum()),
                   lambda dy: (np.broadcast_to(dy, v.shape).astype(v.dtype, copy=True),))


def vmean(x) -> Variable:
    x = _wrap(x)
    v = x.value
    inv_n = v.dtype.type(1.0 / v.size)
    return _result("mean", (x,), np.asarray(v.mean()),
                   lambda dy: (np.full(v.shape, dy * inv_n, dtype=v.dtype),))


def select_mean(x, flat_indices) -> Variable:
    """Mean over a fixed set of flat indices; a linear probe of the output."""
    x = _wrap(x)
    idx = np.asarray(flat_indices, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ValueError("select_mean needs at least one index")
    v = x.value
    y = v.reshape(-1)[idx].mean()
    inv_n = v.dtype.type(1.0 / idx.size)

    def bwd(dy):
        g = np.zeros(v.size, dtype=v.dtype)
        np.add.at(g, idx, dy * inv_n)
        return (g.reshape(v.shape),)

    return _result("select_mean", (x,), np.asarray(y), bwd)


def checked_finite(x) -> bool:
    """True iff every entry is finite (no NaN/Inf)."""
    v = x.value if isinstance(x, Variable) else np.asarray(x)
    return bool(np.isfinite(v).all())


def zero_grads(params):
    for p in params:
        p.zero_grad()
