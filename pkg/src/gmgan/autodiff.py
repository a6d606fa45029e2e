"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Define-by-run: operations executed while a tape is active append one node
(output, backward closure) to a flat list, which is therefore already in
topological order. backward() walks the list once in reverse and accumulates
gradients additively into every upstream tensor that requires them.

Values are numpy float64 arrays. Tensors are immutable after construction
except for gradient accumulation; a tape is single-threaded.
"""

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, TapeError

# When True, every op output is checked for NaN/Inf. Off by default; backward()
# always checks the loss value.
DEBUG_CHECKS = False


def set_debug_checks(enabled):
    global DEBUG_CHECKS
    DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A contiguous float64 array plus gradient bookkeeping."""

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad=False):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite (got NaN or Inf)")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise DimensionError("item() requires a single-element tensor")
        return float(self.values.reshape(-1)[0])

    def detach(self):
        """A view of the same values that does not participate in backward."""
        t = Tensor.__new__(Tensor)
        t.values = self.values
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(shape=%r, requires_grad=%r)" % (self.shape, self.requires_grad)


def _fresh(values):
    """Build an op output without re-validating (unless debug checks are on)."""
    t = Tensor.__new__(Tensor)
    t.values = values
    t.requires_grad = False
    t.grad = None
    t._tape = None
    if DEBUG_CHECKS and not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values produced by an operation")
    return t


class Tape:
    """Ordered record of operations; every node's inputs precede it."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def record(self, out, backward_fn):
        out.requires_grad = True
        out._tape = self
        self.nodes.append((out, backward_fn))


_ACTIVE_TAPE = None


@contextmanager
def tape():
    """Activate a fresh tape for the duration of the block; yields it."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    t = Tape()
    _ACTIVE_TAPE = t
    try:
        yield t
    finally:
        _ACTIVE_TAPE = prev


@contextmanager
def no_grad():
    """Suspend recording; ops inside run forward-only."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = None
    try:
        yield
    finally:
        _ACTIVE_TAPE = prev


def _track(*tensors):
    if _ACTIVE_TAPE is None:
        return None
    if any(t.requires_grad for t in tensors):
        return _ACTIVE_TAPE
    return None


def backward(loss):
    """Run the reverse pass from a scalar loss recorded on a tape.

    Gradients accumulate additively across uses of a tensor and across
    separate backward calls on different tapes. A single tape may only be
    walked once; a second call raises TapeError.
    """
    if loss.values.size != 1:
        raise ContractError("backward requires a scalar loss")
    if not math.isfinite(float(loss.values.reshape(-1)[0])):
        raise FloatingPointError("loss is not finite")
    tp = loss._tape
    if tp is None:
        raise ContractError("loss was not recorded on a tape")
    if tp.consumed:
        raise TapeError("backward already ran on this tape")
    tp.consumed = True
    loss.accumulate_grad(np.ones_like(loss.values))
    for out, backward_fn in reversed(tp.nodes):
        if out.grad is not None:
            backward_fn(out.grad)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _broadcast_check(a, b):
    """Allow equal shapes, or a 2-D lhs with a 1-D row-vector rhs."""
    if a.shape == b.shape:
        return False
    if len(a.shape) == 2 and b.shape == (a.shape[1],):
        return True
    raise DimensionError("incompatible shapes %r and %r" % (a.shape, b.shape))


def _reduce_to(g, broadcast):
    return g.sum(axis=0) if broadcast else g


def add(a, b):
    bcast = _broadcast_check(a, b)
    out = _fresh(a.values + b.values)
    tp = _track(a, b)
    if tp:
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(g, bcast))
        tp.record(out, bw)
    return out


def sub(a, b):
    bcast = _broadcast_check(a, b)
    out = _fresh(a.values - b.values)
    tp = _track(a, b)
    if tp:
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(-_reduce_to(g, bcast))
        tp.record(out, bw)
    return out


def mul(a, b):
    bcast = _broadcast_check(a, b)
    out = _fresh(a.values * b.values)
    tp = _track(a, b)
    if tp:
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g * b.values)
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(g * a.values, bcast))
        tp.record(out, bw)
    return out


def elementwise(a, b, kind):
    """Pointwise combination; kind is one of mul, add, sub."""
    try:
        op = {"mul": mul, "add": add, "sub": sub}[kind]
    except KeyError:
        raise ContractError("unknown elementwise kind %r" % (kind,))
    return op(a, b)


def scale(a, k):
    k = float(k)
    out = _fresh(a.values * k)
    tp = _track(a)
    if tp:
        def bw(g):
            a.accumulate_grad(g * k)
        tp.record(out, bw)
    return out


def matmul(a, b):
    """Matrix product. 1-D operands are promoted and the result squeezed."""
    av, bv = a.values, b.values
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise DimensionError("matmul expects 1-D or 2-D operands")
    a2 = av.reshape(1, -1) if av.ndim == 1 else av
    b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv
    if a2.shape[1] != b2.shape[0]:
        raise DimensionError(
            "matmul inner extents differ: %r vs %r" % (av.shape, bv.shape))
    res = a2 @ b2
    if av.ndim == 1:
        res = res.reshape(res.shape[1])
    elif bv.ndim == 1:
        res = res.reshape(res.shape[0])
    out = _fresh(res)
    tp = _track(a, b)
    if tp:
        def bw(g):
            g2 = g.reshape(a2.shape[0], b2.shape[1])
            if a.requires_grad:
                a.accumulate_grad((g2 @ b2.T).reshape(av.shape))
            if b.requires_grad:
                b.accumulate_grad((a2.T @ g2).reshape(bv.shape))
        tp.record(out, bw)
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a):
    out = _fresh(np.maximum(a.values, 0.0))
    tp = _track(a)
    if tp:
        mask = a.values > 0.0
        def bw(g):
            a.accumulate_grad(g * mask)
        tp.record(out, bw)
    return out


def sigmoid(a):
    # exp-based split avoids overflow for large |x|
    x = a.values
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _fresh(y)
    tp = _track(a)
    if tp:
        def bw(g):
            a.accumulate_grad(g * y * (1.0 - y))
        tp.record(out, bw)
    return out


def tanh(a):
    y = np.tanh(a.values)
    out = _fresh(y)
    tp = _track(a)
    if tp:
        def bw(g):
            a.accumulate_grad(g * (1.0 - y * y))
        tp.record(out, bw)
    return out


def exp(a):
    y = np.exp(a.values)
    out = _fresh(y)
    tp = _track(a)
    if tp:
        def bw(g):
            a.accumulate_grad(g * y)
        tp.record(out, bw)
    return out


def log(a):
    if np.any(a.values <= 0.0):
        raise ContractError("log requires strictly positive values")
    out = _fresh(np.log(a.values))
    tp = _track(a)
    if tp:
        def bw(g):
            a.accumulate_grad(g / a.values)
        tp.record(out, bw)
    return out


def softmax(a):
    """Row-wise (last axis) softmax with max-subtraction for stability."""
    if a.values.size == 0:
        raise DimensionError("softmax of an empty tensor")
    x = a.values
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _fresh(y)
    tp = _track(a)
    if tp:
        def bw(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            a.accumulate_grad(y * (g - dot))
        tp.record(out, bw)
    return out


def log_softmax(a):
    if a.values.size == 0:
        raise DimensionError("log_softmax of an empty tensor")
    x = a.values
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    y = s - lse
    out = _fresh(y)
    tp = _track(a)
    if tp:
        soft = np.exp(y)
        def bw(g):
            a.accumulate_grad(g - soft * g.sum(axis=-1, keepdims=True))
        tp.record(out, bw)
    return out


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def tsum(a):
    out = _fresh(np.asarray(a.values.sum()))
    tp = _track(a)
    if tp:
        def bw(g):
            a.accumulate_grad(np.broadcast_to(g, a.values.shape).copy())
        tp.record(out, bw)
    return out


def tmean(a):
    if a.values.size == 0:
        raise DimensionError("mean of an empty tensor")
    return scale(tsum(a), 1.0 / a.values.size)


def reshape(a, shape):
    out = _fresh(a.values.reshape(shape))
    tp = _track(a)
    if tp:
        def bw(g):
            a.accumulate_grad(g.reshape(a.values.shape))
        tp.record(out, bw)
    return out


def concat(tensors, axis=0):
    if not tensors:
        raise DimensionError("concat of an empty list")
    out = _fresh(np.concatenate([t.values for t in tensors], axis=axis))
    tp = _track(*tensors)
    if tp:
        splits = np.cumsum([t.values.shape[axis] for t in tensors])[:-1]
        def bw(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t.accumulate_grad(piece)
        tp.record(out, bw)
    return out


def slice_cols(a, start, stop):
    if a.values.ndim != 2:
        raise DimensionError("slice_cols expects a 2-D tensor")
    out = _fresh(np.ascontiguousarray(a.values[:, start:stop]))
    tp = _track(a)
    if tp:
        def bw(g):
            full = np.zeros_like(a.values)
            full[:, start:stop] = g
            a.accumulate_grad(full)
        tp.record(out, bw)
    return out


def gather_rows(a, idx):
    """Select rows of a 2-D tensor; repeated indices accumulate gradient."""
    if a.values.ndim != 2:
        raise DimensionError("gather_rows expects a 2-D tensor")
    idx = np.array(idx, dtype=np.intp)  # copy: callers may reuse the buffer
    out = _fresh(a.values[idx])
    tp = _track(a)
    if tp:
        def bw(g):
            full = np.zeros_like(a.values)
            np.add.at(full, idx, g.reshape(idx.shape + (a.values.shape[1],)))
            a.accumulate_grad(full)
        tp.record(out, bw)
    return out


def pick(a, rows, cols):
    """out[i] = a[rows[i], cols[i]] for a 2-D tensor."""
    if a.values.ndim != 2:
        raise DimensionError("pick expects a 2-D tensor")
    rows = np.array(rows, dtype=np.intp)
    cols = np.array(cols, dtype=np.intp)
    out = _fresh(a.values[rows, cols])
    tp = _track(a)
    if tp:
        def bw(g):
            full = np.zeros_like(a.values)
            np.add.at(full, (rows, cols), g)
            a.accumulate_grad(full)
        tp.record(out, bw)
    return out


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------

ZERO_NORM_EPS = 1e-12


def row_cosine(a, b):
    """Row-wise cosine of two (B, n) tensors -> (B,); zero-norm rows give 0."""
    if a.values.ndim != 2 or a.shape != b.shape:
        raise DimensionError(
            "row_cosine expects equal-shape 2-D tensors, got %r and %r"
            % (a.shape, b.shape))
    av, bv = a.values, b.values
    na = np.linalg.norm(av, axis=1)
    nb = np.linalg.norm(bv, axis=1)
    valid = (na >= ZERO_NORM_EPS) & (nb >= ZERO_NORM_EPS)
    denom = np.where(valid, na * nb, 1.0)
    c = np.where(valid, (av * bv).sum(axis=1) / denom, 0.0)
    out = _fresh(c)
    tp = _track(a, b)
    if tp:
        def bw(g):
            gv = (g * valid)[:, None]
            if a.requires_grad:
                a.accumulate_grad(gv * (bv / denom[:, None]
                                        - c[:, None] * av / np.where(
                                            valid, na * na, 1.0)[:, None]))
            if b.requires_grad:
                b.accumulate_grad(gv * (av / denom[:, None]
                                        - c[:, None] * bv / np.where(
                                            valid, nb * nb, 1.0)[:, None]))
        tp.record(out, bw)
    return out


def cosine_similarity(a, b):
    """dot(a,b)/(|a||b|) for 1-D vectors; exactly 0 if either norm < 1e-12.

    The zero-vector case is defined (not an error) so that degenerate
    feature-change directions contribute a neutral value.
    """
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape:
        raise DimensionError(
            "cosine_similarity expects equal-length vectors, got %r and %r"
            % (a.shape, b.shape))
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return _fresh(np.asarray(0.0))
    c = float(a.values @ b.values) / (na * nb)
    out = _fresh(np.asarray(c))
    tp = _track(a, b)
    if tp:
        def bw(g):
            g = float(g)
            if a.requires_grad:
                a.accumulate_grad(g * (b.values / (na * nb) - c * a.values / (na * na)))
            if b.requires_grad:
                b.accumulate_grad(g * (a.values / (na * nb) - c * b.values / (nb * nb)))
        tp.record(out, bw)
    return out


# ---------------------------------------------------------------------------
# recurrent and convolutional cells
# ---------------------------------------------------------------------------

def lstm_cell(x, hidden, cell, w_x, w_h, b):
    """One standard LSTM step.

    x may be (d_in,) or (B, d_in); hidden/cell match with width H. The fused
    weight layout is w_x: (d_in, 4H), w_h: (H, 4H), b: (4H,) with gate order
    input, forget, output, candidate.
    """
    single = x.values.ndim == 1
    if single:
        x = reshape(x, (1, -1))
        hidden = reshape(hidden, (1, -1))
        cell = reshape(cell, (1, -1))
    h_dim = hidden.shape[1]
    if (x.shape[1] != w_x.shape[0] or w_x.shape[1] != 4 * h_dim
            or w_h.shape != (h_dim, 4 * h_dim) or b.shape != (4 * h_dim,)):
        raise DimensionError("lstm_cell parameter shapes are inconsistent")
    z = add(add(matmul(x, w_x), matmul(hidden, w_h)), b)
    i = sigmoid(slice_cols(z, 0, h_dim))
    f = sigmoid(slice_cols(z, h_dim, 2 * h_dim))
    o = sigmoid(slice_cols(z, 2 * h_dim, 3 * h_dim))
    g = tanh(slice_cols(z, 3 * h_dim, 4 * h_dim))
    new_cell = add(mul(f, cell), mul(i, g))
    new_hidden = mul(o, tanh(new_cell))
    if single:
        new_hidden = reshape(new_hidden, (h_dim,))
        new_cell = reshape(new_cell, (h_dim,))
    return new_hidden, new_cell


def conv_output_length(length, width, stride):
    if length < width:
        raise DimensionError(
            "conv input length %d shorter than kernel width %d" % (length, width))
    return (length - width) // stride + 1


def conv1d(x, kernel, bias, width, stride, apply_relu=True):
    """Valid cross-correlation over the time axis, then optional ReLU.

    x is (L, in_ch) or (B, L, in_ch); kernel is (width*in_ch, out_ch),
    i.e. each output channel sees a flattened window of `width` positions.
    """
    single = x.values.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    batch, length, in_ch = x.shape
    if kernel.shape[0] != width * in_ch:
        raise DimensionError(
            "kernel rows %d != width*in_ch %d" % (kernel.shape[0], width * in_ch))
    n_win = conv_output_length(length, width, stride)
    # window row indices into the (B*L, in_ch) flattening
    starts = np.arange(n_win) * stride
    win = starts[:, None] + np.arange(width)[None, :]            # (n_win, width)
    offs = (np.arange(batch) * length)[:, None, None]
    idx = (offs + win[None, :, :]).reshape(-1)                   # B*n_win*width
    flat = reshape(x, (batch * length, in_ch))
    windows = reshape(gather_rows(flat, idx), (batch * n_win, width * in_ch))
    out = add(matmul(windows, kernel), bias)
    if apply_relu:
        out = relu(out)
    out = reshape(out, (batch, n_win, kernel.shape[1]))
    if single:
        out = reshape(out, (n_win, kernel.shape[1]))
    return out


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def init_matrix(rng, rows, cols, scale_override=None):
    """Glorot-scaled normal init as a trainable tensor."""
    s = scale_override if scale_override is not None else math.sqrt(2.0 / (rows + cols))
    return Tensor(rng.normal(0.0, s, size=(rows, cols)), requires_grad=True)


def init_vector(dim):
    return Tensor(np.zeros(dim), requires_grad=True)


def constant(values):
    return Tensor(np.asarray(values, dtype=np.float64))
