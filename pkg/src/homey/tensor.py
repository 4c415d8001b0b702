"""Dense-array engine with reverse-mode differentiation.

Carries exactly the operator set the detection pipeline needs: broadcast
elementwise arithmetic, 2-D matmul, same-padded conv2d, row softmax,
nearest-neighbor upsampling, clamped spatial shifts, reductions, row
gathers and channel slices. Executed operations are recorded on a tape in
execution order (which is already topological) and replayed in exact
reverse by backward().

Training runs in float32; verification switches the default dtype to
float64 via the precision() context.
"""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .kernels import active as _k
from .kernels import numpy_impl as _knp


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Tape misuse: consumed tape, cross-graph mixing, non-scalar backward."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_grad_enabled = True


def default_dtype():
    return _default_dtype


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}")
    _default_dtype = _DTYPES[name]


@contextmanager
def precision(name: str):
    """Temporarily switch the default dtype ('float32' / 'float64')."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = prev


@contextmanager
def no_grad():
    """Disable tape recording; ops return plain values."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tape:
    """Ordered record of executed operations; replayed in reverse once."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False


_current_tape: Tape | None = None


class Node:
    __slots__ = ("op", "out", "bwd")

    def __init__(self, op: str, out: "Tensor", bwd):
        self.op = op
        self.out = out
        self.bwd = bwd  # grad_out -> iterable of (input Tensor, grad array)


class Tensor:
    """Dense real array with an optional gradient buffer and graph handle."""

    __slots__ = ("data", "grad", "requires_grad", "tape", "name", "retains_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 name: str | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: Tape | None = None
        self.name = name
        self.retains_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() on non-scalar tensor")
        return float(self.data.reshape(()))

    def __float__(self):
        return self.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> None:
        self.retains_grad = True

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar for internal composition
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=None, requires_grad: bool = False,
           name: str | None = None) -> Tensor:
    """Wrap data as a leaf tensor in the current default dtype."""
    arr = np.asarray(data, dtype=dtype or _default_dtype)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def param(data, name: str, dtype=None) -> Tensor:
    """Named learnable leaf."""
    return tensor(data, dtype=dtype, requires_grad=True, name=name)


def _tape_for(inputs) -> Tape:
    """All recordings join the single live tape; execution order is the
    topological order the backward sweep relies on."""
    global _current_tape
    for t in inputs:
        if t.tape is not None and t.tape.consumed:
            raise GraphError("tensor belongs to an already-backpropagated graph")
    if _current_tape is None or _current_tape.consumed:
        _current_tape = Tape()
    return _current_tape


def _record(op: str, data: np.ndarray, inputs, bwd) -> Tensor:
    """Create the output tensor, recording a node when grads are live."""
    if not _grad_enabled or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out.retains_grad = False
    tape = _tape_for(inputs)
    out.tape = tape
    tape.nodes.append(Node(op, out, bwd))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # read-only broadcast views must be materialized; writable views
        # are safe to hold (grads are never mutated in place)
        t.grad = g if g.flags.writeable else np.array(g)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate d(loss)/d(leaf) for every reachable grad-requiring leaf."""
    global _current_tape
    if loss.data.size != 1:
        raise GraphError("backward requires a scalar loss")
    tape = loss.tape
    if tape is None:
        return  # constant: all gradients are zero
    if tape.consumed:
        raise GraphError("backward called twice on the same tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for inp, gin in node.bwd(g):
            _accumulate(inp, gin)
        if not node.out.retains_grad:
            node.out.grad = None
    tape.nodes.clear()  # release closures; consumed flag keeps misuse detectable
    if _current_tape is tape:
        _current_tape = None


def _check_same_dtype(a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")


def _reduce_broadcast(g: np.ndarray, a_shape, b_shape) -> np.ndarray:
    """Fold a gradient over the broadcast pattern that mapped b onto a."""
    if b_shape == a_shape:
        return g
    if b_shape == ():
        return np.asarray(g.sum())
    if b_shape == a_shape[:-1]:
        return g.sum(axis=-1)
    if b_shape == a_shape[-1:]:
        return g.reshape(-1, a_shape[-1]).sum(axis=0)
    raise ShapeError(f"unsupported broadcast {b_shape} onto {a_shape}")


def _broadcast_view(b: np.ndarray, a_shape) -> np.ndarray:
    """View of b broadcast onto a's shape per the supported patterns."""
    if b.shape == a_shape or b.shape == ():
        return b
    if b.shape == a_shape[:-1]:
        return b[..., None]
    if b.shape == a_shape[-1:]:
        return b
    raise ShapeError(f"cannot broadcast {b.shape} onto {a_shape}")


def _binary(op: str, a: Tensor, b, fwd, da_fn, db_fn) -> Tensor:
    if not isinstance(a, Tensor):
        raise TypeError("first operand must be a Tensor")
    if isinstance(b, (int, float)):
        bv = np.asarray(b, dtype=a.data.dtype)
        data = fwd(a.data, bv)
        if data.shape != a.data.shape:
            raise ShapeError("scalar elementwise changed shape")

        def bwd(g, a=a, bv=bv):
            return [(a, da_fn(g, a.data, bv))]

        return _record(op, data, (a,), bwd)

    _check_same_dtype(a, b)
    bb = _broadcast_view(b.data, a.data.shape)
    data = fwd(a.data, bb)
    if data.shape != a.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g, a=a, b=b, bb=bb):
        out = []
        ga = None
        if a.requires_grad:
            ga = da_fn(g, a.data, bb)
            out.append((a, ga))
        if b.requires_grad:
            gb = _reduce_broadcast(db_fn(g, a.data, bb),
                                   a.data.shape, b.data.shape)
            if gb is ga:  # add passes g through to both sides
                gb = gb.copy()
            out.append((b, gb))
        return out

    return _record(op, data, (a, b), bwd)


def add(a: Tensor, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Tensor, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return add(a, float(s))


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, float(s))


def _unary(op: str, a: Tensor, fwd, dfn) -> Tensor:
    data = fwd(a.data)

    def bwd(g, a=a, data=data):
        return [(a, dfn(g, a.data, data))]

    return _record(op, data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    def fwd(x):
        # stable both directions: exp(-|x|) never overflows
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    return _unary("sigmoid", a, fwd, lambda g, x, y: g * y * (1.0 - y))


def relu(a: Tensor) -> Tensor:
    return _unary("relu", a, lambda x: np.maximum(x, 0),
                  lambda g, x, y: g * (x > 0))


def log(a: Tensor) -> Tensor:
    if a.data.min() <= 0:
        raise ShapeError("log requires strictly positive input")
    return _unary("log", a, np.log, lambda g, x, y: g / x)


def square(a: Tensor) -> Tensor:
    return _unary("square", a, np.square, lambda g, x, y: g * 2.0 * x)


def sqrt(a: Tensor) -> Tensor:
    if a.data.min() < 0:
        raise ShapeError("sqrt requires nonnegative input")
    return _unary("sqrt", a, np.sqrt, lambda g, x, y: g * 0.5 / y)


def atan(a: Tensor) -> Tensor:
    return _unary("atan", a, np.arctan, lambda g, x, y: g / (1.0 + x * x))


_ELEMENTWISE = {
    "add": (add, 2), "sub": (sub, 2), "mul": (mul, 2),
    "sigmoid": (sigmoid, 1), "relu": (relu, 1),
    "log": (log, 1), "square": (square, 1),
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by op kind: add/sub/mul (binary), sigmoid/relu/log/square."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    fn, arity = _ELEMENTWISE[kind]
    if arity == 2:
        if b is None:
            raise ValueError(f"{kind} needs a second operand")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{kind} is unary")
    return fn(a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _check_same_dtype(a, b)
    data = a.data @ b.data

    def bwd(g, a=a, b=b):
        out = []
        if a.requires_grad:
            out.append((a, g @ b.data.T))
        if b.requires_grad:
            out.append((b, a.data.T @ g))
        return out

    return _record("matmul", data, (a, b), bwd)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing the transpose (BLAS handles it)."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul_nt expects 2-D operands")
    if a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"matmul_nt trailing extents differ: {a.shape} x {b.shape}")
    _check_same_dtype(a, b)
    data = a.data @ b.data.T

    def bwd(g, a=a, b=b):
        out = []
        if a.requires_grad:
            out.append((a, g @ b.data))
        if b.requires_grad:
            out.append((b, g.T @ a.data))
        return out

    return _record("matmul_nt", data, (a, b), bwd)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose2d expects a 2-D tensor")
    return _record("transpose", np.ascontiguousarray(a.data.T), (a,),
                   lambda g, a=a: [(a, g.T)])


def softmax_rows(a: Tensor) -> Tensor:
    """Row-stochastic softmax of a 2-D tensor (stable, max-subtracted)."""
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    if not np.isfinite(a.data).all():
        raise ShapeError("softmax_rows requires finite input")
    y = _k.softmax_rows_fwd(a.data)

    def bwd(g, a=a, y=y):
        return [(a, _k.softmax_rows_bwd(y, g))]

    return _record("softmax_rows", y, (a,), bwd)


def conv2d(x: Tensor, kern: Tensor, stride: int = 1,
           padding: str = "replicate") -> Tensor:
    """Same-padded cross-correlation of (H, W, Cin) with (k, k, Cin, Cout).

    Output spatial extents are ceil(H/stride) x ceil(W/stride).
    """
    if x.data.ndim != 3 or kern.data.ndim != 4:
        raise ShapeError("conv2d expects (H,W,Cin) input and (k,k,Cin,Cout) kernel")
    k = kern.data.shape[0]
    if kern.data.shape[1] != k or k % 2 == 0:
        raise ShapeError("conv2d kernel must be square with odd extent")
    if kern.data.shape[2] != x.data.shape[2]:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape[2]}, "
                         f"kernel {kern.data.shape[2]}")
    if stride not in (1, 2):
        raise ShapeError("conv2d stride must be 1 or 2")
    if padding not in ("replicate", "zero"):
        raise ShapeError("conv2d padding must be 'replicate' or 'zero'")
    _check_same_dtype(x, kern)
    h, w, cin = x.data.shape
    cout = kern.data.shape[3]
    p = k // 2
    ho = -(-h // stride)
    wo = -(-w // stride)
    mode = "edge" if padding == "replicate" else "constant"
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)), mode=mode)
    # im2col once; the cols matrix is reused for the kernel gradient
    cols = _im2col(xp, k, stride, ho, wo, cin)
    data = (cols @ kern.data.reshape(k * k * cin, cout)).reshape(ho, wo, cout)

    def bwd(g, x=x, kern=kern, cols=cols, stride=stride, k=k, p=p,
            padding=padding, h=h, w=w, cin=cin, cout=cout, ho=ho, wo=wo):
        out = []
        if kern.requires_grad:
            g2 = g.reshape(ho * wo, cout)
            out.append((kern, (cols.T @ g2).reshape(k, k, cin, cout)))
        if x.requires_grad:
            dxp = _knp.conv2d_bwd_input(g.reshape(ho, wo, cout), kern.data,
                                        stride, h + 2 * p, w + 2 * p)
            out.append((x, _unpad(dxp, p, padding, h, w)))
        return out

    return _record("conv2d", data, (x, kern), bwd)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int,
            cin: int) -> np.ndarray:
    sy, sx, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(ho, wo, k, k, cin),
        strides=(sy * stride, sx * stride, sy, sx, sc), writeable=False)
    return view.reshape(ho * wo, k * k * cin)


def _unpad(dxp: np.ndarray, p: int, padding: str, h: int, w: int) -> np.ndarray:
    """Collapse padded-input gradients back onto the true input."""
    if padding == "zero":
        return dxp[p:p + h, p:p + w].copy()
    dx = dxp[p:p + h, p:p + w].copy()
    # replicate padding: border contributions fold onto the edge pixels
    dx[0] += dxp[:p, p:p + w].sum(axis=0)
    dx[-1] += dxp[p + h:, p:p + w].sum(axis=0)
    left = dxp[:, :p].sum(axis=1)
    right = dxp[:, p + w:].sum(axis=1)
    dx[:, 0] += left[p:p + h]
    dx[0, 0] += left[:p].sum(axis=0)
    dx[-1, 0] += left[p + h:].sum(axis=0)
    dx[:, -1] += right[p:p + h]
    dx[0, -1] += right[:p].sum(axis=0)
    dx[-1, -1] += right[p + h:].sum(axis=0)
    return dx


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a factor x factor block."""
    if factor < 1 or int(factor) != factor:
        raise ShapeError("upsample factor must be a positive integer")
    factor = int(factor)
    if factor == 1:
        data = a.data
    else:
        data = np.repeat(np.repeat(a.data, factor, axis=0), factor, axis=1)

    def bwd(g, a=a, f=factor):
        if f == 1:
            return [(a, g)]
        h, w = a.data.shape[:2]
        rest = a.data.shape[2:]
        return [(a, g.reshape((h, f, w, f) + rest).sum(axis=(1, 3)))]

    return _record("upsample", data, (a,), bwd)


_shift_index_cache: dict = {}


def _shift_indices(h: int, w: int, dy: int, dx: int):
    key = (h, w, dy, dx)
    got = _shift_index_cache.get(key)
    if got is None:
        rows = np.clip(np.arange(h) + dy, 0, h - 1)[:, None]
        cols = np.clip(np.arange(w) + dx, 0, w - 1)[None, :]
        got = _shift_index_cache[key] = (rows, cols)
    return got


def shift2d(a: Tensor, dy: int, dx: int) -> Tensor:
    """Clamped spatial shift: out[i,j] = a[clip(i+dy), clip(j+dx)]."""
    if a.data.ndim not in (2, 3):
        raise ShapeError("shift2d expects a 2-D or 3-D tensor")
    h, w = a.data.shape[:2]
    rows, cols = _shift_indices(h, w, dy, dx)
    data = a.data[rows, cols]

    def bwd(g, a=a, dy=dy, dx=dx):
        return [(a, _k.shift2d_adjoint(np.ascontiguousarray(g), dy, dx))]

    return _record("shift2d", data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)

    def bwd(g, a=a):
        return [(a, g.reshape(a.data.shape))]

    return _record("reshape", data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g, a=a):
        return [(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))]

    return _record("sum_all", data, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def sum_channels(a: Tensor) -> Tensor:
    """Reduce the trailing axis; (..., C) -> (...)."""
    if a.data.ndim < 2:
        raise ShapeError("sum_channels needs at least 2 dimensions")
    data = a.data.sum(axis=-1)

    def bwd(g, a=a):
        return [(a, np.broadcast_to(g[..., None], a.data.shape)
                 .astype(a.data.dtype, copy=False))]

    return _record("sum_channels", data, (a,), bwd)


def mean_channels(a: Tensor) -> Tensor:
    return scale(sum_channels(a), 1.0 / a.data.shape[-1])


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor by integer index."""
    if a.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def bwd(g, a=a, idx=idx):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return [(a, da)]

    return _record("take_rows", data, (a,), bwd)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the trailing axis."""
    data = np.ascontiguousarray(a.data[..., start:stop])

    def bwd(g, a=a, start=start, stop=stop):
        da = np.zeros_like(a.data)
        da[..., start:stop] = g
        return [(a, da)]

    return _record("slice_last", data, (a,), bwd)


# compositions used throughout the pipeline
def maximum(a: Tensor, b: Tensor) -> Tensor:
    return add(a, relu(sub(b, a)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    return sub(a, relu(sub(a, b)))


def clip01(a: Tensor) -> Tensor:
    """Clamp to [0, 1]: relu(x) - relu(x - 1)."""
    return sub(relu(a), relu(add_scalar(a, -1.0)))


def assert_finite(a: Tensor, what: str = "tensor") -> None:
    if not np.isfinite(a.data).all():
        raise FloatingPointError(f"non-finite values in {what}")
