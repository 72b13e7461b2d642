"""Dense tensors with tape-based reverse-mode differentiation.

Storage is a row-major numpy array. Training runs in float32; gradient
checks switch the default dtype to float64 with :func:`precision`.

Every differentiable op whose inputs include a tensor with
``requires_grad`` appends a node to the thread-local tape. ``backward``
walks the tape once in reverse order and then consumes it, so a second
``backward`` without a fresh forward pass raises :class:`TapeError`.

Broadcasting for elementwise binary ops is limited to trailing expansion:
either shapes match, or the smaller operand's shape equals the trailing
dimensions of the larger one (a scalar matches anything). This covers bias
addition and per-feature statistics, and nothing else.
"""

import contextlib
import threading

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class _State(threading.local):
    def __init__(self):
        self.tape = []
        self.generation = 0
        self.grad_enabled = True
        self.dtype = np.float32


_state = _State()


def get_default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def tape_length() -> int:
    return len(_state.tape)


def reset_tape():
    """Drop any recorded operations without running backward."""
    # break output <-> node cycles so activations are freed immediately
    for node in _state.tape:
        node.output._node = None
        node.inputs = ()
        node.backward = None
    _state.tape = []
    _state.generation += 1


def _check_finite(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_gen", "_index")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state.dtype)
        if arr.flags.writeable is False or arr is data:
            arr = arr.copy()
        _check_finite("Tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._gen = None
        self._index = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def _bad_item(t):
    raise ShapeError(f"item: tensor of shape {t.shape} is not a scalar")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(op, data, inputs, backward_fn) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and put it on the tape.

    ``backward_fn(grad_out)`` returns one gradient (or ``None``) per input.
    Ops implemented outside this module use this to join the tape.
    """
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out._gen = None
    out._index = None
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        node = _Node(op, tuple(inputs), out, backward_fn)
        out._node = node
        out._gen = _state.generation
        out._index = len(_state.tape)
        _state.tape.append(node)
    return out


def backward(loss: Tensor):
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward: loss does not depend on any tensor requiring grad")
    if loss._gen is not None and loss._gen != _state.generation:
        raise TapeError("backward: tape already consumed; run a new forward pass")
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return

    tape = _state.tape
    grads = {id(loss): np.ones_like(loss.data)}
    for i in range(loss._index, -1, -1):
        node = tape[i]
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(
                    f"{node.op} backward: gradient shape {gi.shape} != input shape {inp.shape}")
            if inp._node is None:
                inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    reset_tape()


# ---------------------------------------------------------------------------
# elementwise binary ops


def _broadcast_check(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not trailing-broadcast compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return record("mul", ad * bd, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not contract")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return record("matmul", ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got shape {a.shape}")
    return record("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes], dtype=np.int64)) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return record("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


# ---------------------------------------------------------------------------
# elementwise unary ops


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return record("log", out, (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record("square", ad * ad, (a,), lambda g: (2 * g * ad,))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    e = np.exp(-np.abs(ad))
    out = np.where(ad >= 0, 1 / (1 + e), e / (1 + e)).astype(ad.dtype, copy=False)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    ad = a.data
    pos = ad >= 0
    scale = np.where(pos, 1.0, slope).astype(ad.dtype)
    return record("leaky_relu", ad * scale, (a,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(fn, inputs, epsilon: float = 1e-4, max_checks=None, rng=None) -> float:
    """Max relative error between backprop and central differences.

    ``fn(*inputs)`` must return a scalar tensor and be deterministic. Each
    element of each input is nudged by ``+-epsilon``; the error per element is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``. With
    ``max_checks`` only that many randomly chosen elements per input are
    probed. Run under ``precision(np.float64)`` for meaningful numbers.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    reset_tape()
    out = fn(*inputs)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                picker = rng if rng is not None else np.random.default_rng(0)
                idx = picker.choice(flat.size, size=max_checks, replace=False)
            gflat = ga.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = float(fn(*inputs).data)
                flat[i] = orig - epsilon
                fm = float(fn(*inputs).data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * epsilon)
                a = float(gflat[i])
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
