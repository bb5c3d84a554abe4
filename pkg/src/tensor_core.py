"""Dense tensors with a reverse-mode differentiation tape.

Every model computation is expressed as operations on `Tensor`s. An operation
whose operands live on a `Tape` and need gradients appends a `Node` holding
its operands, its result and a backward rule; `backward` replays the nodes in
reverse record order and finally accumulates parameter gradients into the
`ParameterStore` the parameters were read from.

Only the operations the recommender needs are implemented. Elementwise
operations accept equal shapes or a single-element operand; everything else
goes through an explicit `broadcast_to`.
"""
import logging

import numpy as np
from scipy import special

from src import file_loader
from src.exceptions import ArgumentError, DimensionError, NumericError, UsageError

logger = logging.getLogger(__name__)

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64


def resolve_dtype(name):
    """64-bit (default, required for gradient checks) or 32-bit floats."""
    try:
        return _DTYPES[name]
    except KeyError:
        raise ArgumentError(f"dtype must be one of {sorted(_DTYPES)}, got '{name}'") from None


# ==============================================================================
# 1. TENSOR, NODE, TAPE
# ==============================================================================

class Tensor:
    __slots__ = ("data", "grad", "tape", "requires_grad", "name")

    def __init__(self, data, tape=None, requires_grad=False, name=None):
        data = np.asarray(data)
        # float32 parameters stay float32; everything else is promoted
        self.data = data if data.dtype == np.float32 else data.astype(_default_dtype, copy=False)
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes = []
        self._parameters = {}
        self._variables = []

    def __len__(self):
        return len(self.nodes)

    def parameter(self, store, name):
        """Leaf tensor reading `store[name]`; one leaf per name per tape."""
        key = (id(store), name)
        if key not in self._parameters:
            leaf = Tensor(store.value(name), tape=self, requires_grad=True, name=name)
            self._parameters[key] = (leaf, store)
        return self._parameters[key][0]

    def variable(self, data, name=None):
        """Free leaf that receives a `.grad` after backward (used by gradient checks)."""
        leaf = Tensor(data, tape=self, requires_grad=True, name=name)
        self._variables.append(leaf)
        return leaf

    def constant(self, data):
        return Tensor(data, tape=self)

    def parameter_leaves(self):
        return list(self._parameters.values())

    def variables(self):
        return list(self._variables)


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


as_tensor = _as_tensor


def _tape_of(tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise UsageError("operands were recorded on different tapes")
            tape = t.tape
    return tape


def _record(out_data, inputs, backward, op):
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op} produced non-finite values")
    tape = _tape_of(inputs)
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, tape=tape, requires_grad=needs_grad)
    if needs_grad:
        tape.nodes.append(Node(out, inputs, backward))
    return out


def backward(tape, loss):
    """
    Reverse sweep from a scalar `loss`. Intermediate adjoints live only in
    this call; parameter gradients are added to their stores at the end, so
    repeated sweeps accumulate. Returns {parameter name: this sweep's gradient}.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not None and loss.tape is not tape:
        raise UsageError("loss was not recorded on this tape")

    adjoints = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        upstream = adjoints.pop(id(node.output), None)
        if upstream is None:
            continue
        for inp, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adjoints:
                adjoints[key] = adjoints[key] + grad
            else:
                adjoints[key] = np.array(grad, dtype=inp.data.dtype)

    contributions = {}
    for leaf, store in tape.parameter_leaves():
        grad = adjoints.get(id(leaf))
        if grad is None:
            continue
        store.accumulate(leaf.name, grad)
        leaf.grad = grad
        contributions[leaf.name] = grad
    for leaf in tape.variables():
        grad = adjoints.get(id(leaf))
        leaf.grad = grad if grad is not None else np.zeros_like(leaf.data)
    return contributions


# ==============================================================================
# 2. ELEMENTWISE OPERATIONS
# ==============================================================================

def _check_binary(a, b, op):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _operands(a, b, op):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, op)
    if a.shape == b.shape:
        return a, b, a.data, b.data, a.shape
    if a.size == 1 and b.size != 1:
        return a, b, a.data.reshape(()), b.data, b.shape
    if b.size == 1 and a.size != 1:
        return a, b, a.data, b.data.reshape(()), a.shape
    # both single-element with different shapes
    shape = a.shape if a.ndim >= b.ndim else b.shape
    return a, b, a.data.reshape(()), b.data.reshape(()), shape


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    return np.asarray(np.sum(grad)).reshape(shape)


def add(a, b):
    a, b, x, y, _ = _operands(a, b, "add")

    def _backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(x + y, [a, b], _backward, "add")


def sub(a, b):
    a, b, x, y, _ = _operands(a, b, "sub")

    def _backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record(x - y, [a, b], _backward, "sub")


def mul(a, b):
    a, b, x, y, _ = _operands(a, b, "mul")

    def _backward(g):
        return _reduce_to(g * y, a.shape), _reduce_to(g * x, b.shape)

    return _record(x * y, [a, b], _backward, "mul")


def div(a, b):
    a, b, x, y, _ = _operands(a, b, "div")
    if np.any(y == 0):
        raise NumericError("div: division by zero")

    def _backward(g):
        return _reduce_to(g / y, a.shape), _reduce_to(-g * x / (y * y), b.shape)

    return _record(x / y, [a, b], _backward, "div")


def scale(a, factor):
    a = _as_tensor(a)
    factor = float(factor)

    def _backward(g):
        return (g * factor,)

    return _record(a.data * factor, [a], _backward, "scale")


def add_scalar(a, value):
    a = _as_tensor(a)

    def _backward(g):
        return (g,)

    return _record(a.data + value, [a], _backward, "add_scalar")


def sigmoid(a):
    a = _as_tensor(a)
    out = special.expit(a.data)

    def _backward(g):
        return (g * out * (1.0 - out),)

    return _record(out, [a], _backward, "sigmoid")


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def _backward(g):
        return (g * (1.0 - out * out),)

    return _record(out, [a], _backward, "tanh")


def clamped_log(a, low, high):
    """log(clip(a, low, high)); the gradient is zero where clipping is active."""
    a = _as_tensor(a)
    clipped = np.clip(a.data, low, high)
    inside = (a.data >= low) & (a.data <= high)

    def _backward(g):
        return (np.where(inside, g / clipped, 0.0),)

    return _record(np.log(clipped), [a], _backward, "clamped_log")


def select(mask, a, b):
    """Exact masked blend: a where mask else b. `mask` is a constant bool array."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    if not (a.shape == b.shape == mask.shape):
        raise DimensionError(f"select: shapes {mask.shape}, {a.shape}, {b.shape} must agree")

    def _backward(g):
        return np.where(mask, g, 0.0), np.where(mask, 0.0, g)

    return _record(np.where(mask, a.data, b.data), [a, b], _backward, "select")


def dropout(a, rate, rng, training):
    """Inverted dropout; identity outside training."""
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def elementwise(op, *args):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ArgumentError(f"unknown elementwise op '{op}'") from None
    return fn(*args)


# ==============================================================================
# 3. LINEAR ALGEBRA AND REDUCTIONS
# ==============================================================================

def matmul(a, b):
    """
    (m×k)·(k×n), or stacked (…×m×k)·(…×k×n) with equal leading dimensions.
    Backward: dA = dC·Bᵀ, dB = Aᵀ·dC.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    x, y = a.data, b.data

    def _backward(g):
        return np.matmul(g, np.swapaxes(y, -1, -2)), np.matmul(np.swapaxes(x, -1, -2), g)

    return _record(np.matmul(x, y), [a, b], _backward, "matmul")


def dot(a, b):
    """Inner product over the last axis (row-wise for matrices)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"dot: shapes {a.shape} and {b.shape} differ")
    x, y = a.data, b.data

    def _backward(g):
        g = np.asarray(g)[..., None]
        return g * y, g * x

    return _record(np.sum(x * y, axis=-1), [a, b], _backward, "dot")


def sum(a, axis=None):
    a = _as_tensor(a)

    def _backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(np.sum(a.data, axis=axis), [a], _backward, "sum")


def mean(a, axis=None):
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def _backward(g):
        return (g.reshape(a.shape),)

    return _record(out, [a], _backward, "reshape")


def broadcast_to(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    lead = len(shape) - a.ndim
    expanded = tuple(i + lead for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1)

    def _backward(g):
        g = np.sum(g, axis=tuple(range(lead)) + expanded, keepdims=True)
        return (g.reshape(a.shape),)

    return _record(out.copy(), [a], _backward, "broadcast_to")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, _backward, "concat")


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) > 1:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tensors, _backward, "stack")


def index(a, key):
    """Basic or advanced indexing (slices, integer arrays); gradients scatter-add back."""
    a = _as_tensor(a)
    out = a.data[key]

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _record(np.array(out), [a], _backward, "index")


def gather(table, indices):
    """Rows of a 2-D tensor (an embedding table, or any row matrix) by integer index."""
    table = _as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"gather: table must be 2-D, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ArgumentError(f"gather: index out of range for table with {table.shape[0]} rows")

    def _backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _record(table.data[indices], [table], _backward, "gather")


embedding = gather


def masked_max(a, mask, axis=-1):
    """
    Maximum over `axis` among entries where `mask` is true. Ties go to the
    first index; rows without any valid entry give 0 and no gradient.
    Returns (values, argmax indices).
    """
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"masked_max: mask {mask.shape} does not match {a.shape}")
    filled = np.where(mask, a.data, -np.inf)
    arg = np.argmax(filled, axis=axis)
    has_any = mask.any(axis=axis)
    picked = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    out = np.where(has_any, picked, 0.0)

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(arg, axis),
                          np.expand_dims(np.where(has_any, g, 0.0), axis), axis=axis)
        return (grad,)

    return _record(out, [a], _backward, "masked_max"), arg


def softmax(a, mask=None, axis=-1):
    """Numerically stable softmax; masked entries get probability 0 (all-masked rows: 0)."""
    a = _as_tensor(a)
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    shifted = np.where(mask, x, -np.inf)
    top = np.max(shifted, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(np.where(mask, x - top, -np.inf))
    total = np.sum(e, axis=axis, keepdims=True)
    out = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def _backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record(out, [a], _backward, "softmax")


def softmax_cross_entropy(logits, target):
    """
    −log softmax(logits)[target]. A 1-D logit vector gives a scalar, an
    (B×m) batch with B targets gives B losses. Backward: softmax − onehot.
    """
    logits = _as_tensor(logits)
    single = logits.ndim == 1
    x = logits.data.reshape(1, -1) if single else logits.data
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape}, targets {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= x.shape[1]):
        raise ArgumentError(f"target index out of range [0, {x.shape[1]})")

    rows = np.arange(x.shape[0])
    top_idx = np.argmax(x, axis=1)
    shifted = x - x[rows, top_idx][:, None]
    e = np.exp(shifted)
    rest = e.copy()
    rest[rows, top_idx] = 0.0
    # log-sum-exp relative to the max, without cancelling against exp(0) = 1
    log_norm = np.log1p(np.sum(rest, axis=1))
    losses = log_norm - shifted[rows, targets]
    probs = e / np.sum(e, axis=1, keepdims=True)

    def _backward(g):
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        grad *= np.asarray(g).reshape(-1, 1)
        return (grad.reshape(logits.shape),)

    out = losses.reshape(()) if single else losses
    return _record(out, [logits], _backward, "softmax_cross_entropy")


# ==============================================================================
# 4. PARAMETER STORE
# ==============================================================================

class ParameterStore:
    """Named trainable arrays with same-shaped gradient buffers."""

    def __init__(self, dtype="float64"):
        self.dtype = resolve_dtype(dtype)
        self._values = {}
        self._grads = {}

    def add(self, name, value):
        value = np.array(value, dtype=self.dtype)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def names(self):
        return sorted(self._values)

    def value(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise KeyError(f"unknown parameter '{name}'") from None

    def grad(self, name):
        return self._grads[name]

    def items(self):
        return [(name, self._values[name]) for name in self.names()]

    def grads(self):
        return {name: self._grads[name] for name in self.names()}

    def accumulate(self, name, grad):
        target = self._grads[name]
        if grad.shape != target.shape:
            raise DimensionError(f"gradient for '{name}' has shape {grad.shape}, expected {target.shape}")
        target += grad

    def zero_grads(self):
        for grad in self._grads.values():
            grad.fill(0.0)

    def num_parameters(self):
        return int(np.sum([v.size for v in self._values.values()]))

    def global_grad_norm(self):
        return float(np.sqrt(np.sum([np.sum(g * g) for g in self._grads.values()])))

    def copy(self):
        other = ParameterStore(np.dtype(self.dtype).name)
        for name, value in self._values.items():
            other.add(name, value)
        return other

    def assign(self, other):
        """Copies values from another store with the same names and shapes, in place."""
        for name in self.names():
            np.copyto(self._values[name], other.value(name))

    def astype(self, dtype_name):
        self.dtype = resolve_dtype(dtype_name)
        for name in self.names():
            self._values[name] = self._values[name].astype(self.dtype)
            self._grads[name] = np.zeros_like(self._values[name])

    # --- checkpoint container ---

    def to_arrays(self, prefix="param."):
        return {f"{prefix}{name}": value.astype("<f8") for name, value in self._values.items()}

    def save(self, path, manifest, extra_arrays=None):
        arrays = self.to_arrays()
        arrays.update(extra_arrays or {})
        file_loader.write_container(path, arrays, manifest)

    @classmethod
    def from_arrays(cls, arrays, prefix="param."):
        store = cls()
        for key in sorted(arrays):
            if key.startswith(prefix):
                store.add(key[len(prefix):], arrays[key])
        return store

    @classmethod
    def load(cls, path):
        """Returns (store, manifest, all arrays) for a checkpoint written by `save`."""
        arrays, manifest = file_loader.read_container(path)
        return cls.from_arrays(arrays), manifest, arrays


def numerical_gradient(fn, array, h=1e-4):
    """Central finite differences of scalar fn() w.r.t. every entry of `array` (modified in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = fn()
        flat[i] = saved - h
        minus = fn()
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * h)
    return grad
