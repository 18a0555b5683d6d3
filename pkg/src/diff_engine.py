"""
Minimal reverse-mode automatic differentiation over dense numpy arrays.

A Tensor records the operation that produced it (parents + a backward function
returning one gradient per parent). Tape.from_output orders the graph
topologically and Tape.run walks it once in reverse, accumulating gradients
into the .grad slot of leaf tensors (parameters and explicit inputs).

Shapes never broadcast implicitly: elementwise ops require equal shapes, and
the only scalar form is scale(). Use expand() to repeat a tensor explicitly.
"""

import itertools
import logging
import struct
import threading
from contextlib import contextmanager
from typing import BinaryIO, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import GradientCheckError, SchemaVersionError, ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {'float32': np.float32, 'float64': np.float64}
_default_dtype = np.float64
_node_ids = itertools.count()
_grad_state = threading.local()


def set_default_dtype(dtype: Union[str, type]) -> None:
    """Select the float width used for every new tensor (64-bit for tests, 32-bit for training)"""
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"Unsupported dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
        dtype = _DTYPES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"Unsupported dtype {dtype!r}")
    _default_dtype = dtype


def get_default_dtype() -> type:
    return _default_dtype


@contextmanager
def default_dtype(dtype: Union[str, type]):
    """Use dtype for new tensors inside the block, then restore the previous width"""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)



def is_grad_enabled() -> bool:
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def no_grad():
    """Evaluate without recording a tape (thread-local)"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """Dense real array that can take part in a gradient tape"""

    __slots__ = ('data', 'grad', 'requires_grad', 'name', 'node_id', '_parents', '_backward')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data)
        if array.dtype != _default_dtype:
            array = array.astype(_default_dtype)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        Tape.from_output(self).run(grad)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: 'Tensor') -> 'Tensor':
        return add(self, other)

    def __sub__(self, other: 'Tensor') -> 'Tensor':
        return sub(self, other)

    def __mul__(self, other) -> 'Tensor':
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> 'Tensor':
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self) -> 'Tensor':
        return scale(self, -1.0)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Tape:
    """Topologically ordered operation records leading to one output tensor"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> 'Tape':
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in visited:
                continue
            visited.add(node.node_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and parent.node_id not in visited:
                    stack.append((parent, False))
        return cls(order)

    def run(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.nodes:
            return
        output = self.nodes[-1]
        if grad is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(grad, dtype=output.data.dtype)
            if seed.shape != output.shape:
                raise ShapeError(f"backward: seed gradient shape {seed.shape} vs output shape {output.shape}")
        pending: Dict[int, np.ndarray] = {output.node_id: seed}
        for node in reversed(self.nodes):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + parent_grad
                else:
                    pending[parent.node_id] = parent_grad


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _restore(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    axes = _axes(axis, len(shape))
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape('add', a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape('sub', a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape('mul', a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape('div', a, b)
    return _result(a.data / b.data, (a, b),
                   lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _result(y, (x,), lambda g: (g * 0.5 / y,))


def absolute(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU"""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    y = 0.5 * v * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _result(y, (x,), backward)


def clip(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clamp values; gradient flows only where the input was inside [lo, hi]"""
    y = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _result(y, (x,), lambda g: (g * inside,))


# linear algebra and layout

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n), or batched with identical leading dims"""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim == 2:
        out = a.data @ b.data

        def backward(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    elif a.shape[:-2] == b.shape[:-2]:
        out = a.data @ b.data

        def backward(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    else:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _result(out, (a, b), backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two"""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: needs at least 2 dims, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, cuts, axis=axis)

    return _result(out, tensors, backward)


def slice_axis(x: Tensor, axis: int, start: Optional[int], stop: Optional[int], step: int = 1) -> Tensor:
    """x[..., start:stop:step, ...] along one axis; backward scatters into zeros"""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop, step)
    index = tuple(index)
    out = x.data[index].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(out, (x,), backward)


def gather(table: Tensor, indices) -> Tensor:
    """Row lookup along axis 0 (embedding lookup); output shape indices.shape + table.shape[1:]"""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather: indices out of range for table shape {table.shape}")
    out = np.take(table.data, idx, axis=0)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (table,), backward)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of x to shape (right-aligned; size-1 dims may grow)"""
    shape = tuple(shape)
    lead = len(shape) - x.ndim
    if lead < 0 or any(s != t and s != 1 for s, t in zip(x.shape, shape[lead:])):
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    out = np.broadcast_to(x.data, shape).copy()
    grown = tuple(lead + i for i, (s, t) in enumerate(zip(x.shape, shape[lead:])) if s == 1 and t != 1)

    def backward(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if grown:
            g = g.sum(axis=tuple(a - lead for a in grown), keepdims=True)
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward)


# reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (x,), lambda g: (np.array(_restore(g, x.shape, axis, keepdims)),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = int(np.prod([x.shape[a] for a in _axes(axis, x.ndim)]))
    return _result(np.asarray(out), (x,), lambda g: (np.array(_restore(g, x.shape, axis, keepdims)) / count,))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along axis, shifted by the max to avoid overflow"""
    peak = np.max(x.data, axis=axis, keepdims=True)
    total = np.sum(np.exp(x.data - peak), axis=axis, keepdims=True)
    out_kept = peak + np.log(total)
    out = np.squeeze(out_kept, axis=axis)

    def backward(g):
        weights = np.exp(x.data - out_kept)
        return (np.expand_dims(g, axis) * weights,)

    return _result(out, (x,), backward)


def _select_reduce(x: Tensor, axis: int, pick) -> Tensor:
    idx = pick(x.data, axis=axis)
    idx_kept = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_kept, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx_kept, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (x,), backward)


def reduce_max(x: Tensor, axis: int = -1) -> Tensor:
    """Hard max; the gradient goes to the first maximal entry"""
    return _select_reduce(x, axis, np.argmax)


def reduce_min(x: Tensor, axis: int = -1) -> Tensor:
    """Hard min; the gradient goes to the first minimal entry"""
    return _select_reduce(x, axis, np.argmin)


# neural network primitives

def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax; entries where mask is False get probability exactly 0"""
    data = x.data
    if mask is not None:
        data = np.where(np.broadcast_to(np.asarray(mask, dtype=bool), data.shape), data, -np.inf)
    shifted = data - np.max(data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis; gamma/beta are the optional affine terms"""
    width = x.shape[-1]
    for name, p in (('gamma', gamma), ('beta', beta)):
        if p is not None and p.shape != (width,):
            raise ShapeError(f"layer_norm: {name} shape {p.shape} vs input shape {x.shape}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward(g):
        g_hat = g * gamma.data if gamma is not None else g
        gx = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                        - xhat * (g_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, width).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, width).sum(axis=0))
        return grads

    return _result(out, parents, backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, constant(keep))


# gradient checking

def grad_check(fn: Callable[..., Tensor], inputs: Union[Tensor, Sequence[Tensor]], eps: float = 1e-5) -> float:
    """
    Compare tape gradients with central finite differences.

    Args:
        fn: called as fn(*inputs); must return a single-element tensor
        inputs: tensor(s) to differentiate with respect to (perturbed in place)
        eps: finite-difference step

    Returns:
        Max relative error, with denominator max(|analytic|, |numeric|, 1e-8)
    """
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    out = fn(*tensors)
    if out.size != 1:
        raise GradientCheckError(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()

    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        for idx in np.ndindex(*t.shape):
            original = t.data[idx]
            with no_grad():
                t.data[idx] = original + eps
                f_plus = fn(*tensors).item()
                t.data[idx] = original - eps
                f_minus = fn(*tensors).item()
            t.data[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


# optimization

class AdamW:
    """Adam with decoupled weight decay"""

    def __init__(self, params: Iterable[Tensor], lr: float = 3e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 decay_filter: Optional[Callable[[Tensor], bool]] = None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.decay = [weight_decay if decay_filter is None or decay_filter(p) else 0.0 for p in self.params]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v, wd in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            if wd:
                p.data -= lr * wd * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


# checkpoint tensor blocks

TENSOR_BLOCK_MAGIC = b'TBLK'
TENSOR_BLOCK_VERSION = 1
_TAG_TO_DTYPE = {'f4': '<f4', 'f8': '<f8', 'i8': '<i8'}
_DTYPE_TO_TAG = {np.dtype(np.float32): 'f4', np.dtype(np.float64): 'f8', np.dtype(np.int64): 'i8'}


def write_tensor_blocks(stream: BinaryIO, arrays: Mapping[str, np.ndarray]) -> None:
    """Versioned header, then per tensor: name, dtype tag, shape, little-endian raw data"""
    stream.write(TENSOR_BLOCK_MAGIC)
    stream.write(struct.pack('<HI', TENSOR_BLOCK_VERSION, len(arrays)))
    for name, value in arrays.items():
        array = np.asarray(value)
        tag = _DTYPE_TO_TAG.get(array.dtype)
        if tag is None:
            raise ValueError(f"Tensor {name!r} has unsupported dtype {array.dtype}")
        encoded = name.encode('utf-8')
        stream.write(struct.pack('<H', len(encoded)))
        stream.write(encoded)
        stream.write(tag.encode('ascii'))
        stream.write(struct.pack('<B', array.ndim))
        stream.write(struct.pack(f'<{array.ndim}I', *array.shape))
        stream.write(np.ascontiguousarray(array, dtype=_TAG_TO_DTYPE[tag]).tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunk = stream.read(n)
    if len(chunk) != n:
        raise ValueError(f"Truncated tensor block stream: wanted {n} bytes, got {len(chunk)}")
    return chunk


def read_tensor_blocks(stream: BinaryIO) -> Dict[str, np.ndarray]:
    magic = _read_exact(stream, 4)
    if magic != TENSOR_BLOCK_MAGIC:
        raise SchemaVersionError('tensor blocks', magic, TENSOR_BLOCK_MAGIC)
    version, count = struct.unpack('<HI', _read_exact(stream, 6))
    if version != TENSOR_BLOCK_VERSION:
        raise SchemaVersionError('tensor blocks', version, TENSOR_BLOCK_VERSION)
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack('<H', _read_exact(stream, 2))
        name = _read_exact(stream, name_len).decode('utf-8')
        tag = _read_exact(stream, 2).decode('ascii')
        if tag not in _TAG_TO_DTYPE:
            raise ValueError(f"Tensor {name!r} has unknown dtype tag {tag!r}")
        (ndim,) = struct.unpack('<B', _read_exact(stream, 1))
        shape = struct.unpack(f'<{ndim}I', _read_exact(stream, 4 * ndim)) if ndim else ()
        dtype = np.dtype(_TAG_TO_DTYPE[tag])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(_read_exact(stream, nbytes), dtype=dtype).reshape(shape).copy()
    return arrays
