"""Dense arrays with reverse-mode differentiation.

Every differentiable primitive produces a :class:`Tensor` stamped with a
monotonically increasing tape position. ``backward`` collects the nodes
reachable from the output and replays them in reverse tape order, so the
recorded op list doubles as a valid reverse topological order.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .errors import NonFiniteError

_tape_counter = itertools.count()
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._seq = next(_tape_counter)
        self.op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def backward(self, grad=None):
        backward(self, grad)

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named trainable array with its gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, value, name, dtype=None):
        super().__init__(value, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data, parents, backward_fn, op):
    """Wrap the result of a primitive and, when needed, put it on the tape.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _reachable(root):
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    return sorted(seen.values(), key=lambda n: n._seq, reverse=True)


def backward(root, grad=None):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Intermediate gradients are not retained.
    """
    if not root.requires_grad:
        raise RuntimeError("backward() on a tensor that does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise RuntimeError("grad must be given for non-scalar outputs")
        grad = np.ones_like(root.data)
    pending = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for node in _reachable(root):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


class ParamStore:
    """Ordered collection of uniquely named parameters plus optimizer state."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params = {}
        self.state = {}

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(np.array(value, dtype=self.dtype, order="C"), name)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def num_scalars(self):
        return int(sum(p.data.size for p in self._params.values()))

    def snapshot(self):
        return {name: p.data.copy() for name, p in self._params.items()}

    def load(self, arrays):
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in self._params.items():
            value = np.asarray(arrays[name])
            if value.shape != p.data.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.data.shape}")
            p.data = np.array(value, dtype=self.dtype, order="C")
