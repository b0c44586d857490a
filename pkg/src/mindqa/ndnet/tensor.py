"""Tensor and tape for reverse-mode differentiation.

Tensors wrap numpy arrays. Operations executed while a :class:`Tape` is
active, and touching at least one tracked tensor, are recorded on it;
everything else is evaluated eagerly without bookkeeping.
"""

import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def working_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def high_precision():
    """Evaluate in float64 (used by finite-difference checks)."""
    prev = working_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = prev


def active_tape():
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "_tape", "_idx")

    def __init__(self, data, check=True):
        arr = np.asarray(data, dtype=working_dtype())
        if check and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self._tape = None
        self._idx = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __len__(self):
        return self.data.shape[0]

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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; :meth:`watch` registers named leaves whose
    gradients :meth:`backward` returns.
    """

    def __init__(self):
        self.nodes = []  # (output, inputs, vjp)
        self.leaves = {}

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def tracks(self, t):
        return isinstance(t, Tensor) and t._tape is self

    def watch(self, params):
        """Wrap a name -> array mapping as tracked leaf tensors."""
        out = {}
        for name, value in params.items():
            t = Tensor(value)
            t._tape = self
            t._idx = -1
            self.leaves[name] = t
            out[name] = t
        return out

    def record(self, out, inputs, vjp):
        out._tape = self
        out._idx = len(self.nodes)
        self.nodes.append((out, inputs, vjp))

    def backward(self, loss):
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = getattr(loss, "shape", None)
            raise TapeError(f"loss must be a scalar tensor, got shape {shape}")
        if loss._tape is not self:
            raise TapeError("loss is not reachable from this tape")
        grads = {}
        grads[id(loss)] = np.ones_like(loss.data)
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not self.tracks(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = {}
        for name, leaf in self.leaves.items():
            g = grads.get(id(leaf))
            result[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        return result


def backward(tape, loss):
    return tape.backward(loss)
