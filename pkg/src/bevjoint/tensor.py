"""Dense tensors with reverse-mode gradients for the fixed op set the network uses.

This is deliberately not a general autodiff system: every op ships its own
analytic backward, tensors are immutable once produced, and shape mismatches
are hard errors (no implicit broadcasting).
"""

import numpy as np

# Default compute precision. Gradient-check builds switch to float64 for
# finite-difference headroom; inference/training runs in float32.
DEFAULT_DTYPE = np.float32

# When True, every op validates its output is finite. NaN/Inf is an error
# state in this engine, never a silently propagated value.
FINITE_CHECKS = True


class ConfigurationError(ValueError):
    """A shape or wiring mismatch that indicates a miswired model/config."""


class DataError(ValueError):
    """Ground-truth or dataset content outside its documented domain."""


class NumericsError(FloatingPointError):
    """An op produced NaN/Inf from finite inputs."""


def check_finite(arr, what):
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericsError(f"{what} produced non-finite values")


class DenseTensor:
    """N-d float array with a gradient slot and a link to its producing op.

    `data` is contiguous, row-major, float32 or float64. `grad` is filled
    lazily during backward() and always matches `data` in shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        arr = np.asarray(data)
        if arr.ndim:
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return DenseTensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate_grad(self, g):
        if self.grad is None:
            g = np.asarray(g, dtype=self.data.dtype)
            self.grad = np.ascontiguousarray(g) if g.ndim else g
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from a scalar output back to all leaves."""
        if self.data.size != 1:
            raise ConfigurationError("backward() requires a scalar output")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            parent_grads = node._backward_fn(node.grad)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                if parent.requires_grad or parent._parents:
                    if pg.shape != parent.data.shape:
                        raise ConfigurationError(
                            f"backward produced grad of shape {pg.shape} "
                            f"for tensor of shape {parent.data.shape}"
                        )
                    parent._accumulate_grad(pg)

    def __repr__(self):
        return f"DenseTensor(shape={self.shape}, dtype={self.dtype.name}, grad={'set' if self.grad is not None else 'none'})"


def _topo_order(root):
    order = []
    seen = set()
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


class Parameter:
    """Named trainable tensor. Ids are dotted module paths, unique per model."""

    __slots__ = ("id", "tensor", "trainable")

    def __init__(self, pid, value, trainable=True):
        self.id = str(pid)
        self.trainable = bool(trainable)
        self.tensor = DenseTensor(value, requires_grad=self.trainable)

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, arr):
        if arr.shape != self.tensor.data.shape:
            raise ConfigurationError(
                f"parameter {self.id}: cannot assign shape {arr.shape} "
                f"over {self.tensor.data.shape}"
            )
        self.tensor.data = np.ascontiguousarray(arr, dtype=self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.id}, shape={self.tensor.shape}, trainable={self.trainable})"


def as_tensor(x, dtype=None):
    """Wrap arrays/Parameters as DenseTensor without copying when possible."""
    if isinstance(x, Parameter):
        return x.tensor
    if isinstance(x, DenseTensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return DenseTensor(arr)
