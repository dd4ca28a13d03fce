"""Reverse-mode automatic differentiation over dense float64 arrays.

Small define-by-run engine: each operation returns a new ``Tensor`` holding
its value, its input nodes and a closure computing input adjoints. Calling
``backward`` on a scalar loss accumulates gradients into ``.grad`` of every
tensor with ``requires_grad``. All reductions use numpy's deterministic
ordering, so identical runs produce bit-identical gradients.

The Adam optimizer operates on a flat parameter buffer (see
``ParameterStore``), which keeps update steps cheap and serialization
trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_debug_checks = False


def set_debug_checks(enabled):
    """Validate that every op output is finite (slow; for tests)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad", "_pinned")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._pinned = False
        if _debug_checks and not np.isfinite(self.data).all():
            raise FloatingPointError("non-finite values in op output")

    @property
    def shape(self):
        return self.data.shape

    def pin_grad(self, buffer):
        """Attach a persistent gradient buffer (used for parameters)."""
        self.grad = buffer
        self._pinned = True
        self.requires_grad = True
        return self

    def _accumulate(self, g):
        if self.grad is None:
            # ownership transfer: backward closures always hand over fresh arrays
            self.grad = g
        else:
            self.grad += g

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def backward(loss):
    """Accumulate adjoints of ``loss`` into every requires-grad tensor.

    ``loss`` must be scalar. Traversal is a fixed-order topological sort, so
    gradient accumulation order is deterministic.
    """
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    loss._accumulate(np.ones(()))
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in node._backward(node.grad):
            if parent.requires_grad:
                parent._accumulate(g)
        if not node._pinned:
            node.grad = None  # free intermediate adjoints eagerly


# ---------------------------------------------------------------------------
# Recorded operations
# ---------------------------------------------------------------------------

def _shape_check(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


def add(a, b):
    _shape_check(a, b)
    return Tensor(a.data + b.data, (a, b),
                  lambda g: ((a, g), (b, g.copy())))


def sub(a, b):
    _shape_check(a, b)
    return Tensor(a.data - b.data, (a, b),
                  lambda g: ((a, g), (b, -g)))


def mul(a, b):
    """Elementwise product of same-shape tensors."""
    _shape_check(a, b)
    return Tensor(a.data * b.data, (a, b),
                  lambda g: ((a, g * b.data), (b, g * a.data)))


def smul(s, a):
    """Product with a plain Python scalar (the only broadcast allowed)."""
    s = float(s)
    return Tensor(s * a.data, (a,), lambda g: ((a, s * g),))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        )
    return Tensor(a.data @ b.data, (a, b),
                  lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)))


def exp(a):
    out_data = np.exp(a.data)
    return Tensor(out_data, (a,), lambda g: ((a, g * out_data),))


def relu(a):
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), (a,),
                  lambda g: ((a, np.where(mask, g, 0.0)),))


def absolute(a):
    sign = np.sign(a.data)
    return Tensor(np.abs(a.data), (a,), lambda g: ((a, g * sign),))


def concat(tensors, axis):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slc = [slice(None)] * g.ndim
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            slc[axis] = slice(lo, hi)
            outs.append((t, g[tuple(slc)].copy()))
        return outs

    return Tensor(data, tuple(tensors), bwd)


def gather(a, index):
    """Select rows of a 2-D tensor by integer index."""
    index = np.asarray(index)
    if index.min(initial=0) < 0 or (a.data.shape[0] and index.max(initial=-1) >= a.data.shape[0]):
        raise IndexError("gather index out of range")

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return ((a, ga),)

    return Tensor(a.data[index], (a,), bwd)


def scatter_add(a, index, n_rows):
    """Accumulate rows of ``a`` into a zero tensor of ``n_rows`` rows."""
    index = np.asarray(index)
    if index.min(initial=0) < 0 or index.max(initial=-1) >= n_rows:
        raise IndexError("scatter-add index out of range")
    out = np.zeros((n_rows,) + a.data.shape[1:])
    np.add.at(out, index, a.data)
    return Tensor(out, (a,), lambda g: ((a, g[index].copy()),))


def sum_(a, axis=None):
    if axis is None:
        return Tensor(a.data.sum(), (a,),
                      lambda g: ((a, np.broadcast_to(g, a.data.shape).copy()),))
    out = a.data.sum(axis=axis)

    def bwd(g):
        return ((a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy()),)

    return Tensor(out, (a,), bwd)


def sq_norm_rows(a):
    """Per-row squared L2 norm of a 2-D tensor."""
    return Tensor(np.einsum("ij,ij->i", a.data, a.data), (a,),
                  lambda g: ((a, 2.0 * g[:, None] * a.data),))


def norm_rows(a):
    """Per-row L2 norm; the subgradient at a zero row is zero."""
    out_data = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))

    def bwd(g):
        safe = np.where(out_data > 0.0, out_data, 1.0)
        scale = np.where(out_data > 0.0, g / safe, 0.0)
        return ((a, scale[:, None] * a.data),)

    return Tensor(out_data, (a,), bwd)


def add_rowvec(a, v):
    """Add a length-C vector to every row of a (R, C) tensor (bias add)."""
    if a.data.ndim != 2 or v.data.shape != (a.data.shape[1],):
        raise ValueError(
            f"add_rowvec shape mismatch: {a.data.shape} + {v.data.shape}"
        )
    return Tensor(a.data + v.data[None, :], (a, v),
                  lambda g: ((a, g), (v, g.sum(axis=0))))


def constant(data):
    return Tensor(data)


# ---------------------------------------------------------------------------
# Parameter storage and Adam
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named float64 parameters backed by one flat buffer.

    Registration order is the serialization order. Gradients live in a
    parallel flat buffer, which makes the Adam update a handful of
    vectorized operations.
    """

    def __init__(self):
        self._names = []
        self._slices = {}
        self._shapes = {}
        self.flat = np.zeros(0)
        self.flat_grad = np.zeros(0)
        self._tensors = {}

    def register(self, name, values):
        if name in self._slices:
            raise ValueError(f"duplicate parameter {name!r}")
        values = np.asarray(values, dtype=np.float64)
        lo = self.flat.size
        self.flat = np.concatenate([self.flat, values.ravel()])
        self.flat_grad = np.zeros_like(self.flat)
        self._names.append(name)
        self._slices[name] = (lo, lo + values.size)
        self._shapes[name] = values.shape
        self._tensors = {}  # buffers moved; rebuild views lazily
        return name

    def tensor(self, name):
        """The parameter as a leaf tensor with a pinned gradient view."""
        t = self._tensors.get(name)
        if t is None:
            lo, hi = self._slices[name]
            shape = self._shapes[name]
            t = Tensor(self.flat[lo:hi].reshape(shape))
            t.pin_grad(self.flat_grad[lo:hi].reshape(shape))
            self._tensors[name] = t
        return t

    def value(self, name):
        lo, hi = self._slices[name]
        return self.flat[lo:hi].reshape(self._shapes[name])

    def names(self):
        return list(self._names)

    @property
    def size(self):
        return self.flat.size

    def zero_grad(self):
        self.flat_grad[:] = 0.0


@dataclass
class AdamState:
    """First/second-moment accumulators for one flat parameter buffer."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=np.zeros(n), v=np.zeros(n), beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    params -= lr * mhat / (np.sqrt(vhat) + state.eps)
