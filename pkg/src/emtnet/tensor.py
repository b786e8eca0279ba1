"""Dense tensor type with reverse-mode autodiff and the basic network primitives.

Layout conventions: activations are (batch, channels, height, width), dense
inputs are (batch, features).  Storage defaults to float32; every reduction
(sums, means, moments, matmul accumulation) runs in float64 and is cast back
to the storage dtype afterwards.  Build tensors from float64 data to run the
whole graph in 64-bit, which is what the gradient-check tests do.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "BatchNormState",
    "no_grad",
    "is_grad_enabled",
    "astensor",
    "add",
    "scale",
    "cmul",
    "tsum",
    "relu",
    "sigmoid",
    "stable_sigmoid",
    "dense",
    "dropout",
    "global_avg_pool",
    "batch_norm",
]

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (pure inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float array plus the bookkeeping for backprop.

    Non-leaf tensors remember their parents and a closure that routes the
    upstream gradient to them; ``backward()`` walks the recorded graph in
    reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d inputs to shape (1,)
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={'set' if self.grad is not None else 'none'})"

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def backward(self, grad=None):
        """Backpropagate from this tensor through the recorded graph."""
        if self._backward is None and not self._parents:
            raise RuntimeError(
                "backward() before forward: this tensor has no recorded graph "
                "(leaf tensor, or forward ran under no_grad)"
            )
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(f"gradient shape {grad.shape} != tensor shape {self.data.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording the graph only when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    # gradients are combined functionally (never mutated in place), so
    # storing a shared or broadcast view here is safe
    if not (t.requires_grad or t._parents):
        return
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g if t.grad is None else t.grad + g


def _sum64(x, axis=None, keepdims=False):
    """Sum with 64-bit accumulation, result in the input dtype."""
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)


def _mean64(x, axis=None, keepdims=False):
    return np.mean(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum of two tensors of identical shape (skip connections)."""
    a, b = astensor(a), astensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    data = a.data + b.data

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(data, (a, b), backward)


def scale(a, c) -> Tensor:
    """Multiply a tensor by a python scalar."""
    a = astensor(a)
    c = float(c)
    data = a.data * np.asarray(c, dtype=a.data.dtype)

    def backward(g):
        _accum(a, g * np.asarray(c, dtype=g.dtype))

    return _make(data, (a,), backward)


def cmul(a, c) -> Tensor:
    """Elementwise multiply by a constant array; no gradient flows into c."""
    a = astensor(a)
    c = np.asarray(c, dtype=a.data.dtype)
    if c.shape != a.data.shape:
        raise ValueError(f"cmul: constant shape {c.shape} != tensor shape {a.data.shape}")
    data = a.data * c

    def backward(g):
        _accum(a, g * c)

    return _make(data, (a,), backward)


def tsum(a) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    a = astensor(a)
    data = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)

    def backward(g):
        _accum(a, np.broadcast_to(np.asarray(g, dtype=a.data.dtype), a.data.shape))

    return _make(data, (a,), backward)


def relu(x) -> Tensor:
    x = astensor(x)
    data = np.maximum(x.data, 0)

    def backward(g):
        _accum(x, g * (x.data > 0))

    return _make(data, (x,), backward)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """1/(1+e^-z) via the branch that never exponentiates a positive argument.

    Finite and monotone for |z| up to at least 1e4 in either float dtype.
    """
    z = np.asarray(z)
    out = np.empty_like(z, dtype=z.dtype if z.dtype == np.float64 else np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.astype(z.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = astensor(x)
    data = stable_sigmoid(x.data)

    def backward(g):
        _accum(x, g * data * (1.0 - data))

    return _make(data, (x,), backward)


def dense(x, w, b=None) -> Tensor:
    """Affine map: (N,F) @ (F,G) + (G,)."""
    x, w = astensor(x), astensor(w)
    b = astensor(b) if b is not None else None
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(f"dense: expected 2-D input and weights, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"dense: inner dimensions differ, input F={x.data.shape[1]} vs weights F={w.data.shape[0]}")
    if b is not None and b.data.shape != (w.data.shape[1],):
        raise ValueError(f"dense: bias shape {b.data.shape} != ({w.data.shape[1]},)")
    data = (x.data.astype(np.float64) @ w.data.astype(np.float64)).astype(x.data.dtype)
    if b is not None:
        data = data + b.data

    def backward(g):
        g64 = g.astype(np.float64)
        _accum(x, g64 @ w.data.astype(np.float64).T)
        _accum(w, x.data.astype(np.float64).T @ g64)
        if b is not None:
            _accum(b, g64.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward)


def dropout(x, rate: float, rng=None, mode: str = "train") -> Tensor:
    """Inverted dropout; infer mode is the identity.

    ``rng`` is a numpy Generator or seed; the mask is a pure function of it,
    which keeps training replays bit-identical.
    """
    if rate >= 1.0:
        raise ValueError(f"dropout: rate must be < 1, got {rate}")
    x = astensor(x)
    if mode == "infer" or rate == 0.0:
        data = x.data.copy()

        def backward(g):
            _accum(x, g)

        return _make(data, (x,), backward)

    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = (gen.random(x.data.shape) >= rate)
    inv = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    mask = keep.astype(x.data.dtype) * inv
    data = x.data * mask

    def backward(g):
        _accum(x, g * mask)

    return _make(data, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean: (N,C,H,W) -> (N,C)."""
    x = astensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool: expected 4-D input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    data = _mean64(x.data, axis=(2, 3))

    def backward(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Learnable affine plus running statistics for one BN layer.

    Running stats update as ``running = momentum*running + (1-momentum)*batch``
    using the biased batch variance.  Infer mode reads only the running stats,
    so the output is independent of batch composition.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"batch norm epsilon must be > 0, got {self.epsilon}")
        if not (0.0 < self.momentum < 1.0):
            raise ValueError(f"batch norm momentum must lie in (0,1), got {self.momentum}")

    @classmethod
    def create(cls, channels: int, momentum: float = 0.99, epsilon: float = 1e-5,
               dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


def batch_norm(x, state: BatchNormState) -> Tensor:
    """Channel-wise batch normalization over (N,H,W) with learnable affine."""
    x = astensor(x)
    if state.epsilon <= 0:
        raise ValueError(f"batch norm epsilon must be > 0, got {state.epsilon}")
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm: expected 4-D input, got shape {x.data.shape}")
    c = x.data.shape[1]
    if state.gamma.data.shape != (c,) or state.beta.data.shape != (c,):
        raise ValueError(
            f"batch_norm: gamma/beta length {state.gamma.data.shape[0]} != input channels {c}"
        )
    gamma, beta = state.gamma, state.beta
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    if state.mode == "train":
        mean = _mean64(x.data, axis=axes)
        var = _mean64((x.data - mean[None, :, None, None]) ** 2, axis=axes)
        state.running_mean = (
            state.momentum * state.running_mean + (1.0 - state.momentum) * mean
        ).astype(state.running_mean.dtype)
        state.running_var = (
            state.momentum * state.running_var + (1.0 - state.momentum) * var
        ).astype(state.running_var.dtype)
    elif state.mode == "infer":
        mean = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    else:
        raise ValueError(f"batch_norm: unknown mode {state.mode!r}")

    inv_std = 1.0 / np.sqrt(var + np.asarray(state.epsilon, dtype=x.data.dtype))
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    train = state.mode == "train"

    def backward(g):
        _accum(beta, _sum64(g, axis=axes))
        _accum(gamma, _sum64(g * xhat, axis=axes))
        gxh = g * gamma.data[None, :, None, None]
        if train:
            # batch statistics depend on x, so the mean/var paths feed back
            sum_gxh = _sum64(gxh, axis=axes, keepdims=True)
            sum_gxh_xhat = _sum64(gxh * xhat, axis=axes, keepdims=True)
            dx = (gxh - sum_gxh / m - xhat * sum_gxh_xhat / m) * inv_std[None, :, None, None]
        else:
            dx = gxh * inv_std[None, :, None, None]
        _accum(x, dx)

    return _make(data, (x, gamma, beta), backward)
