"""Dense tensor math with reverse-mode differentiation.

Covers exactly the operator set a convolutional network fabric needs:
3x3 convolution (stride 1 or 2, padding 1), x2 bilinear upsampling,
batch normalization, ReLU6, an affine head, and softmax cross entropy.
Arrays are numpy, float32 by default; float64 is supported throughout
for high-precision gradient checking.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Structural mismatch between tensor shapes."""


class UsageError(RuntimeError):
    """Operation called outside its contract (e.g. backward before forward)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording, e.g. for evaluation passes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A node in the computation graph wrapping a dense numpy array."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = np.asarray(data)
        self.grad = None
        if _grad_enabled:
            self._parents = tuple(parents)
            self._backward = backward_fn
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        if self.data.shape != other.data.shape:
            raise ShapeError(f"add: {self.data.shape} vs {other.data.shape}")
        out = Tensor(self.data + other.data, (self, other))

        def backward():
            _accumulate(self, out.grad)
            _accumulate(other, out.grad)

        out._backward = backward
        return out

    def reshape(self, shape) -> "Tensor":
        out = Tensor(self.data.reshape(shape), (self,))

        def backward():
            _accumulate(self, out.grad.reshape(self.data.shape))

        out._backward = backward
        return out

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A trainable leaf tensor with an optional permanent binary mask.

    Masked positions of the value are kept exactly zero: the mask is
    re-applied whenever it is set and after every optimizer step, and
    backward() zeroes the corresponding gradient entries.
    """

    __slots__ = ("mask", "trainable")

    def __init__(self, data, trainable=True):
        super().__init__(data)
        self.grad = np.zeros_like(self.data)
        self.mask = None
        self.trainable = trainable

    def set_mask(self, mask: np.ndarray) -> None:
        if mask.shape != self.data.shape:
            raise ShapeError(f"mask shape {mask.shape} vs value {self.data.shape}")
        self.mask = mask.astype(self.data.dtype)
        self.apply_mask()

    def apply_mask(self) -> None:
        if self.mask is not None:
            self.data *= self.mask

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate grads of every parameter reachable from a scalar loss node."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss._parents:
        raise UsageError("backward called on a node with no recorded forward pass")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
    # Masked weights never move: their gradient entries are zeroed here so
    # neither the optimizer nor any consumer of .grad sees a pull on them.
    for node in topo:
        if isinstance(node, Parameter) and node.mask is not None:
            node.grad *= node.mask


def _conv_out_extent(n: int, stride: int) -> int:
    # 3x3 kernel with padding 1: stride 1 preserves, stride 2 gives ceil(n/2)
    return (n - 1) // stride + 1


def conv2d(x: Tensor, weight: Parameter, bias: Parameter | None, stride: int = 1) -> Tensor:
    """3x3 convolution with padding 1. Input (B,Cin,H,W) -> (B,Cout,H',W')."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    B, Cin, H, W = x.data.shape
    Cout, Cin_w, kh, kw = weight.data.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"kernel must be 3x3, got {kh}x{kw}")
    if Cin != Cin_w:
        raise ShapeError(f"input has {Cin} channels, kernel expects {Cin_w}")

    Ho, Wo = _conv_out_extent(H, stride), _conv_out_extent(W, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, Cin, 3, 3, Ho, Wo), dtype=x.data.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i : i + (Ho - 1) * stride + 1 : stride,
                                  j : j + (Wo - 1) * stride + 1 : stride]
    cols2 = cols.reshape(B, Cin * 9, Ho * Wo)
    wflat = weight.data.reshape(Cout, Cin * 9)
    out_data = np.matmul(wflat, cols2).reshape(B, Cout, Ho, Wo)
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor(out_data, parents)

    def backward():
        g = out.grad.reshape(B, Cout, Ho * Wo)
        _accumulate(weight, np.tensordot(g, cols2, axes=([0, 2], [0, 2])).reshape(weight.data.shape))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2)))
        dcols = np.matmul(wflat.T, g).reshape(B, Cin, 3, 3, Ho, Wo)
        dxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i : i + (Ho - 1) * stride + 1 : stride,
                    j : j + (Wo - 1) * stride + 1 : stride] += dcols[:, :, i, j]
        _accumulate(x, dxp[:, :, 1 : 1 + H, 1 : 1 + W])

    out._backward = backward
    return out


def _bilinear_matrix(n_in: int, dtype) -> np.ndarray:
    """Row-stochastic (2n x n) interpolation matrix for x2 upsampling.

    Source coordinate of output pixel i is (i + 0.5)/2 - 0.5, clamped to
    [0, n_in - 1] (align-corners-false convention).
    """
    m = np.zeros((2 * n_in, n_in), dtype=dtype)
    for i in range(2 * n_in):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


def upsample_bilinear_x2(x: Tensor) -> Tensor:
    """Double both spatial extents of (B,C,H,W) by bilinear interpolation."""
    B, C, H, W = x.data.shape
    uh = _bilinear_matrix(H, x.data.dtype)
    uw = _bilinear_matrix(W, x.data.dtype)
    out_data = np.einsum("ph,bchw,qw->bcpq", uh, x.data, uw, optimize=True)
    out = Tensor(out_data, (x,))

    def backward():
        _accumulate(x, np.einsum("ph,bcpq,qw->bchw", uh, out.grad, uw, optimize=True))

    out._backward = backward
    return out


@dataclass
class BatchNormState:
    """Running statistics, updated by exponential moving average in train mode."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Parameter, beta: Parameter, state: BatchNormState,
               mode: str = "train", eps: float = BN_EPSILON,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization over batch and spatial dims, then affine.

    Train mode uses (biased) batch statistics and updates the running ones;
    eval mode normalizes with the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    B, C, H, W = x.data.shape
    n = B * H * W
    if mode == "train" and n < 2:
        raise UsageError(f"train-mode batch norm needs >= 2 values per channel, got {n}")
    axes = (0, 2, 3)

    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean[:] = (1.0 - momentum) * state.running_mean + momentum * mean
        state.running_var[:] = (1.0 - momentum) * state.running_var + momentum * var
    else:
        mean = state.running_mean.copy()
        var = state.running_var.copy()

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(out_data, (x, gamma, beta))

    def backward():
        g = out.grad
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        _accumulate(beta, g.sum(axis=axes))
        dxhat = g * gamma.data[None, :, None, None]
        if mode == "train":
            # batch stats depend on x: subtract the per-channel means the
            # normalization introduced
            m1 = dxhat.mean(axis=axes)[None, :, None, None]
            m2 = (dxhat * xhat).mean(axis=axes)[None, :, None, None]
            dx = inv_std[None, :, None, None] * (dxhat - m1 - xhat * m2)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        _accumulate(x, dx)

    out._backward = backward
    return out


def relu6(x: Tensor) -> Tensor:
    """Elementwise min(max(x, 0), 6)."""
    out = Tensor(np.clip(x.data, 0.0, 6.0), (x,))

    def backward():
        inside = (x.data > 0.0) & (x.data < 6.0)
        _accumulate(x, out.grad * inside)

    out._backward = backward
    return out


def linear(x: Tensor, weight: Parameter, bias: Parameter | None = None) -> Tensor:
    """Affine map per batch row: (B,F) x (K,F) -> (B,K)."""
    B, F = x.data.shape
    K, F_w = weight.data.shape
    if F != F_w:
        raise ShapeError(f"input has {F} features, weight expects {F_w}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data += bias.data[None, :]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor(out_data, parents)

    def backward():
        _accumulate(x, out.grad @ weight.data)
        _accumulate(weight, out.grad.T @ x.data)
        if bias is not None:
            _accumulate(bias, out.grad.sum(axis=0))

    out._backward = backward
    return out


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target], max-stabilized."""
    B, K = logits.data.shape
    targets = np.asarray(targets)
    if targets.shape != (B,):
        raise ShapeError(f"targets shape {targets.shape}, expected ({B},)")
    if targets.min() < 0 or targets.max() >= K:
        raise ValueError(f"target out of range [0, {K})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss_val = -log_probs[np.arange(B), targets].mean()
    out = Tensor(np.asarray(loss_val, dtype=logits.data.dtype), (logits,))

    def backward():
        probs = np.exp(log_probs)
        probs[np.arange(B), targets] -= 1.0
        _accumulate(logits, probs * (out.grad / B))

    out._backward = backward
    return out


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar node."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,))

    def backward():
        _accumulate(x, np.broadcast_to(out.grad, x.data.shape))

    out._backward = backward
    return out


@dataclass
class SgdConfig:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be nonnegative")


@dataclass
class SGD:
    """Stochastic gradient descent with optional momentum and weight decay.

    Masks are re-applied after every step, so masked weights stay exactly 0.
    """

    params: list[Parameter]
    config: SgdConfig
    _buffers: dict[int, np.ndarray] = field(default_factory=dict)

    def step(self) -> None:
        cfg = self.config
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            if cfg.weight_decay != 0.0:
                g = g + cfg.weight_decay * p.data
            if cfg.momentum != 0.0:
                buf = self._buffers.get(id(p))
                if buf is None:
                    buf = np.zeros_like(p.data)
                    self._buffers[id(p)] = buf
                buf *= cfg.momentum
                buf += g
                g = buf
            p.data -= cfg.learning_rate * g
            p.apply_mask()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params: list[Parameter], config: SgdConfig) -> None:
    """Single momentum-free step; momentum runs need a persistent SGD object."""
    SGD(params, config).step()
