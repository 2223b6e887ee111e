"""Neural building blocks for the conditioner networks.

2D convolutions use kernel size 3 with circular (torus) padding so output
spatial extents always equal input extents, and commute with cyclic lattice
shifts. A conditioner is a stack of three such convolutions with LeakyReLU
between them.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import GraphError, ShapeError
from .tensor import Tensor, make_op

KERNEL = 3


class Conv2dLayer:
    """3x3 convolution with circular padding and optional dilation."""

    def __init__(self, weight: Tensor, bias: Tensor, dilation: int = 1):
        if weight.ndim != 4 or weight.shape[2:] != (KERNEL, KERNEL):
            raise ShapeError(f"conv weight must be [out, in, 3, 3], got {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError("conv bias must match output channels")
        self.weight = weight
        self.bias = bias
        self.dilation = int(dilation)
        self.out_channels, self.in_channels = weight.shape[:2]


def init_conv(in_channels, out_channels, dilation, rng, dtype="single", zero=False):
    """Kaiming-style fan-in uniform init; `zero` gives an all-zero layer."""
    dt = T.resolve_dtype(dtype)
    shape = (out_channels, in_channels, KERNEL, KERNEL)
    if zero:
        w = np.zeros(shape, dtype=dt)
        b = np.zeros(out_channels, dtype=dt)
    else:
        bound = 1.0 / np.sqrt(in_channels * KERNEL * KERNEL)
        w = rng.uniform(-bound, bound, size=shape).astype(dt)
        b = rng.uniform(-bound, bound, size=out_channels).astype(dt)
    return Conv2dLayer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                       dilation)


def _fold_periodic(gp, pad, axis):
    """Fold padding margins of a gradient back onto the torus along one axis."""
    g = np.moveaxis(gp, axis, -1)
    L = g.shape[-1] - 2 * pad
    core = np.ascontiguousarray(g[..., pad:pad + L])
    if pad:
        core[..., L - pad:] += g[..., :pad]
        core[..., :pad] += g[..., pad + L:]
    return np.moveaxis(core, -1, axis)


def _im2col(xd, dilation):
    """Windows [B, L, L, Cin*9] of the circularly padded input."""
    p = dilation
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)), mode="wrap")
    B, C, _, _ = xd.shape
    L = xd.shape[2]
    sB, sC, sU, sV = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, L, L, KERNEL, KERNEL),
        strides=(sB, sC, sU, sV, dilation * sU, dilation * sV),
        writeable=False,
    )
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * L * L, C * KERNEL * KERNEL
    )


def conv2d_circular(x: Tensor, layer: Conv2dLayer) -> Tensor:
    """Periodic convolution of [batch, in, L, L]; differentiable in all three
    of input, weight, and bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv input must be [batch, in, L, L], got {x.shape}")
    B, C, Lu, Lv = x.shape
    if C != layer.in_channels:
        raise ShapeError(f"conv expected {layer.in_channels} input channels, got {C}")
    if Lu != Lv:
        raise ShapeError("conv input must be square")
    d = layer.dilation
    if Lu < 2 * d + 1:
        raise ShapeError(f"lattice extent {Lu} too small for dilation {d}")
    L = Lu
    Cout = layer.out_channels
    xd, wd, bd = x.data, layer.weight.data, layer.bias.data

    cols = _im2col(xd, d)
    wmat = wd.reshape(Cout, -1)
    out = (cols @ wmat.T).reshape(B, L, L, Cout).transpose(0, 3, 1, 2) + bd[
        None, :, None, None
    ]
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * L * L, Cout)
        cols_b = _im2col(xd, d)
        grad_w = (gmat.T @ cols_b).reshape(Cout, C, KERNEL, KERNEL)
        grad_b = gmat.sum(axis=0)
        grad_cols = (gmat @ wmat).reshape(B, L, L, C, KERNEL, KERNEL)
        gxp = np.zeros((B, C, L + 2 * d, L + 2 * d), dtype=g.dtype)
        for i in range(KERNEL):
            for j in range(KERNEL):
                gxp[:, :, i * d:i * d + L, j * d:j * d + L] += grad_cols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = _fold_periodic(_fold_periodic(gxp, d, 2), d, 3)
        return (gx, grad_w, grad_b)

    return make_op("conv2d", out, [x, layer.weight, layer.bias], [xd, wd], bw)


def conditioner_forward(layers, features: Tensor, slope=0.01) -> Tensor:
    """conv -> LeakyReLU -> conv -> LeakyReLU -> conv."""
    h = features
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        h = conv2d_circular(h, layer)
        if i != last:
            h = T.leaky_relu(h, slope)
    return h


def softplus(x, shift=0.0):
    """log(1 + exp(x + shift)), overflow-safe, built from primitive ops."""
    x = T.add(x, shift) if shift else T.as_tensor(x)
    big = x.data > 20.0
    safe = T.where(big, np.zeros((), dtype=x.dtype), x)
    return T.where(big, x, T.log(T.exp(safe) + 1.0))


def softmax(x, axis):
    """Softmax along one axis; shift by the detached max for stability."""
    shift = x.data.max(axis=axis, keepdims=True)
    e = T.exp(x - shift)
    return e / e.sum(axes=(axis,), keepdims=True)


class ParamRegistry:
    """Ordered name -> parameter tensor map with stable iteration order."""

    def __init__(self):
        self._params = {}

    def register(self, name, t: Tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not t.requires_grad:
            raise ValueError(f"parameter {name!r} must require grad")
        self._params[name] = t
        return t

    def named(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_elements(self):
        return sum(t.size for t in self._params.values())

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise KeyError(f"parameter set mismatch: missing={missing}, extra={extra}")
        for name, arr in state.items():
            p = self._params[name]
            if arr.shape != p.data.shape:
                raise ShapeError(f"shape mismatch for {name!r}")
            p.data = np.array(arr, dtype=p.data.dtype)


class Adam:
    """Adam with bias correction; gradients are zeroed by a separate call."""

    def __init__(self, params: ParamRegistry, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.named()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.named()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.named():
            if p.grad is None:
                raise GraphError(f"adam step with missing grad for {name!r}")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {
            "t": self.t,
            "lr": self.lr,
            "betas": (self.beta1, self.beta2),
            "eps": self.eps,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state):
        self.t = state["t"]
        self.lr = state["lr"]
        self.beta1, self.beta2 = state["betas"]
        self.eps = state["eps"]
        for k in self.m:
            self.m[k] = state["m"][k].copy()
            self.v[k] = state["v"][k].copy()


def clip_grad_norm(params: ParamRegistry, max_norm: float) -> float:
    """Rescale all grads to global L2 norm `max_norm` if exceeded; returns
    the pre-clip norm."""
    total = 0.0
    for _, p in params.named():
        if p.grad is None:
            raise GraphError("clip_grad_norm with missing grad")
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, p in params.named():
            p.grad = p.grad * scale
    return norm
