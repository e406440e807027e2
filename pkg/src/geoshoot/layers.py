"""Tensor primitives for the momentum regression network: dimension-
parametric convolution (plain and transposed) with hand-written backward
passes, PReLU, inverted dropout, the 1-norm loss, and Adam.

Convolutions are cross-correlations evaluated by unrolling patches
(im2col) into a single BLAS matmul per layer; the transposed variant is the
exact adjoint, realized through the shared input-gradient kernel.  All
primitives respect the dtype of their operands (training runs float32,
gradient checks run float64).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvSpec",
    "conv_forward",
    "conv_input_grad",
    "conv_weight_grad",
    "conv_backward",
    "prelu",
    "prelu_backward",
    "dropout_mask",
    "l1_loss",
    "l1_loss_grad",
    "AdamState",
    "adam_step",
    "ConvLayer",
    "PReLULayer",
    "DropoutLayer",
]


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0
    transposed: bool = False

    def __post_init__(self):
        if min(self.in_ch, self.out_ch, self.kernel, self.stride) < 1 or self.pad < 0:
            raise ValueError("invalid convolution spec")


def _out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _kernel_offsets(kshape):
    return list(itertools.product(*[range(k) for k in kshape]))


def _pad_spatial(x, pad):
    """Zero-pad every spatial axis of (B, C, *sp) by ``pad`` on both sides."""
    if not pad:
        return x
    padded = tuple(n + 2 * pad for n in x.shape[2:])
    out = np.zeros(x.shape[:2] + padded, dtype=x.dtype)
    center = (slice(None), slice(None)) + tuple(
        slice(pad, pad + n) for n in x.shape[2:]
    )
    out[center] = x
    return out


def _im2col(x, kshape, stride, pad, out_spatial):
    """(B, C, *sp) -> (B, C*K, N) patch matrix."""
    x = _pad_spatial(x, pad)
    B, C = x.shape[:2]
    K = int(np.prod(kshape))
    N = int(np.prod(out_spatial))
    cols = np.empty((B, C, K, N), dtype=x.dtype)
    for ki, offs in enumerate(_kernel_offsets(kshape)):
        sl = tuple(
            slice(o, o + stride * (n - 1) + 1, stride)
            for o, n in zip(offs, out_spatial)
        )
        cols[:, :, ki, :] = x[(slice(None), slice(None)) + sl].reshape(B, C, N)
    return cols.reshape(B, C * K, N)


def _col2im(dcols, in_spatial, kshape, stride, pad, out_spatial):
    """Adjoint of _im2col: scatter-add (B, C*K, N) back to (B, C, *sp)."""
    d = len(kshape)
    B = dcols.shape[0]
    K = int(np.prod(kshape))
    C = dcols.shape[1] // K
    padded = tuple(n + 2 * pad for n in in_spatial)
    dx = np.zeros((B, C) + padded, dtype=dcols.dtype)
    dcols = dcols.reshape(B, C, K, -1)
    for ki, offs in enumerate(_kernel_offsets(kshape)):
        sl = tuple(
            slice(o, o + stride * (n - 1) + 1, stride)
            for o, n in zip(offs, out_spatial)
        )
        dx[(slice(None), slice(None)) + sl] += dcols[:, :, ki, :].reshape(
            (B, C) + tuple(out_spatial)
        )
    if pad:
        crop = (slice(None), slice(None)) + tuple(slice(pad, pad + n) for n in in_spatial)
        dx = dx[crop]
    return dx


def conv_forward(x, w, bias, stride=1, pad=0, return_cols=False):
    """Cross-correlation: x (B, Cin, *sp), w (Cout, Cin, *k) -> (B, Cout, *out)."""
    kshape = w.shape[2:]
    in_spatial = x.shape[2:]
    out_spatial = tuple(_out_size(n, k, stride, pad) for n, k in zip(in_spatial, kshape))
    if any(n < 1 for n in out_spatial):
        raise ValueError(f"conv output collapses: input {in_spatial}, kernel {kshape}")
    cols = _im2col(x, kshape, stride, pad, out_spatial)
    W2 = w.reshape(w.shape[0], -1)
    out = np.matmul(W2[None], cols)
    if bias is not None:
        out += bias.reshape(1, -1, 1)
    out = out.reshape((x.shape[0], w.shape[0]) + out_spatial)
    return (out, cols) if return_cols else out


def conv_input_grad(dout, w, stride, pad, in_spatial):
    """Gradient of conv_forward w.r.t. its input (also the transposed-conv
    forward map).  dout (B, Cout, *out) -> (B, Cin, *in_spatial)."""
    kshape = w.shape[2:]
    out_spatial = dout.shape[2:]
    B = dout.shape[0]
    W2T = np.ascontiguousarray(w.reshape(w.shape[0], -1).T)
    dcols = np.matmul(W2T[None], dout.reshape(B, w.shape[0], -1))
    return _col2im(dcols, in_spatial, kshape, stride, pad, out_spatial)


def conv_weight_grad(x, dout, kshape, stride, pad, cols=None):
    """Gradient of conv_forward w.r.t. the weights; reuses the forward's
    unrolled patch matrix when supplied."""
    out_spatial = dout.shape[2:]
    B, Cout = dout.shape[:2]
    if cols is None:
        cols = _im2col(x, kshape, stride, pad, out_spatial)
    N = cols.shape[-1]
    dflat = np.ascontiguousarray(dout.reshape(B, Cout, N).transpose(1, 0, 2)).reshape(Cout, -1)
    cflat = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(cols.shape[1], -1)
    dW2 = dflat @ cflat.T
    return dW2.reshape((Cout, x.shape[1]) + tuple(kshape))


def conv_backward(x, w, dout, stride=1, pad=0, cols=None):
    """Returns (dx, dw, dbias) for conv_forward."""
    dx = conv_input_grad(dout, w, stride, pad, x.shape[2:])
    dw = conv_weight_grad(x, dout, w.shape[2:], stride, pad, cols=cols)
    db = dout.sum(axis=(0,) + tuple(range(2, dout.ndim)))
    return dx, dw, db


# ---------------------------------------------------------------------------
# activations / dropout / loss
# ---------------------------------------------------------------------------

def prelu(x, slope):
    """x where x > 0, slope*x otherwise; slope is per-channel (axis 1)."""
    a = slope.reshape((1, -1) + (1,) * (x.ndim - 2))
    return np.maximum(x, 0) + a * np.minimum(x, 0)


def prelu_backward(x, slope, dout):
    """Returns (dx, dslope)."""
    a = slope.reshape((1, -1) + (1,) * (x.ndim - 2))
    neg = x <= 0
    dx = dout * (1.0 + (a - 1.0) * neg)
    red = (0,) + tuple(range(2, x.ndim))
    dslope = np.sum(dout * np.minimum(x, 0), axis=red)
    return dx, dslope


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float64):
    """Inverted-scaling Bernoulli mask: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)


def l1_loss(pred, truth):
    """Mean absolute difference over all entries."""
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch in l1_loss")
    return float(np.mean(np.abs(pred - truth)))


def l1_loss_grad(pred, truth):
    """Subgradient of l1_loss w.r.t. pred (0 at ties)."""
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch in l1_loss")
    return np.sign(pred - truth) / pred.size


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment accumulators, one pair per named parameter."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One in-place Adam update of every named parameter."""
    state.step(params, grads)


# ---------------------------------------------------------------------------
# layer objects (used to wire the network graph)
# ---------------------------------------------------------------------------

class ConvLayer:
    """Convolution or transposed convolution with bias.

    Transposed layers act as the adjoint of a convolution whose input size is
    ``out_size``; that target size resolves the output-size ambiguity of
    strided convolution arithmetic for odd extents.
    """

    def __init__(self, name, in_ch, out_ch, kernel, stride=1, pad=0,
                 transposed=False, out_size=None, dtype=np.float32):
        self.name = name
        self.spec = ConvSpec(in_ch, out_ch, kernel, stride, pad, transposed)
        self.out_size = out_size
        if transposed and out_size is None:
            raise ValueError("transposed conv needs an explicit out_size")
        self.dtype = dtype
        self.w = None
        self.b = None
        self._x = None
        self._cols = None

    def build(self, dim, rng: np.random.Generator):
        s = self.spec
        kshape = (s.kernel,) * dim
        if s.transposed:
            shape = (s.in_ch, s.out_ch) + kshape
            fan_in = s.in_ch * int(np.prod(kshape))
        else:
            shape = (s.out_ch, s.in_ch) + kshape
            fan_in = s.in_ch * int(np.prod(kshape))
        bound = np.sqrt(6.0 / fan_in)
        self.w = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self.b = np.zeros(s.out_ch, dtype=self.dtype)

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def forward(self, x):
        s = self.spec
        self._x = x
        if s.transposed:
            d = x.ndim - 2
            out = conv_input_grad(x, self.w, s.stride, s.pad, (self.out_size,) * d)
            out += self.b.reshape((1, -1) + (1,) * d)
            return out
        out, self._cols = conv_forward(x, self.w, self.b, s.stride, s.pad,
                                       return_cols=True)
        return out

    def backward(self, dout):
        s = self.spec
        x = self._x
        self._x = None
        if s.transposed:
            red = (0,) + tuple(range(2, dout.ndim))
            db = dout.sum(axis=red)
            dx = conv_forward(dout, self.w, None, s.stride, s.pad)
            dw = conv_weight_grad(dout, x, self.w.shape[2:], s.stride, s.pad)
            grads = {f"{self.name}.w": dw, f"{self.name}.b": db}
            return dx, grads
        dx, dw, db = conv_backward(x, self.w, dout, s.stride, s.pad,
                                   cols=self._cols)
        self._cols = None
        return dx, {f"{self.name}.w": dw, f"{self.name}.b": db}


class PReLULayer:
    def __init__(self, name, channels, init=0.25, dtype=np.float32):
        self.name = name
        self.a = np.full(channels, init, dtype=dtype)
        self._x = None

    def params(self):
        return {f"{self.name}.a": self.a}

    def forward(self, x):
        self._x = x
        return prelu(x, self.a)

    def backward(self, dout):
        dx, da = prelu_backward(self._x, self.a, dout)
        self._x = None
        return dx, {f"{self.name}.a": da}


class DropoutLayer:
    """Active only when a dropout probability and rng are supplied to
    forward; pass-through otherwise (deterministic mode)."""

    def __init__(self):
        self._mask = None

    def forward(self, x, p=0.0, rng=None):
        if p <= 0.0 or rng is None:
            self._mask = None
            return x
        self._mask = dropout_mask(x.shape, p, rng, dtype=x.dtype)
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        out = dout * self._mask
        self._mask = None
        return out
