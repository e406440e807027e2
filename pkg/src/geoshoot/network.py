"""Dual-encoder / per-dimension-decoder momentum regression network.

Each encoder branch: two blocks of three 3^d convolutions (+PReLU), each
block closed by a stride-2 2^d convolution (+PReLU) acting as learned
pooling; features 64 in the first block, 128 in the second.  The encoder
outputs of the moving and target branches are concatenated (256 channels)
and feed d independent decoders, each the mirror of an encoder branch with
doubled features (256 then 128), transposed convolutions for unpooling, and
a final convolution without nonlinearity producing one momentum channel.

In ``mc_dropout`` mode, Bernoulli dropout (inverted scaling) is applied
after every convolution except the pooling/unpooling convolutions and the
final decoder convolution.

Momentum targets are tiny in physical units, so training rescales them by a
per-dataset constant (``output_scale``, stored with the weights); predictions
are mapped back, and loss traces report raw-unit values so runs with
different scales stay comparable.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .layers import AdamState, ConvLayer, DropoutLayer, PReLULayer, _out_size, l1_loss_grad
from .patches import PatchBatch

__all__ = ["TrainConfig", "RegressionNet", "train", "save_qsnet", "load_qsnet"]

ENC_FEATURES = (64, 128)
DEC_FEATURES = (256, 128)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    dropout_p: float = 0.0
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("lr must be > 0 and dropout_p in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


class _Branch:
    """A linear chain of layers; dropout slots are inert unless an active
    dropout probability is passed through forward."""

    def __init__(self):
        self.items = []

    def add(self, layer, dropout_after=False):
        self.items.append(layer)
        if dropout_after:
            self.items.append(DropoutLayer())

    def forward(self, x, p=0.0, rng=None):
        for layer in self.items:
            if isinstance(layer, DropoutLayer):
                x = layer.forward(x, p, rng)
            else:
                x = layer.forward(x)
        return x

    def backward(self, dout, grads):
        for layer in reversed(self.items):
            if isinstance(layer, DropoutLayer):
                dout = layer.backward(dout)
            else:
                dout, g = layer.backward(dout)
                grads.update(g)
        return dout

    def layers_with_params(self):
        return [l for l in self.items if not isinstance(l, DropoutLayer)]


def _encoder_branch(prefix: str, sizes) -> _Branch:
    br = _Branch()
    f_prev = 1
    for blk, feats in enumerate(ENC_FEATURES, start=1):
        for i in range(1, 4):
            name = f"{prefix}.b{blk}c{i}"
            br.add(ConvLayer(name, f_prev, feats, 3, 1, 1))
            br.add(PReLULayer(name + ".act", feats), dropout_after=True)
            f_prev = feats
        name = f"{prefix}.pool{blk}"
        br.add(ConvLayer(name, feats, feats, 2, 2, 0))
        br.add(PReLULayer(name + ".act", feats))
    return br


def _decoder_branch(prefix: str, sizes) -> _Branch:
    """Mirror of an encoder branch with doubled features: per block, three
    convolutions then a stride-2 transposed convolution for unpooling; a
    final convolution (no nonlinearity) emits the single momentum channel."""
    s0, s1, s2 = sizes
    br = _Branch()
    for i in range(1, 4):
        name = f"{prefix}.b1c{i}"
        br.add(ConvLayer(name, DEC_FEATURES[0], DEC_FEATURES[0], 3, 1, 1))
        br.add(PReLULayer(name + ".act", DEC_FEATURES[0]), dropout_after=True)
    br.add(ConvLayer(f"{prefix}.unpool1", DEC_FEATURES[0], DEC_FEATURES[1], 2, 2, 0,
                     transposed=True, out_size=s1))
    br.add(PReLULayer(f"{prefix}.unpool1.act", DEC_FEATURES[1]))
    for i in range(1, 3):
        name = f"{prefix}.b2c{i}"
        br.add(ConvLayer(name, DEC_FEATURES[1], DEC_FEATURES[1], 3, 1, 1))
        br.add(PReLULayer(name + ".act", DEC_FEATURES[1]), dropout_after=True)
    br.add(ConvLayer(f"{prefix}.unpool2", DEC_FEATURES[1], DEC_FEATURES[1], 2, 2, 0,
                     transposed=True, out_size=s0))
    br.add(PReLULayer(f"{prefix}.unpool2.act", DEC_FEATURES[1]))
    br.add(ConvLayer(f"{prefix}.final", DEC_FEATURES[1], 1, 3, 1, 1))
    return br


class RegressionNet:
    """Momentum regressor from (moving, target) patch pairs."""

    def __init__(self, dim: int, patch_size: int, seed: int = 0,
                 dropout_p: float = 0.2):
        if dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        s1 = _out_size(patch_size, 2, 2, 0)
        s2 = _out_size(s1, 2, 2, 0)
        if s2 < 1:
            raise ValueError(f"patch size {patch_size} too small for two pools")
        self.dim = dim
        self.patch_size = patch_size
        self.dropout_p = float(dropout_p)
        self.output_scale = 1.0
        sizes = (patch_size, s1, s2)
        self.enc_moving = _encoder_branch("enc_m", sizes)
        self.enc_target = _encoder_branch("enc_t", sizes)
        self.decoders = [_decoder_branch(f"dec{k}", sizes) for k in range(dim)]
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        for br in [self.enc_moving, self.enc_target, *self.decoders]:
            for layer in br.layers_with_params():
                if isinstance(layer, ConvLayer):
                    layer.build(dim, rng)

    # -- parameters -----------------------------------------------------

    def params(self) -> OrderedDict:
        out = OrderedDict()
        for br in [self.enc_moving, self.enc_target, *self.decoders]:
            for layer in br.layers_with_params():
                out.update(layer.params())
        return out

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params().values())

    # -- forward / backward ---------------------------------------------

    def forward(self, patch_m, patch_t, mode: str = "deterministic",
                rng: np.random.Generator | None = None):
        """(B, 1, *p) x 2 -> (B, d, *p) raw-unit momentum patches."""
        if mode not in ("deterministic", "mc_dropout"):
            raise ValueError(f"unknown mode {mode!r}")
        p = self.dropout_p if mode == "mc_dropout" else 0.0
        if p > 0.0 and rng is None:
            raise ValueError("mc_dropout mode needs an rng")
        out = self._forward_scaled(patch_m, patch_t, p, rng)
        return out * self.output_scale

    def _forward_scaled(self, patch_m, patch_t, p, rng):
        fm = self.enc_moving.forward(patch_m, p, rng)
        ft = self.enc_target.forward(patch_t, p, rng)
        h = np.concatenate([fm, ft], axis=1)
        outs = [dec.forward(h, p, rng) for dec in self.decoders]
        return np.concatenate(outs, axis=1)

    def backward(self, dout):
        """Backprop a cotangent on the scaled output; returns named grads."""
        grads: dict[str, np.ndarray] = {}
        dh = None
        for k, dec in enumerate(self.decoders):
            dhk = dec.backward(dout[:, k:k + 1], grads)
            dh = dhk if dh is None else dh + dhk
        half = dh.shape[1] // 2
        self.enc_moving.backward(dh[:, :half], grads)
        self.enc_target.backward(dh[:, half:], grads)
        return grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(dataset: PatchBatch, cfg: TrainConfig,
          net: RegressionNet | None = None, dim: int | None = None,
          patch_size: int | None = None):
    """Epoch-shuffled minibatch optimization with Adam on the 1-norm loss.

    Returns (net, trace) where trace holds (epoch, mean raw-unit L1) rows.
    Deterministic given cfg.seed and the dataset.
    """
    if dataset.momentum is None:
        raise ValueError("training dataset has no momentum patches")
    n = len(dataset)
    if n == 0:
        raise ValueError("empty training dataset")
    if net is None:
        dim = dim or dataset.momentum.shape[1]
        patch_size = patch_size or dataset.moving.shape[-1]
        net = RegressionNet(dim, patch_size, seed=cfg.seed,
                            dropout_p=cfg.dropout_p if cfg.dropout_p > 0 else 0.2)
        scale = float(np.mean(np.abs(dataset.momentum)))
        net.output_scale = scale if scale > 0 else 1.0

    xm = dataset.moving.astype(np.float32)
    xt = dataset.target.astype(np.float32)
    y = (dataset.momentum / net.output_scale).astype(np.float32)

    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, drop_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    params = net.params()
    trace = []
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            sel = perm[lo:lo + cfg.batch_size]
            pred = net._forward_scaled(xm[sel], xt[sel], cfg.dropout_p, drop_rng)
            resid = pred - y[sel]
            losses.append(float(np.mean(np.abs(resid))) * len(sel))
            dl = (np.sign(resid) / resid.size).astype(np.float32)
            grads = net.backward(dl)
            adam.step(params, grads)
        trace.append((epoch, float(np.sum(losses) / n) * net.output_scale))
    return net, trace


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

def save_qsnet(net: RegressionNet, path) -> None:
    """QSNET weights file: `QSNET 1`, `dim <d>`, then one
    `tensor <name> <rank> <extents...>` line + raw little-endian float32
    payload per tensor, metadata tensors first, parameters in graph order."""
    tensors = OrderedDict()
    tensors["meta.patch_size"] = np.array(float(net.patch_size))
    tensors["meta.dropout_p"] = np.array(net.dropout_p)
    tensors["meta.output_scale"] = np.array(net.output_scale)
    tensors.update(net.params())
    with open(path, "wb") as fh:
        fh.write(f"QSNET 1\ndim {net.dim}\n".encode("ascii"))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            extents = " ".join(str(s) for s in arr.shape)
            line = f"tensor {name} {arr.ndim}" + (f" {extents}" if arr.ndim else "")
            fh.write((line + "\n").encode("ascii"))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_qsnet(path) -> RegressionNet:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != "QSNET 1":
            raise ValueError(f"bad magic: {magic!r}")
        dim_line = fh.readline().decode("ascii").split()
        if dim_line[:1] != ["dim"]:
            raise ValueError("expected dim header line")
        dim = int(dim_line[1])
        tensors = OrderedDict()
        while True:
            line = fh.readline()
            if not line:
                break
            parts = line.decode("ascii").split()
            if not parts or parts[0] != "tensor":
                raise ValueError(f"malformed tensor line: {line!r}")
            name, rank = parts[1], int(parts[2])
            shape = tuple(int(v) for v in parts[3:3 + rank])
            count = int(np.prod(shape)) if rank else 1
            payload = fh.read(count * 4)
            if len(payload) != count * 4:
                raise ValueError(f"truncated payload for tensor {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape)
    patch_size = int(tensors.pop("meta.patch_size"))
    dropout_p = float(tensors.pop("meta.dropout_p"))
    output_scale = float(tensors.pop("meta.output_scale"))
    net = RegressionNet(dim, patch_size, seed=0, dropout_p=dropout_p)
    net.output_scale = output_scale
    params = net.params()
    if set(params) != set(tensors):
        raise ValueError("weight file does not match the architecture")
    for name, p in params.items():
        arr = tensors[name].astype(p.dtype)
        if arr.shape != p.shape:
            raise ValueError(f"tensor {name} has shape {arr.shape}, expected {p.shape}")
        p[...] = arr
    return net
