"""Networks (Gaussian encoder, decoder, CLUB conditional density), Adam, checkpoints."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOGVAR_CLAMP = 10.0


class Linear:
    def __init__(self, n_in: int, n_out: int):
        self.W = Tensor(np.zeros((n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.W.shape[0]:
            raise ShapeError(f"Linear expects width {self.W.shape[0]}, got {x.shape}")
        return ad.add_bias(ad.matmul(x, self.W), self.b)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


class Mlp:
    """Stack of affine layers.

    Hidden layers are followed by ``activation``; the last layer is too when
    ``activate_last`` is set (used for encoder trunks feeding separate heads).
    """

    def __init__(self, widths: list[int], activation: str = "relu", activate_last: bool = False):
        if len(widths) < 2:
            raise ValueError("Mlp needs at least input and output widths")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.activate_last = activate_last
        self.layers = [Linear(a, b) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < last or self.activate_last:
                x = act(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


@dataclass
class GaussianLatent:
    """Per-sample mean and clamped log-variance of p(z|x)."""

    mu: Tensor
    logvar: Tensor


class GaussianEncoder:
    def __init__(self, widths: list[int], latent_dim: int, logvar_clamp: float = LOGVAR_CLAMP):
        self.trunk = Mlp(widths, activate_last=True)
        self.mu_head = Linear(widths[-1], latent_dim)
        self.logvar_head = Linear(widths[-1], latent_dim)
        self.latent_dim = latent_dim
        self.logvar_clamp = logvar_clamp

    def parameters(self) -> list[Tensor]:
        return self.trunk.parameters() + self.mu_head.parameters() + self.logvar_head.parameters()


class Decoder:
    def __init__(self, widths: list[int]):
        self.mlp = Mlp(widths)

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()


class ClubNet:
    """Diagonal-Gaussian q(z_j | z_i, w) with the class fed in as a one-hot."""

    def __init__(self, latent_dim: int, num_classes: int, hidden: list[int] | tuple[int, ...] = (64,),
                 logvar_clamp: float = LOGVAR_CLAMP):
        self.latent_dim = latent_dim
        self.num_classes = num_classes
        self.trunk = Mlp([latent_dim + num_classes, *hidden], activate_last=True)
        self.mu_head = Linear(hidden[-1], latent_dim)
        self.logvar_head = Linear(hidden[-1], latent_dim)
        self.logvar_clamp = logvar_clamp

    def __call__(self, z_i: Tensor, w) -> tuple[Tensor, Tensor]:
        w = np.asarray(w, dtype=np.intp)
        if np.any(w < 1) or np.any(w > self.num_classes):
            raise ValueError(f"class index outside [1, {self.num_classes}]")
        onehot = np.zeros((w.shape[0], self.num_classes))
        onehot[np.arange(w.shape[0]), w - 1] = 1.0
        h = self.trunk(ad.concat_cols(z_i, onehot))
        logvar = ad.clip(self.logvar_head(h), -self.logvar_clamp, self.logvar_clamp)
        return self.mu_head(h), logvar

    def parameters(self) -> list[Tensor]:
        return self.trunk.parameters() + self.mu_head.parameters() + self.logvar_head.parameters()


def encoder_forward(enc: GaussianEncoder, x) -> GaussianLatent:
    h = enc.trunk(x if isinstance(x, Tensor) else Tensor(x))
    logvar = ad.clip(enc.logvar_head(h), -enc.logvar_clamp, enc.logvar_clamp)
    return GaussianLatent(enc.mu_head(h), logvar)


def decoder_forward(dec: Decoder, y: Tensor) -> Tensor:
    return dec.mlp(y)


def predict(logits) -> np.ndarray:
    """1-based class predictions; ``argmax`` resolves ties to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1) + 1


def _weight_bias_pairs(net) -> list[tuple[Tensor, Tensor]]:
    ps = net.parameters()
    return list(zip(ps[0::2], ps[1::2]))


def init_params(net, rng: np.random.Generator, scheme: str = "glorot") -> None:
    """Glorot-uniform weights and zero biases, drawn in parameter order.

    ``scheme="zeros"`` zeroes everything (handy for analytic checks).
    """
    for W, b in _weight_bias_pairs(net):
        b.data = np.zeros_like(b.data)
        if scheme == "zeros":
            W.data = np.zeros_like(W.data)
        elif scheme == "glorot":
            fan_in, fan_out = W.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            W.data = rng.uniform(-limit, limit, size=W.shape)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        W.grad = b.grad = None


def param_count(net) -> int:
    return int(np.sum([p.data.size for p in net.parameters()]))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update in place; gradients are cleared afterwards."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    for p, m in zip(params, state.m):
        if p.grad is not None and p.grad.shape != p.shape:
            raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.shape}")
        if m.shape != p.shape:
            raise ValueError("optimizer moment shape does not match parameter")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
        p.grad = None


# -- checkpoint file -------------------------------------------------------

MAGIC = b"TOIB"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def write_checkpoint(path, groups: list[tuple[str, list[np.ndarray]]]) -> None:
    """Write named groups of float64 arrays; the target is replaced atomically."""
    chunks = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(groups))]
    for name, arrays in groups:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.asarray(a, dtype="<f8")
            chunks.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
            chunks.append(np.ascontiguousarray(a).tobytes())
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".ckpt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> list[tuple[str, list[np.ndarray]]]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (n_groups,) = r.unpack("<I", "group count")
    groups = []
    for _ in range(n_groups):
        (name_len,) = r.unpack("<I", "name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not valid utf-8", r.pos - name_len) from None
        (count,) = r.unpack("<I", "tensor count")
        arrays = []
        for _ in range(count):
            (ndim,) = r.unpack("<I", "ndim")
            if ndim > 8:
                raise FormatError(f"implausible tensor rank {ndim}", r.pos - 4)
            shape = r.unpack(f"<{ndim}Q", "shape")
            size = int(np.prod(shape, dtype=np.uint64)) if ndim else 1
            raw = r.take(8 * size, "tensor values")
            arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
        groups.append((name, arrays))
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last group", r.pos)
    return groups
