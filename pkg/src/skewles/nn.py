"""Periodic convolution networks, a flat parameter store, Adam and ``.lesp`` checkpoints.

Reverse-mode gradients come from torch autograd; the unrolled solver, the
projections and every closure are written in differentiable torch ops.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

ACTIVATIONS = {"identity": 0, "relu": 1}


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


def _as_batch(x: torch.Tensor, channels: int):
    if x.dim() < 3 or x.shape[-3] != channels:
        raise ShapeMismatch(f"expected {channels} channels, got shape {tuple(x.shape)}")
    batch = x.shape[:-3]
    return x.reshape(-1, *x.shape[-3:]), batch


def conv2d_periodic(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``out[o, j, i] = sum_c sum_{k,l} w[o, c, k+r, l+r] x[c, j+k, i+l] + b[o]`` with wrap-around."""
    out_ch, in_ch, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeMismatch("kernel must be square with odd size")
    r = kh // 2
    xb, batch = _as_batch(x, in_ch)
    y = F.conv2d(F.pad(xb, (r, r, r, r), mode="circular"), weight, bias)
    return y.reshape(*batch, out_ch, *y.shape[-2:])


def conv2d_periodic_transpose(y: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Exact adjoint of the bias-free :func:`conv2d_periodic` with respect to its input."""
    return conv2d_periodic(y, weight.transpose(0, 1).flip(2, 3))


@dataclass(frozen=True)
class Layer:
    in_ch: int
    out_ch: int
    radius: int = 2
    activation: str = "relu"


@dataclass(frozen=True)
class CnnSpec:
    layers: tuple

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_ch != b.in_ch:
                raise ShapeMismatch("layer channel counts do not chain")
        if self.layers and self.layers[-1].activation != "identity":
            raise ShapeMismatch("final layer must use the identity activation")

    @classmethod
    def standard(cls, out_ch: int, in_ch: int = 4, hidden: int = 32, n_hidden: int = 4,
                 radius: int = 2) -> "CnnSpec":
        chans = [in_ch] + [hidden] * n_hidden
        layers = [Layer(a, b, radius, "relu") for a, b in zip(chans, chans[1:])]
        layers.append(Layer(chans[-1], out_ch, radius, "identity"))
        return cls(tuple(layers))

    @property
    def in_ch(self) -> int:
        return self.layers[0].in_ch if self.layers else 0

    @property
    def out_ch(self) -> int:
        return self.layers[-1].out_ch if self.layers else 0

    def shapes(self) -> list[tuple[str, tuple]]:
        out = []
        for n, L in enumerate(self.layers):
            k = 2 * L.radius + 1
            out.append((f"w{n}", (L.out_ch, L.in_ch, k, k)))
            out.append((f"b{n}", (L.out_ch,)))
        return out


def forward_cnn(spec: CnnSpec, weights: list, x: torch.Tensor) -> torch.Tensor:
    """``weights`` alternates kernel and bias tensors in layer order."""
    if x.shape[-3] != spec.in_ch:
        raise ShapeMismatch(f"network expects {spec.in_ch} input channels, got {x.shape[-3]}")
    for n, L in enumerate(spec.layers):
        x = conv2d_periodic(x, weights[2 * n], weights[2 * n + 1])
        if L.activation == "relu":
            x = torch.relu(x)
    return x


@dataclass
class ParamStore:
    """Flat float64 parameter vector with named views and Adam moments."""

    layout: list  # [(name, shape)]
    theta: torch.Tensor
    m: torch.Tensor = None
    v: torch.Tensor = None
    step: int = 0

    def __post_init__(self):
        n = sum(int(np.prod(s)) for _, s in self.layout)
        if self.theta.numel() != n:
            raise ShapeMismatch(f"layout needs {n} parameters, got {self.theta.numel()}")
        self.theta = self.theta.detach().to(torch.float64).clone()
        if self.m is None:
            self.m = torch.zeros_like(self.theta)
        if self.v is None:
            self.v = torch.zeros_like(self.theta)

    def __len__(self) -> int:
        return self.theta.numel()

    def split(self, flat: torch.Tensor) -> dict:
        out, off = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = flat[off:off + n].reshape(shape)
            off += n
        return out

    def views(self, dtype=torch.float64, requires_grad: bool = False):
        """Return ``(flat, named views)``; gradients w.r.t. ``flat`` line up with ``theta``."""
        flat = self.theta.to(dtype).clone().requires_grad_(requires_grad)
        return flat, self.split(flat)

    def copy(self) -> "ParamStore":
        return ParamStore(list(self.layout), self.theta.clone(), self.m.clone(), self.v.clone(), self.step)


def init_params(layout: list, seed: int, scale_overrides: dict | None = None) -> ParamStore:
    """Kernels uniform in ``+-sqrt(1 / (fan_in * (2r+1)^2))``, biases zero."""
    gen = np.random.Generator(np.random.Philox(seed))
    parts = []
    for name, shape in layout:
        if len(shape) == 1:
            parts.append(np.zeros(shape))
            continue
        bound = 1.0 / np.sqrt(shape[1] * shape[2] * shape[3])
        if scale_overrides and name in scale_overrides:
            bound *= scale_overrides[name]
        parts.append(gen.uniform(-bound, bound, size=shape))
    flat = np.concatenate([p.ravel() for p in parts]) if parts else np.zeros(0)
    return ParamStore(list(layout), torch.tensor(flat))


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(store: ParamStore, grad: torch.Tensor, cfg: AdamConfig = AdamConfig()) -> ParamStore:
    g = grad.detach().to(torch.float64).reshape(-1)
    if g.numel() != len(store):
        raise ShapeMismatch("gradient length does not match parameters")
    if not torch.isfinite(g).all():
        raise NonFiniteGradient("non-finite gradient")
    store.step += 1
    store.m.mul_(cfg.beta1).add_((1 - cfg.beta1) * g)
    store.v.mul_(cfg.beta2).add_((1 - cfg.beta2) * g * g)
    mhat = store.m / (1 - cfg.beta1**store.step)
    vhat = store.v / (1 - cfg.beta2**store.step)
    store.theta.sub_(cfg.lr * mhat / (vhat.sqrt() + cfg.eps))
    return store


# ---- .lesp checkpoints -------------------------------------------------------

LESP_MAGIC = b"LESP"
LESP_VERSION = 1
VARIANT_TAGS = {"NC": 0, "SMAG": 1, "DYNSMAG": 2, "CNN": 3, "DIV": 4, "SKEW": 5, "CNNC": 6}


@dataclass
class Checkpoint:
    variant: str
    spec: CnnSpec
    store: ParamStore
    extra: dict = field(default_factory=dict)


def checkpoint_bytes(variant: str, spec: CnnSpec, store: ParamStore) -> bytes:
    parts = [struct.pack("<4sIBI", LESP_MAGIC, LESP_VERSION, VARIANT_TAGS[variant], len(spec.layers))]
    for L in spec.layers:
        parts.append(struct.pack("<IIIB", L.in_ch, L.out_ch, L.radius, ACTIVATIONS[L.activation]))
    # the store layout is declaration order: per layer kernel then bias, then raw B kernels
    parts.append(store.theta.numpy().astype("<f8").tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    from .closures import layout_for  # avoid a circular import

    magic, version, vtag, n_layers = struct.unpack_from("<4sIBI", data, 0)
    if magic != LESP_MAGIC or version != LESP_VERSION:
        raise ValueError("not a LESP checkpoint")
    off = struct.calcsize("<4sIBI")
    acts = {v: k for k, v in ACTIVATIONS.items()}
    layers = []
    for _ in range(n_layers):
        i, o, r, a = struct.unpack_from("<IIIB", data, off)
        off += struct.calcsize("<IIIB")
        layers.append(Layer(i, o, r, acts[a]))
    spec = CnnSpec(tuple(layers))
    variant = {v: k for k, v in VARIANT_TAGS.items()}[vtag]
    layout = layout_for(variant, spec)
    theta = np.frombuffer(data, dtype="<f8", offset=off)
    store = ParamStore(layout, torch.tensor(theta.astype(np.float64)))
    return Checkpoint(variant, spec, store)


def save_checkpoint(path, variant: str, spec: CnnSpec, store: ParamStore) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(variant, spec, store))
    return path


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
