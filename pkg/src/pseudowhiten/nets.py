"""Desk-scale network definitions: MLP encoder, projector head, autoencoder.

The encoder is a plain Linear+ReLU stack standing in for an image backbone;
the projector is three equal-width linear layers with batch norm and ReLU
after the first two; the autoencoder mirrors the encoder topology, adds one
fully connected layer down to the embedding size, and decodes through the
reversed layer sizes with independent weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .seeding import rng_for

__all__ = [
    "ArchConfig",
    "LinearLayer",
    "BatchNormLayer",
    "EncoderNet",
    "ProjectorHead",
    "Autoencoder",
]

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class ArchConfig:
    """Layer sizes for one block; all dims are configuration, not code."""

    input_dim: int = 32
    encoder_hidden: tuple[int, ...] = (256, 128)
    repr_dim: int = 64  # encoder output used by evaluation
    embed_dim: int = 32  # projector / autoencoder-latent width

    def validate(self) -> None:
        dims = (self.input_dim, *self.encoder_hidden, self.repr_dim, self.embed_dim)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all layer dims must be positive, got {dims}")


class LinearLayer:
    """Affine map with weight [out x in] and bias [out]."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "LinearLayer":
        if in_dim <= 0 or out_dim <= 0:
            raise ValueError(f"layer dims must be positive, got {in_dim}x{out_dim}")
        bound = np.sqrt(6.0 / in_dim)
        weight = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)
        bias = Tensor(np.zeros(out_dim), requires_grad=True)
        return cls(weight, bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise nm.ShapeError(f"linear: input {x.shape} does not match weight {self.weight.shape}")
        return nm.add(nm.matmul(x, nm.transpose(self.weight)), self.bias)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class BatchNormLayer:
    """Batch normalization over the batch axis with running statistics."""

    def __init__(self, dim: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            n = x.shape[0]
            if n < 2:
                raise nm.ShapeError("batch norm in train mode needs a batch of at least 2")
            mu = nm.col_mean(x)
            centered = nm.subtract(x, mu)
            var = nm.col_mean(nm.multiply(centered, centered))
            xhat = nm.divide(centered, nm.power(nm.add(var, self.eps), 0.5))
            # Running stats track the unbiased batch variance.
            unbiased = var.data * (n / (n - 1.0))
            self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mu.data
            self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = nm.multiply(nm.subtract(x, Tensor(self.running_mean)), Tensor(scale))
        return nm.add(nm.multiply(xhat, self.gamma), self.beta)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.running_mean": self.running_mean, f"{prefix}.running_var": self.running_var}

    def load_buffers(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.running_mean = arrays[f"{prefix}.running_mean"].copy()
        self.running_var = arrays[f"{prefix}.running_var"].copy()


class EncoderNet:
    """Linear+ReLU stack mapping inputs to the representation used by probes."""

    def __init__(self, layers: list[LinearLayer]):
        self.layers = layers

    @classmethod
    def init(cls, arch: ArchConfig, seed: int) -> "EncoderNet":
        arch.validate()
        dims = (arch.input_dim, *arch.encoder_hidden, arch.repr_dim)
        layers = [
            LinearLayer.init(dims[i], dims[i + 1], rng_for(seed, "encoder", i))
            for i in range(len(dims) - 1)
        ]
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def repr_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.layers:
            h = nm.relu(layer.forward(h))
        return h

    def parameters(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}.layers.{i}"))
        return out


class ProjectorHead:
    """Three equal-width linear layers; BN+ReLU after layers 1 and 2 only."""

    def __init__(self, layers: list[LinearLayer], bns: list[BatchNormLayer]):
        if len(layers) != 3 or len(bns) != 2:
            raise ValueError("projector head is exactly 3 linear layers with 2 batch norms")
        self.layers = layers
        self.bns = bns

    @classmethod
    def init(cls, arch: ArchConfig, seed: int) -> "ProjectorHead":
        arch.validate()
        d = arch.embed_dim
        dims = (arch.repr_dim, d, d, d)
        layers = [
            LinearLayer.init(dims[i], dims[i + 1], rng_for(seed, "projector", i)) for i in range(3)
        ]
        bns = [BatchNormLayer(d), BatchNormLayer(d)]
        return cls(layers, bns)

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out_dim

    def train(self, mode: bool) -> None:
        for bn in self.bns:
            bn.training = mode

    @property
    def training(self) -> bool:
        return self.bns[0].training

    def forward(self, h: Tensor) -> Tensor:
        z = nm.relu(self.bns[0].forward(self.layers[0].forward(h)))
        z = nm.relu(self.bns[1].forward(self.layers[1].forward(z)))
        return self.layers[2].forward(z)

    def parameters(self, prefix: str = "projector") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}.layers.{i}"))
        for i, bn in enumerate(self.bns):
            out.update(bn.parameters(f"{prefix}.bns.{i}"))
        return out

    def buffers(self, prefix: str = "projector") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, bn in enumerate(self.bns):
            out.update(bn.buffers(f"{prefix}.bns.{i}"))
        return out

    def load_buffers(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for i, bn in enumerate(self.bns):
            bn.load_buffers(f"{prefix}.bns.{i}", arrays)


class Autoencoder:
    """Symmetric autoencoder whose latent width matches the projector."""

    def __init__(self, enc_layers: list[LinearLayer], latent: LinearLayer, dec_layers: list[LinearLayer]):
        self.enc_layers = enc_layers
        self.latent = latent
        self.dec_layers = dec_layers

    @classmethod
    def init(cls, arch: ArchConfig, seed: int) -> "Autoencoder":
        arch.validate()
        enc_dims = (arch.input_dim, *arch.encoder_hidden, arch.repr_dim)
        enc_layers = [
            LinearLayer.init(enc_dims[i], enc_dims[i + 1], rng_for(seed, "ae-enc", i))
            for i in range(len(enc_dims) - 1)
        ]
        latent = LinearLayer.init(arch.repr_dim, arch.embed_dim, rng_for(seed, "ae-latent"))
        dec_dims = (arch.embed_dim, arch.repr_dim, *reversed(arch.encoder_hidden), arch.input_dim)
        dec_layers = [
            LinearLayer.init(dec_dims[i], dec_dims[i + 1], rng_for(seed, "ae-dec", i))
            for i in range(len(dec_dims) - 1)
        ]
        return cls(enc_layers, latent, dec_layers)

    @property
    def input_dim(self) -> int:
        return self.enc_layers[0].in_dim

    @property
    def embed_dim(self) -> int:
        return self.latent.out_dim

    def encoder_dims(self) -> list[int]:
        return [self.enc_layers[0].in_dim] + [l.out_dim for l in self.enc_layers] + [self.latent.out_dim]

    def decoder_dims(self) -> list[int]:
        return [self.dec_layers[0].in_dim] + [l.out_dim for l in self.dec_layers]

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (latent [N x D], reconstruction [N x input_dim])."""
        h = x
        for layer in self.enc_layers:
            h = nm.relu(layer.forward(h))
        z = self.latent.forward(h)  # linear latent, no activation
        y = z
        for layer in self.dec_layers[:-1]:
            y = nm.relu(layer.forward(y))
        recon = self.dec_layers[-1].forward(y)
        return z, recon

    def parameters(self, prefix: str = "ae") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.enc_layers):
            out.update(layer.parameters(f"{prefix}.enc.{i}"))
        out.update(self.latent.parameters(f"{prefix}.latent"))
        for i, layer in enumerate(self.dec_layers):
            out.update(layer.parameters(f"{prefix}.dec.{i}"))
        return out
