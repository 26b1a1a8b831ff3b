"""Fully-connected VAE with a softmax head sharing the encoder trunk.

Routing::

    x -> FC -> relu -> FC -> relu = h
    h -> softmax head                      (classification)
    h -> split -> (mu, logvar) -> z -> FC -> relu -> FC -> relu -> FC -> sigmoid = x'
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    feature_count: int
    latent_dim: int = 32
    hidden_sizes: tuple[int, ...] = (256, 256)
    class_capacity: int = 10
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        sizes = (self.feature_count, self.latent_dim, self.class_capacity, *self.hidden_sizes)
        if not self.hidden_sizes or min(sizes) < 1:
            raise ValueError(f"all model sizes must be >= 1, got {self}")
        if self.latent_dim >= self.feature_count:
            raise ValueError(
                f"latent_dim ({self.latent_dim}) must be smaller than "
                f"feature_count ({self.feature_count})"
            )
        if self.image_shape is not None and int(np.prod(self.image_shape)) != self.feature_count:
            raise ValueError(f"image_shape {self.image_shape} does not match feature_count")


@dataclass
class LatentStats:
    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise DimensionError(f"mu {self.mu.shape} and logvar {self.logvar.shape} differ")


def _layer_shapes(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    enc = [cfg.feature_count, *cfg.hidden_sizes]
    trunk = enc[-1]
    dec = [cfg.latent_dim, *reversed(cfg.hidden_sizes), cfg.feature_count]
    shapes = [(f"enc{i}", enc[i], enc[i + 1]) for i in range(len(enc) - 1)]
    shapes += [("cls", trunk, cfg.class_capacity), ("mu", trunk, cfg.latent_dim),
               ("logvar", trunk, cfg.latent_dim)]
    shapes += [(f"dec{i}", dec[i], dec[i + 1]) for i in range(len(dec) - 1)]
    return shapes


def parameter_names(cfg: ModelConfig) -> list[str]:
    names = []
    for layer, _, _ in _layer_shapes(cfg):
        names += [f"{layer}.W", f"{layer}.b"]
    return names


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) weights and biases, in a fixed order."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for layer, fan_in, fan_out in _layer_shapes(cfg):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{layer}.W"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)),
                                      requires_grad=True, name=f"{layer}.W")
        params[f"{layer}.b"] = Tensor(rng.uniform(-bound, bound, (fan_out,)),
                                      requires_grad=True, name=f"{layer}.b")
    return params


def copy_params(params: dict[str, Tensor], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=k) for k, v in params.items()}


@dataclass
class VAEClassifier:
    config: ModelConfig
    params: dict[str, Tensor] = field(repr=False)

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "VAEClassifier":
        return cls(config, init_params(config, seed))

    def _linear(self, layer: str, x) -> Tensor:
        return ad.add(ad.matmul(x, self.params[f"{layer}.W"]), self.params[f"{layer}.b"])

    def encode_trunk(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.config.feature_count:
            raise DimensionError(
                f"expected input of shape (batch, {self.config.feature_count}), got {x.shape}"
            )
        h = x
        for i in range(len(self.config.hidden_sizes)):
            h = ad.relu(self._linear(f"enc{i}", h))
        return h

    def logits(self, h: Tensor) -> Tensor:
        return self._linear("cls", h)

    def class_log_probs(self, h: Tensor, active: Sequence[int]) -> Tensor:
        """Log-softmax over the active classes only; column j is class active[j]."""
        if len(active) == 0:
            raise ValueError("no active classes to classify over")
        return ad.log_softmax(ad.columns(self.logits(h), sorted(active)))

    def classify(self, x, active: Sequence[int]) -> Tensor:
        """Class probabilities over ``sorted(active)``; unseen classes are masked out."""
        if len(active) == 0:
            raise ValueError("no active classes to classify over")
        return ad.softmax(ad.columns(self.logits(self.encode_trunk(x)), sorted(active)))

    def predict(self, x, active: Sequence[int]) -> np.ndarray:
        active = np.asarray(sorted(active))
        probs = self.classify(x, active).data
        return active[np.argmax(probs, axis=1)]

    def split(self, h: Tensor) -> LatentStats:
        if h.data.ndim != 2 or h.shape[1] != self.config.hidden_sizes[-1]:
            raise DimensionError(f"split expects (batch, {self.config.hidden_sizes[-1]}), got {h.shape}")
        return LatentStats(self._linear("mu", h), self._linear("logvar", h))

    def decode(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.data.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise DimensionError(f"decode expects (batch, {self.config.latent_dim}), got {z.shape}")
        n_dec = len(self.config.hidden_sizes)
        out = z
        for i in range(n_dec):
            out = ad.relu(self._linear(f"dec{i}", out))
        return ad.sigmoid(self._linear(f"dec{n_dec}", out))

    def reconstruct(self, x, eps) -> tuple[Tensor, LatentStats]:
        stats = self.split(self.encode_trunk(x))
        return self.decode(reparameterize(stats, eps)), stats


def reparameterize(stats: LatentStats, eps) -> Tensor:
    """z = mu + exp(logvar / 2) * eps."""
    eps = ad.as_tensor(eps)
    if eps.shape != stats.mu.shape:
        raise DimensionError(f"eps {eps.shape} does not match mu {stats.mu.shape}")
    return ad.add(stats.mu, ad.mul(ad.exp(ad.mul(stats.logvar, 0.5)), eps))
