"""Finite-difference checks of every loss, as run by ``repulsive-replay gradcheck``."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .model import LatentStats

TOLERANCE = 1e-4

_B, _F, _M = 3, 6, 4  # batch, features, latents of the probe problems


def _interior(rng, shape):
    return rng.uniform(0.05, 0.95, shape)


def _checks(rng) -> dict[str, tuple[Callable, np.ndarray]]:
    """One (function, point) probe per loss, built from a fresh random draw."""
    x = rng.uniform(0.0, 1.0, (_B, _F))
    w = losses.LossWeights(lambda_r=1.0, lambda_d=0.7)
    means = [rng.uniform(0.0, 1.0, _F) for _ in range(2)]
    own = rng.uniform(0.0, 1.0, _F)

    def unpack(v):
        xp = ad.columns(v, range(_F))
        stats = LatentStats(ad.columns(v, range(_F, _F + _M)),
                            ad.columns(v, range(_F + _M, _F + 2 * _M)))
        return xp, stats

    packed = np.concatenate(
        [_interior(rng, (_B, _F)), rng.normal(0, 1, (_B, _M)), rng.uniform(-1, 1, (_B, _M))], axis=1
    )
    stats_point = np.concatenate([rng.normal(0, 1, (_B, _M)), rng.uniform(-1, 1, (_B, _M))], axis=1)

    return {
        "total_vae_loss": (lambda v: losses.total_vae_loss(x, *unpack(v), w), packed),
        "bce_reconstruction": (lambda v: losses.bce_reconstruction(x, v), _interior(rng, (_B, _F))),
        "kl_regularization": (
            lambda v: losses.kl_regularization(
                LatentStats(ad.columns(v, range(_M)), ad.columns(v, range(_M, 2 * _M)))),
            stats_point,
        ),
        "rr_loss": (lambda v: losses.rr_loss(v, means), _interior(rng, _F)),
        "ra_loss": (lambda v: losses.ra_loss(v, own), _interior(rng, _F)),
    }


def run_gradcheck(points: int = 20, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error per loss over ``points`` random interior points."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(points):
        for name, (f, at) in _checks(rng).items():
            worst[name] = max(worst.get(name, 0.0), ad.grad_check(f, at, h))
    return worst
