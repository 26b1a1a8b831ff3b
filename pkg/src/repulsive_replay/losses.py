"""VAE, reconstruction-repulsion and reconstruction-attraction losses.

Every loss is a per-sample mean over the batch, so the loss weights keep
their meaning across batch sizes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import CLAMP, DimensionError, Tensor
from .model import LatentStats


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_d: float = 1.0
    lambda_rr: float = 1e-6
    lambda_ra: float = 1e-6

    def __post_init__(self):
        for name in ("lambda_r", "lambda_d", "lambda_rr", "lambda_ra"):
            value = getattr(self, name)
            if not value >= 0:
                raise ValueError(f"{name} must be >= 0, got {value}")


@dataclass
class ClassMeans:
    """Running mean of the real samples seen for each class."""

    means: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def __contains__(self, label: int) -> bool:
        return label in self.means

    def __getitem__(self, label: int) -> np.ndarray:
        return self.means[label]

    def classes(self) -> list[int]:
        return sorted(self.means)

    def stacked(self, labels: Sequence[int]) -> np.ndarray:
        return np.stack([self.means[c] for c in labels])


def update_class_mean(means: ClassMeans, x, label: int) -> ClassMeans:
    """Fold a batch of real samples of one class into its running mean (in place)."""
    x = np.asarray(ad.as_tensor(x).data)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[0]
    if n == 0:
        return means
    label = int(label)
    old_n = means.counts.get(label, 0)
    total = old_n + n
    batch_sum = x.sum(axis=0)
    if old_n == 0:
        means.means[label] = batch_sum / total
    else:
        means.means[label] = means.means[label] + (batch_sum - n * means.means[label]) / total
    means.counts[label] = total
    return means


def _check_same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _log_pair(x_prime: Tensor) -> tuple[Tensor, Tensor]:
    xp = ad.clip(x_prime, CLAMP, 1.0 - CLAMP)
    return ad.log(xp), ad.log(ad.sub(1.0, xp))


def _per_sample_sum(t: Tensor) -> Tensor:
    # rows are samples; a 1-D tensor is a single sample
    return ad.mean(ad.sum(t, axis=1)) if t.data.ndim == 2 else ad.sum(t)


def bce_reconstruction(x, x_prime) -> Tensor:
    """Feature-summed binary cross-entropy, averaged over the batch.

    This is the negative of the log-likelihood sum, so it is >= 0.
    """
    x, x_prime = ad.as_tensor(x), ad.as_tensor(x_prime)
    _check_same_shape(x, x_prime, "bce_reconstruction")
    log_p, log_q = _log_pair(x_prime)
    ll = ad.add(ad.mul(x, log_p), ad.mul(ad.sub(1.0, x), log_q))
    return ad.neg(_per_sample_sum(ll))


def kl_regularization(stats: LatentStats) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latents, averaged over batch."""
    mu, lv = stats.mu, stats.logvar
    per_dim = ad.sub(ad.add(ad.exp(lv), ad.mul(mu, mu)), ad.add(lv, 1.0))
    return ad.mul(_per_sample_sum(per_dim), 0.5)


def total_vae_loss(x, x_prime, stats: LatentStats, w: LossWeights) -> Tensor:
    return ad.add(ad.mul(bce_reconstruction(x, x_prime), w.lambda_r),
                  ad.mul(kl_regularization(stats), w.lambda_d))


def rr_loss(x_prime, competing_means: Sequence) -> Tensor:
    """Negated mean BCE between one generated row and each competing class mean."""
    if len(competing_means) == 0:
        raise ValueError("rr_loss needs at least one competing class mean")
    x_prime = ad.as_tensor(x_prime)
    total = None
    for m in competing_means:
        term = bce_reconstruction(Tensor(np.asarray(m)), x_prime)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, -1.0 / len(competing_means))


def ra_loss(x_prime, own_mean) -> Tensor:
    """BCE pulling a generated row toward its own class mean."""
    if own_mean is None:
        raise KeyError("no stored mean for the sample's class")
    return bce_reconstruction(Tensor(np.asarray(own_mean)), x_prime)


def pairwise_bce(x_prime: Tensor, targets: np.ndarray) -> Tensor:
    """``out[i, c]`` = feature-summed BCE of row i of x_prime against targets[c]."""
    log_p, log_q = _log_pair(x_prime)
    targets = np.asarray(targets, dtype=np.float64)
    cross = ad.add(ad.matmul(log_p, Tensor(targets.T)), ad.matmul(log_q, Tensor((1.0 - targets).T)))
    return ad.neg(cross)


def batch_rr_loss(x_prime: Tensor, competing: Sequence[Sequence[int]], means: ClassMeans) -> Tensor | None:
    """Mean of rr_loss over rows whose competing set is non-empty; None if there are none."""
    rows = [i for i, c in enumerate(competing) if len(c) > 0]
    if not rows:
        return None
    classes = sorted({c for i in rows for c in competing[i]})
    col = {c: j for j, c in enumerate(classes)}
    weights = np.zeros((len(rows), len(classes)))
    for r, i in enumerate(rows):
        for c in competing[i]:
            weights[r, col[c]] = 1.0 / len(competing[i])
    bce = pairwise_bce(ad.rows(x_prime, rows), means.stacked(classes))
    return ad.mul(ad.sum(ad.mul(bce, weights)), -1.0 / len(rows))


def batch_ra_loss(x_prime: Tensor, labels: Sequence[int], means: ClassMeans) -> Tensor | None:
    """Mean of ra_loss over rows whose label has a stored class mean."""
    rows = [i for i, y in enumerate(labels) if int(y) in means]
    if not rows:
        return None
    targets = means.stacked([int(labels[i]) for i in rows])
    return bce_reconstruction(Tensor(targets), ad.rows(x_prime, rows))


@dataclass
class ObjectiveParts:
    total: Tensor
    rec: float
    kl: float
    rr: float = 0.0
    ra: float = 0.0


def replay_objective(
    x,
    x_prime: Tensor,
    stats: LatentStats,
    labels: Sequence[int],
    means: ClassMeans,
    competing: Sequence[Sequence[int]],
    w: LossWeights,
) -> ObjectiveParts:
    """VAE loss plus weighted repulsion/attraction terms for a replay batch.

    A term whose weight is zero is not evaluated at all, which keeps the
    result bit-identical to :func:`total_vae_loss`.
    """
    rec = bce_reconstruction(x, x_prime)
    kl = kl_regularization(stats)
    total = ad.add(ad.mul(rec, w.lambda_r), ad.mul(kl, w.lambda_d))
    parts = ObjectiveParts(total, rec.item(), kl.item())
    if w.lambda_rr > 0:
        rr = batch_rr_loss(x_prime, competing, means)
        if rr is not None:
            total = ad.add(total, ad.mul(rr, w.lambda_rr))
            parts.rr = rr.item()
    if w.lambda_ra > 0:
        ra = batch_ra_loss(x_prime, labels, means)
        if ra is not None:
            total = ad.add(total, ad.mul(ra, w.lambda_ra))
            parts.ra = ra.item()
    parts.total = total
    return parts


def cross_entropy(log_probs: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood; ``targets`` index the columns of log_probs."""
    return ad.neg(ad.mean(ad.pick(log_probs, targets)))
