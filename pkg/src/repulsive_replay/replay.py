"""Generated replay batches and competing-class selection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import VAEClassifier


class EmptyHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class RepulsionConfig:
    factor: float = 20.0

    def __post_init__(self):
        if not self.factor >= 1:
            raise ValueError(f"repulsion factor must be >= 1, got {self.factor}")


# relative band around the threshold treated as a tie (not "above"), so that
# e.g. 0.2 vs 0.6 / 3 == 0.19999999999999998 is excluded
TIE_RTOL = 1e-12


def repulsion_threshold(label_prob: float, f: float) -> float:
    if not f >= 1:
        raise ValueError(f"repulsion factor must be >= 1, got {f}")
    return float(label_prob) / f


def select_competing(probs, f: float, classes: Sequence[int] | None = None) -> set[int]:
    """Classes whose probability is strictly above ``max(probs) / f``.

    ``classes[j]`` names column j of ``probs`` (defaults to the column index).
    The argmax class itself is never returned.
    """
    probs = np.asarray(probs, dtype=np.float64)
    label = int(np.argmax(probs))
    threshold = repulsion_threshold(probs[label], f)
    picked = np.flatnonzero(probs > threshold * (1.0 + TIE_RTOL))
    names = range(len(probs)) if classes is None else classes
    return {int(names[j]) for j in picked if j != label}


@dataclass
class ReplayBatch:
    images: np.ndarray
    labels: np.ndarray
    probs: np.ndarray
    classes: np.ndarray
    competing: list[set[int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def generate_replay(
    model: VAEClassifier,
    n_samples: int,
    seen_classes: Sequence[int],
    rng_seed,
    repulsion: RepulsionConfig | None = None,
) -> ReplayBatch:
    """Decode prior samples and label them with the model's own classifier.

    ``rng_seed`` is anything ``numpy.random.default_rng`` accepts. Competing
    sets are filled only when ``repulsion`` is given.
    """
    classes = np.asarray(sorted(int(c) for c in seen_classes), dtype=np.int64)
    if classes.size == 0:
        raise EmptyHistoryError("cannot replay before any class has been seen")
    cfg = model.config
    if n_samples == 0:
        return ReplayBatch(np.zeros((0, cfg.feature_count)), np.zeros(0, dtype=np.int64),
                           np.zeros((0, classes.size)), classes, [])
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((n_samples, cfg.latent_dim))
    images = model.decode(z).data
    probs = model.classify(images, classes).data
    labels = classes[np.argmax(probs, axis=1)]
    if repulsion is None:
        competing = [set() for _ in range(n_samples)]
    else:
        competing = [select_competing(row, repulsion.factor, classes) for row in probs]
    return ReplayBatch(images, labels, probs, classes, competing)
