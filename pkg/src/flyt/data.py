"""Synthetic upstream pools with planted corruption and matching downstream tasks.

Every class has an image prototype and a text prototype, both unit vectors.
A clean example pairs noisy copies of the two prototypes of one class; a
corrupted example pairs the image prototype of one class with the text
prototype of another.  Downstream tasks reuse the same prototypes, so learning
to align clean pairs transfers to classifying downstream images.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import InvalidInputError
from .model import DownstreamSet, Pool


@dataclass(frozen=True)
class SyntheticPoolSpec:
    size: int
    d_in: int = 16
    corruption_fraction: float = 0.3
    n_classes: int = 10
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.size < 0 or self.d_in < 1:
            raise InvalidInputError("size must be >= 0 and d_in >= 1")
        if not 0 <= self.corruption_fraction <= 1:
            raise InvalidInputError("corruption_fraction must lie in [0, 1]")
        if self.n_classes < 1 or self.noise_scale < 0:
            raise InvalidInputError("n_classes must be >= 1 and noise_scale >= 0")
        if self.n_classes < 2 and self.n_corrupt > 0:
            raise InvalidInputError("corrupted pairs need at least two latent classes")

    @property
    def n_corrupt(self) -> int:
        return int(math.floor(self.corruption_fraction * self.size + 1e-9))

    def to_dict(self) -> dict:
        return asdict(self)


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def prototypes(spec: SyntheticPoolSpec):
    """``(image_prototypes, text_prototypes)``, each ``(n_classes, d_in)``."""
    rng = np.random.default_rng([spec.seed, 0])
    return _unit_rows(rng, spec.n_classes, spec.d_in), _unit_rows(rng, spec.n_classes, spec.d_in)


def generate_pool(spec: SyntheticPoolSpec):
    """Return ``(pool, corrupt)`` where ``corrupt[i]`` flags a mismatched pair."""
    img_proto, txt_proto = prototypes(spec)
    rng = np.random.default_rng([spec.seed, 1])
    m, k = spec.size, spec.n_classes
    classes = rng.integers(k, size=m)
    corrupt = np.zeros(m, dtype=bool)
    corrupt[rng.permutation(m)[: spec.n_corrupt]] = True
    text_classes = classes.copy()
    if corrupt.any():
        text_classes[corrupt] = (classes[corrupt] + rng.integers(1, k, size=int(corrupt.sum()))) % k
    image = img_proto[classes] + spec.noise_scale * rng.standard_normal((m, spec.d_in))
    text = txt_proto[text_classes] + spec.noise_scale * rng.standard_normal((m, spec.d_in))
    width = max(7, len(str(max(m - 1, 0))))
    uids = tuple(f"u{i:0{width}d}" for i in range(m))
    return Pool(uids, image, text), corrupt


def generate_downstream(spec: SyntheticPoolSpec, n: int, templates_per_class: int = 4) -> DownstreamSet:
    """Labeled downstream images drawn around the pool's image prototypes.

    Labels cycle through the classes before being shuffled, so ``n`` equal to
    the number of classes yields one example per class.
    """
    if n < 1 or templates_per_class < 1:
        raise InvalidInputError("need n >= 1 and templates_per_class >= 1")
    img_proto, txt_proto = prototypes(spec)
    rng = np.random.default_rng([spec.seed, 2])
    labels = rng.permutation(np.arange(n) % spec.n_classes)
    image = img_proto[labels] + spec.noise_scale * rng.standard_normal((n, spec.d_in))
    templates = tuple(
        txt_proto[c] + spec.noise_scale * rng.standard_normal((templates_per_class, spec.d_in))
        for c in range(spec.n_classes)
    )
    return DownstreamSet(image, labels, templates)
