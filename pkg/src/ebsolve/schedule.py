"""Annealing schedule: a ladder of noise levels indexed k = 0..K.

Level 0 is the clean data distribution and level K is pure noise. The
retained-signal fractions alpha_bar[k] decrease strictly from 1 to 0, and
sigma[k] = sqrt(1 - alpha_bar[k]) is the matching noise scale, so corrupted
samples keep unit variance for unit-variance data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RESCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    """Validated ladder of K+1 retained-signal fractions."""

    alpha_bar: np.ndarray
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("alpha_bar must be 1-D with at least two entries")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1.0")
        if ab[-1] != 0.0:
            raise ValueError("alpha_bar[K] must be exactly 0.0")
        if np.any(np.diff(ab) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        ab = ab.copy()
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)
        sigma = np.sqrt(1.0 - ab)
        sigma.flags.writeable = False
        object.__setattr__(self, "sigma", sigma)

    @property
    def levels(self) -> int:
        """K, the index of the pure-noise level."""
        return self.alpha_bar.size - 1

    def check_level(self, k: int) -> int:
        k = int(k)
        if not 0 <= k <= self.levels:
            raise ValueError(f"level {k} outside 0..{self.levels}")
        return k

    def corrupt(self, y: np.ndarray, k: int, eps: np.ndarray) -> np.ndarray:
        """sqrt(alpha_bar[k]) * y + sigma[k] * eps."""
        k = self.check_level(k)
        y = np.asarray(y, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if y.shape != eps.shape:
            raise ValueError(f"corrupt: y shape {y.shape} != eps shape {eps.shape}")
        return np.sqrt(self.alpha_bar[k]) * y + self.sigma[k] * eps

    def rescale_between(self, y: np.ndarray, from_k: int, to_k: int) -> np.ndarray:
        """Map a point from one level's scale to another's.

        Multiplies by sqrt(alpha_bar[to]/alpha_bar[from]); the divisor is
        floored at RESCALE_FLOOR so the pure-noise endpoint stays finite.
        """
        from_k = self.check_level(from_k)
        to_k = self.check_level(to_k)
        num = max(self.alpha_bar[to_k], RESCALE_FLOOR)
        den = max(self.alpha_bar[from_k], RESCALE_FLOOR)
        return np.asarray(y, dtype=np.float64) * np.sqrt(num / den)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.alpha_bar]


def make_cosine_schedule(levels: int, s: float = 0.008) -> NoiseSchedule:
    """Squared-cosine ladder: f(k) = cos^2(((k/K + s)/(1 + s)) * pi/2),
    alpha_bar[k] = f(k)/f(0), with the endpoints pinned to exactly 1 and 0.

    The small offset s keeps the first step away from the flat top of the
    cosine; the k = K value underflows to ~1e-33 and is clamped to zero.
    """
    K = int(levels)
    if K < 1:
        raise ValueError("levels must be >= 1")
    if not 0.0 <= s < 1.0:
        raise ValueError("offset s must be in [0, 1)")
    k = np.arange(K + 1, dtype=np.float64)
    f = np.cos(((k / K + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    ab = f / f[0]
    ab[0] = 1.0
    ab[K] = 0.0
    return NoiseSchedule(ab)
