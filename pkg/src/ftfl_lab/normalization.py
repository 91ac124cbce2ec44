"""Per-column unit normalization fitted on the whole current buffer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_FLOOR = 1e-8


@dataclass(frozen=True)
class RunningStats:
    mean: np.ndarray
    std: np.ndarray
    count: int
    eps_floor: float = EPS_FLOOR

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (self.dim,):
            raise ValueError(f"trailing dim {x.shape[-1:]} does not match stats dim {self.dim}")
        return x

    def normalize(self, x) -> np.ndarray:
        return (self._check(x) - self.mean) / self.std

    def denormalize(self, z) -> np.ndarray:
        return self._check(z) * self.std + self.mean

    @classmethod
    def identity(cls, dim: int) -> "RunningStats":
        return cls(np.zeros(dim), np.ones(dim), 1)


def fit_stats(rows, eps_floor: float = EPS_FLOOR) -> RunningStats:
    """Column means and population std of ``rows`` (n x d), std floored."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("fit_stats needs a nonempty n x d matrix")
    mean = rows.mean(axis=0)
    std = np.maximum(rows.std(axis=0), eps_floor)
    # a constant column must map to exactly zero, not to rounding noise / eps_floor
    const = np.all(rows == rows[0], axis=0)
    mean = np.where(const, rows[0], mean)
    return RunningStats(mean, std, rows.shape[0], eps_floor)


def normalize(x, stats: RunningStats) -> np.ndarray:
    return stats.normalize(x)


def denormalize(z, stats: RunningStats) -> np.ndarray:
    return stats.denormalize(z)
