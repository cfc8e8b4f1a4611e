"""Empirical measures represented as uniformly weighted particle clouds."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError


class EmpiricalMeasure:
    """Uniform atomic measure on ``M`` points of R^N.

    Parameters
    ----------
    points : array_like of shape (M, N) or (M,)
        Particle positions. A 1-D input is read as M points in R^1.

    Notes
    -----
    The point array is copied and made read-only, so a measure can be
    shared freely between simulations.
    """

    __slots__ = ("_points", "_mean")

    def __init__(self, points):
        pts = np.array(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DimensionError(f"expected a nonempty (M, N) cloud, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ConfigError("particle positions must be finite")
        pts.setflags(write=False)
        self._points = pts
        self._mean = None

    @classmethod
    def _wrap(cls, pts):
        # trusted constructor used on simulator cross-sections (no copy)
        obj = cls.__new__(cls)
        obj._points = pts
        obj._mean = None
        return obj

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def size(self) -> int:
        return self._points.shape[0]

    @property
    def dim(self) -> int:
        return self._points.shape[1]

    def __len__(self):
        return self.size

    def __repr__(self):
        return f"EmpiricalMeasure(M={self.size}, N={self.dim})"

    def mean(self) -> np.ndarray:
        if self._mean is None:
            self._mean = self._points.mean(axis=0)
        return self._mean

    def second_moment(self) -> float:
        """Mean squared Euclidean norm of the particles."""
        return float(np.mean(np.sum(self._points**2, axis=1)))

    def integrate(self, phi) -> np.ndarray:
        """Return the empirical average of ``phi(points)`` over the particles.

        ``phi`` is applied to the whole (M, N) array at once and may return
        shape (M,) or (M, ...).
        """
        vals = np.asarray(phi(self._points), dtype=float)
        if vals.shape[:1] != (self.size,):
            raise DimensionError("phi must return one value per particle")
        return vals.mean(axis=0)

    def shifted(self, c) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self._points + np.asarray(c, dtype=float))


def wasserstein2_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact quadratic Wasserstein distance between two 1-D clouds of equal size.

    With uniform weights and equal sizes the optimal coupling pairs order
    statistics, so the distance is the root mean squared difference of the
    sorted samples.
    """
    if mu.dim != 1 or nu.dim != 1:
        raise DimensionError("wasserstein2_1d is only defined for 1-D clouds")
    if mu.size != nu.size:
        raise DimensionError(f"clouds must have equal size, got {mu.size} and {nu.size}")
    a = np.sort(mu.points[:, 0])
    b = np.sort(nu.points[:, 0])
    return float(np.sqrt(np.mean((a - b) ** 2)))
