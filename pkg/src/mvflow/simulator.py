"""Euler-Maruyama simulation of the particle system and of the decoupled flow."""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BlowUpError, ConfigError, DimensionError
from .measures import EmpiricalMeasure


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k * h`` on [0, T] with ``h = T / n_steps``.

    ``step`` pins h explicitly, so that sub-grids cut out of a longer grid
    reuse the parent step bit for bit.
    """

    T: float
    n_steps: int
    step: Optional[float] = None

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise ConfigError(f"horizon T must be positive and finite, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def h(self) -> float:
        return self.T / self.n_steps if self.step is None else self.step

    def sub(self, n_steps) -> "TimeGrid":
        """Grid with the same step and ``n_steps`` steps."""
        return TimeGrid(n_steps * self.h, n_steps, self.h)

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.h
        t[-1] = self.T
        return t

    def index_of(self, t) -> int:
        """Index of the node equal to ``t`` (within rounding)."""
        k = int(round(t / self.h))
        if k < 0 or k > self.n_steps or abs(k * self.h - t) > 1e-9 * max(1.0, self.T):
            raise ConfigError(f"t={t} is not a node of the grid (T={self.T}, n={self.n_steps})")
        return k


def _stream_id(stream) -> int:
    if isinstance(stream, (int, np.integer)):
        return int(stream)
    return zlib.crc32(str(stream).encode())


class BrownianDriver:
    """Counter-based source of Brownian increments.

    Paths are grouped in fixed blocks of ``block`` consecutive path indices.
    Each block draws from its own Philox generator keyed by
    (seed, stream, block index, resolution), so the increments of path ``p``
    never depend on how many paths are requested together or in which order
    batches are processed.

    Parameters
    ----------
    seed : int
    stream : int or str
        Stream label; distinct labels give independent noise.
    dim : int
        Brownian dimension d.
    block : int
    """

    def __init__(self, seed, stream=0, dim=1, block=256):
        self.seed = int(seed)
        self.stream = stream
        self.dim = int(dim)
        self.block = int(block)
        self._sid = _stream_id(stream)

    def child(self, stream) -> "BrownianDriver":
        """Driver with the same seed and a different stream label."""
        return BrownianDriver(self.seed, f"{self.stream}/{stream}", self.dim, self.block)

    def rng(self, label) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self._sid, _stream_id(label), 0x5EED))
        return np.random.Generator(np.random.Philox(ss))

    def normals(self, first, count, n_fine, dim=None):
        """Standard normals for paths [first, first + count), shape (count, n_fine, d)."""
        dim = self.dim if dim is None else int(dim)
        out = np.empty((count, n_fine, dim))
        stop = first + count
        b0, b1 = first // self.block, (stop - 1) // self.block if count else -1
        for b in range(b0, b1 + 1):
            ss = np.random.SeedSequence(self.seed, spawn_key=(self._sid, b, n_fine, dim))
            z = np.random.Generator(np.random.Philox(ss)).standard_normal((self.block, n_fine, dim))
            lo = max(first, b * self.block)
            hi = min(stop, (b + 1) * self.block)
            out[lo - first:hi - first] = z[lo - b * self.block:hi - b * self.block]
        return out

    def increments(self, grid: TimeGrid, first=0, count=1, refine=1, dim=None):
        """Increments over ``grid`` for paths [first, first + count).

        With ``refine > 1`` the increments are sums of ``refine`` increments on
        the grid with ``refine * n_steps`` steps, so grids of different
        resolution sharing ``n_steps * refine`` see the same Brownian path.
        ``dim`` overrides the driver's Brownian dimension.
        """
        n_fine = grid.n_steps * refine
        z = self.normals(first, count, n_fine, dim) * math.sqrt(grid.h / refine)
        if refine == 1:
            return z
        return z.reshape(count, grid.n_steps, refine, z.shape[-1]).sum(axis=2)


@dataclass
class ParticleSystemPaths:
    """States of the interacting particle system on a grid.

    ``states`` has shape (n_steps + 1, M, N); ``increments`` (M, n_steps, d).
    """

    grid: TimeGrid
    states: np.ndarray
    increments: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    _measures: list = field(default=None, repr=False)

    def __post_init__(self):
        self.states.setflags(write=False)
        self._measures = [EmpiricalMeasure._wrap(self.states[k]) for k in range(self.states.shape[0])]

    @property
    def n_particles(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def measure(self, k) -> EmpiricalMeasure:
        return self._measures[k]

    def tail(self, k) -> "ParticleSystemPaths":
        """The same paths restarted at step k on the grid [t_k, T]."""
        g = self.grid.sub(self.grid.n_steps - k)
        return ParticleSystemPaths(g, np.array(self.states[k:]), self.increments[:, k:])


@dataclass
class PathBundle:
    """Batch of decoupled paths with optional tangent information.

    ``states`` (B, n+1, N); ``increments`` (B, n, d); ``jacobians``
    (B, n+1, N, N); ``lions`` maps a label to (B, n+1, N, P) tangents;
    ``malliavin`` (B, R, n+1, N, d) holds D[r][k] for the nodes in ``r_nodes``.
    """

    grid: TimeGrid
    x0: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    jacobians: Optional[np.ndarray] = None
    lions: dict = field(default_factory=dict)
    malliavin: Optional[np.ndarray] = None
    r_nodes: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]


def euler_move(F, h, xi):
    """Euler increment V_0 h + sum_i V_i xi^i from stacked fields F (B, d+1, N)."""
    # overflow is caught by the finiteness check after the step
    with np.errstate(over="ignore", invalid="ignore"):
        return F[:, 0] * h + np.einsum("bin,bi->bn", F[:, 1:], xi)


def euler_step(model, X, mu, h, xi):
    """One Euler-Maruyama step of a batch of states against a frozen measure."""
    return X + euler_move(model.fields(X, mu), h, xi)


def _check_finite(X, k):
    if not np.all(np.isfinite(X)):
        raise BlowUpError(f"state became non-finite at step {k}", step=k)


def _initial_cloud(initial, M, N, driver):
    if callable(initial):
        pts = np.asarray(initial(driver.rng("initial"), M), dtype=float)
    else:
        pts = np.asarray(initial, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None] if N == 1 else np.broadcast_to(pts, (M, N))
    if pts.shape != (M, N):
        raise DimensionError(f"initial cloud has shape {pts.shape}, expected ({M}, {N})")
    if not np.all(np.isfinite(pts)):
        raise ConfigError("initial cloud must be finite")
    return np.array(pts)


def simulate_particles(model, initial, M, grid, driver, *, increments=None):
    """Simulate M interacting particles.

    Parameters
    ----------
    model : CoefficientModel
    initial : array_like of shape (M, N) or callable
        Initial positions, or ``sampler(rng, M)`` returning them.
    M : int
        Number of particles, at least 2.
    grid : TimeGrid
    driver : BrownianDriver
        Particle ``j`` uses path index ``j`` of the driver.
    increments : ndarray, optional
        Explicit increments (M, n_steps, d) replacing the driver output.

    Returns
    -------
    ParticleSystemPaths
    """
    if int(M) < 2:
        raise ConfigError("the particle system needs M >= 2")
    M, N, d = int(M), model.dim_state, model.dim_noise
    X = _initial_cloud(initial, M, N, driver)
    dB = driver.increments(grid, 0, M, dim=d) if increments is None else np.asarray(increments, dtype=float)
    if dB.shape != (M, grid.n_steps, d):
        raise DimensionError(f"increments have shape {dB.shape}, expected {(M, grid.n_steps, d)}")
    states = np.empty((grid.n_steps + 1, M, N))
    states[0] = X
    diag = {"ellipticity_min": np.inf}
    check = model.declared_uniformly_elliptic
    h = grid.h
    for k in range(grid.n_steps):
        mu = EmpiricalMeasure._wrap(states[k])
        F = model.fields(states[k], mu)
        if check:
            s = np.swapaxes(F[:, 1:], 1, 2)
            lam = np.linalg.eigvalsh(s @ np.swapaxes(s, 1, 2)).min()
            diag["ellipticity_min"] = min(diag["ellipticity_min"], float(lam))
        states[k + 1] = states[k] + euler_move(F, h, dB[:, k])
        _check_finite(states[k + 1], k + 1)
    if check and diag["ellipticity_min"] < model.ellipticity_floor:
        diag["warning"] = "ellipticity floor violated at a simulated particle"
    return ParticleSystemPaths(grid, states, dB, diag)


def simulate_decoupled(model, x, law_paths, driver=None, *, n_paths=1, first=0,
                       start_step=0, stop_step=None, increments=None):
    """Simulate decoupled paths driven by the frozen measures of ``law_paths``.

    Parameters
    ----------
    x : array_like of shape (N,) or (B, N)
        Starting point(s) at node ``start_step``.
    law_paths : ParticleSystemPaths
    driver : BrownianDriver, optional
        Source of the increments; path indices start at ``first``.
    n_paths : int
        Number of paths when ``x`` is a single point.
    start_step, stop_step : int
        Node range to simulate; by default the whole grid.
    increments : ndarray, optional
        Explicit increments (B, stop_step - start_step, d).
    """
    grid = law_paths.grid
    N = model.dim_state
    stop = grid.n_steps if stop_step is None else int(stop_step)
    if not 0 <= start_step <= stop <= grid.n_steps:
        raise ConfigError("invalid step range")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and increments is not None:
        n_paths = np.shape(increments)[0]
    X = np.broadcast_to(x, (n_paths, N)).copy() if x.ndim == 1 else x.copy()
    if X.shape[1] != N:
        raise DimensionError(f"starting points must have {N} coordinates")
    B = X.shape[0]
    n = stop - start_step
    if increments is None:
        if driver is None:
            raise ConfigError("either a driver or explicit increments is required")
        increments = driver.increments(grid, first, B, dim=model.dim_noise)[:, start_step:stop]
    dB = np.asarray(increments, dtype=float)
    if dB.shape != (B, n, model.dim_noise):
        raise DimensionError(f"increments have shape {dB.shape}, expected {(B, n, model.dim_noise)}")
    states = np.empty((B, n + 1, N))
    states[:, 0] = X
    h = grid.h
    for j in range(n):
        k = start_step + j
        states[:, j + 1] = euler_step(model, states[:, j], law_paths.measure(k), h, dB[:, j])
        _check_finite(states[:, j + 1], k + 1)
    if start_step == 0 and stop == grid.n_steps:
        g = grid
    else:
        g = grid.sub(n) if n > 0 else grid
    return PathBundle(g, X, states, dB)


def simulate_fixed_point(model, x, M, grid, driver, *, n_paths=1, first=0, share_noise=False):
    """Particle system started from the point mass at ``x`` plus decoupled paths from ``x``.

    The decoupled paths use the ``"paths"`` child stream of ``driver``
    unless ``share_noise`` is set, in which case path ``p`` reuses the noise
    of particle ``p``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.dim_state,):
        raise DimensionError("x must be a single point of the state space")
    if int(M) < 2:
        raise ConfigError("the fixed-point construction needs M >= 2")
    law = simulate_particles(model, np.broadcast_to(x, (int(M), model.dim_state)), M, grid, driver.child("particles"))
    if share_noise:
        inc = law.increments[first:first + n_paths]
        bundle = simulate_decoupled(model, x, law, n_paths=n_paths, increments=inc)
    else:
        bundle = simulate_decoupled(model, x, law, driver.child("paths"), n_paths=n_paths, first=first)
    return law, bundle


def dump_paths_csv(paths: ParticleSystemPaths, fh, header_comment=None):
    """Write particle states as rows ``step,particle,coord,value``."""
    w = csv.writer(fh, lineterminator="\n")
    if header_comment:
        fh.write(f"# {header_comment}\n")
    w.writerow(["step", "particle", "coord", "value"])
    S = paths.states
    for k in range(S.shape[0]):
        for j in range(S.shape[1]):
            for c in range(S.shape[2]):
                w.writerow([k, j, c, repr(float(S[k, j, c]))])
