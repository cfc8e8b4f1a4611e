"""Coefficient fields V_0, ..., V_d of a McKean-Vlasov SDE and their derivatives.

A :class:`CoefficientModel` bundles batched callables. All of them take a
batch of states ``x`` of shape (B, N) and an :class:`EmpiricalMeasure`:

=================  =======================  ==========================
callable           extra argument           returns
=================  =======================  ==========================
``drift``                                   (B, N)          V_0
``diffusion``                               (B, N, d)       columns V_1..V_d
``dx_drift``                                (B, N, N)       d V_0 / dx
``dx_diffusion``                            (B, d, N, N)    d V_i / dx
``dmu_drift``      ``v`` (B, N) paired      (B, N, N)       Lions derivative
``dmu_diffusion``  ``v`` (B, N) paired      (B, d, N, N)
=================  =======================  ==========================

Jacobians are indexed ``[a, b] = dV^a / dx_b`` and Lions derivatives
``[a, c] = (d_mu V^a)(x, mu, v)_c``. Internally the drift and diffusion
columns are stacked into one axis of length d + 1, index 0 being the drift,
which matches the convention dB^0 = ds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DimensionError, ModelEvaluationError
from .measures import EmpiricalMeasure

_FD_REL = 1e-5
_PAIR_BLOCK = 1 << 18


def _checked(arr, what, x):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr.reshape(arr.shape[0], -1)))[0, 0]
        raise ModelEvaluationError(
            f"{what} returned a non-finite value at x={np.asarray(x)[bad].tolist()}"
        )
    return arr


def _fd_steps(x):
    return _FD_REL * (1.0 + np.abs(x))


def fd_jacobian(fn, x):
    """Central-difference derivative of a batched map ``fn`` with respect to x.

    ``fn`` maps (B, N) to (B, ...); the result has shape (B, ..., N).
    """
    x = np.asarray(x, dtype=float)
    steps = _fd_steps(x)
    cols = []
    for c in range(x.shape[1]):
        e = np.zeros_like(x)
        e[:, c] = steps[:, c]
        diff = np.asarray(fn(x + e)) - np.asarray(fn(x - e))
        scale = (2.0 * steps[:, c]).reshape((-1,) + (1,) * (diff.ndim - 1))
        cols.append(diff / scale)
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class LionsFactors:
    """Separable form of the Lions derivative.

    ``d_mu V_i(x, mu, v) = A(x, mu)[i] @ dphi(v)`` with ``A`` of shape
    (B, d+1, N, F) and ``dphi`` of shape (K, F, N). When supplied, averages
    of the Lions derivative over a cloud cost O(M) instead of O(B * M).
    ``dA`` optionally returns the x-derivative of ``A``, shape (B, d+1, N, F, N).
    """

    A: Callable
    dphi: Callable
    dA: Optional[Callable] = None


class CoefficientModel:
    """Coefficients of the SDE together with their analytic derivatives.

    Parameters
    ----------
    dim_state, dim_noise : int
        State dimension N and Brownian dimension d.
    drift, diffusion, dx_drift, dx_diffusion : callable
        Batched coefficient maps, see the module docstring.
    dmu_drift, dmu_diffusion : callable, optional
        Lions derivatives. Omit both for a model without measure dependence.
    dxx_drift, dxx_diffusion : callable, optional
        Second x-derivatives, shapes (B, N, N, N) and (B, d, N, N, N). Used
        only by forward-mode Malliavin fields; central differences of the
        Jacobians are used when absent.
    lions_factors : LionsFactors, optional
        Separable representation of the Lions derivative.
    bounded_coefficients : bool
        Caller's assertion that V_0..V_d are bounded.
    declared_uniformly_elliptic : bool
        Caller's assertion that sigma sigma^T >= floor * I everywhere.
    ellipticity_floor : float, optional
        The floor in the ellipticity assertion.
    name : str
    """

    def __init__(
        self,
        dim_state,
        dim_noise,
        drift,
        diffusion,
        dx_drift,
        dx_diffusion,
        dmu_drift=None,
        dmu_diffusion=None,
        *,
        dxx_drift=None,
        dxx_diffusion=None,
        lions_factors=None,
        bounded_coefficients=False,
        declared_uniformly_elliptic=False,
        ellipticity_floor=None,
        name="custom",
    ):
        if int(dim_state) < 1 or int(dim_noise) < 1:
            raise DimensionError("dim_state and dim_noise must be positive")
        if (dmu_drift is None) != (dmu_diffusion is None):
            raise ConfigError("supply both Lions derivatives or neither")
        if declared_uniformly_elliptic and not (ellipticity_floor and ellipticity_floor > 0):
            raise ConfigError("a positive ellipticity_floor is required when ellipticity is declared")
        self.dim_state = int(dim_state)
        self.dim_noise = int(dim_noise)
        self.drift = drift
        self.diffusion = diffusion
        self.dx_drift = dx_drift
        self.dx_diffusion = dx_diffusion
        self.dmu_drift = dmu_drift
        self.dmu_diffusion = dmu_diffusion
        self.dxx_drift = dxx_drift
        self.dxx_diffusion = dxx_diffusion
        self.lions_factors = lions_factors
        self.bounded_coefficients = bool(bounded_coefficients)
        self.declared_uniformly_elliptic = bool(declared_uniformly_elliptic)
        self.ellipticity_floor = None if ellipticity_floor is None else float(ellipticity_floor)
        self.name = name

    def __repr__(self):
        return f"CoefficientModel(name={self.name!r}, N={self.dim_state}, d={self.dim_noise})"

    @property
    def measure_dependent(self) -> bool:
        return self.dmu_drift is not None

    def _batch(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim_state:
            raise DimensionError(f"expected states of shape (B, {self.dim_state}), got {x.shape}")
        return x

    # stacked evaluations, index 0 along axis 1 is the drift

    def fields(self, x, mu):
        """V_0..V_d at each state, shape (B, d+1, N)."""
        x = self._batch(x)
        b = _checked(self.drift(x, mu), "drift", x)
        s = _checked(self.diffusion(x, mu), "diffusion", x)
        B, N, d = x.shape[0], self.dim_state, self.dim_noise
        out = np.empty((B, d + 1, N))
        out[:, 0] = b.reshape(B, N)
        out[:, 1:] = np.swapaxes(s.reshape(B, N, d), 1, 2)
        return out

    def jacobians(self, x, mu):
        """x-Jacobians of V_0..V_d, shape (B, d+1, N, N)."""
        x = self._batch(x)
        B, N, d = x.shape[0], self.dim_state, self.dim_noise
        out = np.empty((B, d + 1, N, N))
        out[:, 0] = _checked(self.dx_drift(x, mu), "dx_drift", x).reshape(B, N, N)
        out[:, 1:] = _checked(self.dx_diffusion(x, mu), "dx_diffusion", x).reshape(B, d, N, N)
        return out

    def hessians(self, x, mu):
        """Second x-derivatives, shape (B, d+1, N, N, N), last axis the new direction."""
        x = self._batch(x)
        B, N, d = x.shape[0], self.dim_state, self.dim_noise
        if self.dxx_drift is not None and self.dxx_diffusion is not None:
            out = np.empty((B, d + 1, N, N, N))
            out[:, 0] = _checked(self.dxx_drift(x, mu), "dxx_drift", x).reshape(B, N, N, N)
            out[:, 1:] = _checked(self.dxx_diffusion(x, mu), "dxx_diffusion", x).reshape(B, d, N, N, N)
            return out
        return fd_jacobian(lambda y: self.jacobians(y, mu), x)

    def lions(self, x, mu, v):
        """Lions derivatives at paired rows (x_b, v_b), shape (B, d+1, N, N)."""
        x = self._batch(x)
        v = self._batch(v)
        B, N, d = x.shape[0], self.dim_state, self.dim_noise
        if v.shape[0] != B:
            v = np.broadcast_to(v, x.shape)
        out = np.zeros((B, d + 1, N, N))
        if not self.measure_dependent:
            return out
        out[:, 0] = _checked(self.dmu_drift(x, mu, v), "dmu_drift", x).reshape(B, N, N)
        out[:, 1:] = _checked(self.dmu_diffusion(x, mu, v), "dmu_diffusion", x).reshape(B, d, N, N)
        return out

    def lions_paired(self, x, mu, v, weights):
        """``d_mu V_i(x_b, mu, v_b) @ weights_b`` for weights of shape (B, N, P)."""
        x = self._batch(x)
        B, N, d = x.shape[0], self.dim_state, self.dim_noise
        P = weights.shape[-1]
        if not self.measure_dependent:
            return np.zeros((B, d + 1, N, P))
        lf = self.lions_factors
        if lf is not None:
            A = _checked(lf.A(x, mu), "lions_factors.A", x)
            dphi = _checked(lf.dphi(self._batch(v)), "lions_factors.dphi", v)
            return np.einsum("biaf,bfc,bcp->biap", A, dphi, weights, optimize=True)
        return np.einsum("biac,bcp->biap", self.lions(x, mu, v), weights)

    def lions_average(self, x, mu, weights):
        """Average over the cloud of ``d_mu V_i(x_b, mu, X^m) @ weights_m``.

        ``weights`` has shape (M, N, P), one matrix per particle of ``mu``.
        Returns shape (B, d+1, N, P).
        """
        x = self._batch(x)
        B, N, d = x.shape[0], self.dim_state, self.dim_noise
        P = weights.shape[-1]
        if not self.measure_dependent:
            return np.zeros((B, d + 1, N, P))
        pts = mu.points
        M = pts.shape[0]
        lf = self.lions_factors
        if lf is not None:
            c = np.einsum("mfc,mcp->fp", lf.dphi(pts), weights) / M
            A = _checked(lf.A(x, mu), "lions_factors.A", x)
            return np.einsum("biaf,fp->biap", A, c)
        return self._lions_average_pairs(x, mu, weights)

    def _lions_average_pairs(self, x, mu, weights):
        # generic O(B * M) route, blocked over pairs in a fixed order
        B, N, d = x.shape[0], self.dim_state, self.dim_noise
        pts = mu.points
        M = pts.shape[0]
        P = weights.shape[-1]
        out = np.zeros((B, d + 1, N, P))
        rows = max(1, _PAIR_BLOCK // M)
        for s in range(0, B, rows):
            xb = x[s:s + rows]
            nb = xb.shape[0]
            xx = np.repeat(xb, M, axis=0)
            vv = np.tile(pts, (nb, 1))
            g = self.lions(xx, mu, vv).reshape(nb, M, d + 1, N, N)
            out[s:s + rows] = np.einsum("bmiac,mcp->biap", g, weights) / M
        return out

    def lions_average_dx(self, x, mu, weights):
        """x-derivative of :meth:`lions_average`, shape (B, d+1, N, P, N)."""
        x = self._batch(x)
        lf = self.lions_factors
        if lf is not None and lf.dA is not None and self.measure_dependent:
            pts = mu.points
            c = np.einsum("mfc,mcp->fp", lf.dphi(pts), weights) / pts.shape[0]
            return np.einsum("biafe,fp->biape", lf.dA(x, mu), c)
        return fd_jacobian(lambda y: self.lions_average(y, mu, weights), x)

    def lions_paired_dx(self, x, mu, v, weights):
        """x-derivative of :meth:`lions_paired`, shape (B, d+1, N, P, N)."""
        x = self._batch(x)
        lf = self.lions_factors
        if lf is not None and lf.dA is not None and self.measure_dependent:
            dphi = lf.dphi(self._batch(v))
            return np.einsum("biafe,bfc,bcp->biape", lf.dA(x, mu), dphi, weights, optimize=True)
        return fd_jacobian(lambda y: self.lions_paired(y, mu, v, weights), x)


@dataclass
class ModelEvaluation:
    drift: np.ndarray
    diffusion: np.ndarray
    dx: Optional[np.ndarray] = None
    dmu: Optional[np.ndarray] = None


def eval_all(model, x, mu, blocks=("drift", "diffusion", "dx"), v=None):
    """Evaluate the requested coefficient blocks at one common (x, mu).

    Returns a :class:`ModelEvaluation` whose arrays drop the batch axis when
    ``x`` is a single point. ``dx`` holds the d+1 Jacobians (drift first),
    ``dmu`` the d+1 Lions derivatives at ``v`` (requires ``v``).
    """
    if len(mu) < 1:
        raise ConfigError("measure must be nonempty")
    single = np.ndim(x) == 1
    xb = model._batch(x)
    f = model.fields(xb, mu)
    out = ModelEvaluation(drift=f[:, 0], diffusion=np.swapaxes(f[:, 1:], 1, 2))
    if "dx" in blocks:
        out.dx = model.jacobians(xb, mu)
    if "dmu" in blocks:
        if v is None:
            raise ConfigError("the dmu block needs a point v")
        out.dmu = model.lions(xb, mu, np.broadcast_to(np.atleast_2d(v), xb.shape))
    if single:
        for k in ("drift", "diffusion", "dx", "dmu"):
            a = getattr(out, k)
            if a is not None:
                setattr(out, k, a[0])
    return out


@dataclass(frozen=True)
class EllipticityReport:
    min_eigenvalue: float
    floor: Optional[float]
    violated: bool
    worst_probe: int


def check_ellipticity(model, probes):
    """Smallest eigenvalue of sigma sigma^T over a list of (x, mu) probes."""
    best, worst = np.inf, -1
    for k, (x, mu) in enumerate(probes):
        f = model.fields(x, mu)
        s = np.swapaxes(f[:, 1:], 1, 2)
        lam = np.linalg.eigvalsh(s @ np.swapaxes(s, 1, 2)).min()
        if lam < best:
            best, worst = float(lam), k
    floor = model.ellipticity_floor
    violated = bool(model.declared_uniformly_elliptic and floor is not None and best < floor)
    return EllipticityReport(best, floor, violated, worst)


def lions_fd_probe(model, x, mu, particle, direction, h, field=0):
    """One-particle perturbation quotient for the Lions derivative.

    Moves particle ``particle`` of ``mu`` by ``h`` along coordinate
    ``direction`` and returns ``(V(x, mu_h) - V(x, mu)) / (h / M)`` for the
    field with stacked index ``field``. The limit as h -> 0 is column
    ``direction`` of d_mu V(x, mu, X^particle).
    """
    pts = np.array(mu.points)
    pts[particle, direction] += h
    moved = EmpiricalMeasure(pts)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    diff = model.fields(x, moved)[0, field] - model.fields(x, mu)[0, field]
    return diff * mu.size / h


# built-in families


def _as_matrix(sigma0, N=None):
    s = np.atleast_2d(np.asarray(sigma0, dtype=float))
    if s.shape == (1, 1) and N is not None and N > 1:
        s = s[0, 0] * np.eye(N)
    return s


def constant(b, sigma0):
    """Constant drift ``b`` (N,) and constant diffusion matrix ``sigma0`` (N, d)."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    s = _as_matrix(sigma0, b.size)
    N, d = s.shape
    if b.size != N:
        raise DimensionError("b and sigma0 disagree on the state dimension")
    lam = float(np.linalg.eigvalsh(s @ s.T).min()) if d >= N else 0.0

    def drift(x, mu):
        return np.broadcast_to(b, x.shape)

    def diffusion(x, mu):
        return np.broadcast_to(s, (x.shape[0], N, d))

    def dx_drift(x, mu):
        return np.zeros((x.shape[0], N, N))

    def dx_diffusion(x, mu):
        return np.zeros((x.shape[0], d, N, N))

    return CoefficientModel(
        N, d, drift, diffusion, dx_drift, dx_diffusion,
        dxx_drift=lambda x, mu: np.zeros((x.shape[0], N, N, N)),
        dxx_diffusion=lambda x, mu: np.zeros((x.shape[0], d, N, N, N)),
        bounded_coefficients=True,
        declared_uniformly_elliptic=lam > 0,
        ellipticity_floor=lam if lam > 0 else None,
        name="constant",
    )


def scalar_interaction(
    U, dU_dx, dU_dm, phi, dphi, dim_state, dim_noise,
    *, d2U_dx2=None, d2U_dxdm=None,
    bounded_coefficients=False, ellipticity_floor=None, name="scalar_interaction",
):
    """Coefficients of the form V_i(x, mu) = U_i(x, integral of phi against mu).

    ``phi`` maps (K, N) to (K, F) and ``dphi`` to (K, F, N). ``U(x, m)``
    receives states (B, N) and the feature mean m of shape (F,) and returns
    the stacked fields (B, d+1, N). ``dU_dx`` returns (B, d+1, N, N),
    ``dU_dm`` (B, d+1, N, F). The Lions derivative is
    ``dU_dm(x, m) @ dphi(v)``, evaluated through :class:`LionsFactors`.
    """
    N, d = int(dim_state), int(dim_noise)

    def feat(mu):
        return mu.integrate(phi).reshape(-1)

    def drift(x, mu):
        return U(x, feat(mu))[:, 0]

    def diffusion(x, mu):
        return np.swapaxes(U(x, feat(mu))[:, 1:], 1, 2)

    def dx_drift(x, mu):
        return dU_dx(x, feat(mu))[:, 0]

    def dx_diffusion(x, mu):
        return dU_dx(x, feat(mu))[:, 1:]

    def A(x, mu):
        return dU_dm(x, feat(mu))

    def dmu_drift(x, mu, v):
        return np.einsum("bnf,bfc->bnc", A(x, mu)[:, 0], dphi(v))

    def dmu_diffusion(x, mu, v):
        return np.einsum("binf,bfc->binc", A(x, mu)[:, 1:], dphi(v))

    kw = {}
    if d2U_dx2 is not None:
        kw["dxx_drift"] = lambda x, mu: d2U_dx2(x, feat(mu))[:, 0]
        kw["dxx_diffusion"] = lambda x, mu: d2U_dx2(x, feat(mu))[:, 1:]
    dA = None if d2U_dxdm is None else (lambda x, mu: d2U_dxdm(x, feat(mu)))
    return CoefficientModel(
        N, d, drift, diffusion, dx_drift, dx_diffusion, dmu_drift, dmu_diffusion,
        lions_factors=LionsFactors(A, dphi, dA),
        bounded_coefficients=bounded_coefficients,
        declared_uniformly_elliptic=ellipticity_floor is not None,
        ellipticity_floor=ellipticity_floor,
        name=name,
        **kw,
    )


def first_order(
    W, dW_dx, dW_dy, dim_state, dim_noise,
    *, d2W_dx2=None, bounded_coefficients=False, ellipticity_floor=None, name="first_order",
):
    """Coefficients of the form V_i(x, mu) = integral of W_i(x, y) mu(dy).

    ``W(x, y)`` takes paired rows (B, N), (B, N) and returns stacked fields
    (B, d+1, N); ``dW_dx`` and ``dW_dy`` return (B, d+1, N, N). The Lions
    derivative is ``dW_dy(x, v)``. Evaluation costs O(B * M).
    """
    N, d = int(dim_state), int(dim_noise)

    def cloud_mean(fn, x, mu):
        pts = mu.points
        M = pts.shape[0]
        B = x.shape[0]
        rows = max(1, _PAIR_BLOCK // M)
        parts = []
        for s in range(0, B, rows):
            xb = x[s:s + rows]
            nb = xb.shape[0]
            val = fn(np.repeat(xb, M, axis=0), np.tile(pts, (nb, 1)))
            parts.append(val.reshape((nb, M) + val.shape[1:]).mean(axis=1))
        return np.concatenate(parts, axis=0)

    def drift(x, mu):
        return cloud_mean(W, x, mu)[:, 0]

    def diffusion(x, mu):
        return np.swapaxes(cloud_mean(W, x, mu)[:, 1:], 1, 2)

    def dx_drift(x, mu):
        return cloud_mean(dW_dx, x, mu)[:, 0]

    def dx_diffusion(x, mu):
        return cloud_mean(dW_dx, x, mu)[:, 1:]

    def dmu_drift(x, mu, v):
        return dW_dy(x, v)[:, 0]

    def dmu_diffusion(x, mu, v):
        return dW_dy(x, v)[:, 1:]

    kw = {}
    if d2W_dx2 is not None:
        kw["dxx_drift"] = lambda x, mu: cloud_mean(d2W_dx2, x, mu)[:, 0]
        kw["dxx_diffusion"] = lambda x, mu: cloud_mean(d2W_dx2, x, mu)[:, 1:]
    return CoefficientModel(
        N, d, drift, diffusion, dx_drift, dx_diffusion, dmu_drift, dmu_diffusion,
        bounded_coefficients=bounded_coefficients,
        declared_uniformly_elliptic=ellipticity_floor is not None,
        ellipticity_floor=ellipticity_floor,
        name=name,
        **kw,
    )


_FEATURES = {
    "identity": (lambda y: y, lambda y: np.ones_like(y), lambda y: np.zeros_like(y)),
    "tanh": (np.tanh, lambda y: 1.0 - np.tanh(y) ** 2,
             lambda y: -2.0 * np.tanh(y) * (1.0 - np.tanh(y) ** 2)),
    "sin": (np.sin, np.cos, lambda y: -np.sin(y)),
}


def mean_attraction(rate, sigma0, dim=1, feature="identity"):
    """Drift ``rate * (mean of phi(X) - x)`` with diffusion ``sigma0 * I``.

    ``phi`` acts coordinatewise and is one of ``identity``, ``tanh``, ``sin``.
    With the identity feature this is the mean-field Ornstein-Uhlenbeck model.
    """
    if feature not in _FEATURES:
        raise ConfigError(f"unknown feature {feature!r}")
    rate, s0, N = float(rate), float(sigma0), int(dim)
    if s0 <= 0:
        raise ConfigError("sigma0 must be positive")
    f, df, _ = _FEATURES[feature]
    eye = np.eye(N)

    def U(x, m):
        out = np.zeros((x.shape[0], N + 1, N))
        out[:, 0] = rate * (m[None, :] - x)
        out[:, 1:] = s0 * eye
        return out

    def dU_dx(x, m):
        out = np.zeros((x.shape[0], N + 1, N, N))
        out[:, 0] = -rate * eye
        return out

    def dU_dm(x, m):
        out = np.zeros((x.shape[0], N + 1, N, N))
        out[:, 0] = rate * eye
        return out

    def d2U_dx2(x, m):
        return np.zeros((x.shape[0], N + 1, N, N, N))

    def d2U_dxdm(x, m):
        return np.zeros((x.shape[0], N + 1, N, N, N))

    def dphi(v):
        return df(v)[:, :, None] * eye[None]

    return scalar_interaction(
        U, dU_dx, dU_dm, f, dphi, N, N,
        d2U_dx2=d2U_dx2, d2U_dxdm=d2U_dxdm,
        ellipticity_floor=s0**2,
        name="mean_field_ou" if feature == "identity" else f"mean_attraction[{feature}]",
    )


def mean_field_ou(a, sigma0):
    """Mean-field Ornstein-Uhlenbeck model: drift a (mean - x), diffusion sigma0."""
    if a <= 0 or sigma0 <= 0:
        raise ConfigError("a and sigma0 must be positive")
    return mean_attraction(a, sigma0, dim=1, feature="identity")


_KERNELS = {
    "linear": (lambda r: r, lambda r: np.ones_like(r), lambda r: np.zeros_like(r)),
    "tanh": (np.tanh, lambda r: 1.0 - np.tanh(r) ** 2,
             lambda r: -2.0 * np.tanh(r) * (1.0 - np.tanh(r) ** 2)),
}


def kernel_attraction(strength, sigma0, dim=1, kernel="tanh"):
    """Pairwise interaction drift ``strength * mean of k(y - x)`` (coordinatewise k).

    Built on :func:`first_order`; the ``linear`` kernel reproduces the
    mean-field Ornstein-Uhlenbeck drift through the generic O(B * M) route.
    """
    if kernel not in _KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}")
    k, dk, d2k = _KERNELS[kernel]
    c, s0, N = float(strength), float(sigma0), int(dim)
    if s0 <= 0:
        raise ConfigError("sigma0 must be positive")
    eye = np.eye(N)

    def W(x, y):
        out = np.zeros((x.shape[0], N + 1, N))
        out[:, 0] = c * k(y - x)
        out[:, 1:] = s0 * eye
        return out

    def dW_dx(x, y):
        out = np.zeros((x.shape[0], N + 1, N, N))
        out[:, 0] = -c * dk(y - x)[:, :, None] * eye
        return out

    def dW_dy(x, y):
        out = np.zeros((x.shape[0], N + 1, N, N))
        out[:, 0] = c * dk(y - x)[:, :, None] * eye
        return out

    def d2W_dx2(x, y):
        out = np.zeros((x.shape[0], N + 1, N, N, N))
        diag = c * d2k(y - x)
        for a in range(N):
            out[:, 0, a, a, a] = diag[:, a]
        return out

    bounded = kernel == "tanh"
    return first_order(
        W, dW_dx, dW_dy, N, N, d2W_dx2=d2W_dx2,
        bounded_coefficients=bounded, ellipticity_floor=s0**2,
        name=f"kernel_attraction[{kernel}]",
    )


def geometric(mu_rate, s):
    """Scalar linear model V_0 = mu_rate * x, V_1 = s * x (not elliptic at 0)."""
    mu_rate, s = float(mu_rate), float(s)

    def drift(x, mu):
        return mu_rate * x

    def diffusion(x, mu):
        return (s * x)[:, :, None]

    def dx_drift(x, mu):
        return np.full((x.shape[0], 1, 1), mu_rate)

    def dx_diffusion(x, mu):
        return np.full((x.shape[0], 1, 1, 1), s)

    return CoefficientModel(
        1, 1, drift, diffusion, dx_drift, dx_diffusion,
        dxx_drift=lambda x, mu: np.zeros((x.shape[0], 1, 1, 1)),
        dxx_diffusion=lambda x, mu: np.zeros((x.shape[0], 1, 1, 1, 1)),
        name="geometric",
    )


def sine_diffusion(b=0.0, s0=1.0, s1=0.1):
    """Scalar model with bounded coefficients V_0 = b, V_1 = s0 + s1 sin(x)."""
    b, s0, s1 = float(b), float(s0), float(s1)
    if s0 <= abs(s1):
        raise ConfigError("need s0 > |s1| for uniform ellipticity")

    def drift(x, mu):
        return np.full(x.shape, b)

    def diffusion(x, mu):
        return (s0 + s1 * np.sin(x))[:, :, None]

    def dx_drift(x, mu):
        return np.zeros((x.shape[0], 1, 1))

    def dx_diffusion(x, mu):
        return (s1 * np.cos(x)).reshape(-1, 1, 1, 1)

    return CoefficientModel(
        1, 1, drift, diffusion, dx_drift, dx_diffusion,
        dxx_drift=lambda x, mu: np.zeros((x.shape[0], 1, 1, 1)),
        dxx_diffusion=lambda x, mu: (-s1 * np.sin(x)).reshape(-1, 1, 1, 1, 1),
        bounded_coefficients=True,
        declared_uniformly_elliptic=True,
        ellipticity_floor=(s0 - abs(s1)) ** 2,
        name="sine_diffusion",
    )


BUILTIN_FAMILIES = {
    "constant": constant,
    "mean_field_ou": mean_field_ou,
    "mean_attraction": mean_attraction,
    "kernel_attraction": kernel_attraction,
    "geometric": geometric,
    "sine_diffusion": sine_diffusion,
}


def build_model(family, params):
    """Construct a built-in family by name from a parameter mapping."""
    try:
        factory = BUILTIN_FAMILIES[family]
    except KeyError:
        raise ConfigError(
            f"unknown model family {family!r}; choose from {sorted(BUILTIN_FAMILIES)}"
        ) from None
    try:
        return factory(**params)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad parameters for model {family!r}: {exc}") from None
