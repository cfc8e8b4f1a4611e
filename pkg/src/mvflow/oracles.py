"""Closed-form reference values for the constant-coefficient and mean-field OU models.

Each closed form has an independent cross-check by numerical integration
(``quad`` for Gaussian integrals, ``solve_ivp`` for moment and tangent
ODEs), used by the tests.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, stats

from .errors import ConfigError


def _positive(**kw):
    for name, val in kw.items():
        if not (np.isfinite(val) and val > 0):
            raise ConfigError(f"{name} must be positive, got {val}")


def gaussian_oracle(b, sigma0, t, x):
    """Law of X_t = x + b t + sigma0 B_t.

    Returns
    -------
    dict
        ``mean``, ``variance`` and callables ``density(z)``,
        ``dx_density(z)``, ``dz_density(z)``, plus the expectations
        ``E_identity``, ``E_square``, ``E_sin``, ``E_positive_part`` and their
        x-derivatives ``dx_E_*``.
    """
    _positive(sigma0=sigma0, t=t)
    mean = x + b * t
    var = sigma0 ** 2 * t
    sd = math.sqrt(var)

    def density(z):
        return stats.norm.pdf(z, loc=mean, scale=sd)

    def dz_density(z):
        z = np.asarray(z, dtype=float)
        return -(z - mean) / var * density(z)

    def dx_density(z):
        return -dz_density(z)

    damp = math.exp(-var / 2)
    r = mean / sd
    return {
        "mean": mean,
        "variance": var,
        "density": density,
        "dz_density": dz_density,
        "dx_density": dx_density,
        "E_identity": mean,
        "E_square": mean ** 2 + var,
        "E_sin": damp * math.sin(mean),
        "E_positive_part": mean * stats.norm.cdf(r) + sd * stats.norm.pdf(r),
        "dx_E_identity": 1.0,
        "dx_E_square": 2 * mean,
        "dx_E_sin": damp * math.cos(mean),
        "dx_E_positive_part": float(stats.norm.cdf(r)),
    }


def gaussian_quadrature(f, b, sigma0, t, x):
    """E f(X_t) for the constant model by adaptive quadrature."""
    mean, sd = x + b * t, sigma0 * math.sqrt(t)
    val, _ = integrate.quad(lambda y: f(y) * stats.norm.pdf(y, mean, sd), mean - 12 * sd, mean + 12 * sd,
                            epsabs=1e-12, epsrel=1e-12, limit=200)
    return val


def mf_ou_oracle(a, sigma0, t, x, m):
    """Mean-field OU dX = a (E X - X) dt + sigma0 dB with initial mean ``m``.

    The law mean stays at ``m`` and X_t = m + (x - m) e^{-at} + sigma0 int e^{-a(t-s)} dB_s.

    Returns
    -------
    dict
        ``mean``, ``variance``, ``density(z)``, ``dx_mean`` = e^{-at},
        ``lions`` = 1 - e^{-at} (Lions derivative of E X_t^{x,[theta]}),
        ``total_fixed_point_dx`` = 1, and for g(x, mu) = x - mean(mu):
        ``U`` = (x - m) e^{-at}, ``dx_U`` = e^{-at}, ``dmu_U`` = -e^{-at},
        ``dt_U`` = -a U, ``dvdmu_U`` = 0; ``second_moment`` of X_t.
    """
    _positive(a=a, sigma0=sigma0, t=t)
    e = math.exp(-a * t)
    mean = m + (x - m) * e
    var = sigma0 ** 2 * (1 - e * e) / (2 * a)
    sd = math.sqrt(var)
    U = (x - m) * e
    return {
        "mean": mean,
        "variance": var,
        "density": lambda z: stats.norm.pdf(z, loc=mean, scale=sd),
        "dx_mean": e,
        "lions": 1 - e,
        "total_fixed_point_dx": 1.0,
        "U": U,
        "dx_U": e,
        "dmu_U": -e,
        "dt_U": -a * U,
        "dvdmu_U": 0.0,
        "second_moment": mean ** 2 + var,
    }


def mf_ou_ode(a, sigma0, t, x, m, max_step=1e-5):
    """The OU oracle quantities by integrating their ODEs numerically.

    Integrates the law mean, the decoupled mean and variance, the tangent
    J' = -a J and the Lions tangent L' = a (1 - L) (the mean of the law
    moves one-for-one with a shift of the initial law).
    """
    _positive(a=a, sigma0=sigma0, t=t)

    def rhs(_, y):
        mu, mx, v, J, L = y
        return [0.0, a * (mu - mx), -2 * a * v + sigma0 ** 2, -a * J, a * (1 - L)]

    sol = integrate.solve_ivp(rhs, (0.0, t), [m, x, 0.0, 1.0, 0.0], method="RK45", max_step=max_step,
                              rtol=1e-11, atol=1e-13)
    mu, mx, v, J, L = sol.y[:, -1]
    return {"mean": mx, "variance": v, "dx_mean": J, "lions": L, "law_mean": mu,
            "total_fixed_point_dx": J + L}
