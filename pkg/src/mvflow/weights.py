"""Malliavin integration-by-parts weights built from discrete Skorohod integrals.

A weight is described by a small recipe tree, e.g. ``("I1", 0, ("I1", 0, ONE))``
for the nested first-order weight of the first coordinate applied twice.
The operators are applied innermost first, so the multi-index
``(a1, a2)`` corresponds to ``op_{a2}(op_{a1}(inner))``.

Every weight is evaluated on a batch of decoupled paths from the Euler
map's exact derivatives (:func:`mvflow.tangents.propagate_jet`).
Malliavin fields of order-1 weights, needed when a weight is integrated a
second time, combine the exact first-order fields of the jet with
Hessian-vector products of the random factors (inverse Jacobian entries and
Lions tangents) obtained from central differences of their exact fields
along the integrand direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    MissingAuxiliaryPathError,
    MissingFieldError,
    OrderExceededError,
)
from .tangents import invert_jacobian, propagate_jet

ONE = ("one",)
MAX_ORDER = 2
_OPS = ("I1", "I2", "I3", "calI1", "calI3", "J")
_MEASURE_OPS = ("calI1", "calI3")


# Skorohod primitive


@dataclass
class SkorohodIntegrand:
    """Integrand ``F * u`` of a discrete Skorohod integral.

    Parameters
    ----------
    u : ndarray (B, m, d)
        Adapted factor; row k may only depend on increments with index < k.
    F : float or ndarray (B,)
        Anticipating scalar factor.
    field : ndarray (B, m, d), optional
        Malliavin field D_k F. Omit only when F is deterministic.
    """

    u: np.ndarray
    F: object = 1.0
    field: Optional[np.ndarray] = None

    @property
    def deterministic(self) -> bool:
        F = np.asarray(self.F, dtype=float)
        return F.ndim == 0 or bool(np.all(F == F.reshape(-1)[0]))


def skorohod(integrand: SkorohodIntegrand, increments, h):
    """Discrete Skorohod integral F * sum_k u_k.xi_k - sum_k D_kF.u_k h.

    The left-point sum is the Ito integral of the adapted factor; the
    second sum is the product-rule correction and vanishes for
    deterministic F.

    Raises
    ------
    MissingFieldError
        If F is random and no field is supplied.
    """
    u = np.asarray(integrand.u, dtype=float)
    xi = np.asarray(increments, dtype=float)
    if u.shape != xi.shape:
        raise DimensionError(f"integrand shape {u.shape} does not match increments {xi.shape}")
    ito = np.einsum("bka,bka->b", u, xi)
    F = np.asarray(integrand.F, dtype=float)
    if integrand.field is None:
        if not integrand.deterministic:
            raise MissingFieldError("a random factor needs its Malliavin field")
        return F * ito
    corr = np.einsum("bka,bka->b", np.asarray(integrand.field, dtype=float), u) * h
    return F * ito - corr


# recipes


def order_of(recipe) -> int:
    if recipe[0] == "one":
        return 0
    return 1 + order_of(recipe[2])


def make_recipe(op, alpha, inner=ONE, v_index=None):
    """Iterated operator ``op_alpha(inner)`` as a recipe; ``alpha`` uses 0-based coordinates."""
    if op not in _OPS:
        raise ConfigError(f"unknown weight operator {op!r}")
    rec = inner
    for a in alpha:
        rec = (op, int(a), rec, v_index) if op in _MEASURE_OPS else (op, int(a), rec)
    return rec


@dataclass(frozen=True)
class WeightRealization:
    """One weight evaluated on a batch of paths.

    ``value`` (B,) already includes the t^{-1/2} per index normalization;
    ``field`` (B, m, d) is present when requested for re-integration.
    """

    value: np.ndarray
    order: int
    tag: str
    index: tuple
    t: float
    recipe: tuple = ONE
    field: Optional[np.ndarray] = None
    scaling: float = 0.0
    diagnostics: dict = dc_field(default_factory=dict, compare=False)


def _describe(recipe):
    tags, idx = [], []
    while recipe[0] != "one":
        tags.append(recipe[0])
        idx.append(recipe[1])
        recipe = recipe[2]
    return "/".join(tags) or "one", tuple(reversed(idx))


# evaluation


class WeightBuilder:
    """Evaluates weight recipes on a batch of decoupled paths.

    Parameters
    ----------
    model : CoefficientModel
    law_paths : ParticleSystemPaths
        Frozen measure path.
    x0 : array_like (N,) or (B, N)
        Starting points.
    increments : ndarray (B, m, d)
        Brownian increments of the first m steps; the weights live at
        t = m h.
    forcing : LionsForcing, optional
        Lions forcing of these carriers, required by measure weights.
    v_list : ndarray (Q, N), optional
        Points v matching the column blocks of ``forcing``.
    fd_step : float
        Relative step of the central differences in x used by I3 with a
        non-unit inner weight.
    hvp_step : float
        Size of the increment perturbation in the Hessian-vector products.
    """

    def __init__(self, model, law_paths, x0, increments, *, forcing=None, v_list=None,
                 fd_step=1e-5, hvp_step=1e-5):
        self.model = model
        self.law = law_paths
        self.xi = np.asarray(increments, dtype=float)
        if self.xi.ndim != 3 or self.xi.shape[2] != model.dim_noise:
            raise DimensionError(f"increments must be (B, m, {model.dim_noise}), got {self.xi.shape}")
        B, m, _ = self.xi.shape
        if m < 1 or m > law_paths.grid.n_steps:
            raise DimensionError("increments must cover between 1 and n_steps steps")
        x0 = np.asarray(x0, dtype=float)
        self.x0 = np.broadcast_to(x0, (B, model.dim_state)).copy() if x0.ndim == 1 else x0.copy()
        self.h = law_paths.grid.h
        self.t = m * self.h
        self.forcing = forcing
        self.v_list = None if v_list is None else np.atleast_2d(np.asarray(v_list, dtype=float))
        self.fd_step = fd_step
        self.hvp_step = hvp_step
        self._jet = None
        self._cache = {}
        self.diagnostics = {}

    @property
    def n_paths(self):
        return self.xi.shape[0]

    # jets and factors

    def jet(self, level=0):
        if self._jet is None or self._jet[0] < level:
            self._jet = (level, propagate_jet(self.model, self.law, self.x0, self.xi,
                                              forcing=self.forcing, level=level))
        return self._jet[1]

    def _inverse(self, jet):
        K, cond = invert_jacobian(jet.J)
        self.diagnostics["max_condition"] = max(self.diagnostics.get("max_condition", 1.0), float(np.max(cond)))
        return K

    def _columns(self, q):
        N = self.model.dim_state
        return slice(q * N, (q + 1) * N)

    def _factor(self, name, jet, with_field=True):
        """Random matrix factor (B, N, N) and its field (B, m, N, N, d)."""
        K = self._inverse(jet)
        if name == "K":
            if not with_field:
                return K, None
            return K, -np.einsum("bac,bjcel,bef->bjafl", K, jet.DJ, K)
        q = name[1]
        if jet.L is None:
            raise MissingAuxiliaryPathError("measure weights need a Lions forcing")
        Lq = jet.L[..., self._columns(q)]
        M = K @ Lq
        if not with_field:
            return M, None
        DK = -np.einsum("bac,bjcel,bef->bjafl", K, jet.DJ, K)
        DM = (np.einsum("bjacl,bce->bjael", DK, Lq)
              + np.einsum("bac,bjcel->bjael", K, jet.DL[..., self._columns(q), :]))
        return M, DM

    def factor(self, name):
        key = ("factor", name)
        if key not in self._cache:
            self._cache[key] = self._factor(name, self.jet(1))
        return self._cache[key]

    def _hvp(self, name, i):
        """Second Malliavin derivative of a factor applied to w = u^(i) h, (B, m, N, N, d)."""
        key = ("hvp", name, i)
        if key in self._cache:
            return self._cache[key]
        w = self.jet(0).u[..., i] * self.h
        scale = np.max(np.abs(w).reshape(w.shape[0], -1), axis=1)
        s = self.hvp_step / np.where(scale > 0, scale, 1.0)
        sw = s[:, None, None] * w
        out = []
        for sign in (1.0, -1.0):
            jet = propagate_jet(self.model, self.law, self.x0, self.xi + sign * sw,
                                forcing=self.forcing, level=1)
            out.append(self._factor(name, jet)[1])
        res = (out[0] - out[1]) / (2 * s[:, None, None, None, None])
        self._cache[key] = res
        return res

    # Skorohod building blocks

    def delta(self, i):
        """Ito sum of the i-th integrand column, (B,)."""
        jet = self.jet(0)
        return np.einsum("bka,bka->b", jet.u[..., i], self.xi)

    def delta_field(self, i):
        """Malliavin field of ``delta(i)``, (B, m, d)."""
        jet = self.jet(2)
        return jet.u[..., i] + np.einsum("bjkal,bka->bjl", jet.Du[:, :, :, :, i, :], self.xi)

    def pair(self, DF, i):
        """sum_k D_kF . u_k^(i) h."""
        return np.einsum("bka,bka->b", DF, self.jet(0).u[..., i]) * self.h

    def pair_field_part(self, DF, i):
        """sum_k D_kF . D_j u_k^(i) h, the part of D<DF, u^(i)> from the integrand."""
        return np.einsum("bka,bjkal->bjl", DF, self.jet(2).Du[:, :, :, :, i, :]) * self.h

    # operators

    def _v_index_for_x(self):
        if self.v_list is None:
            raise MissingAuxiliaryPathError("no Lions tangent points were supplied")
        x = self.x0[0]
        if not np.all(self.x0 == x):
            raise DimensionError("the fixed-point weight needs a common starting point")
        hits = np.nonzero(np.all(np.isclose(self.v_list, x), axis=1))[0]
        if hits.size == 0:
            raise MissingAuxiliaryPathError(f"no auxiliary path was simulated at v={x.tolist()}")
        return int(hits[0])

    def _product_I1(self, name, i, P, DP, need_field):
        """sum_l I1_(l)(F_{l,i} * Psi) for a random matrix factor F."""
        F, DF = self.factor(name)
        r = 1.0 / math.sqrt(self.t)
        N = self.model.dim_state
        val = 0.0
        fld = None
        for l in range(N):
            f, df = F[:, l, i], DF[:, :, l, i, :]
            g = f * P
            dg = df * P[:, None, None] if DP is None else df * P[:, None, None] + f[:, None, None] * DP
            val = val + r * (g * self.delta(l) - self.pair(dg, l))
            if need_field:
                H = self._hvp(name, l)[:, :, l, i, :]
                term = (df * self.delta(l)[:, None, None] + f[:, None, None] * self.delta_field(l)
                        - H - self.pair_field_part(df, l))
                fld = r * term if fld is None else fld + r * term
        return val, fld

    def _eval(self, rec, need_field):
        op = rec[0]
        B = self.n_paths
        if op == "one":
            return np.ones(B), None
        i, inner = rec[1], rec[2]
        if not 0 <= i < self.model.dim_state:
            raise DimensionError(f"coordinate index {i} out of range")
        if need_field and inner[0] != "one":
            raise OrderExceededError("fields of order-2 weights are not available")
        unit = inner[0] == "one"
        r = 1.0 / math.sqrt(self.t)
        if op in ("I1", "I3"):
            P, DP = self._eval(inner, not unit)
            val = r * (P * self.delta(i) - (0.0 if DP is None else self.pair(DP, i)))
            if op == "I3" and not unit:
                val = val + math.sqrt(self.t) * self._dx_value(inner, i)
            fld = r * self.delta_field(i) if need_field else None
            return val, fld
        if op == "I2":
            P, DP = self._eval(inner, not unit)
            return self._product_I1("K", i, P, DP, need_field)
        if op in ("calI1", "calI3"):
            if op == "calI3" and not unit:
                raise OrderExceededError("calI3 with a non-unit inner weight needs its measure derivative")
            q = rec[3] if rec[3] is not None else 0
            P, DP = self._eval(inner, not unit)
            return self._product_I1(("M", q), i, P, DP, need_field)
        if op == "J":
            if not unit:
                raise OrderExceededError("J with a non-unit inner weight needs its measure derivative")
            q = self._v_index_for_x()
            a, fa = self._eval(("I1", i, ONE), need_field)
            b, fb = self._eval(("calI1", i, ONE, q), need_field)
            return a + b, (fa + fb if need_field else None)
        raise ConfigError(f"unknown weight operator {op!r}")

    def _dx_value(self, rec, i):
        """Central difference in x_i of a weight's value with the increments held fixed."""
        e = np.zeros(self.model.dim_state)
        e[i] = 1.0
        eps = self.fd_step * (1.0 + np.abs(self.x0[:, i]))
        vals = []
        for sign in (1.0, -1.0):
            other = WeightBuilder(self.model, self.law, self.x0 + sign * eps[:, None] * e, self.xi,
                                  forcing=self.forcing, v_list=self.v_list,
                                  fd_step=self.fd_step, hvp_step=self.hvp_step)
            vals.append(other._eval(rec, False)[0])
        return (vals[0] - vals[1]) / (2 * eps)

    def evaluate(self, rec, with_field=False) -> WeightRealization:
        """Evaluate a recipe.

        Raises
        ------
        OrderExceededError
            If the total order exceeds 2, or a field is requested for an
            order-2 weight.
        """
        if isinstance(rec, WeightRealization):
            rec = rec.recipe
        order = order_of(rec)
        if order > MAX_ORDER:
            raise OrderExceededError(f"total integration-by-parts order {order} exceeds {MAX_ORDER}")
        if with_field and order > 1:
            raise OrderExceededError("fields of order-2 weights are not available")
        if with_field and order == 0:
            return WeightRealization(np.ones(self.n_paths), 0, "one", (), self.t, rec,
                                     np.zeros_like(self.xi))
        if order == 2 or with_field:
            self.jet(2)
        val, fld = self._eval(rec, with_field)
        tag, index = _describe(rec)
        return WeightRealization(val, order, tag, index, self.t, rec, fld, -order / 2,
                                 dict(self.diagnostics))


def _apply(builder, op, i, inner, v_index=None, with_field=False):
    inner = inner.recipe if isinstance(inner, WeightRealization) else inner
    rec = (op, int(i), inner, v_index) if op in _MEASURE_OPS else (op, int(i), inner)
    return builder.evaluate(rec, with_field=with_field)


def weight_I1(builder, i, inner=ONE, with_field=False):
    return _apply(builder, "I1", i, inner, with_field=with_field)


def weight_I2(builder, i, inner=ONE, with_field=False):
    return _apply(builder, "I2", i, inner, with_field=with_field)


def weight_I3(builder, i, inner=ONE, with_field=False):
    return _apply(builder, "I3", i, inner, with_field=with_field)


def weight_calI1(builder, i, inner=ONE, v_index=0, with_field=False):
    return _apply(builder, "calI1", i, inner, v_index, with_field=with_field)


def weight_calI3(builder, i, inner=ONE, v_index=0, with_field=False):
    return _apply(builder, "calI3", i, inner, v_index, with_field=with_field)


def weight_J(builder, i, inner=ONE, with_field=False):
    return _apply(builder, "J", i, inner, with_field=with_field)


def chunk_size(model, m, order, budget=4_000_000):
    """Samples per batch keeping the level-2 jet within ``budget`` floats."""
    if order < 2:
        return 8192
    per = m * m * model.dim_noise ** 2 * model.dim_state + m * model.dim_noise
    return int(max(16, min(8192, budget // max(per, 1))))
