"""Monte Carlo estimators of expectations, sensitivities, densities and PDE residuals.

All estimators share the same sampling layout. A single particle system
(the frozen law) is simulated from the ``"particles"`` stream of the root
driver, decoupled samples use path indices of the ``"paths"`` stream, and
auxiliary paths for Lions tangents use ``"aux-particles"`` (indexed by
particle) and ``"aux-paths"`` (indexed by sample). Samples are processed in
fixed-size chunks and every random quantity is indexed by its global sample
number, so results do not depend on the chunk size or the thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats
from scipy.special import ndtr
from sklearn.base import BaseEstimator

from .errors import ClassMismatchError, ConfigError, DegenerateGridError, DimensionError, OrderExceededError
from .measures import EmpiricalMeasure
from .simulator import BrownianDriver, TimeGrid, simulate_decoupled, simulate_particles
from .tangents import LionsForcing, particle_lions, point_weights, simulate_aux
from .weights import ONE, WeightBuilder, chunk_size, make_recipe, order_of

# payoffs


@dataclass(frozen=True)
class PayoffSpec:
    """Terminal function with optional derivatives and structure tag.

    Parameters
    ----------
    func : callable
        ``func(x)`` or, for measure-dependent payoffs, ``func(x, mu)``;
        ``x`` is (B, N) and the result (B,).
    measure_dependent : bool
    grad : callable, optional
        x-gradient with the same arguments as ``func``, shape (B, N).
    dmu : callable, optional
        Lions derivative ``dmu(x, mu, v)`` at paired rows, shape (B, N).
    companion : callable, optional
        ``G(x, mu, v)`` at paired rows, shape (B,), whose x- or
        v-derivative equals the Lions derivative of the payoff.
    tag : {None, "ICx", "ICv"}
        Which slot of ``companion`` carries the Lions derivative.
    name : str
    """

    func: Callable
    measure_dependent: bool = False
    grad: Optional[Callable] = None
    dmu: Optional[Callable] = None
    companion: Optional[Callable] = None
    tag: Optional[str] = None
    name: str = "custom"

    def __post_init__(self):
        if self.tag not in (None, "ICx", "ICv"):
            raise ConfigError(f"unknown payoff tag {self.tag!r}")
        if self.tag is not None and self.companion is None:
            raise ConfigError("a tagged payoff needs its companion function")

    def __call__(self, x, mu=None):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.func(x, mu) if self.measure_dependent else self.func(x), dtype=float)

    def gradient(self, x, mu=None):
        if self.grad is None:
            raise ClassMismatchError(f"payoff {self.name!r} has no gradient")
        return np.asarray(self.grad(x, mu) if self.measure_dependent else self.grad(x), dtype=float)

    def lions(self, x, mu, v):
        if not self.measure_dependent:
            return np.zeros(np.shape(x))
        if self.dmu is None:
            raise ClassMismatchError(f"payoff {self.name!r} has no Lions derivative")
        return np.asarray(self.dmu(x, mu, v), dtype=float)

    @property
    def smooth(self) -> bool:
        return self.grad is not None and (not self.measure_dependent or self.dmu is not None)

    def scaled(self, c) -> "PayoffSpec":
        """The payoff multiplied by a constant."""
        def wrap(fn):
            return None if fn is None else (lambda *a: c * np.asarray(fn(*a)))
        return PayoffSpec(wrap(self.func), self.measure_dependent, wrap(self.grad), wrap(self.dmu),
                          wrap(self.companion), self.tag, f"{c}*{self.name}")


def as_payoff(f) -> PayoffSpec:
    return f if isinstance(f, PayoffSpec) else PayoffSpec(f)


def _coord(c):
    def f(x):
        return x[:, c]

    def g(x):
        out = np.zeros_like(x)
        out[:, c] = 1.0
        return out
    return f, g


def payoff_identity(coord=0):
    f, g = _coord(coord)
    return PayoffSpec(f, grad=g, name="identity")


def payoff_square(coord=0):
    def grad(x):
        out = np.zeros_like(x)
        out[:, coord] = 2 * x[:, coord]
        return out
    return PayoffSpec(lambda x: x[:, coord] ** 2, grad=grad, name="square")


def payoff_sin(coord=0):
    def grad(x):
        out = np.zeros_like(x)
        out[:, coord] = np.cos(x[:, coord])
        return out
    return PayoffSpec(lambda x: np.sin(x[:, coord]), grad=grad, name="sin")


def payoff_positive_part(coord=0):
    def grad(x):
        out = np.zeros_like(x)
        out[:, coord] = (x[:, coord] > 0).astype(float)
        return out
    return PayoffSpec(lambda x: np.maximum(x[:, coord], 0.0), grad=grad, name="positive_part")


def payoff_indicator_above(z):
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return PayoffSpec(lambda x: np.all(x > z, axis=1).astype(float), name="indicator_above")


def payoff_polynomial(coefficients, coord=0):
    """sum_k c_k x^k in one coordinate; ``coefficients`` in increasing degree."""
    c = np.asarray(coefficients, dtype=float)
    dc = np.polynomial.polynomial.polyder(c) if c.size > 1 else np.zeros(1)

    def grad(x):
        out = np.zeros_like(x)
        out[:, coord] = np.polynomial.polynomial.polyval(x[:, coord], dc)
        return out
    return PayoffSpec(lambda x: np.polynomial.polynomial.polyval(x[:, coord], c), grad=grad, name="polynomial")


def payoff_centred_mean(coord=0):
    """g(x, mu) = x_c - mean_c(mu), with companion G = -(x_c - mean_c(mu)) in the x-slot."""
    def func(x, mu):
        return x[:, coord] - mu.mean()[coord]

    def grad(x, mu):
        out = np.zeros_like(x)
        out[:, coord] = 1.0
        return out

    def dmu(x, mu, v):
        out = np.zeros_like(x)
        out[:, coord] = -1.0
        return out

    def G(x, mu, v):
        return -(x[:, coord] - mu.mean()[coord])
    return PayoffSpec(func, True, grad, dmu, G, "ICx", "centred_mean")


def payoff_cos_interaction(coord=0):
    """g(x, mu) = mean over mu of cos(x_c - y_c), companion G(x, mu, v) = cos(x_c - v_c) in the v-slot."""
    def func(x, mu):
        return np.mean(np.cos(x[:, coord, None] - mu.points[None, :, coord]), axis=1)

    def grad(x, mu):
        out = np.zeros_like(x)
        out[:, coord] = -np.mean(np.sin(x[:, coord, None] - mu.points[None, :, coord]), axis=1)
        return out

    def dmu(x, mu, v):
        out = np.zeros_like(x)
        out[:, coord] = np.sin(x[:, coord] - v[:, coord])
        return out

    def G(x, mu, v):
        return np.cos(x[:, coord] - v[:, coord])
    return PayoffSpec(func, True, grad, dmu, G, "ICv", "cos_interaction")


def payoff_abs_mean():
    """g(mu) = |mean(mu)|, measure-only and not differentiable at mean zero."""
    return PayoffSpec(lambda x, mu: np.full(x.shape[0], abs(mu.mean()[0])), True, name="abs_mean")


PAYOFFS = {
    "identity": payoff_identity,
    "square": payoff_square,
    "sin": payoff_sin,
    "positive_part": payoff_positive_part,
    "indicator_above": payoff_indicator_above,
    "centred_mean": payoff_centred_mean,
    "polynomial": payoff_polynomial,
    "cos_interaction": payoff_cos_interaction,
}


def make_payoff(name, **params) -> PayoffSpec:
    if name not in PAYOFFS:
        raise ConfigError(f"unknown payoff {name!r}; choose from {sorted(PAYOFFS)}")
    try:
        return PAYOFFS[name](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for payoff {name!r}: {exc}") from None


# results


@dataclass
class EstimatorResult:
    """Monte Carlo estimate with its standard error.

    ``samples`` keeps the per-sample contributions whose mean is
    ``estimate``; non-finite contributions are dropped and counted in
    ``rejected``.
    """

    estimator: str
    estimate: float
    stderr: float
    n_samples: int
    seed: int
    t: float
    x: np.ndarray
    v: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    method: str = "weight"
    rejected: int = 0
    flagged: bool = False
    diagnostics: dict = field(default_factory=dict)
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    def row(self) -> dict:
        def fmt(a):
            if a is None:
                return ""
            return " ".join(repr(float(c)) for c in np.atleast_1d(a))
        return {
            "estimator": self.estimator, "t": repr(float(self.t)), "x": fmt(self.x), "v": fmt(self.v),
            "z": fmt(self.z), "value": repr(float(self.estimate)), "stderr": repr(float(self.stderr)),
            "n_samples": str(self.n_samples), "seed": str(self.seed), "method": self.method,
        }


def summarize(name, samples, *, seed, t, x, v=None, z=None, method="weight", diagnostics=None):
    """Build an :class:`EstimatorResult` from per-sample contributions."""
    s = np.asarray(samples, dtype=float)
    ok = np.isfinite(s)
    kept = s[ok]
    n = kept.size
    rejected = int(s.size - n)
    est = float(kept.mean()) if n else float("nan")
    se = float(kept.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EstimatorResult(name, est, se, n, int(seed), float(t), np.atleast_1d(np.asarray(x, dtype=float)),
                           None if v is None else np.atleast_1d(np.asarray(v, dtype=float)),
                           None if z is None else np.atleast_1d(np.asarray(z, dtype=float)),
                           method, rejected, rejected > 1e-3 * max(s.size, 1), dict(diagnostics or {}), s)


# sampling plan


class _Plan:
    """Shared law path, noise streams and chunking of one estimator call."""

    def __init__(self, model, x, t, *, initial=None, grid=None, n_steps=64, M=1000, n_samples=10_000,
                 seed=0, law=None, chunk=None, threads=1, order=0, fresh_law=False):
        self.model = model
        N = model.dim_state
        self.x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.x.shape != (N,):
            raise DimensionError(f"x must have {N} coordinates")
        if not (np.isfinite(t) and t > 0):
            raise ConfigError(f"t must be positive, got {t}")
        if grid is None:
            grid = law.grid if law is not None else TimeGrid(float(t), int(n_steps))
        self.grid = grid
        self.m = self.grid.index_of(t)
        if self.m < 1:
            raise ConfigError("t must be a positive grid node")
        self.t = self.m * self.grid.h
        if int(n_samples) < 2:
            raise ConfigError("at least two samples are required")
        self.n = int(n_samples)
        self.seed = int(seed)
        self.root = BrownianDriver(self.seed, dim=model.dim_noise)
        self._initial = np.broadcast_to(self.x, (int(M), N)) if initial is None else initial
        if law is None:
            law = simulate_particles(model, self._initial, int(M), self.grid, self.root.child("particles"))
        self.law = law
        self.fresh_law = bool(fresh_law)
        self.M = law.n_particles
        self.chunk = int(chunk) if chunk else chunk_size(model, self.m, order)
        self.threads = max(1, int(threads))
        self.cache = {}

    @property
    def mu_t(self) -> EmpiricalMeasure:
        return self.law.measure(self.m)

    def law_for(self, first):
        """The shared law, or with ``fresh_law`` an independent particle system per chunk."""
        if not self.fresh_law:
            return self.law
        drv = self.root.child(f"particles/{first // self.chunk}")
        return simulate_particles(self.model, self._initial, self.M, self.grid, drv)

    def shared_law_only(self):
        if self.fresh_law:
            raise ConfigError("Lions-tangent estimators need the shared law path; fresh_law is not supported")

    def increments(self, first, count, steps=None):
        steps = self.m if steps is None else steps
        return self.root.child("paths").increments(self.grid, first, count, dim=self.model.dim_noise)[:, :steps]

    def aux_increments(self, first, count):
        return self.root.child("aux-paths").increments(self.grid, first, count, dim=self.model.dim_noise)[:, :self.m]

    def particle_aux_increments(self):
        return self.root.child("aux-particles").increments(self.grid, 0, self.M, dim=self.model.dim_noise)[:, :self.m]

    def uniform_index(self, label, first, count, size):
        """Counter-based uniform integers in [0, size) per global carrier index."""
        z = self.root.child(label).normals(first, count, 1, 1)[:, 0, 0]
        return np.minimum((ndtr(z) * size).astype(int), size - 1)

    def chunks(self):
        return [(s, min(self.chunk, self.n - s)) for s in range(0, self.n, self.chunk)]

    def map(self, fn):
        parts = self.chunks()
        if self.threads == 1 or len(parts) == 1:
            return [fn(a, b) for a, b in parts]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(lambda p: fn(*p), parts))


def _concat(parts):
    return np.concatenate(parts, axis=0)


def _alpha(alpha, N):
    a = tuple(int(i) for i in np.atleast_1d(alpha)) if alpha is not None else ()
    if any(i < 0 or i >= N for i in a):
        raise DimensionError(f"multi-index {a} has entries outside 0..{N - 1}")
    return a


def _check_order(k):
    if k > 2:
        raise OrderExceededError(f"total integration-by-parts order {k} exceeds 2")


# plain expectation


def estimate_expectation(payoff, model, x, t, **kw) -> EstimatorResult:
    """Monte Carlo mean of f(X_t) over decoupled paths started at ``x``.

    Keyword arguments configure the sampling plan: ``initial`` (cloud or
    sampler; omitted means the point mass at ``x``), ``grid`` or
    ``n_steps``, ``M``, ``n_samples``, ``seed``, ``law``, ``chunk``,
    ``threads``.
    """
    payoff = as_payoff(payoff)
    plan = _Plan(model, x, t, **kw)

    def run(first, count):
        law = plan.law_for(first)
        b = simulate_decoupled(model, plan.x, law, n_paths=count, stop_step=plan.m,
                               increments=plan.increments(first, count))
        return payoff(b.states[:, -1], law.measure(plan.m))
    s = _concat(plan.map(run))
    return summarize("expectation", s, seed=plan.seed, t=plan.t, x=plan.x, method="direct")


# x-direction weights


def _weight_estimate(name, op, alpha, payoff, model, x, t, *, inner=ONE, **kw):
    payoff = as_payoff(payoff)
    N = model.dim_state
    alpha = _alpha(alpha, N)
    rec = make_recipe(op, alpha, inner)
    k = order_of(rec)
    _check_order(k)
    plan = _Plan(model, x, t, order=k, **kw)

    def run(first, count):
        law = plan.law_for(first)
        bld = WeightBuilder(model, law, plan.x, plan.increments(first, count))
        w = bld.evaluate(rec)
        X = bld.jet(0).X
        return payoff(X, law.measure(plan.m)) * w.value, w.diagnostics.get("max_condition", 1.0)
    parts = plan.map(run)
    s = _concat([p[0] for p in parts]) * plan.t ** (-k / 2)
    diag = {"max_condition": max(p[1] for p in parts), "order": k, "multi_index": alpha}
    return summarize(name, s, seed=plan.seed, t=plan.t, x=plan.x, diagnostics=diag)


def estimate_dx(alpha, payoff, model, x, t, **kw) -> EstimatorResult:
    """Derivative in the starting point: t^{-|alpha|/2} E[f(X_t) I3_alpha(1)].

    ``alpha`` is a 0-based multi-index of length at most 2.
    """
    return _weight_estimate("dx", "I3", alpha, payoff, model, x, t, **kw)


def estimate_derivative_of_payoff(beta, payoff, model, x, t, **kw) -> EstimatorResult:
    """E[(d^beta f)(X_t)] as t^{-|beta|/2} E[f(X_t) I2_beta(1)], without differentiating f."""
    return _weight_estimate("derivative_of_payoff", "I2", beta, payoff, model, x, t, **kw)


# Lions tangents for the measure direction


def _particle_tangents(plan, starts, weights):
    """Particle auxiliary paths and Lions tangents for per-particle starts/weights."""
    model = plan.model
    paux = simulate_aux(model, plan.law, starts, weights, plan.particle_aux_increments(), n_steps=plan.m)
    lam = particle_lions(model, plan.law, paux, n_steps=plan.m)
    return paux, lam


def _point_layout(plan, v_list, count):
    V, W = point_weights(v_list, plan.model.dim_state)
    return np.broadcast_to(V, (count,) + V.shape), np.broadcast_to(W, (count,) + W.shape), V


def _initial_layout(plan, label, first, count):
    """Per-carrier v drawn from the initial cloud with identity weights."""
    N = plan.model.dim_state
    idx = plan.uniform_index(label, first, count, plan.M)
    starts = plan.law.states[0][idx][:, None, :]
    W = np.broadcast_to(np.eye(N), (count, 1, N, N))
    return starts, W


def _layout(plan, v, role, first, count):
    if isinstance(v, str):
        if v != "initial":
            raise ConfigError(f"unknown v specification {v!r}")
        return _initial_layout(plan, f"v-{role}", first, count)
    starts, W, _ = _point_layout(plan, [v], count)
    return starts, W


def _lions_setup(plan, v):
    key = ("lions", v if isinstance(v, str) else tuple(np.atleast_1d(v)))
    if key not in plan.cache:
        starts, W = _layout(plan, v, "particles", 0, plan.M)
        plan.cache[key] = _particle_tangents(plan, starts, W)
    return plan.cache[key]


def _check_v(plan, v):
    if isinstance(v, str):
        return v
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (plan.model.dim_state,):
        raise DimensionError("v must be a point of the state space")
    return v


def estimate_dmu(beta, payoff, model, x, t, v, **kw) -> EstimatorResult:
    """Lions derivative t^{-1/2} E[f(X_t) calI3_beta(1)(v)] for |beta| = 1.

    ``v`` is a point, or ``"initial"`` to average the derivative over v
    drawn from the initial law (one draw per carrier).
    """
    payoff = as_payoff(payoff)
    N = model.dim_state
    beta = _alpha(beta, N)
    if len(beta) != 1:
        if len(beta) > 1:
            raise OrderExceededError("measure derivatives are limited to order 1")
        raise ConfigError("beta must have exactly one index")
    plan = _Plan(model, x, t, order=1, **kw)
    plan.shared_law_only()
    v = _check_v(plan, v)
    paux, lam = _lions_setup(plan, v)
    rec = ("calI3", beta[0], ONE, 0)

    def run(first, count):
        starts, W = _layout(plan, v, "paths", first, count)
        saux = simulate_aux(model, plan.law, starts, W, plan.aux_increments(first, count), n_steps=plan.m)
        bld = WeightBuilder(model, plan.law, plan.x, plan.increments(first, count),
                            forcing=LionsForcing(model, plan.law, saux, lam))
        w = bld.evaluate(rec)
        return payoff(bld.jet(0).X, plan.mu_t) * w.value
    s = _concat(plan.map(run)) / math.sqrt(plan.t)
    return summarize("dmu", s, seed=plan.seed, t=plan.t, x=plan.x, v=None if isinstance(v, str) else v)


def estimate_dx_fixed_point(alpha, payoff, model, x, t, **kw) -> EstimatorResult:
    """Total derivative of x -> E f(X_t^{x, delta_x}) as t^{-1/2} E[f J_alpha(1)].

    The particle system starts from the point mass at ``x``.
    """
    payoff = as_payoff(payoff)
    N = model.dim_state
    alpha = _alpha(alpha, N)
    _check_order(len(alpha))
    if len(alpha) != 1:
        if len(alpha) > 1:
            raise OrderExceededError("the fixed-point weight with a non-unit inner weight needs its "
                                     "measure derivative, which is not available")
        raise ConfigError("alpha must have exactly one index")
    kw.pop("initial", None)
    plan = _Plan(model, x, t, order=1, **kw)
    plan.shared_law_only()
    paux, lam = _lions_setup(plan, plan.x)
    rec = ("J", alpha[0], ONE)

    def run(first, count):
        starts, W, V = _point_layout(plan, [plan.x], count)
        saux = simulate_aux(model, plan.law, starts, W, plan.aux_increments(first, count), n_steps=plan.m)
        bld = WeightBuilder(model, plan.law, plan.x, plan.increments(first, count),
                            forcing=LionsForcing(model, plan.law, saux, lam), v_list=V)
        w = bld.evaluate(rec)
        return payoff(bld.jet(0).X, plan.mu_t) * w.value
    s = _concat(plan.map(run)) / math.sqrt(plan.t)
    return summarize("fixed_point_dx", s, seed=plan.seed, t=plan.t, x=plan.x)


# density


@dataclass
class DensityResult:
    """Density estimates on a grid of points z.

    ``values`` maps ``"p"``, ``"dp_dz"``, ``"dp_dx"`` to arrays over the
    grid, ``stderr`` holds matching standard errors. ``tail_fit`` is the
    regression of log p against |z - x|^2 / t over the tail region.
    """

    z: np.ndarray
    values: dict
    stderr: dict
    n_samples: int
    seed: int
    t: float
    x: np.ndarray
    tail_fit: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def p(self):
        return self.values["p"]


class _Moments:
    # running sums per grid point, merged chunk by chunk in a fixed order
    def __init__(self, K):
        self.s1 = np.zeros(K)
        self.s2 = np.zeros(K)
        self.n = 0

    def add(self, vals):
        self.s1 += vals.sum(axis=0)
        self.s2 += (vals ** 2).sum(axis=0)
        self.n += vals.shape[0]

    def mean_stderr(self):
        m = self.s1 / self.n
        var = np.maximum(self.s2 / self.n - m ** 2, 0.0) * self.n / (self.n - 1)
        return m, np.sqrt(var / self.n)


def tail_fit(z, p, se, x, t, spread):
    """Least-squares slope of log p against |z - x|^2 / t on the tail region.

    The tail region keeps points at least ``spread`` away from ``x`` whose
    estimate exceeds five standard errors.
    """
    z = np.asarray(z, dtype=float).reshape(len(p), -1)
    r2 = np.sum((z - x) ** 2, axis=1) / t
    dist = np.sqrt(np.sum((z - x) ** 2, axis=1))
    keep = (dist >= spread) & (p > 5 * se) & (p > 0)
    if keep.sum() < 3:
        return {"slope": float("nan"), "intercept": float("nan"), "r2": float("nan"), "n_points": int(keep.sum())}
    fit = stats.linregress(r2[keep], np.log(p[keep]))
    return {"slope": float(fit.slope), "intercept": float(fit.intercept), "r2": float(fit.rvalue ** 2),
            "n_points": int(keep.sum())}


def estimate_density(model, x, t, z_grid, derivatives=(), **kw) -> DensityResult:
    """Density of X_t^{x, delta_x} and optional derivatives on a grid.

    Uses p = t^{-N/2} E[(1_{X>z} - 1_{x>z}) I2_eta(1)] with eta = (1..N); the
    subtracted constant has zero weight expectation and removes most of the
    variance away from z = x. ``derivatives`` may contain ``"dz"`` and
    ``"dx"`` (N = 1 only), computed with I2_(1,1)(1) and I2_(1)(J_(1)(1)).
    """
    N = model.dim_state
    z = np.asarray(z_grid, dtype=float)
    if z.size == 0:
        raise DegenerateGridError("z_grid is empty")
    z = z.reshape(-1, N) if N > 1 or z.ndim > 1 else z.reshape(-1, 1)
    if z.shape[1] != N or not np.all(np.isfinite(z)):
        raise DegenerateGridError(f"z_grid must contain finite points of dimension {N}")
    derivatives = tuple(derivatives)
    for dname in derivatives:
        if dname not in ("dz", "dx"):
            raise ConfigError(f"unknown density derivative {dname!r}")
    if N + (1 if derivatives else 0) > 2:
        raise OrderExceededError(f"density derivatives in dimension {N} exceed order 2")
    eta = tuple(range(N))
    recipes = {"p": (make_recipe("I2", eta), N, 1.0)}
    if "dz" in derivatives:
        recipes["dp_dz"] = (make_recipe("I2", (0,) + eta), N + 1, -1.0)
    if "dx" in derivatives:
        recipes["dp_dx"] = (make_recipe("I2", eta, ("J", 0, ONE)), N + 1, 1.0)
    kw.pop("initial", None)
    plan = _Plan(model, x, t, order=max(order_of(r[0]) for r in recipes.values()), **kw)
    plan.shared_law_only()
    need_lions = "dp_dx" in recipes
    if need_lions:
        paux, lam = _lions_setup(plan, plan.x)
    base = np.all(plan.x > z, axis=1).astype(float)
    K = z.shape[0]
    acc = {k: _Moments(K) for k in recipes}
    spread = [0.0, 0.0, 0]

    def run(first, count):
        forcing = V = None
        if need_lions:
            starts, W, V = _point_layout(plan, [plan.x], count)
            saux = simulate_aux(model, plan.law, starts, W, plan.aux_increments(first, count), n_steps=plan.m)
            forcing = LionsForcing(model, plan.law, saux, lam)
        bld = WeightBuilder(model, plan.law, plan.x, plan.increments(first, count), forcing=forcing, v_list=V)
        # highest order first so the jet is propagated once
        ws = {k: bld.evaluate(rec).value for k, (rec, _, _) in sorted(recipes.items(), key=lambda kv: -kv[1][1])}
        X = bld.jet(0).X
        ind = np.all(X[:, None, :] > z[None, :, :], axis=2).astype(float) - base
        out = {}
        for k, (rec, order, sign) in recipes.items():
            out[k] = sign * plan.t ** (-order / 2) * ind * ws[k][:, None]
        return out, X
    for out, X in plan.map(run):
        for k, vals in out.items():
            acc[k].add(vals)
        spread[0] += X.sum(axis=0)
        spread[1] += (X ** 2).sum(axis=0)
        spread[2] += X.shape[0]
    values, errs = {}, {}
    for k in recipes:
        values[k], errs[k] = acc[k].mean_stderr()
    mean = spread[0] / spread[2]
    sd = float(np.sqrt(np.sum(np.maximum(spread[1] / spread[2] - mean ** 2, 0.0))))
    fit = tail_fit(z, values["p"], errs["p"], plan.x, plan.t, sd)
    zz = z[:, 0] if N == 1 else z
    return DensityResult(zz, values, errs, plan.n, plan.seed, plan.t, plan.x, fit, {"sample_std": sd})


# U and its derivatives


def _route_a_samples(plan, payoff, X, L, saux, lam):
    """Per-sample Lions derivative of U for a smooth payoff, shape (B, P).

    Sums the tangent term dg . L, the auxiliary term over the carrier's
    auxiliary paths, and the particle average of the Lions derivative of g
    against the particle tangents.
    """
    mu = plan.mu_t
    B = X.shape[0]
    out = np.einsum("bn,bnp->bp", payoff.gradient(X, mu), L)
    if not payoff.measure_dependent:
        return out
    m = plan.m
    Q = saux.states.shape[1]
    for q in range(Q):
        Y = saux.states[:, q, m]
        JW = saux.jacobians[:, q, m] @ saux.weights[:, q]
        out += np.einsum("bn,bnp->bp", payoff.lions(X, mu, Y), JW)
    P = lam.shape[-1]
    pts = mu.points
    lam_t = lam[m]
    acc = np.zeros((B, P))
    for j in range(plan.M):
        acc += np.einsum("bn,np->bp", payoff.lions(X, mu, np.broadcast_to(pts[j], X.shape)), lam_t[j])
    return out + acc / plan.M


def _dmu_route_a(plan, payoff, layout_fn, lam_key):
    """Route-A Lions derivative samples (n, P) for a given auxiliary layout."""
    model = plan.model
    if lam_key not in plan.cache:
        starts, W = layout_fn(0, plan.M, "particles")
        plan.cache[lam_key] = _particle_tangents(plan, starts, W)
    paux, lam = plan.cache[lam_key]

    def run(first, count):
        starts, W = layout_fn(first, count, "paths")
        saux = simulate_aux(model, plan.law, starts, W, plan.aux_increments(first, count), n_steps=plan.m)
        bld = WeightBuilder(model, plan.law, plan.x, plan.increments(first, count),
                            forcing=LionsForcing(model, plan.law, saux, lam))
        jet = bld.jet(0)
        return _route_a_samples(plan, payoff, jet.X, jet.L, saux, lam)
    return _concat(plan.map(run))


def _fd_layout(v, eps, N, count):
    """Starts v +- eps e_j with weights +-I/(2 eps); columns i + N j hold d_{v_j} of component i."""
    starts = np.empty((2 * N, N))
    W = np.zeros((2 * N, N, N * N))
    for j in range(N):
        for s, sign in enumerate((1.0, -1.0)):
            starts[2 * j + s] = v
            starts[2 * j + s, j] += sign * eps
            W[2 * j + s, :, j * N:(j + 1) * N] = sign * np.eye(N) / (2 * eps)
    return np.broadcast_to(starts, (count,) + starts.shape), np.broadcast_to(W, (count,) + W.shape)


def _require_route_b(payoff, model, need_bounded=False):
    if payoff.tag is None or payoff.companion is None:
        raise ClassMismatchError(f"payoff {payoff.name!r} carries no (IC) tag and companion function")
    if model.dim_state != 1:
        raise DimensionError("the weight route for the Lions derivative is implemented for N = 1")
    if payoff.tag == "ICv" and not model.bounded_coefficients:
        raise ClassMismatchError("the ICv weight route needs bounded coefficients")
    if need_bounded and payoff.tag != "ICv":
        raise ClassMismatchError("the second derivative in v by weights is only available for ICv payoffs")


def _dmu_route_b(plan, payoff, v, eps=None):
    """Weight-route Lions derivative samples (n,) at v; with ``eps`` the central
    difference in v of the weight terms plus the second-order companion term."""
    model = plan.model
    mu = plan.mu_t
    G = payoff.companion
    shifts = (0.0,) if eps is None else (eps, -eps)
    tangents = []
    for s in shifts:
        vv = v + s
        key = ("lions", (float(vv[0]),))
        if key not in plan.cache:
            starts, W, _ = _point_layout(plan, [vv], plan.M)
            plan.cache[key] = _particle_tangents(plan, starts, W)
        tangents.append((vv, plan.cache[key]))

    def particle_weights(vv, paux, lam):
        key = ("particle-calI1", float(vv[0]))
        if key not in plan.cache:
            bld = WeightBuilder(model, plan.law, plan.law.states[0], plan.law.increments[:, :plan.m],
                                forcing=LionsForcing(model, plan.law, paux, lam))
            plan.cache[key] = bld.evaluate(("calI1", 0, ONE, 0)).value
        return plan.cache[key]

    pts = mu.points

    def run(first, count):
        xi = plan.increments(first, count)
        aux_xi = plan.aux_increments(first, count)
        parts = []
        X = Xv = None
        for vv, (paux, lam) in tangents:
            starts, W, _ = _point_layout(plan, [vv], count)
            saux = simulate_aux(model, plan.law, starts, W, aux_xi, n_steps=plan.m)
            bld = WeightBuilder(model, plan.law, plan.x, xi, forcing=LionsForcing(model, plan.law, saux, lam))
            X = bld.jet(0).X
            cal = bld.evaluate(("calI1", 0, ONE, 0)).value
            if payoff.tag == "ICx":
                I2 = bld.evaluate(("I2", 0, ONE)).value
                Y = saux.states[:, 0, plan.m]
                JY = saux.jacobians[:, 0, plan.m, 0, 0]
                mid = G(X, mu, Y) * I2 * JY
                cross = np.zeros(count)
                for j in range(plan.M):
                    cross += G(X, mu, np.broadcast_to(pts[j], X.shape)) * lam[plan.m, j, 0, 0]
                third = cross / plan.M * I2
                parts.append((cal, mid, third))
            else:
                aux_bld = WeightBuilder(model, plan.law, np.broadcast_to(vv, (count, 1)), aux_xi)
                Xv = aux_bld.jet(0).X
                tI1 = aux_bld.evaluate(("I1", 0, ONE)).value
                pw = particle_weights(vv, paux, lam)
                cross = np.zeros(count)
                for j in range(plan.M):
                    cross += G(X, mu, np.broadcast_to(pts[j], X.shape)) * pw[j]
                parts.append((cal, tI1, cross / plan.M, aux_bld))
        gX = payoff(X, mu)
        if eps is None:
            cal, a, b = parts[0][:3]
            if payoff.tag == "ICx":
                return gX * cal + a + b
            Y = saux.states[:, 0, plan.m]
            return gX * cal + G(X, mu, Y) * a + b
        # central difference of the weight terms; companion evaluated at v
        dcal = (parts[0][0] - parts[1][0]) / (2 * eps)
        dI1 = (parts[0][1] - parts[1][1]) / (2 * eps)
        dcross = (parts[0][2] - parts[1][2]) / (2 * eps)
        starts, W, _ = _point_layout(plan, [v], count)
        saux = simulate_aux(model, plan.law, starts, W, aux_xi, n_steps=plan.m)
        Gv = G(X, mu, saux.states[:, 0, plan.m])
        aux_bld = WeightBuilder(model, plan.law, np.broadcast_to(v, (count, 1)), aux_xi)
        nested = aux_bld.evaluate(("I1", 0, ("I1", 0, ONE))).value
        return gX * dcal + Gv * dI1 + dcross + Gv * nested / math.sqrt(plan.t)
    return _concat(plan.map(run)) / math.sqrt(plan.t)


def estimate_U_and_derivatives(payoff, model, x, t, *, v_list=(), route="auto", derivatives=None,
                               fd_eps=1e-3, **kw):
    """U = E g(X_t, [X_t]) and its derivatives in x, in the measure and in v.

    Parameters
    ----------
    payoff : PayoffSpec
    v_list : sequence of points
        Points v for the measure derivatives.
    route : {"auto", "A", "B"}
        "A" differentiates a smooth payoff along the tangent processes;
        "B" uses weights and the companion function of a tagged payoff
        (N = 1). "auto" picks A when the payoff is smooth.
    derivatives : iterable of {"U", "dx", "dxx", "dmu", "dvdmu"}, optional
    fd_eps : float
        Step of the central difference in v used by the v-derivative.

    Returns
    -------
    dict
        Keys ``("U",)``, ``("dx", i)``, ``("dxx", i, j)``,
        ``("dmu", q, i)`` and ``("dvdmu", q, i, j)`` with ``q`` indexing
        ``v_list``.
    """
    payoff = as_payoff(payoff)
    N = model.dim_state
    derivatives = ("U", "dx", "dxx", "dmu", "dvdmu") if derivatives is None else tuple(derivatives)
    if route == "auto":
        route = "A" if payoff.smooth else "B"
    if route not in ("A", "B"):
        raise ConfigError(f"unknown route {route!r}")
    V = [np.atleast_1d(np.asarray(v, dtype=float)) for v in v_list]
    if route == "B" and any(k in derivatives for k in ("dmu", "dvdmu")):
        _require_route_b(payoff, model, need_bounded="dvdmu" in derivatives)
    if route == "A" and not payoff.smooth and any(k in derivatives for k in ("dmu", "dvdmu")):
        raise ClassMismatchError(f"payoff {payoff.name!r} is not smooth; the tangent route does not apply")
    order = 2 if "dxx" in derivatives else 1
    plan = _Plan(model, x, t, order=order, **kw)
    plan.shared_law_only()
    res = {}
    common = dict(seed=plan.seed, t=plan.t, x=plan.x)
    mu = plan.mu_t
    xrecs = {}
    if "dx" in derivatives:
        for i in range(N):
            xrecs[("dx", i)] = (make_recipe("I1", (i,)), 1)
    if "dxx" in derivatives:
        for i in range(N):
            for j in range(N):
                xrecs[("dxx", i, j)] = (make_recipe("I1", (i, j)), 2)

    def run(first, count):
        bld = WeightBuilder(model, plan.law, plan.x, plan.increments(first, count))
        gX = payoff(bld.jet(0).X, mu)
        out = {("U",): gX}
        for key, (rec, k) in xrecs.items():
            out[key] = gX * bld.evaluate(rec).value * plan.t ** (-k / 2)
        return out
    parts = plan.map(run)
    for key in parts[0]:
        if key == ("U",) and "U" not in derivatives:
            continue
        s = _concat([p[key] for p in parts])
        res[key] = summarize("U" if key == ("U",) else key[0], s, method="direct" if key == ("U",) else "weight",
                             **common)
    for q, v in enumerate(V):
        if v.shape != (N,):
            raise DimensionError("each v must be a point of the state space")
        if "dmu" in derivatives:
            if route == "A":
                S = _dmu_route_a(plan, payoff, lambda f, c, role, v=v: _point_layout(plan, [v], c)[:2],
                                 ("lions", tuple(v)))
                for i in range(N):
                    res[("dmu", q, i)] = summarize("dmu", S[:, i], v=v, method="tangent", **common)
            else:
                S = _dmu_route_b(plan, payoff, v)
                res[("dmu", q, 0)] = summarize("dmu", S, v=v, method="weight", **common)
        if "dvdmu" in derivatives:
            if route == "A":
                S = _dmu_route_a(plan, payoff, lambda f, c, role, v=v: _fd_layout(v, fd_eps, N, c),
                                 ("lions-dv", tuple(v), fd_eps))
                for i in range(N):
                    for j in range(N):
                        res[("dvdmu", q, i, j)] = summarize("dvdmu", S[:, i + N * j], v=v,
                                                            method="tangent-fd", **common)
            else:
                S = _dmu_route_b(plan, payoff, v, eps=fd_eps)
                res[("dvdmu", q, 0, 0)] = summarize("dvdmu", S, v=v, method="weight-fd", **common)
    return res


# PDE residual


def _generator_layout(plan, first, count, role, eps):
    """Per-carrier v from the initial cloud with weights realizing the measure part of the generator.

    Start v carries V_0(v); starts v +- eps e_j carry +-sigma sigma^T(v)[:, j] / (4 eps),
    so the Lions tangent sums V_0 . d_mu and half the trace against d_v d_mu.
    """
    model = plan.model
    N = model.dim_state
    mu0 = plan.law.measure(0)
    idx = plan.uniform_index(f"v-{role}", first, count, plan.M)
    v = plan.law.states[0][idx]
    F = model.fields(v, mu0)
    sig = np.swapaxes(F[:, 1:], 1, 2)
    S = sig @ np.swapaxes(sig, 1, 2)
    starts = np.empty((count, 1 + 2 * N, N))
    W = np.empty((count, 1 + 2 * N, N, 1))
    starts[:, 0] = v
    W[:, 0, :, 0] = F[:, 0]
    for j in range(N):
        for s, sign in enumerate((1.0, -1.0)):
            q = 1 + 2 * j + s
            starts[:, q] = v
            starts[:, q, j] += sign * eps
            W[:, q, :, 0] = sign * S[:, :, j] / (4 * eps)
    return starts, W


@dataclass
class PDEResidual:
    """Decomposition of (d_t - L) U at one point."""

    residual: EstimatorResult
    dt: EstimatorResult
    x_terms: EstimatorResult
    mu_terms: EstimatorResult
    h_t: float


def pde_residual(payoff, model, x, t, *, h_t=None, n_steps=64, fd_eps=1e-3, **kw) -> PDEResidual:
    """Residual of the backward equation for U(t, x, [theta]) = E g(X_t^{x,[theta]}, [X_t^theta]).

    The time derivative is a central difference over grid nodes t +- h_t on
    the same paths; the x-terms use the first- and second-order weights;
    the measure terms average the Lions derivative and its v-derivative over
    v drawn from the initial law with generator weights. All three pieces are
    evaluated on the same samples, so the standard error of the residual
    accounts for their correlation.

    ``n_steps`` counts steps up to ``t``; the grid is extended by the
    time-difference offset.
    """
    payoff = as_payoff(payoff)
    if not payoff.smooth:
        raise ClassMismatchError("the PDE residual needs a smooth payoff with its derivatives")
    N = model.dim_state
    h = t / int(n_steps)
    h_t = math.sqrt(h) if h_t is None else float(h_t)
    k_t = max(1, int(round(h_t / h)))
    if k_t >= n_steps:
        raise ConfigError("h_t must be smaller than t")
    grid = TimeGrid(h * (n_steps + k_t), int(n_steps) + k_t, h)
    kw.pop("grid", None)
    plan = _Plan(model, x, grid.times[n_steps], grid=grid, order=2, **kw)
    plan.shared_law_only()
    m = plan.m
    mu0 = plan.law.measure(0)
    F0 = model.fields(plan.x[None, :], mu0)[0]
    sig0 = F0[1:].T
    S0 = sig0 @ sig0.T

    lam_key = ("generator", fd_eps)
    starts, W = _generator_layout(plan, 0, plan.M, "particles", fd_eps)
    plan.cache[lam_key] = _particle_tangents(plan, starts, W)
    paux, lam = plan.cache[lam_key]

    def run(first, count):
        xi = plan.increments(first, count, steps=m + k_t)
        bld = WeightBuilder(model, plan.law, plan.x, xi[:, :m])
        path = simulate_decoupled(model, plan.x, plan.law, n_paths=count, increments=xi)
        gm = payoff(path.states[:, m - k_t], plan.law.measure(m - k_t))
        gp = payoff(path.states[:, m + k_t], plan.law.measure(m + k_t))
        dt = (gp - gm) / (2 * k_t * plan.grid.h)
        gX = payoff(path.states[:, m], plan.mu_t)
        xt = np.zeros(count)
        for i in range(N):
            xt += F0[0, i] * gX * bld.evaluate(make_recipe("I1", (i,))).value / math.sqrt(plan.t)
            for j in range(N):
                if S0[i, j] != 0.0:
                    xt += 0.5 * S0[i, j] * gX * bld.evaluate(make_recipe("I1", (i, j))).value / plan.t
        s_starts, s_W = _generator_layout(plan, first, count, "paths", fd_eps)
        saux = simulate_aux(model, plan.law, s_starts, s_W, plan.aux_increments(first, count), n_steps=m)
        jbld = WeightBuilder(model, plan.law, plan.x, xi[:, :m], forcing=LionsForcing(model, plan.law, saux, lam))
        jet = jbld.jet(0)
        mt = _route_a_samples(plan, payoff, jet.X, jet.L, saux, lam)[:, 0]
        return dt, xt, mt
    parts = plan.map(run)
    dt, xt, mt = (_concat([p[k] for p in parts]) for k in range(3))
    common = dict(seed=plan.seed, t=plan.t, x=plan.x)
    return PDEResidual(
        summarize("pde_residual", dt - xt - mt, method="weight", **common),
        summarize("dt_U", dt, method="finite-difference", **common),
        summarize("x_terms", xt, method="weight", **common),
        summarize("mu_terms", mt, method="tangent", **common),
        k_t * plan.grid.h,
    )


# finite-difference cross-checks


def _fd_samples(kind, payoff, model, x, t, bump, coord, kw, crn):
    """Per-sample central-difference quotients (or independent +- runs without CRN)."""
    N = model.dim_state
    e = np.zeros(N)
    e[coord] = 1.0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    seed = int(kw.get("seed", 0))

    def value(sign):
        kk = dict(kw)
        if not crn and sign < 0:
            kk["seed"] = seed + 1
        if kind == "dx":
            if kk.get("initial") is None:
                kk["initial"] = np.broadcast_to(x, (int(kk.get("M", 1000)), N))
            return estimate_expectation(payoff, model, x + sign * bump * e, t, **kk)
        if kind == "fixed_point_dx":
            kk.pop("initial", None)
            return estimate_expectation(payoff, model, x + sign * bump * e, t, **kk)
        if kind == "dmu":
            init = kk.pop("initial")
            M = int(kk.get("M", 1000))
            base = _initial_cloud_points(init, M, N, seed, model)
            return estimate_expectation(payoff, model, x, t, initial=base + sign * bump * e, **kk)
        raise ConfigError(f"unknown comparison target {kind!r}")
    up, dn = value(1.0), value(-1.0)
    if crn:
        return (up.samples - dn.samples) / (2 * bump), None
    est = (up.estimate - dn.estimate) / (2 * bump)
    se = math.hypot(up.stderr, dn.stderr) / (2 * bump)
    return None, (est, se, up.n_samples)


def _initial_cloud_points(initial, M, N, seed, model):
    root = BrownianDriver(seed, dim=model.dim_noise)
    if callable(initial):
        pts = np.asarray(initial(root.child("particles").rng("initial"), M), dtype=float)
    else:
        pts = np.asarray(initial, dtype=float)
    return pts.reshape(M, N)


def compare_fd(kind, payoff, model, x, t, bumps, *, coord=0, common_random_numbers=True, **kw):
    """Weight estimator against central finite differences of the plain expectation.

    ``kind`` is ``"dx"`` (starting point), ``"dmu"`` (shift of every initial
    particle, compared with the Lions derivative averaged over the initial
    law) or ``"fixed_point_dx"`` (starting point and point-mass law moved
    together). Returns the weight result and one row per bump with the
    difference in units of the combined standard error.
    """
    bumps = [float(b) for b in bumps]
    if not bumps:
        raise ConfigError("at least one bump size is required")
    if any(not (b > 0) for b in bumps):
        raise ConfigError("bump sizes must be positive")
    if kind == "dx":
        weight = estimate_dx((coord,), payoff, model, x, t, **kw)
    elif kind == "dmu":
        if kw.get("initial") is None:
            raise ConfigError("the measure comparison needs an initial law")
        weight = estimate_dmu((coord,), payoff, model, x, t, "initial", **kw)
    elif kind == "fixed_point_dx":
        weight = estimate_dx_fixed_point((coord,), payoff, model, x, t,
                                         **{k: v for k, v in kw.items() if k != "initial"})
    else:
        raise ConfigError(f"unknown comparison target {kind!r}")
    rows = []
    for b in bumps:
        s, indep = _fd_samples(kind, payoff, model, x, t, b, coord, kw, common_random_numbers)
        if s is not None:
            fd = summarize(f"fd_{kind}", s, seed=weight.seed, t=t, x=x, method="finite-difference")
            est, se = fd.estimate, fd.stderr
        else:
            est, se, _ = indep
        comb = math.hypot(se, weight.stderr)
        rows.append({"bump": b, "fd": est, "fd_stderr": se, "weight": weight.estimate,
                     "weight_stderr": weight.stderr, "z_score": (weight.estimate - est) / comb if comb else 0.0})
    return weight, rows


# non-differentiability probe


def nondifferentiability_probe(g, model, initial, t, bumps, *, M=2000, n_steps=16, seeds=range(8), gamma=1.0):
    """Finite-difference quotients of theta -> g([X_t^theta]) under theta -> theta + h gamma.

    The initial cloud is centred so that its empirical mean is exactly
    zero, and the bumped and unbumped particle systems share their noise.
    Returns rows ``(h, mean quotient, stderr over seeds)``.
    """
    N = model.dim_state
    grid = TimeGrid(float(t), int(n_steps))
    rows = []
    for h in bumps:
        q = []
        for s in seeds:
            drv = BrownianDriver(int(s), dim=model.dim_noise).child("particles")
            base = _initial_cloud_points(initial, int(M), N, int(s), model)
            base = base - base.mean(axis=0)
            inc = drv.increments(grid, 0, int(M), dim=model.dim_noise)
            lo = simulate_particles(model, base, M, grid, drv, increments=inc)
            hi = simulate_particles(model, base + h * np.asarray(gamma, dtype=float), M, grid, drv, increments=inc)
            x0 = lo.states[-1][:1]
            q.append((float(g(x0, hi.measure(grid.n_steps))[0]) - float(g(x0, lo.measure(grid.n_steps))[0])) / h)
        q = np.asarray(q)
        rows.append({"h": float(h), "quotient": float(q.mean()),
                     "stderr": float(q.std(ddof=1) / math.sqrt(q.size)) if q.size > 1 else 0.0})
    return rows


# estimator-object interface


class SensitivityEstimator(BaseEstimator):
    """Estimator object around the functional API.

    ``fit`` simulates the particle system from an initial cloud (rows are
    particles), ``predict`` evaluates the chosen target at each row of
    starting points and keeps the full results in ``results_``.

    Parameters
    ----------
    model : CoefficientModel
    payoff : PayoffSpec or str
        Registry name or payoff object.
    target : {"expectation", "dx", "derivative_of_payoff", "dmu", "fixed_point_dx"}
    t : float
    n_steps, n_samples : int
    alpha : tuple of int
        Multi-index for derivative targets.
    v : array_like or "initial"
        Measure argument for ``"dmu"``.
    seed, threads : int
    """

    _targets = ("expectation", "dx", "derivative_of_payoff", "dmu", "fixed_point_dx")

    def __init__(self, model=None, payoff="identity", target="expectation", t=1.0, n_steps=64,
                 n_samples=10_000, alpha=(0,), v="initial", seed=0, threads=1):
        self.model = model
        self.payoff = payoff
        self.target = target
        self.t = t
        self.n_steps = n_steps
        self.n_samples = n_samples
        self.alpha = alpha
        self.v = v
        self.seed = seed
        self.threads = threads

    def _payoff(self):
        return make_payoff(self.payoff) if isinstance(self.payoff, str) else as_payoff(self.payoff)

    def fit(self, X, y=None):
        if self.model is None:
            raise ConfigError("a coefficient model is required")
        if self.target not in self._targets:
            raise ConfigError(f"unknown target {self.target!r}")
        X = np.asarray(X, dtype=float)
        X = X[:, None] if X.ndim == 1 else X
        grid = TimeGrid(float(self.t), int(self.n_steps))
        root = BrownianDriver(int(self.seed), dim=self.model.dim_noise)
        self.law_ = simulate_particles(self.model, X, X.shape[0], grid, root.child("particles"))
        return self

    def predict(self, X):
        if not hasattr(self, "law_"):
            raise ConfigError("call fit before predict")
        X = np.asarray(X, dtype=float)
        X = X[:, None] if X.ndim == 1 else X
        g = self._payoff()
        kw = dict(n_samples=self.n_samples, seed=self.seed, threads=self.threads)
        out = []
        for x in X:
            if self.target == "expectation":
                r = estimate_expectation(g, self.model, x, self.t, law=self.law_, **kw)
            elif self.target == "dx":
                r = estimate_dx(self.alpha, g, self.model, x, self.t, law=self.law_, **kw)
            elif self.target == "derivative_of_payoff":
                r = estimate_derivative_of_payoff(self.alpha, g, self.model, x, self.t, law=self.law_, **kw)
            elif self.target == "dmu":
                r = estimate_dmu(self.alpha, g, self.model, x, self.t, self.v, law=self.law_, **kw)
            else:
                # the law is the point mass at each x, so the fitted cloud only sets M
                r = estimate_dx_fixed_point(self.alpha, g, self.model, x, self.t, n_steps=self.n_steps,
                                            M=self.law_.n_particles, **kw)
            out.append(r)
        self.results_ = out
        return np.array([r.estimate for r in out])
