"""First-variation, Lions-derivative and Malliavin-derivative processes.

All recursions are the exact derivatives of the Euler map used by
:mod:`mvflow.simulator`, so discrete identities (duality, transfer of the
Malliavin field onto the Jacobian) hold at the discrete level.

Array conventions (batch axis first):

* Jacobian paths ``J`` have shape (B, n+1, N, N).
* Lions tangents carry a trailing column axis P: (..., N, P). For a single
  point v, P = N; several points or weighted averages over v stack columns.
* Malliavin fields put the increment index j and the noise component l in
  axes ``(B, j, ..., l)``, e.g. ``DX`` is (B, m, N, d).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, MissingAuxiliaryPathError, SingularJacobianError
from .simulator import PathBundle, _check_finite, euler_move

COND_LIMIT = 1e12


def _dB(h, xi):
    B = xi.shape[0]
    out = np.empty((B, xi.shape[1] + 1))
    out[:, 0] = h
    out[:, 1:] = xi
    return out


def _step_matrix(G, dB):
    """I + sum_i G_i dB^i for stacked Jacobians G (B, d+1, N, N)."""
    N = G.shape[-1]
    return np.eye(N) + np.einsum("bi,biac->bac", dB, G)


def propagate_jacobian(bundle: PathBundle, model, law_paths):
    """Jacobian path J_{k+1} = (I + sum_i dV_i(X_k, mu_k) dB^i_k) J_k with J_0 = I.

    The result is stored on ``bundle.jacobians`` and returned.
    """
    B, n1, N = bundle.states.shape
    h = bundle.grid.h
    J = np.empty((B, n1, N, N))
    J[:, 0] = np.eye(N)
    for j in range(n1 - 1):
        G = model.jacobians(bundle.states[:, j], law_paths.measure(j))
        J[:, j + 1] = _step_matrix(G, _dB(h, bundle.increments[:, j])) @ J[:, j]
    bundle.jacobians = J
    return J


def invert_jacobian(J):
    """Numeric inverse of a Jacobian or a batch of Jacobians.

    Returns
    -------
    inverse : ndarray
    cond : float or ndarray
        2-norm condition numbers.

    Raises
    ------
    SingularJacobianError
        If a condition number exceeds 1e12.
    """
    J = np.asarray(J, dtype=float)
    cond = np.linalg.cond(J)
    if np.any(~np.isfinite(cond)) or np.any(cond > COND_LIMIT):
        worst = float(np.max(np.where(np.isfinite(cond), cond, np.inf)))
        raise SingularJacobianError(f"Jacobian condition number {worst:.3g} exceeds {COND_LIMIT:.0e}")
    return np.linalg.inv(J), cond


def propagate_inverse_jacobian(bundle: PathBundle, model, law_paths):
    """Inverse Jacobian by its own linear SDE, discretized with Euler steps.

    In Ito form the inverse satisfies
    d(J^-1) = -J^-1 sum_{i>=1} dV_i dB^i - J^-1 (dV_0 - sum_{i>=1} dV_i dV_i) dt,
    which only involves first derivatives. Agrees with numeric inversion of
    the Euler Jacobian up to O(h).
    """
    B, n1, N = bundle.states.shape
    h = bundle.grid.h
    K = np.empty((B, n1, N, N))
    K[:, 0] = np.eye(N)
    for j in range(n1 - 1):
        G = model.jacobians(bundle.states[:, j], law_paths.measure(j))
        drift = G[:, 0] - np.einsum("biac,bice->bae", G[:, 1:], G[:, 1:])
        step = np.einsum("bi,biac->bac", bundle.increments[:, j], G[:, 1:]) + drift * h
        K[:, j + 1] = K[:, j] - K[:, j] @ step
    return K


def propagate_malliavin_field(bundle: PathBundle, model, law_paths, r_nodes=None):
    """Discrete Malliavin derivative D[r][k] of the state w.r.t. the increment at node r.

    Seed D[r][r+1] = sigma(X_r, mu_r); then D[r][k+1] = (I + sum_i dV_i dB^i_k) D[r][k].
    Returns an array (B, R, n+1, N, d), zero for k <= r, also stored on
    the bundle together with ``r_nodes``.
    """
    B, n1, N = bundle.states.shape
    d = model.dim_noise
    h = bundle.grid.h
    r_nodes = np.arange(n1 - 1) if r_nodes is None else np.asarray(r_nodes, dtype=int)
    R = r_nodes.size
    D = np.zeros((B, R, n1, N, d))
    for k in range(n1 - 1):
        mu = law_paths.measure(k)
        X = bundle.states[:, k]
        G = model.jacobians(X, mu)
        A = _step_matrix(G, _dB(h, bundle.increments[:, k]))
        D[:, :, k + 1] = np.einsum("bac,brcl->bral", A, D[:, :, k])
        hit = np.nonzero(r_nodes == k)[0]
        if hit.size:
            sig = np.swapaxes(model.fields(X, mu)[:, 1:], 1, 2)
            D[:, hit, k + 1] = sig[:, None]
    bundle.malliavin = D
    bundle.r_nodes = r_nodes
    return D


def gram_inverse(sig):
    """(sigma sigma^T)^{-1} for a batch of (N, d) matrices; degenerate diffusion raises."""
    S = sig @ np.swapaxes(sig, 1, 2)
    try:
        Sinv = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        Sinv = np.full_like(S, np.inf)
    # infinity-norm condition estimate, cheaper than an SVD per step; 0 * inf flags as nan
    with np.errstate(invalid="ignore"):
        cond = np.abs(S).sum(axis=2).max(axis=1) * np.abs(Sinv).sum(axis=2).max(axis=1)
    if not np.all(np.isfinite(cond) & (cond <= COND_LIMIT)):
        raise SingularJacobianError("sigma sigma^T is singular; the weights need a non-degenerate diffusion")
    return Sinv


def pseudo_inverse_sigma(sig):
    """sigma^T (sigma sigma^T)^{-1} for a batch of (N, d) matrices."""
    return np.swapaxes(sig, 1, 2) @ gram_inverse(sig)


def transfer_residual(bundle: PathBundle, model, law_paths, mode="averaged", r=None):
    """Per-sample residual of the identity J_t = D_r X_t sigma^+(X_r) J_r.

    ``mode="node"`` evaluates the identity at the single node ``r``.
    ``mode="averaged"`` uses the time average over all nodes r < m,
    J_m - (1/m) sum_r D[r][m] sigma^+_r J_r, which is the form that enters the
    integration-by-parts weights. Returns Frobenius norms, shape (B,).
    """
    B, n1, N = bundle.states.shape
    m = n1 - 1
    J = bundle.jacobians if bundle.jacobians is not None else propagate_jacobian(bundle, model, law_paths)
    if mode == "node":
        if r is None or not 0 <= r < m:
            raise ConfigError("mode='node' needs a node index 0 <= r < n_steps")
        D = propagate_malliavin_field(bundle, model, law_paths, [r])[:, 0, m]
        sp = pseudo_inverse_sigma(np.swapaxes(model.fields(bundle.states[:, r], law_paths.measure(r))[:, 1:], 1, 2))
        approx = D @ sp @ J[:, r]
    elif mode == "averaged":
        D = propagate_malliavin_field(bundle, model, law_paths)[:, :, m]
        approx = np.zeros((B, N, N))
        for k in range(m):
            sig = np.swapaxes(model.fields(bundle.states[:, k], law_paths.measure(k))[:, 1:], 1, 2)
            approx += D[:, k] @ pseudo_inverse_sigma(sig) @ J[:, k]
        approx /= m
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return np.linalg.norm((J[:, m] - approx).reshape(B, -1), axis=1)


# Lions tangents


@dataclass
class AuxPaths:
    """Auxiliary decoupled paths attached to carriers.

    Carrier ``c`` owns Q paths started at ``starts[c, q]`` that share one
    noise sample, each weighted by the (N, P) matrix ``weights[c, q]`` in the
    Lions forcing. ``states`` is (C, Q, n+1, N), ``jacobians`` (C, Q, n+1, N, N).
    """

    starts: np.ndarray
    weights: np.ndarray
    states: np.ndarray
    jacobians: np.ndarray


def simulate_aux(model, law_paths, starts, weights, increments, n_steps=None):
    """Simulate auxiliary paths with their Jacobians.

    ``starts`` (C, Q, N); ``weights`` (C, Q, N, P); ``increments`` (C, n, d)
    shared by the Q paths of a carrier.
    """
    starts = np.asarray(starts, dtype=float)
    C, Q, N = starts.shape
    n = law_paths.grid.n_steps if n_steps is None else int(n_steps)
    h = law_paths.grid.h
    X = starts.reshape(C * Q, N).copy()
    xi = np.repeat(np.asarray(increments, dtype=float)[:, :n], Q, axis=0)
    S = np.empty((C * Q, n + 1, N))
    Jp = np.empty((C * Q, n + 1, N, N))
    S[:, 0] = X
    Jp[:, 0] = np.eye(N)
    for k in range(n):
        mu = law_paths.measure(k)
        F = model.fields(S[:, k], mu)
        G = model.jacobians(S[:, k], mu)
        dB = _dB(h, xi[:, k])
        S[:, k + 1] = S[:, k] + euler_move(F, h, xi[:, k])
        Jp[:, k + 1] = _step_matrix(G, dB) @ Jp[:, k]
        _check_finite(S[:, k + 1], k + 1)
    w = np.broadcast_to(np.asarray(weights, dtype=float), (C, Q) + np.shape(weights)[-2:])
    return AuxPaths(starts, np.array(w), S.reshape(C, Q, n + 1, N), Jp.reshape(C, Q, n + 1, N, N))


class LionsForcing:
    """Inhomogeneous term of the Lions tangent equation for a set of carriers.

    For a carrier at state x in step k the forcing of noise channel i is

        sum_q d_mu V_i(x, mu_k, Y^q_k) J^{Y,q}_k W^q
        + (1/M) sum_m d_mu V_i(x, mu_k, X^m_k) Lambda^m_k,

    where Y^q are the carrier's auxiliary paths with weights W^q and
    Lambda^m the Lions tangents of the particles (same column layout).
    """

    def __init__(self, model, law_paths, aux: AuxPaths, particle_tangents=None):
        self.model = model
        self.law = law_paths
        self.aux = aux
        self.lam = particle_tangents

    def _aux_terms(self, k, rows):
        a = self.aux
        Y = a.states[rows, :, k]
        JW = np.einsum("cqab,cqbp->cqap", a.jacobians[rows, :, k], a.weights[rows])
        return Y, JW

    def at(self, k, X, rows=slice(None)):
        mu = self.law.measure(k)
        Y, JW = self._aux_terms(k, rows)
        out = 0.0
        for q in range(Y.shape[1]):
            out = out + self.model.lions_paired(X, mu, Y[:, q], JW[:, q])
        if self.lam is not None:
            out = out + self.model.lions_average(X, mu, self.lam[k])
        return out

    def dx(self, k, X, rows=slice(None)):
        mu = self.law.measure(k)
        Y, JW = self._aux_terms(k, rows)
        out = 0.0
        for q in range(Y.shape[1]):
            out = out + self.model.lions_paired_dx(X, mu, Y[:, q], JW[:, q])
        if self.lam is not None:
            out = out + self.model.lions_average_dx(X, mu, self.lam[k])
        return out

    def subset(self, rows):
        """Forcing restricted to a contiguous block of carriers."""
        a = self.aux
        sub = AuxPaths(a.starts[rows], a.weights[rows], a.states[rows], a.jacobians[rows])
        return LionsForcing(self.model, self.law, sub, self.lam)


def particle_lions(model, law_paths, aux: AuxPaths, n_steps=None):
    """Lions tangents of all particles, Lambda (n+1, M, N, P), Lambda_0 = 0.

    Each particle is a carrier; the cross term averages over the current
    tangents of all particles in a fixed order. ``n_steps`` stops the
    recursion early.
    """
    S = law_paths.states
    n = law_paths.grid.n_steps if n_steps is None else int(n_steps)
    M, N = S.shape[1], S.shape[2]
    P = aux.weights.shape[-1]
    if aux.states.shape[0] != M:
        raise MissingAuxiliaryPathError("one auxiliary path set per particle is required")
    h = law_paths.grid.h
    lam = np.zeros((n + 1, M, N, P))
    forcing = LionsForcing(model, law_paths, aux, None)
    for k in range(n):
        mu = law_paths.measure(k)
        X = S[k]
        G = model.jacobians(X, mu)
        Phi = forcing.at(k, X) + model.lions_average(X, mu, lam[k])
        dB = _dB(h, law_paths.increments[:, k])
        lam[k + 1] = lam[k] + np.einsum("bi,biac,bcp->bap", dB, G, lam[k]) + np.einsum("bi,biap->bap", dB, Phi)
    return lam


def decoupled_lions(bundle: PathBundle, model, law_paths, forcing: LionsForcing):
    """Lions tangent path of decoupled carriers, shape (B, n+1, N, P)."""
    B, n1, N = bundle.states.shape
    P = forcing.aux.weights.shape[-1]
    h = bundle.grid.h
    L = np.zeros((B, n1, N, P))
    for k in range(n1 - 1):
        X = bundle.states[:, k]
        G = model.jacobians(X, law_paths.measure(k))
        Phi = forcing.at(k, X)
        dB = _dB(h, bundle.increments[:, k])
        L[:, k + 1] = L[:, k] + np.einsum("bi,biac,bcp->bap", dB, G, L[:, k]) + np.einsum("bi,biap->bap", dB, Phi)
    return L


def point_weights(v_list, N):
    """Start points (Q, N) and block-selector weights (Q, N, Q*N) for plain Lions tangents."""
    V = np.atleast_2d(np.asarray(v_list, dtype=float))
    Q = V.shape[0]
    W = np.zeros((Q, N, Q * N))
    for q in range(Q):
        W[q, :, q * N:(q + 1) * N] = np.eye(N)
    return V, W


@dataclass
class LionsTangentSystem:
    """Lions tangents at a list of points v.

    ``particles`` holds Lambda (n+1, M, N, N*V) with columns grouped by v;
    ``decoupled`` the tangents of a decoupled bundle when requested. The
    auxiliary paths of particles and samples are kept for reuse.
    """

    v_list: np.ndarray
    particles: np.ndarray
    particle_aux: AuxPaths
    decoupled: Optional[np.ndarray] = None
    sample_aux: Optional[AuxPaths] = None
    jacobians: dict = field(default_factory=dict)

    def at(self, v_index, which="particles"):
        N = self.v_list.shape[1]
        arr = self.particles if which == "particles" else self.decoupled
        if arr is None:
            raise MissingAuxiliaryPathError(f"no {which} tangents were propagated")
        return arr[..., v_index * N:(v_index + 1) * N]

    def index_of(self, v):
        v = np.atleast_1d(np.asarray(v, dtype=float))
        hits = np.nonzero(np.all(np.isclose(self.v_list, v), axis=1))[0]
        if hits.size == 0:
            raise MissingAuxiliaryPathError(f"no auxiliary path was simulated at v={v.tolist()}")
        return int(hits[0])


def propagate_lions(model, law_paths, v_list, driver, *, bundle=None, first=0):
    """Lions tangents of the particles and, optionally, of a decoupled bundle.

    Each carrier (particle or sample) gets one auxiliary path started at
    every v, all driven by a noise stream independent of the carrier's. The
    particle auxiliaries use the ``"aux-particles"`` child stream of
    ``driver`` and the sample auxiliaries ``"aux-paths"`` with path indices
    starting at ``first``.
    """
    N = model.dim_state
    V, W = point_weights(v_list, N)
    M = law_paths.n_particles
    pinc = driver.child("aux-particles").increments(law_paths.grid, 0, M, dim=model.dim_noise)
    paux = simulate_aux(model, law_paths, np.broadcast_to(V, (M,) + V.shape), W, pinc)
    lam = particle_lions(model, law_paths, paux)
    system = LionsTangentSystem(V, lam, paux)
    if bundle is not None:
        B = bundle.n_paths
        m = bundle.grid.n_steps
        sinc = driver.child("aux-paths").increments(law_paths.grid, first, B, dim=model.dim_noise)
        saux = simulate_aux(model, law_paths, np.broadcast_to(V, (B,) + V.shape), W, sinc, n_steps=m)
        system.sample_aux = saux
        system.decoupled = decoupled_lions(bundle, model, law_paths, LionsForcing(model, law_paths, saux, lam))
        bundle.lions.update({tuple(V[q]): system.at(q, "decoupled") for q in range(V.shape[0])})
    return system


# forward-mode jet


@dataclass
class Jet:
    """Terminal tangent data of a batch of decoupled paths.

    ``u`` is the adapted integrand sigma^+(X_k) J_k, (B, m, d, N). Fields are
    present according to the propagation level: level 1 adds ``DX``, ``DJ``,
    ``DL``; level 2 adds ``Du`` (B, m_j, m_k, d, N, d_l).
    """

    t: float
    h: float
    xi: np.ndarray
    X: np.ndarray
    J: np.ndarray
    u: np.ndarray
    L: Optional[np.ndarray] = None
    DX: Optional[np.ndarray] = None
    DJ: Optional[np.ndarray] = None
    DL: Optional[np.ndarray] = None
    Du: Optional[np.ndarray] = None


def propagate_jet(model, law_paths, x0, xi, *, forcing: Optional[LionsForcing] = None, level=0):
    """Propagate state, Jacobian, Lions tangent and their Malliavin fields.

    Parameters
    ----------
    x0 : ndarray (B, N)
    xi : ndarray (B, m, d)
        Increments of the first m steps of the law grid.
    forcing : LionsForcing, optional
        Lions forcing for these carriers; omitted means no Lions tangent.
    level : {0, 1, 2}
        0: values only. 1: Malliavin fields of X, J, L at the final node.
        2: additionally the field of the adapted integrand at every node.

    Second derivatives of the coefficients come from the model (analytic
    when supplied, otherwise central differences of the Jacobians).
    """
    x0 = np.asarray(x0, dtype=float)
    B, N = x0.shape
    m, d = xi.shape[1], xi.shape[2]
    h = law_paths.grid.h
    eye = np.eye(N)
    X = x0.copy()
    J = np.broadcast_to(eye, (B, N, N)).copy()
    u = np.empty((B, m, d, N))
    L = DL = None
    if forcing is not None:
        P = forcing.aux.weights.shape[-1]
        L = np.zeros((B, N, P))
    if level >= 1:
        DX = np.zeros((B, m, N, d))
        DJ = np.zeros((B, m, N, N, d))
        if forcing is not None:
            DL = np.zeros((B, m, N, P, d))
    Du = np.zeros((B, m, m, d, N, d)) if level >= 2 else None
    for k in range(m):
        mu = law_paths.measure(k)
        F = model.fields(X, mu)
        G = model.jacobians(X, mu)
        dB = _dB(h, xi[:, k])
        sig = np.swapaxes(F[:, 1:], 1, 2)
        Sinv = gram_inverse(sig)
        sp = np.swapaxes(sig, 1, 2) @ Sinv
        u[:, k] = sp @ J
        A = eye + np.einsum("bi,biac->bac", dB, G)
        Phi = forcing.at(k, X) if forcing is not None else None
        if level >= 1 and k > 0:
            dx = DX[:, :k]
            H = model.hessians(X, mu)
            dG = np.einsum("biace,bjel->bjiacl", H, dx)
            dA = np.einsum("bi,bjiacl->bjacl", dB, dG)
            if level >= 2:
                dsig = np.einsum("biac,bjcl->bjail", G[:, 1:], dx)
                dS = np.einsum("bjail,bei->bjael", dsig, sig)
                dS = dS + np.swapaxes(dS, 2, 3)
                dsp = (np.einsum("bjail,bae->bjiel", dsig, Sinv)
                       - np.einsum("bia,bjael,bef->bjifl", sp, dS, Sinv))
                Du[:, :k, k] = (np.einsum("bjiel,bec->bjicl", dsp, J)
                                + np.einsum("bie,bjecl->bjicl", sp, DJ[:, :k]))
            if forcing is not None:
                dPhi = forcing.dx(k, X)
                DL[:, :k] = (DL[:, :k]
                             + np.einsum("bjiael,bep,bi->bjapl", dG, L, dB)
                             + np.einsum("bi,biae,bjepl->bjapl", dB, G, DL[:, :k])
                             + np.einsum("bi,biapc,bjcl->bjapl", dB, dPhi, dx))
            DJ[:, :k] = (np.einsum("bjael,bec->bjacl", dA, J)
                         + np.einsum("bae,bjecl->bjacl", A, DJ[:, :k]))
            DX[:, :k] = np.einsum("bae,bjel->bjal", A, dx)
        if level >= 1:
            DX[:, k] = sig
            DJ[:, k] = np.einsum("blae,bec->bacl", G[:, 1:], J)
            if forcing is not None:
                DL[:, k] = (np.einsum("blae,bep->bapl", G[:, 1:], L)
                            + np.moveaxis(Phi[:, 1:], 1, -1))
        if forcing is not None:
            L = L + np.einsum("bi,biae,bep->bap", dB, G, L) + np.einsum("bi,biap->bap", dB, Phi)
        X = X + euler_move(F, h, xi[:, k])
        J = A @ J
        _check_finite(X, k + 1)
    jet = Jet(t=m * h, h=h, xi=xi, X=X, J=J, u=u, L=L, Du=Du)
    if level >= 1:
        jet.DX, jet.DJ, jet.DL = DX, DJ, DL
    return jet
