"""Exact-penalty DC formulation of the grouped CQL problem and its DCA solver.

The relaxed problem minimises

    F~(theta, phi, U) = N^2 (ssce - A0) + gamma~ g(U),   g(U) = sum u (1 - u)

over symmetric boxes for (theta, phi) and simplex columns for U. It is
written as G~ - H~ with the separable quadratic
G~ = 5/2 rho_u |U|^2 + 2 rho_phi |phi|^2 + 2 rho_theta |theta|^2, so each DCA
step reduces to three projections.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import CertificateFailure, ConvexityBreach, MaxIterExceeded
from .likelihood import ConcentratedPanel, GroupMatrix, composite_errors
from .model import EcmParams, ModelSpec

log = logging.getLogger(__name__)

PENALTY_TOL = 1e-6
GAMMA_CAP = 2.0 ** 20


@dataclass(frozen=True)
class DcConstants:
    """Moment constants of the concentrated series (all averaged over time)."""

    a0: float
    a1: np.ndarray  # (N,)        mean B_i^2
    b1: np.ndarray  # (N, k, k)   mean C_i C_i'
    c1: np.ndarray  # (N, k)      mean B_i C_i
    d1: np.ndarray  # (N,)        mean A B_i
    f1: np.ndarray  # (N, k)      mean A C_i
    a2: np.ndarray  # (N, N)      mean B_i B_j
    b2: np.ndarray  # (N, N, k)   mean (B_i C_j + B_j C_i)
    c2: np.ndarray  # (N, N, k, k) mean C_i C_j'
    b3: np.ndarray  # (N, N, k)   mean B_j C_i
    c3: np.ndarray  # (N, N, k)   b2 - b3

    @property
    def N(self) -> int:
        return self.a1.shape[0]


def dc_constants(cp: ConcentratedPanel) -> DcConstants:
    A, B, C = cp.A, cp.B, cp.C
    T = cp.T
    a0 = float(np.sum(A * A) / T)
    a1 = np.sum(B * B, axis=1) / T
    b1 = np.einsum("ntk,ntm->nkm", C, C) / T
    c1 = np.einsum("nt,ntk->nk", B, C) / T
    d1 = B @ A / T
    f1 = np.einsum("t,ntk->nk", A, C) / T
    a2 = B @ B.T / T
    cross = np.einsum("it,jtk->ijk", B, C) / T  # mean B_i C_j
    b3 = cross.transpose(1, 0, 2)  # mean B_j C_i
    b2 = cross + b3
    c2 = np.einsum("itk,jtm->ijkm", C, C) / T
    return DcConstants(a0, a1, b1, c1, d1, f1, a2, b2, c2, b3, b2 - b3)


def dc_pieces(dc: DcConstants, params: EcmParams, u: GroupMatrix) -> tuple[float, float, float]:
    """The three pieces of the SSCE: linear and own-pair terms, same-group
    cross-unit pairs, and cross-group pairs (ordered, including i = j)."""
    N = dc.N
    th, ph = params.theta, params.phi
    w = u.u * ph[:, None]  # (G, N)
    lin = np.sum(w * (dc.d1[None, :] - th @ dc.f1.T))
    own = (dc.a1[None, :] - 2.0 * th @ dc.c1.T
           + np.einsum("gk,nkm,gm->gn", th, dc.b1, th))  # (G, N)
    diag = np.sum(w * w * own)
    qa = w @ dc.a2 @ w.T
    qb = np.einsum("ci,ijk,lj->clk", w, dc.b3, w)
    qc = np.einsum("ci,ijk,lj->clk", w, dc.c3, w)
    qcc = np.einsum("ci,ijkm,lj->clkm", w, dc.c2, w)
    q = (qa - np.einsum("ck,clk->cl", th, qb) - np.einsum("lk,clk->cl", th, qc)
         + np.einsum("ck,clkm,lm->cl", th, qcc, th))
    same = np.trace(q)
    e1 = dc.a0 - 2.0 / N * lin + diag / N ** 2
    e2 = (same - diag) / N ** 2
    e3 = (np.sum(q) - same) / N ** 2
    return float(e1), float(e2), float(e3)


def ssce_from_constants(dc: DcConstants, params: EcmParams, u: GroupMatrix) -> float:
    return float(sum(dc_pieces(dc, params, u)))


def penalty_g(u: GroupMatrix | np.ndarray) -> float:
    uu = u.u if isinstance(u, GroupMatrix) else np.asarray(u)
    return float(np.sum(uu * (1.0 - uu)))


def objective_F(dc: DcConstants, params: EcmParams, u: GroupMatrix, gamma_tilde: float) -> float:
    f = dc.N ** 2 * (ssce_from_constants(dc, params, u) - dc.a0)
    return f + gamma_tilde * penalty_g(u)


def g_tilde(params: EcmParams, u: GroupMatrix, rho) -> float:
    ru, rp, rt = rho
    return float(2.5 * ru * np.sum(u.u ** 2) + 2.0 * rp * np.sum(params.phi ** 2)
                 + 2.0 * rt * np.sum(params.theta ** 2))


def h_tilde(dc: DcConstants, params: EcmParams, u: GroupMatrix, rho, gamma_tilde: float) -> float:
    """Convex part H~ = G~ - F~ evaluated through the moment constants."""
    return g_tilde(params, u, rho) - objective_F(dc, params, u, gamma_tilde)


def project_simplex_product(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of every column of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    G = v.shape[0]
    s = -np.sort(-v, axis=0)
    css = np.cumsum(s, axis=0) - 1.0
    k = np.arange(1, G + 1)[:, None]
    cond = s - css / k > 0
    r = G - np.argmax(cond[::-1], axis=0)  # last index where cond holds (1-based)
    tau = css[r - 1, np.arange(v.shape[1])] / r
    return np.maximum(v - tau[None, :], 0.0)


def project_box(v: np.ndarray, half_width: np.ndarray) -> np.ndarray:
    return np.clip(v, -half_width, half_width)


class DcProblem:
    """Objective, gradient and projections for one concentrated panel."""

    def __init__(self, cp: ConcentratedPanel, spec: ModelSpec):
        self.cp = cp
        self.spec = spec
        self._dc: DcConstants | None = None

    @property
    def dc(self) -> DcConstants:
        if self._dc is None:
            self._dc = dc_constants(self.cp)
        return self._dc

    @property
    def N(self) -> int:
        return self.cp.N

    def residual_products(self, params: EcmParams, u: np.ndarray):
        """Composite errors plus their time-averaged products with B and C."""
        cp = self.cp
        e = composite_errors(cp, params, GroupMatrix(u, check=False))
        be = cp.B @ e / cp.T  # (N,)
        ce = np.einsum("ntk,t->nk", cp.C, e) / cp.T  # (N, k)
        return e, be, ce

    def f_value(self, params: EcmParams, u: np.ndarray, e: np.ndarray | None = None) -> float:
        """N^2 (ssce - A0), evaluated as a sum of per-period differences."""
        cp = self.cp
        if e is None:
            e = composite_errors(cp, params, GroupMatrix(u, check=False))
        # N e = N A - s, so N^2 (e^2 - A^2) = s (s - 2 N A)
        s = cp.N * (cp.A - e)
        return float(np.sum(s * (s - 2.0 * cp.N * cp.A)) / cp.T)

    def f_tilde(self, params: EcmParams, u: np.ndarray, gamma_tilde: float,
                e: np.ndarray | None = None) -> float:
        return self.f_value(params, u, e) + gamma_tilde * penalty_g(u)

    def h_tilde(self, params: EcmParams, u: np.ndarray, rho, gamma_tilde: float) -> float:
        return g_tilde(params, GroupMatrix(u, check=False), rho) - self.f_tilde(params, u, gamma_tilde)

    def grad_h_tilde(self, params: EcmParams, u: np.ndarray, rho, gamma_tilde: float, cache=None):
        """Gradient blocks (dU, dphi, dtheta) of H~."""
        ru, rp, rt = rho
        N = self.N
        _, be, ce = cache if cache is not None else self.residual_products(params, u)
        m = be[None, :] - params.theta @ ce.T  # (G, N)
        du = 5.0 * ru * u + 2.0 * N * params.phi[:, None] * m + gamma_tilde * (2.0 * u - 1.0)
        dphi = 4.0 * rp * params.phi + 2.0 * N * np.sum(u * m, axis=1)
        dtheta = 4.0 * rt * params.theta - 2.0 * N * params.phi[:, None] * (u @ ce)
        return du, dphi, dtheta


def grad_H_tilde(problem: DcProblem, params: EcmParams, u: GroupMatrix, rho, gamma_tilde: float):
    return problem.grad_h_tilde(params, u.u, rho, gamma_tilde)


@dataclass
class DcState:
    rho: tuple
    gamma_tilde: float
    params: EcmParams
    u: np.ndarray
    objective_trace: list = field(default_factory=list)
    f_tilde: float = np.nan


def _descent_tol(f: float) -> float:
    return 1e-12 * max(1.0, abs(f))


def _step(problem: DcProblem, params: EcmParams, u: np.ndarray, rho, gamma_tilde: float, cache=None):
    ru, rp, rt = rho
    spec = problem.spec
    du, dphi, dth = problem.grad_h_tilde(params, u, rho, gamma_tilde, cache)
    u_new = project_simplex_product(du / (5.0 * ru))
    th_new = project_box(dth / (4.0 * rt), spec.box_theta)
    ph_new = project_box(dphi / (4.0 * rp), spec.box_phi)
    return EcmParams(th_new, ph_new, params.mu_star), u_new


def dca_step(state: DcState, problem: DcProblem) -> DcState:
    """One DCA iteration; raises ConvexityBreach if the objective increases."""
    f_old = state.f_tilde
    if not np.isfinite(f_old):
        f_old = problem.f_tilde(state.params, state.u, state.gamma_tilde)
    params, u = _step(problem, state.params, state.u, state.rho, state.gamma_tilde)
    f_new = problem.f_tilde(params, u, state.gamma_tilde)
    if f_new > f_old + _descent_tol(f_old):
        raise ConvexityBreach(f"objective rose from {f_old!r} to {f_new!r}")
    return DcState(state.rho, state.gamma_tilde, params, u,
                   state.objective_trace + [f_new], f_new)


def _stack(params: EcmParams, u: np.ndarray) -> np.ndarray:
    return np.concatenate([u.ravel(), params.phi, params.theta.ravel()])


@dataclass
class StepRecord:
    iteration: int
    f_tilde: float
    f_tilde_before: float
    penalty: float
    step_norm: float
    gamma_tilde: float


@dataclass
class DcaResult:
    params: EcmParams
    u: GroupMatrix
    trace: list  # StepRecord per accepted step
    converged: bool
    n_iter: int
    rho: tuple
    gamma_tilde: float
    penalty: float
    fractional: bool
    f_tilde: float


def dca_run(problem: DcProblem, params: EcmParams, u: np.ndarray, rho, gamma_tilde: float = 1.0,
            tol: float = 1e-6, max_iter: int = 5000, on_breach: str = "expand",
            strict: bool = False, trace: list | None = None, quiet: bool = False) -> DcaResult:
    """Iterate DCA steps at fixed penalty until the step is below ``tol``.

    The tolerance is relative once the iterate norm exceeds one. On a
    descent failure ``rho`` is doubled and the step retried unless
    ``on_breach == "raise"``.
    """
    rho = tuple(float(r) for r in rho)
    u = np.asarray(u, dtype=float)
    trace = [] if trace is None else trace
    cache = problem.residual_products(params, u)
    f_old = problem.f_tilde(params, u, gamma_tilde, cache[0])
    converged = False
    it = 0
    while it < max_iter:
        new_params, new_u = _step(problem, params, u, rho, gamma_tilde, cache)
        new_cache = problem.residual_products(new_params, new_u)
        f_new = problem.f_tilde(new_params, new_u, gamma_tilde, new_cache[0])
        if f_new > f_old + _descent_tol(f_old):
            if on_breach == "raise":
                raise ConvexityBreach(f"objective rose from {f_old!r} to {f_new!r}")
            rho = tuple(2.0 * r for r in rho)
            if rho[0] > 1e300:
                raise ConvexityBreach("rho expansion did not restore descent")
            continue
        it += 1
        z_old, z_new = _stack(params, u), _stack(new_params, new_u)
        step = float(np.linalg.norm(z_new - z_old))
        trace.append(StepRecord(len(trace) + 1, f_new, f_old, penalty_g(new_u), step, gamma_tilde))
        params, u, cache, f_old = new_params, new_u, new_cache, f_new
        if step <= tol * max(1.0, float(np.linalg.norm(z_old))):
            converged = True
            break
    if not converged:
        if strict:
            raise MaxIterExceeded(f"no convergence in {max_iter} iterations")
        if not quiet:
            log.warning("DCA stopped at max_iter=%d without meeting the step tolerance", max_iter)
    pen = penalty_g(u)
    return DcaResult(params, GroupMatrix(u, check=False), trace, converged, it, rho,
                     gamma_tilde, pen, pen >= PENALTY_TOL, f_old)


def dca_solve(problem: DcProblem, params: EcmParams, u: np.ndarray, rho, gamma0: float = 1.0,
              tol: float = 1e-6, max_iter: int = 5000, tau: float = 0.5,
              adapt_rho: bool = True, adapt_every: int = 100) -> DcaResult:
    """DCA with penalty doubling until the memberships become binary.

    ``rho`` is re-tightened by the adaptive shrink every ``adapt_every``
    iterations; ``max_iter`` bounds the iterations per penalty level. The final
    U is rounded by per-column argmax when the penalty residual is below
    ``PENALTY_TOL``; otherwise it is returned fractional with a warning.
    """
    gamma = gamma0
    trace: list = []
    total = 0
    converged = True
    rho = tuple(rho)
    while True:
        budget = max_iter
        while True:
            # re-tighten rho every segment; a segment that converges ends the level
            if adapt_rho:
                st = rho_update(DcState(rho, gamma, params, u), problem, tau)
                rho, params, u = st.rho, st.params, st.u
            seg = min(budget, adapt_every) if adapt_rho else budget
            res = dca_run(problem, params, u, rho, gamma, tol, seg, trace=trace, quiet=True)
            total += res.n_iter
            budget -= res.n_iter
            params, u, rho = res.params, res.u.u, res.rho
            if res.converged or budget <= 0:
                break
        if not res.converged:
            converged = False
            log.warning("DCA hit max_iter=%d at gamma=%g", max_iter, gamma)
        if res.penalty < PENALTY_TOL or gamma >= GAMMA_CAP:
            break
        gamma = min(2.0 * gamma, GAMMA_CAP)
    pen = penalty_g(u)
    fractional = pen >= PENALTY_TOL
    if fractional:
        log.warning("memberships still fractional (penalty %.3g) at gamma=%g", pen, gamma)
        out_u = GroupMatrix(u, check=False)
    else:
        out_u = GroupMatrix(u, check=False).rounded()
    f = problem.f_tilde(params, out_u.u, gamma)
    return DcaResult(params, out_u, trace, converged, total, rho, gamma, pen, fractional, f)


# ---------------------------------------------------------------- rho control

def _random_point(spec: ModelSpec, N: int, rng: np.random.Generator):
    G = spec.G
    u = rng.dirichlet(np.ones(G), size=N).T if G > 1 else np.ones((1, N))
    phi = rng.uniform(-1, 1, G) * spec.box_phi
    theta = rng.uniform(-1, 1, (G, spec.d_x)) * spec.box_theta
    return EcmParams(theta, phi), u


def midpoint_violations(problem: DcProblem, rho, gamma_tilde: float, n_probes: int,
                        rng: np.random.Generator, rtol: float = 1e-8) -> int:
    """Count probe pairs violating midpoint convexity of H~."""
    spec, N = problem.spec, problem.N
    bad = 0
    for _ in range(n_probes):
        p1, u1 = _random_point(spec, N, rng)
        p2, u2 = _random_point(spec, N, rng)
        pm = EcmParams((p1.theta + p2.theta) / 2, (p1.phi + p2.phi) / 2)
        um = (u1 + u2) / 2
        h1 = problem.h_tilde(p1, u1, rho, gamma_tilde)
        h2 = problem.h_tilde(p2, u2, rho, gamma_tilde)
        hm = problem.h_tilde(pm, um, rho, gamma_tilde)
        if hm > (h1 + h2) / 2 + rtol * max(1.0, abs(h1), abs(h2)):
            bad += 1
    return bad


def hessian_block_bounds(problem: DcProblem) -> tuple[float, float, float]:
    """Upper bounds on the curvature of F over the feasible set, per block.

    F = (1/T) sum_t (s_t^2 - 2 N A_t s_t) with s_t trilinear in (U, phi,
    theta). Per period the gradient and Hessian norms of s_t are bounded
    using the box widths, and a block Gershgorin argument turns the block
    norms into a separable quadratic majorant.
    """
    cp, spec = problem.cp, problem.spec
    N = cp.N
    Lp = spec.box_phi
    Lt = spec.box_theta
    absC = np.abs(cp.C)  # (N, T, k)
    R = np.abs(cp.B) + np.max(np.einsum("gk,ntk->gnt", Lt, absC), axis=0)  # (N, T)
    sum_lp2 = float(np.sum(Lp ** 2))
    max_lp = float(np.max(Lp))
    R2 = np.sum(R * R, axis=0)  # (T,)
    n_u = np.sqrt(sum_lp2 * R2)
    n_phi = np.sum(R, axis=0)
    colC = np.sum(absC, axis=0)  # (T, k)
    n_th = max_lp * np.sqrt(np.sum(colC ** 2, axis=1))
    s_max = max_lp * np.sum(R, axis=0)
    S = s_max + N * np.abs(cp.A)
    h_up = np.sqrt(spec.G * R2)
    h_ut = np.sqrt(sum_lp2 * np.sum(cp.C ** 2, axis=(0, 2)))
    h_pt = np.sqrt(np.sum(colC ** 2, axis=1))
    tot = n_u + n_phi + n_th
    scale = 2.0 / cp.T
    a_u = scale * np.sum(n_u * tot + S * (h_up + h_ut))
    a_p = scale * np.sum(n_phi * tot + S * (h_up + h_pt))
    a_t = scale * np.sum(n_th * tot + S * (h_ut + h_pt))
    return float(a_u), float(a_p), float(a_t)


def rho_init(problem: DcProblem, gamma_tilde: float = 1.0, n_probes: int = 50,
             max_doublings: int = 40, seed: int = 0) -> tuple[float, float, float]:
    """Convexity parameters from curvature bounds, confirmed by midpoint probes."""
    a_u, a_p, a_t = hessian_block_bounds(problem)
    floor = 1e-12
    rho = (max(a_u / 5.0, floor), max(a_p / 4.0, floor), max(a_t / 4.0, floor))
    rng = np.random.default_rng(seed)
    for _ in range(max_doublings + 1):
        if midpoint_violations(problem, rho, gamma_tilde, n_probes, rng) == 0:
            return rho
        rho = tuple(2.0 * r for r in rho)
    raise CertificateFailure(f"no convexity certificate after {max_doublings} doublings")


def rho_update(state: DcState, problem: DcProblem, tau: float = 0.5, max_shrinks: int = 200) -> DcState:
    """Shrink rho by ``tau`` while the resulting DCA step keeps improving F~."""
    if not 0.0 < tau < 1.0:
        return state
    gamma = state.gamma_tilde
    best_f = problem.f_tilde(state.params, state.u, gamma)
    best = DcState(state.rho, gamma, state.params, state.u, list(state.objective_trace), best_f)
    rho = state.rho
    for _ in range(max_shrinks):
        rho = tuple(tau * r for r in rho)
        params, u = _step(problem, best.params, best.u, rho, gamma)
        f = problem.f_tilde(params, u, gamma)
        if not f < best_f:
            break
        best_f = f
        best = DcState(rho, gamma, params, u, best.objective_trace + [f], f)
    return best
