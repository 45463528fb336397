"""Global search over (theta, phi, U): annealing local search inside a
variable neighbourhood search, followed by DCA polishing."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import _kernels as K
from .dc import DcProblem, dca_solve, rho_init
from .likelihood import ConcentratedPanel, GroupMatrix, concentrate
from .model import EcmParams, ModelSpec, PanelDataset, build_regressors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeighborhoodIndex:
    k: int
    l: int
    k_max: int
    l_max: int

    def __post_init__(self) -> None:
        if not (1 <= self.k <= self.k_max and 1 <= self.l <= self.l_max):
            raise ValueError(f"neighbourhood index out of range: {self}")


@dataclass(frozen=True)
class SaSchedule:
    """Annealing schedule. ``te0=None`` calibrates the start temperature so
    that about ``target_acceptance`` of probe moves would be accepted;
    ``tl=None`` uses ``tl_per_unit * N`` moves per temperature."""

    te0: float | None = None
    tl: int | None = None
    alpha: float = 0.9
    max_epochs: int = 1000
    patience: int = 5
    tl_per_unit: int = 50
    target_acceptance: float = 0.8
    n_probe: int = 100

    def __post_init__(self) -> None:
        if self.te0 is not None and not self.te0 > 0:
            raise ValueError("te0 must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class SearchConfig:
    n_starts: int = 5
    k_max: int = 10
    l_max: int | None = None  # defaults to N
    coupled: bool = True
    max_shakes: int | None = None
    sa: SaSchedule = field(default_factory=SaSchedule)
    tol: float = 1e-6
    max_iter: int = 5000
    tau: float = 0.5
    gamma0: float = 1.0
    seed: int = 0
    nuisance: str = "pooled"  # "group": refine labels with group-specific short-run terms

    def __post_init__(self) -> None:
        if self.nuisance not in ("pooled", "group"):
            raise ValueError(f"nuisance must be 'pooled' or 'group', got {self.nuisance!r}")
        if self.n_starts < 1 or self.k_max < 1:
            raise ValueError("n_starts and k_max must be positive")


# ------------------------------------------------------------ profiling


class LabelProfiler:
    """Scores hard labellings of the concentrated problem by profiling
    (phi, theta) through clipped least squares on group sums."""

    mode = K.MODE_CLIPPED

    def __init__(self, cp: ConcentratedPanel, spec: ModelSpec):
        self.cp = cp
        self.spec = spec
        self.N, self.T = cp.N, cp.T
        series = np.concatenate([cp.B[:, None, :], cp.C.transpose(0, 2, 1)], axis=1)
        self._setup(series, cp.A, np.zeros((cp.T, 0)))

    def _setup(self, series: np.ndarray, response: np.ndarray, shared: np.ndarray) -> None:
        spec = self.spec
        self.lphi = np.ascontiguousarray(spec.box_phi, dtype=float)
        self.ltheta = np.ascontiguousarray(spec.box_theta, dtype=float)
        self.P = np.ascontiguousarray(np.einsum("ial,jbl->ijab", series, series))
        self.Q = np.ascontiguousarray(series @ shared)
        self.r = np.ascontiguousarray(series @ response)
        self.QQ = np.ascontiguousarray(shared.T @ shared)
        self.Qy = np.ascontiguousarray(shared.T @ response)

    def gram(self, labels: np.ndarray):
        """(UM, normal matrix, right-hand side, group counts) for the annealing kernel."""
        labels = np.asarray(labels, dtype=np.int64)
        UM, M, rhs = K.gram_state(self.P, self.Q, self.r, self.QQ, self.Qy, labels, self.spec.G)
        return UM, M, rhs, np.bincount(labels, minlength=self.spec.G).astype(np.int64)

    def __call__(self, labels: np.ndarray) -> tuple[float, EcmParams]:
        G, dx = self.spec.G, self.spec.d_x
        _, M, rhs, _ = self.gram(labels)
        phi = np.zeros(G)
        theta = np.zeros((G, dx))
        f = K._score(M, rhs, float(self.N), float(self.T), self.mode, self.lphi, self.ltheta,
                     phi, theta, K._workspace(rhs.size))
        return float(f), EcmParams(theta, phi)

    def value(self, params: EcmParams, labels: np.ndarray) -> float:
        """Objective at given (phi, theta) rather than the profiled ones."""
        u = GroupMatrix.from_labels(labels, self.spec.G).u
        return DcProblem(self.cp, self.spec).f_value(params, u)


class GroupNuisanceProfiler(LabelProfiler):
    """Scores labellings with one short-run coefficient vector per group.

    The response is the cross-sectional mean of the differenced outcome,
    regressed on group sums of the lagged level, the covariates and the
    short-run regressors plus a constant; the score is unconstrained.
    """

    mode = K.MODE_FREE

    def __init__(self, d: PanelDataset, spec: ModelSpec):
        self.cp = None
        self.spec = spec
        reg = build_regressors(d, spec)
        self.N, self.T = d.n_units, reg.length
        series = np.concatenate([reg.y_lag[:, None, :], reg.x.transpose(0, 2, 1),
                                 reg.w.transpose(0, 2, 1)], axis=1)
        self._setup(series, reg.dy.mean(axis=0), np.ones((reg.length, 1)))

    def value(self, params: EcmParams, labels: np.ndarray) -> float:
        return self(labels)[0]


# ------------------------------------------------------------ neighbourhoods


def _shell_bounds(v: np.ndarray, half: np.ndarray, k: int, k_max: int):
    frac = k / k_max
    return v - frac * (v + half), v + frac * (half - v)


def sample_params_shell(params: EcmParams, spec: ModelSpec, k: int, k_max: int,
                        rng: np.random.Generator, max_tries: int = 1000) -> EcmParams:
    """Uniform draw from the k-th box shell around (theta, phi)."""
    v = np.concatenate([params.phi, params.theta.ravel()])
    half = np.concatenate([spec.box_phi, spec.box_theta.ravel()])
    lo, hi = _shell_bounds(v, half, k, k_max)
    lo_in, hi_in = _shell_bounds(v, half, k - 1, k_max)
    z = rng.uniform(lo, hi)
    for _ in range(max_tries):
        if k == 1 or np.any((z < lo_in) | (z > hi_in)):
            break
        z = rng.uniform(lo, hi)
    else:
        # push one coordinate into the outer ring
        j = int(rng.integers(v.size))
        left, right = lo_in[j] - lo[j], hi[j] - hi_in[j]
        r = rng.uniform(0.0, left + right)
        z[j] = lo[j] + r if r < left else hi_in[j] + (r - left)
    G = spec.G
    return EcmParams(z[G:].reshape(G, -1), z[:G], params.mu_star)


def sample_labels_hamming(labels: np.ndarray, G: int, l: int, rng: np.random.Generator) -> np.ndarray:
    """Reassign exactly ``l`` distinct units, each to a different uniform group."""
    labels = np.asarray(labels, dtype=np.int64)
    N = labels.size
    if not 1 <= l <= N:
        raise ValueError(f"Hamming radius must be in 1..{N}")
    out = labels.copy()
    if G == 1:
        return out
    idx = rng.choice(N, size=l, replace=False)
    out[idx] = (out[idx] + rng.integers(1, G, size=l)) % G
    return out


def sample_neighborhood(params: EcmParams, labels: np.ndarray, idx: NeighborhoodIndex,
                        spec: ModelSpec, rng: np.random.Generator):
    new_params = sample_params_shell(params, spec, idx.k, idx.k_max, rng)
    new_labels = sample_labels_hamming(labels, spec.G, idx.l, rng)
    return new_params, new_labels


# ------------------------------------------------------------ annealing


@dataclass
class SaResult:
    params: EcmParams
    labels: np.ndarray
    f: float
    accepted: np.ndarray  # objective after each accepted move
    epochs: int
    te0: float


def _probe_moves(prof: LabelProfiler, labels, cur_f, n, rng):
    N, G = labels.size, prof.spec.G
    units = rng.integers(0, N, size=n).astype(np.int64)
    offs = rng.integers(1, G, size=n).astype(np.int64)
    UM, M, rhs, counts = prof.gram(labels)
    return K.probe_deltas(prof.P, prof.Q, prof.r, labels, UM, M, rhs, counts, float(N), float(prof.T),
                          prof.mode, prof.lphi, prof.ltheta, prof.spec.d_x, cur_f, units, offs)


def calibrate_te0(prof: LabelProfiler, labels: np.ndarray, sched: SaSchedule,
                  rng: np.random.Generator) -> float:
    """Temperature at which the mean uphill probe move is accepted with the target rate."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    f0, _ = prof(labels)
    if prof.spec.G < 2 or not np.isfinite(f0):
        return 1e-12
    d = _probe_moves(prof, labels, f0, sched.n_probe, rng)
    up = d[np.isfinite(d) & (d > 0)]
    if up.size == 0:
        return 1e-12 * max(1.0, abs(f0))
    return float(-up.mean() / np.log(sched.target_acceptance))


def sa_local_search(prof: LabelProfiler, params: EcmParams, labels: np.ndarray,
                    sched: SaSchedule, rng: np.random.Generator,
                    start_f: float | None = None) -> SaResult:
    """Metropolis annealing over single-unit reassignments.

    Each candidate labelling has (phi, theta) re-profiled; the best visited
    point, the start included, is returned.
    """
    spec = prof.spec
    G, N = spec.G, prof.N
    labels = np.asarray(labels, dtype=np.int64).copy()
    if start_f is None:
        start_f = prof.value(params, labels)
    te = sched.te0 if sched.te0 is not None else calibrate_te0(prof, labels, sched, rng)
    te0 = te
    best_f = float(start_f)
    best_labels = labels.copy()
    best_phi = params.phi.copy()
    best_theta = params.theta.copy()
    if G < 2 or sched.max_epochs <= 0:
        return SaResult(EcmParams(best_theta, best_phi), best_labels, best_f, np.zeros(0), 0, te0)
    tl = sched.tl if sched.tl is not None else sched.tl_per_unit * N
    cur_f = best_f
    acc_all = []
    idle = 0
    epochs = 0
    buf = np.empty(tl)
    for epochs in range(1, sched.max_epochs + 1):
        units = rng.integers(0, N, size=tl).astype(np.int64)
        offs = rng.integers(1, G, size=tl).astype(np.int64)
        unif = rng.random(tl)
        UM, M, rhs, counts = prof.gram(labels)
        cur_f, best_f, n_acc = K.sa_epoch(prof.P, prof.Q, prof.r, labels, UM, M, rhs, counts,
                                          float(N), float(prof.T), prof.mode, prof.lphi,
                                          prof.ltheta, cur_f, te, units, offs, unif, best_f,
                                          best_labels, best_phi, best_theta, buf)
        acc_all.append(buf[:n_acc].copy())
        idle = idle + 1 if n_acc == 0 else 0
        if idle >= sched.patience:
            break
        te *= sched.alpha
    acc = np.concatenate(acc_all) if acc_all else np.zeros(0)
    return SaResult(EcmParams(best_theta, best_phi), best_labels, float(best_f), acc, epochs, te0)


# ------------------------------------------------------------ VNS


@dataclass
class VnsResult:
    params: EcmParams
    labels: np.ndarray
    f: float
    trace: list  # incumbent objective after every accepted move
    n_shakes: int


LocalSearch = Callable[[EcmParams, np.ndarray, np.random.Generator], tuple]


def _z(params: EcmParams, labels: np.ndarray, G: int) -> np.ndarray:
    u = GroupMatrix.from_labels(labels, G).u
    return np.concatenate([u.ravel(), params.phi, params.theta.ravel()])


def vns_run(params: EcmParams, labels: np.ndarray, f0: float, spec: ModelSpec,
            local_search: LocalSearch, rng: np.random.Generator, k_max: int = 10,
            l_max: int | None = None, tol: float = 1e-6, coupled: bool = True,
            max_shakes: int | None = None) -> VnsResult:
    """Shake in growing neighbourhoods, improve locally, move on improvement.

    Runs while both indices are in range and the last accepted move was
    longer than ``tol``. ``coupled`` grows k and l together; otherwise l
    cycles fastest and k grows when l wraps.
    """
    labels = np.asarray(labels, dtype=np.int64)
    N = labels.size
    l_max = N if l_max is None else min(l_max, N)
    inc_p, inc_l, inc_f = params, labels.copy(), float(f0)
    trace = [inc_f]
    k = l = 1
    shakes = 0
    while k <= k_max and l <= l_max:
        if max_shakes is not None and shakes >= max_shakes:
            break
        idx = NeighborhoodIndex(k, l, k_max, l_max)
        cand_p, cand_l = sample_neighborhood(inc_p, inc_l, idx, spec, rng)
        shakes += 1
        new_p, new_l, new_f = local_search(cand_p, cand_l, rng)
        if new_f < inc_f:
            step = float(np.linalg.norm(_z(new_p, new_l, spec.G) - _z(inc_p, inc_l, spec.G)))
            inc_p, inc_l, inc_f = new_p, np.asarray(new_l, dtype=np.int64).copy(), float(new_f)
            trace.append(inc_f)
            k = l = 1
            if step <= tol:
                break
        elif coupled:
            k += 1
            l += 1
        else:
            l += 1
            if l > l_max:
                l = 1
                k += 1
    return VnsResult(inc_p, inc_l, inc_f, trace, shakes)


# ------------------------------------------------------------ pipeline


@dataclass
class StartOutcome:
    seed_index: int
    f: float
    params: EcmParams
    labels: np.ndarray
    vns_f: float
    dca_iterations: int
    dca_converged: bool
    penalty: float
    gamma_tilde: float
    rho: tuple
    n_shakes: int
    trace: list
    pooled_f: float = float("nan")


def _initial_labels(N: int, G: int, rng: np.random.Generator) -> np.ndarray:
    # balanced random split so that no group starts empty
    return rng.permutation(np.arange(N) % G).astype(np.int64)


def _vns_sa(prof: LabelProfiler, params: EcmParams, labels: np.ndarray, f0: float,
            config: SearchConfig, rng: np.random.Generator) -> VnsResult:
    sched = config.sa
    if sched.te0 is None:
        sched = replace(sched, te0=calibrate_te0(prof, labels, sched, rng))

    def local(p, lab, r):
        res = sa_local_search(prof, p, lab, sched, r)
        return res.params, res.labels, res.f

    return vns_run(params, labels, f0, prof.spec, local, rng, config.k_max, config.l_max,
                   config.tol, config.coupled, config.max_shakes)


def run_start(problem: DcProblem, prof: LabelProfiler, config: SearchConfig,
              rng: np.random.Generator, index: int = 0,
              group_prof: GroupNuisanceProfiler | None = None) -> StartOutcome:
    """One seeded start: VNS(SA) on hard labels, DCA polish, box-constrained refit.

    With ``group_prof`` the winner is then moved by a second VNS(SA) on the
    group-specific short-run objective, whose value becomes the score.
    """
    from .estimator import refit_labels

    spec, cp = problem.spec, problem.cp
    G, N = spec.G, cp.N
    labels = _initial_labels(N, G, rng)
    f0, p0 = prof(labels)
    if G > 1:
        vns = _vns_sa(prof, p0, labels, f0, config, rng)
        v_params, v_labels, v_f, shakes = vns.params, vns.labels, vns.f, vns.n_shakes
        v_trace = vns.trace
    else:
        v_params, v_labels, v_f, shakes, v_trace = p0, labels, f0, 0, [f0]
    rho = rho_init(problem, config.gamma0, seed=int(rng.integers(2 ** 31)))
    dres = dca_solve(problem, v_params, GroupMatrix.from_labels(v_labels, G).u, rho,
                     config.gamma0, config.tol, config.max_iter, config.tau)
    d_labels = dres.u.labels()
    d_f, d_params = refit_labels(cp, spec, d_labels)
    if d_f <= v_f:
        f, params, out_labels = d_f, d_params, d_labels
    else:
        r_f, r_params = refit_labels(cp, spec, v_labels)
        f, params, out_labels = (r_f, r_params, v_labels) if r_f <= v_f else (v_f, v_params, v_labels)
    trace = v_trace + [s.f_tilde for s in dres.trace]
    pooled_f = f
    if group_prof is not None:
        g_f, g_params = group_prof(out_labels)
        if G > 1:
            gv = _vns_sa(group_prof, g_params, out_labels, g_f, config, rng)
            g_f, g_params, out_labels = gv.f, gv.params, gv.labels
            shakes += gv.n_shakes
            trace = trace + gv.trace
        f, params = g_f, g_params
    return StartOutcome(index, float(f), params, np.asarray(out_labels, dtype=np.int64), v_f,
                        dres.n_iter, dres.converged, dres.penalty, dres.gamma_tilde, dres.rho,
                        shakes, trace, float(pooled_f))


def vns_dca_pipeline(d: PanelDataset | ConcentratedPanel, spec: ModelSpec,
                     config: SearchConfig | None = None, omega: float | str | None = None):
    """Multi-start VNS(SA) + DCA estimation with unknown group membership.

    ``config.nuisance == "group"`` adds the group-specific refinement of
    ``run_start`` and reports estimates with group-specific short-run terms;
    it needs the raw panel.
    """
    from .estimator import assemble_fit, estimate_known_groups

    config = config or SearchConfig()
    if config.nuisance == "group" and isinstance(d, ConcentratedPanel):
        raise ValueError("group-specific short-run terms need the raw panel")
    cp = d if isinstance(d, ConcentratedPanel) else concentrate(d, spec)
    problem = DcProblem(cp, spec)
    prof = LabelProfiler(cp, spec)
    group_prof = GroupNuisanceProfiler(d, spec) if config.nuisance == "group" else None
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_starts)
    outcomes = []
    for s, ss in enumerate(seeds):
        outcomes.append(run_start(problem, prof, config, np.random.default_rng(ss), s, group_prof))
    best = min(outcomes, key=lambda o: o.f)  # min keeps the first of equal values
    diagnostics = {
        "n_starts": config.n_starts,
        "best_start": best.seed_index,
        "start_objectives": [o.f for o in outcomes],
        "dca_iterations": best.dca_iterations,
        "dca_converged": best.dca_converged,
        "penalty_residual": best.penalty,
        "gamma_tilde": best.gamma_tilde,
        "rho": list(best.rho),
        "vns_shakes": best.n_shakes,
        "objective": best.f,
        "nuisance": config.nuisance,
    }
    if group_prof is not None:
        diagnostics["pooled_objective"] = best.pooled_f
        fit = estimate_known_groups(d, spec, best.labels, omega=omega, nuisance="group")
        fit.diagnostics.update(diagnostics)
        fit.diagnostics["method"] = "vns_dca"
    else:
        fit = assemble_fit(cp, spec, best.params, best.labels, omega=omega, diagnostics=diagnostics)
    fit.trace = best.trace
    return fit
