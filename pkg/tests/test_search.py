import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grpecm import _kernels as K
from grpecm.estimator import estimate_known_groups
from grpecm.likelihood import concentrate
from grpecm.metrics import rand_index
from grpecm.model import EcmParams, ModelSpec
from grpecm.search import (
    GroupNuisanceProfiler,
    LabelProfiler,
    NeighborhoodIndex,
    SaSchedule,
    SearchConfig,
    sa_local_search,
    sample_labels_hamming,
    sample_neighborhood,
    sample_params_shell,
    vns_dca_pipeline,
    vns_run,
)

from conftest import grouped_panel, random_panel, random_point


def test_index_and_schedule_validation():
    with pytest.raises(ValueError):
        NeighborhoodIndex(0, 1, 3, 3)
    with pytest.raises(ValueError):
        NeighborhoodIndex(1, 4, 3, 3)
    with pytest.raises(ValueError):
        SaSchedule(alpha=1.0)
    with pytest.raises(ValueError):
        SaSchedule(te0=0.0)
    with pytest.raises(ValueError):
        SearchConfig(nuisance="per-unit")


def test_first_shell_bounds():
    spec = ModelSpec.uniform(1, 0, 2, 2, 1.5, 4.0)
    rng = np.random.default_rng(0)
    params = EcmParams([[1.0, -2.0], [0.5, 3.0]], [-0.3, 0.7])
    k_max = 5
    v = np.concatenate([params.phi, params.theta.ravel()])
    half = np.concatenate([spec.box_phi, spec.box_theta.ravel()])
    lo = v - (v + half) / k_max
    hi = v + (half - v) / k_max
    for _ in range(10000):
        s = sample_params_shell(params, spec, 1, k_max, rng)
        z = np.concatenate([s.phi, s.theta.ravel()])
        assert np.all(z >= lo) and np.all(z <= hi)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_outer_shells_stay_in_box_and_leave_inner_set(seed, k):
    rng = np.random.default_rng(seed)
    spec = ModelSpec.uniform(1, 0, 3, 1, 2.0, 5.0)
    params, _ = random_point(rng, spec, 4)
    k_max = 6
    v = np.concatenate([params.phi, params.theta.ravel()])
    half = np.concatenate([spec.box_phi, spec.box_theta.ravel()])
    lo_in = v - (k - 1) / k_max * (v + half)
    hi_in = v + (k - 1) / k_max * (half - v)
    s = sample_params_shell(params, spec, k, k_max, rng)
    z = np.concatenate([s.phi, s.theta.ravel()])
    assert np.all(np.abs(z) <= half)
    assert np.any((z < lo_in) | (z > hi_in))


def test_hamming_moves():
    rng = np.random.default_rng(1)
    lab = np.array([0, 1, 2, 0, 1, 2, 0])
    for l in range(1, 8):
        new = sample_labels_hamming(lab, 3, l, rng)
        assert np.sum(new != lab) == l
    assert np.all(sample_labels_hamming(lab, 3, 7, rng) != lab)
    with pytest.raises(ValueError):
        sample_labels_hamming(lab, 3, 0, rng)


def test_neighbourhood_candidates_feasible():
    rng = np.random.default_rng(2)
    spec = ModelSpec.uniform(1, 0, 2, 1, 1.0, 2.0)
    params, u = random_point(rng, spec, 6, simplex=False)
    lab = u.argmax(axis=0)
    for k in range(1, 4):
        p, new = sample_neighborhood(params, lab, NeighborhoodIndex(k, k, 3, 6), spec, rng)
        assert p.in_box(spec)
        assert np.sum(new != lab) == k and set(new.tolist()) <= {0, 1}


# ------------------------------------------------------------ profilers


def test_profiler_matches_direct_route(small_problem, rng):
    _, spec, cp = small_problem
    prof = LabelProfiler(cp, spec)
    for _ in range(5):
        lab = rng.integers(0, 2, cp.N).astype(np.int64)
        lab[:2] = [0, 1]
        f, params = prof(lab)
        SB, SC, _ = K.group_sums(cp.B, cp.C, lab, 2)
        phi, theta = np.zeros(2), np.zeros((2, 2))
        f2 = K.profile_objective(cp.A, SB, SC, float(cp.N), prof.lphi, prof.ltheta, phi, theta)
        assert f == pytest.approx(f2, rel=1e-9)
        assert params.in_box(spec)
        # the profiled value is the objective at the profiled point
        assert prof.value(params, lab) == pytest.approx(f, rel=1e-8, abs=1e-8)


def test_incremental_moves_match_recompute(small_problem, rng):
    _, spec, cp = small_problem
    prof = LabelProfiler(cp, spec)
    lab = np.array([0, 1] * 4, dtype=np.int64)
    f0, _ = prof(lab)
    units = np.arange(cp.N, dtype=np.int64)
    offs = np.ones(cp.N, dtype=np.int64)
    UM, M, rhs, counts = prof.gram(lab)
    d = K.probe_deltas(prof.P, prof.Q, prof.r, lab, UM, M, rhs, counts, float(cp.N), float(cp.T),
                       prof.mode, prof.lphi, prof.ltheta, 2, f0, units, offs)
    for i in range(cp.N):
        moved = lab.copy()
        moved[i] = 1 - moved[i]
        assert d[i] == pytest.approx(prof(moved)[0] - f0, rel=1e-7, abs=1e-8)


def test_group_profiler_matches_known_group_fit():
    rng = np.random.default_rng(4)
    d = random_panel(rng, N=9, T=40)
    spec = ModelSpec.uniform(2, 1, 3, 1)
    lab = np.array([0, 1, 2] * 3)
    gp = GroupNuisanceProfiler(d, spec)
    f, params = gp(lab)
    fit = estimate_known_groups(d, spec, lab, nuisance="group")
    from grpecm.model import build_regressors

    dybar = build_regressors(d, spec).dy.mean(axis=0)
    # profiler score is N^2 (SSR - sum of squares of the response) / T
    assert f + 81 * np.mean(dybar ** 2) == pytest.approx(81 * fit.ssce, rel=1e-8)
    np.testing.assert_allclose(params.phi, fit.params.phi, rtol=1e-7)
    np.testing.assert_allclose(params.theta, fit.params.theta, rtol=1e-6)


# ------------------------------------------------------------ annealing


def test_greedy_limit_descends(small_problem, rng):
    _, spec, cp = small_problem
    prof = LabelProfiler(cp, spec)
    lab = np.array([0, 1] * 4, dtype=np.int64)
    f0, p0 = prof(lab)
    res = sa_local_search(prof, p0, lab, SaSchedule(te0=1e-12, tl=40), rng, f0)
    acc = np.concatenate([[f0], res.accepted])
    assert np.all(np.diff(acc) <= 0)
    assert res.f <= f0


def test_zero_epochs_returns_start(small_problem, rng):
    _, spec, cp = small_problem
    prof = LabelProfiler(cp, spec)
    lab = np.array([0, 1] * 4, dtype=np.int64)
    f0, p0 = prof(lab)
    res = sa_local_search(prof, p0, lab, SaSchedule(te0=1.0, max_epochs=0), rng, f0)
    assert res.f == f0 and np.array_equal(res.labels, lab)


def test_annealing_finds_enumeration_optimum():
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d = random_panel(rng, N=5, T=25)
        spec = ModelSpec.uniform(2, 1, 2, 1, 2.0, 5.0)
        prof = LabelProfiler(concentrate(d, spec), spec)
        best = min(prof(np.array(b, dtype=np.int64))[0] for b in itertools.product((0, 1), repeat=5)
                   if 0 < sum(b) < 5)
        lab = np.array([0, 1, 0, 1, 0], dtype=np.int64)
        f0, p0 = prof(lab)
        res = sa_local_search(prof, p0, lab, SaSchedule(tl=200, alpha=0.95), rng, f0)
        hits += res.f <= best + 1e-9 * max(1.0, abs(best))
    assert hits >= 16


# ------------------------------------------------------------ VNS


def test_vns_no_improvement_path():
    spec = ModelSpec.uniform(1, 0, 2, 1)
    params = EcmParams([[0.0], [0.0]], [0.0, 0.0])
    lab = np.array([0, 1, 0, 1, 0, 1])

    def stuck(p, l, r):
        return p, l, 1.0

    res = vns_run(params, lab, 1.0, spec, stuck, np.random.default_rng(0), k_max=3, l_max=4,
                  coupled=False)
    assert res.n_shakes == 12 and res.f == 1.0 and np.array_equal(res.labels, lab)
    res = vns_run(params, lab, 1.0, spec, stuck, np.random.default_rng(0), k_max=3, l_max=4)
    assert res.n_shakes == 3


def test_vns_incumbent_strictly_decreases(small_problem):
    _, spec, cp = small_problem
    prof = LabelProfiler(cp, spec)
    sched = SaSchedule(te0=1e-3, tl=30, max_epochs=5)

    def local(p, lab, r):
        res = sa_local_search(prof, p, lab, sched, r)
        return res.params, res.labels, res.f

    lab = np.array([0, 1] * 4, dtype=np.int64)
    f0, p0 = prof(lab)
    a = vns_run(p0, lab, f0, spec, local, np.random.default_rng(5), k_max=4)
    b = vns_run(p0, lab, f0, spec, local, np.random.default_rng(5), k_max=4)
    assert np.all(np.diff(a.trace) < 0)
    assert a.f <= f0
    assert a.trace == b.trace and np.array_equal(a.labels, b.labels)


# ------------------------------------------------------------ pipeline

FAST = SearchConfig(n_starts=2, k_max=3, sa=SaSchedule(tl_per_unit=10), seed=3)


def test_pipeline_recovers_noiseless_groups():
    d, truth = grouped_panel(np.random.default_rng(11), sizes=(10, 10), T=60, noise=0.0)
    spec = ModelSpec.uniform(1, 0, 2, 1, 2.0, 5.0)
    fit = vns_dca_pipeline(d, spec, FAST)
    assert rand_index(fit.labels, truth) == 1.0
    perm = [0, 1] if fit.labels[0] == 0 else [1, 0]
    np.testing.assert_allclose(fit.params.phi[perm], [-0.6, -0.3], atol=1e-4)
    np.testing.assert_allclose(fit.params.theta[perm, 0], [1.0, -2.0], atol=1e-4)


def test_single_group_is_pooled_least_squares():
    rng = np.random.default_rng(12)
    d = random_panel(rng, N=6, T=50)
    spec = ModelSpec.uniform(2, 1, 1, 1, 5.0, 50.0)
    cp = concentrate(d, spec)
    fit = vns_dca_pipeline(d, spec, FAST)
    X = np.column_stack([cp.B.mean(axis=0), cp.C[:, :, 0].mean(axis=0)])
    coef = np.linalg.lstsq(X, cp.A, rcond=None)[0]
    assert fit.params.phi[0] == pytest.approx(coef[0], abs=1e-8)
    assert fit.params.theta[0, 0] == pytest.approx(-coef[1] / coef[0], rel=1e-8)


def test_pipeline_is_reproducible(small_problem):
    d, spec, _ = small_problem
    a = vns_dca_pipeline(d, spec, FAST)
    b = vns_dca_pipeline(d, spec, FAST)
    assert a.to_dict() == b.to_dict()
    assert a.trace == b.trace


def test_pipeline_permutation_equivariance(small_problem):
    """Relabelling the start does not change the objective attained."""
    d, spec, cp = small_problem
    prof = LabelProfiler(cp, spec)
    lab = np.array([0, 1, 1, 0, 1, 0, 0, 1], dtype=np.int64)
    f, p = prof(lab)
    f2, p2 = prof(1 - lab)
    assert f == pytest.approx(f2, rel=1e-12)
    np.testing.assert_allclose(p.phi, p2.phi[::-1])


def test_group_mode_needs_raw_panel(small_problem):
    d, spec, cp = small_problem
    with pytest.raises(ValueError):
        vns_dca_pipeline(cp, spec, SearchConfig(nuisance="group"))
    fit = vns_dca_pipeline(d, spec, SearchConfig(n_starts=1, k_max=2, sa=SaSchedule(tl_per_unit=5),
                                                 nuisance="group"))
    assert fit.diagnostics["nuisance"] == "group"
    assert fit.diagnostics["method"] == "vns_dca"
