import itertools
import json
import math

import numpy as np
import pytest

from grpecm.errors import EmptyGroup
from grpecm.estimator import (
    assemble_fit,
    estimate_known_groups,
    ic,
    ic_table,
    known_group_ols,
    omega_value,
    refit_labels,
    select_groups,
    standard_errors,
)
from grpecm.likelihood import GroupMatrix, composite_errors, concentrate, ssce
from grpecm.model import EcmParams, ModelSpec, PanelDataset
from grpecm.search import SaSchedule, SearchConfig

from conftest import grouped_panel, random_panel


def _stationary_panel(rng, sizes, phi, theta, T, noise=0.5, mu=0.2):
    ys, xs, labels = [], [], []
    for g, n in enumerate(sizes):
        x = np.zeros((n, T))
        for t in range(1, T):
            x[:, t] = 0.5 * x[:, t - 1] + rng.standard_normal(n)
        y = np.zeros((n, T))
        for t in range(1, T):
            y[:, t] = y[:, t - 1] + phi[g] * (y[:, t - 1] - theta[g] * x[:, t]) + mu \
                + noise * rng.standard_normal(n)
        ys.append(y)
        xs.append(x)
        labels += [g] * n
    return PanelDataset(np.vstack(ys), np.vstack(xs)[:, :, None]), np.array(labels)


def test_noiseless_known_groups_exact():
    d, labels = grouped_panel(np.random.default_rng(0), sizes=(4, 6), noise=0.0)
    spec = ModelSpec.uniform(1, 0, 2, 1)
    fit = estimate_known_groups(d, spec, labels)
    np.testing.assert_allclose(fit.params.phi, [-0.6, -0.3], atol=1e-8)
    np.testing.assert_allclose(fit.params.theta[:, 0], [1.0, -2.0], atol=1e-8)
    assert fit.params.mu_star == pytest.approx(0.1, abs=1e-8)
    assert fit.ssce < 1e-16


def test_single_group_textbook_regression():
    rng = np.random.default_rng(1)
    d = random_panel(rng, N=5, T=60)
    spec = ModelSpec.uniform(1, 0, 1, 1)
    fit = estimate_known_groups(d, spec, np.zeros(5, dtype=int))
    ybar, xbar = d.y.mean(axis=0), d.x[:, :, 0].mean(axis=0)
    # the window starts at the third period: max(p, q) + 1 periods are consumed
    X = np.column_stack([ybar[1:-1], xbar[2:], np.ones(58)])
    coef = np.linalg.lstsq(X, np.diff(ybar)[1:], rcond=None)[0]
    assert fit.params.phi[0] == pytest.approx(coef[0], rel=1e-9)
    assert fit.params.theta[0, 0] == pytest.approx(-coef[1] / coef[0], rel=1e-9)
    assert fit.params.mu_star == pytest.approx(coef[2], rel=1e-8)


def test_residuals_orthogonal_to_regressors():
    rng = np.random.default_rng(2)
    d = random_panel(rng, N=9, T=50, d_x=2)
    spec = ModelSpec.uniform(2, 1, 3, 2)
    labels = np.arange(9) % 3
    cp = concentrate(d, spec)
    fit = estimate_known_groups(cp, spec, labels)
    e = composite_errors(cp, fit.params, fit.groups)
    u = fit.groups.u
    cols = [u @ cp.B / 9] + [np.einsum("gn,nl->gl", u, cp.C[:, :, k]) / 9 for k in range(2)]
    X = np.vstack(cols).T
    assert np.max(np.abs(X.T @ e)) <= 1e-8 * np.linalg.norm(X) * np.linalg.norm(e)


def test_empty_group_rejected():
    d = random_panel(np.random.default_rng(3), N=4, T=20)
    with pytest.raises(EmptyGroup):
        estimate_known_groups(d, ModelSpec.uniform(1, 0, 3, 1), np.array([0, 0, 1, 1]))
    with pytest.raises(ValueError):
        estimate_known_groups(d, ModelSpec.uniform(1, 0, 2, 1), GroupMatrix(np.full((2, 4), 0.5)))


def test_zero_speed_gives_unbounded_interval():
    rng = np.random.default_rng(4)
    d = random_panel(rng, N=6, T=40)
    spec = ModelSpec.uniform(1, 0, 2, 1)
    cp = concentrate(d, spec)
    labels = np.array([0, 1] * 3)
    params = known_group_ols(cp, labels, 2)
    params.phi[1] = 0.0
    ses, cis, unbounded = standard_errors(cp, params, labels, 1.0)
    assert unbounded.tolist() == [False, True]
    assert cis["theta"][0][1, 0] == -np.inf and cis["theta"][1][1, 0] == np.inf
    assert np.isfinite(ses["phi"]).all()


def test_standard_error_rate():
    """Doubling T roughly halves the variance of the speed estimates."""
    ratios = []
    for r in range(20):
        rng = np.random.default_rng(100 + r)
        se2 = []
        for T in (100, 200):
            d, lab = _stationary_panel(rng, (6, 6), (-0.5, -0.2), (1.0, -1.0), T)
            fit = estimate_known_groups(d, ModelSpec.uniform(1, 0, 2, 1), lab)
            se2.append(fit.std_errors["phi"] ** 2)
        ratios.append(se2[1] / se2[0])
    assert 0.35 < float(np.mean(ratios)) < 0.65


def test_confidence_interval_width():
    rng = np.random.default_rng(5)
    d, lab = _stationary_panel(rng, (6, 6), (-0.5, -0.2), (1.0, -1.0), 150)
    fit = estimate_known_groups(d, ModelSpec.uniform(1, 0, 2, 1), lab, alpha=0.1)
    lo, hi = fit.conf_intervals["phi"]
    np.testing.assert_allclose(hi - lo, 2 * 1.6448536269514722 * fit.std_errors["phi"], rtol=1e-9)


def test_ic_formula_and_omega():
    assert omega_value(None, 40) == math.log(40)
    assert omega_value("log", 40) == math.log(40)
    assert omega_value(("clog", 2.0), 40) == 2 * math.log(40)
    assert omega_value(1.5, 40) == 1.5
    rng = np.random.default_rng(6)
    d = random_panel(rng, N=6, T=30)
    spec = ModelSpec.uniform(1, 0, 2, 1)
    cp = concentrate(d, spec)
    p = EcmParams([[0.5], [0.5], [0.5]], [-0.3, -0.3, -0.3])
    lab2 = np.array([0, 1] * 3)
    lab3 = np.array([0, 1, 2] * 2)
    f2 = assemble_fit(cp, spec, EcmParams(p.theta[:2], p.phi[:2]), lab2, with_se=False)
    f3 = assemble_fit(cp, spec.with_groups(3), p, lab3, with_se=False)
    assert f2.ssce == pytest.approx(f3.ssce, rel=1e-12)
    assert ic(f3) - ic(f2) == pytest.approx(math.log(6), rel=1e-9)
    assert ic(f2, omega=0.0) == pytest.approx(f2.sigma2_hat)


def test_ic_table_ties_and_flags():
    d = random_panel(np.random.default_rng(7), N=6, T=30)
    spec = ModelSpec.uniform(1, 0, 2, 1)
    cp = concentrate(d, spec)
    p = EcmParams([[0.5], [0.5]], [-0.3, -0.3])
    f = assemble_fit(cp, spec, p, np.array([0, 1] * 3), omega=0.0, with_se=False)
    table = ic_table([f, f])
    assert [r.argmin for r in table.rows] == [True, False]
    assert table.best_G == 2  # G read from the fit, both rows are G=2


def test_select_single_group():
    d = random_panel(np.random.default_rng(8), N=6, T=30)
    cfg = SearchConfig(n_starts=1, k_max=2, sa=SaSchedule(tl_per_unit=5))
    table, best, fits = select_groups(d, ModelSpec.uniform(1, 0, 1, 1), 1, cfg)
    assert len(table.rows) == 1 and table.rows[0].argmin and best.G == 1


def test_permutation_invariance_of_ic_and_se():
    rng = np.random.default_rng(9)
    d, lab = _stationary_panel(rng, (5, 7), (-0.5, -0.2), (1.0, -1.0), 80)
    spec = ModelSpec.uniform(1, 0, 2, 1)
    a = estimate_known_groups(d, spec, lab)
    b = estimate_known_groups(d, spec, 1 - lab)
    assert a.ic_value == pytest.approx(b.ic_value, rel=1e-12)
    np.testing.assert_allclose(a.std_errors["phi"], b.std_errors["phi"][::-1], rtol=1e-9)
    np.testing.assert_allclose(a.std_errors["theta"], b.std_errors["theta"][::-1], rtol=1e-9)


def _enumerate_min(cp, spec, G):
    best = np.inf
    for bits in itertools.product(range(G), repeat=cp.N):
        lab = np.array(bits)
        if len(set(bits)) < G or bits[0] != 0:
            continue
        best = min(best, refit_labels(cp, spec.with_groups(G), lab)[0])
    return best


def test_nesting_and_oracle_bound():
    rng = np.random.default_rng(10)
    d, lab = grouped_panel(rng, sizes=(3, 3), noise=0.5, T=40)
    spec = ModelSpec.uniform(1, 0, 2, 1, 2.0, 10.0)
    cp = concentrate(d, spec)
    f1 = _enumerate_min(cp, spec, 1)
    f2 = _enumerate_min(cp, spec, 2)
    f3 = _enumerate_min(cp, spec, 3)
    assert f2 <= f1 + 1e-9 and f3 <= f2 + 1e-9
    known = refit_labels(cp, spec, lab)[0]
    assert f2 <= known + 1e-9
    # the box-constrained optimum at the true labels never beats unconstrained OLS there
    ols = known_group_ols(cp, lab, 2)
    assert ssce(cp, EcmParams(ols.theta, ols.phi), GroupMatrix.from_labels(lab, 2)) * cp.N ** 2 \
        <= known + cp.N ** 2 * np.mean(cp.A ** 2) + 1e-9


def test_group_nuisance_recovers_group_dynamics():
    """With group-varying short-run terms the group variant stays on target."""
    from grpecm.simgen import generate_panel, preset

    sim = generate_panel(preset("experiment3", T=400, seed=5))
    spec = ModelSpec.uniform(2, 1, 4, 1)
    fit = estimate_known_groups(sim.data, spec, sim.labels, nuisance="group")
    np.testing.assert_allclose(fit.params.phi, sim.truth.phi, atol=0.15)
    pooled = estimate_known_groups(sim.data, spec, sim.labels)
    assert np.abs(fit.params.phi - sim.truth.phi).max() < np.abs(pooled.params.phi - sim.truth.phi).max()
    assert fit.diagnostics["nuisance"] == "group"
    with pytest.raises(ValueError):
        estimate_known_groups(concentrate(sim.data, spec), spec, sim.labels, nuisance="group")


def test_fit_serialises():
    d, lab = grouped_panel(np.random.default_rng(11), sizes=(4, 4), noise=0.2)
    fit = estimate_known_groups(d, ModelSpec.uniform(1, 0, 2, 1), lab)
    blob = json.dumps(fit.to_dict())
    back = json.loads(blob)
    assert back["G"] == 2 and back["labels"] == lab.tolist()
    assert back["schema_version"] == 1
