import itertools
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grpecm.errors import LengthMismatch, ValidationError
from grpecm.likelihood import GroupMatrix
from grpecm.metrics import (
    ReplicationResult,
    benchmark_run,
    best_matching,
    matching_distance,
    rand_index,
    run_replication,
    summarize,
)
from grpecm.model import ModelSpec
from grpecm.search import SaSchedule, SearchConfig
from grpecm.simgen import preset


def _pair_count(a, b):
    n = len(a)
    agree = sum((a[i] == a[j]) == (b[i] == b[j]) for i, j in itertools.combinations(range(n), 2))
    return agree / (n * (n - 1) / 2)


def test_rand_index_examples():
    assert rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(1 / 3)
    assert rand_index([0, 0, 1, 1], [5, 5, 2, 2]) == 1.0
    with pytest.raises(LengthMismatch):
        rand_index([0, 1], [0, 1, 1])
    with pytest.raises(ValidationError):
        rand_index([0], [0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 4)), min_size=2, max_size=25))
def test_rand_index_matches_pair_counting(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    ri = rand_index(a, b)
    assert ri == pytest.approx(_pair_count(a, b), abs=1e-12)
    assert ri == pytest.approx(rand_index(b, a), abs=1e-12)
    assert 0.0 <= ri <= 1.0


def test_one_misassigned_unit():
    truth = np.array([0] * 5 + [1] * 5)
    est = truth.copy()
    est[0] = 1
    # the estimate uses swapped label names too
    d = matching_distance(GroupMatrix.from_labels(1 - est, 2), GroupMatrix.from_labels(truth, 2))
    assert d == pytest.approx(2 / 10)


def _brute_matching(uh, uz):
    G, N = uh.shape
    return min(np.abs(uh[list(p)] - uz).sum() / N for p in itertools.permutations(range(G)))


def test_hungarian_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(30):
        G, N = rng.integers(2, 6), rng.integers(3, 12)
        uh = rng.dirichlet(np.ones(G), size=N).T
        uz = GroupMatrix.from_labels(rng.integers(0, G, N), G).u
        perm, dist = best_matching(uh, uz)
        assert dist == pytest.approx(_brute_matching(uh, uz), abs=1e-12)
        assert dist == pytest.approx(np.abs(uh[perm] - uz).sum() / N, abs=1e-12)


def test_matching_pads_unequal_group_counts():
    a = GroupMatrix.from_labels(np.array([0, 0, 1, 1]), 2)
    b = GroupMatrix.from_labels(np.array([0, 1, 2, 2]), 3)
    assert matching_distance(a, b) == pytest.approx(matching_distance(b, a))
    assert matching_distance(a, a) == 0.0


def _result(rep, phi, theta, ok=True):
    return ReplicationResult(rep, ok, list(phi), list(theta), rand_index=0.5 + rep / 10)


def test_summarize_oracle():
    phis = [[-0.4, -0.2], [-0.6, -0.1], [-0.5, -0.3]]
    thetas = [[1.0, 2.0], [1.2, 2.1], [0.8, 1.9]]
    res = [_result(r, p, t) for r, (p, t) in enumerate(zip(phis, thetas))]
    res.append(ReplicationResult(3, False, error="ExplosivePath: x"))
    rep = summarize(res[::-1], [-0.5, -0.2], [1.0, 2.0])
    dp = np.array(phis) - [-0.5, -0.2]
    np.testing.assert_allclose(rep.bias_phi, dp.mean(0), atol=1e-15)
    np.testing.assert_allclose(rep.mse_phi, (dp ** 2).mean(0), atol=1e-15)
    np.testing.assert_allclose(rep.mcse_phi, dp.std(0, ddof=1) / np.sqrt(3), atol=1e-15)
    assert rep.n_reps == 3 and rep.n_failed == 1
    assert rep.rand_index_mean == pytest.approx(0.6)


def test_report_files(tmp_path):
    res = [_result(r, [-0.5, -0.2], [1.0, 2.0]) for r in range(2)]
    rep = summarize(res, [-0.5, -0.2], [1.0, 2.0])
    rep.write(tmp_path / "r.json", tmp_path / "r.csv", {"seed": 1})
    body = json.loads((tmp_path / "r.json").read_text())
    assert body["metadata"] == {"seed": 1} and body["report"]["n_reps"] == 2
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "# seed: 1"
    assert lines[1].startswith("group,phi,bias_phi")
    assert len(lines) == 4


SMALL = replace(preset("experiment3", T=40), group_sizes=(4, 4, 4, 4))
SPEC = ModelSpec.uniform(2, 1, 4, 1)


def test_replication_is_seeded():
    a = run_replication(SMALL, SPEC, 3, 11)
    b = run_replication(SMALL, SPEC, 3, 11)
    c = run_replication(SMALL, SPEC, 4, 11)
    assert a.ok and a == b and a.phi_hat != c.phi_hat


def test_unknown_mode_with_group_search():
    cfg = SearchConfig(n_starts=1, k_max=2, sa=SaSchedule(tl_per_unit=3), nuisance="group")
    r = run_replication(SMALL, SPEC, 0, 5, mode="unknown", search=cfg)
    assert r.ok and 0.0 <= r.rand_index <= 1.0 and r.matching_distance is not None


def test_failed_replications_are_counted():
    cfg = replace(SMALL, explosive_limit=1e-3)
    rep, _ = benchmark_run(cfg, SPEC, n_reps=2, seed=0)
    assert rep.n_failed == 2 and rep.n_reps == 0


def test_checkpoint_resume(tmp_path):
    full, _ = benchmark_run(SMALL, SPEC, n_reps=3, seed=2)
    ck = tmp_path / "ck"
    benchmark_run(SMALL, SPEC, n_reps=2, seed=2, checkpoint_dir=ck, run_key="k")
    resumed, runtime = benchmark_run(SMALL, SPEC, n_reps=3, seed=2, checkpoint_dir=ck, run_key="k")
    assert runtime["resumed"] == 2 and runtime["computed"] == 1
    assert resumed == full
    with pytest.raises(ValidationError):
        benchmark_run(SMALL, SPEC, n_reps=3, seed=2, checkpoint_dir=ck, run_key="other")
