"""Clustering agreement, label matching and Monte Carlo summaries."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import LengthMismatch, ValidationError
from .likelihood import GroupMatrix, composite_errors

log = logging.getLogger(__name__)


def rand_index(labels_a, labels_b) -> float:
    """Share of unordered unit pairs on which two labelings agree."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"label vectors have lengths {a.size} and {b.size}")
    n = a.size
    if n < 2:
        raise ValidationError("need at least two units")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    pairs = n * (n - 1) / 2
    both = np.sum(table * (table - 1)) / 2
    in_a = np.sum(table.sum(axis=1) * (table.sum(axis=1) - 1)) / 2
    in_b = np.sum(table.sum(axis=0) * (table.sum(axis=0) - 1)) / 2
    # agreements: together in both, or apart in both
    return float((pairs + 2 * both - in_a - in_b) / pairs)


def _membership(u) -> np.ndarray:
    return u.u if isinstance(u, GroupMatrix) else np.asarray(u, dtype=float)


def best_matching(u_hat, u0) -> tuple[np.ndarray, float]:
    """Row permutation of ``u_hat`` closest to ``u0`` in entrywise L1 distance.

    Returns (perm, distance) with ``u_hat[perm]`` matched to ``u0`` row by
    row and distance = (1/N) sum |u_hat[perm] - u0|. The cost separates over
    matched row pairs, so a linear assignment gives the exact optimum.
    """
    uh, uz = _membership(u_hat), _membership(u0)
    if uh.shape[1] != uz.shape[1]:
        raise LengthMismatch("membership matrices cover different numbers of units")
    G = max(uh.shape[0], uz.shape[0])
    uh = np.vstack([uh, np.zeros((G - uh.shape[0], uh.shape[1]))])
    uz = np.vstack([uz, np.zeros((G - uz.shape[0], uz.shape[1]))])
    cost = np.abs(uh[:, None, :] - uz[None, :, :]).sum(axis=2)  # cost[a, b]
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(G, dtype=int)
    perm[cols] = rows
    return perm, float(cost[rows, cols].sum() / uh.shape[1])


def matching_distance(u_hat, u0) -> float:
    """Label-permutation-minimised disagreement between two memberships."""
    _, d1 = best_matching(u_hat, u0)
    _, d2 = best_matching(u0, u_hat)
    return max(d1, d2)


def temporal_average_error(cp, params, u) -> float:
    """N times the time average of the composite errors."""
    e = composite_errors(cp, params, u if isinstance(u, GroupMatrix) else GroupMatrix(u, check=False))
    return float(cp.N * np.mean(e))


@dataclass
class ReplicationResult:
    rep: int
    ok: bool
    phi_hat: list = field(default_factory=list)
    theta_hat: list = field(default_factory=list)
    rand_index: float | None = None
    matching_distance: float | None = None
    temporal_average_error: float | None = None
    objective: float | None = None
    error: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ReplicationResult":
        return cls(**d)


@dataclass
class BenchmarkReport:
    """Bias, MSE and Monte Carlo standard errors per group parameter."""

    n_reps: int
    n_failed: int
    phi_true: list
    theta_true: list
    bias_phi: list
    mse_phi: list
    mcse_phi: list
    bias_theta: list
    mse_theta: list
    mcse_theta: list
    rand_index_mean: float | None
    matching_distance_mean: float | None
    temporal_average_error: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def table_rows(self) -> list[dict]:
        """One row per group in a layout of bias and MSE columns."""
        rows = []
        for g in range(len(self.phi_true)):
            rows.append({
                "group": g + 1,
                "phi": self.phi_true[g], "bias_phi": self.bias_phi[g],
                "mse_phi": self.mse_phi[g], "mcse_phi": self.mcse_phi[g],
                "theta": self.theta_true[g], "bias_theta": self.bias_theta[g],
                "mse_theta": self.mse_theta[g], "mcse_theta": self.mcse_theta[g],
                "rand_index": self.rand_index_mean,
                "matching_distance": self.matching_distance_mean,
                "temp_ave_error": self.temporal_average_error,
                "n_reps": self.n_reps, "n_failed": self.n_failed,
            })
        return rows

    def write(self, json_path: str | Path, csv_path: str | Path, metadata: dict | None = None) -> None:
        body = {"metadata": metadata or {}, "report": self.to_dict()}
        Path(json_path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        rows = self.table_rows()
        with Path(csv_path).open("w", newline="") as fh:
            for k, v in sorted((metadata or {}).items()):
                fh.write(f"# {k}: {v}\n")
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            wr.writeheader()
            wr.writerows(rows)


def summarize(results: list[ReplicationResult], phi_true, theta_true) -> BenchmarkReport:
    """Aggregate replications in index order; failed ones are counted and skipped."""
    results = sorted(results, key=lambda r: r.rep)
    ok = [r for r in results if r.ok]
    phi_true = np.asarray(phi_true, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float).reshape(phi_true.size)
    if ok:
        ph = np.array([r.phi_hat for r in ok])
        th = np.array([r.theta_hat for r in ok], dtype=float).reshape(len(ok), -1)
        n = len(ok)
        dp, dt = ph - phi_true, th - theta_true
        sd = lambda a: a.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(a.shape[1], np.nan)
        bias_p, mse_p, mc_p = dp.mean(0), (dp ** 2).mean(0), sd(dp)
        bias_t, mse_t, mc_t = dt.mean(0), (dt ** 2).mean(0), sd(dt)
    else:
        nanv = np.full(phi_true.size, np.nan)
        bias_p = mse_p = mc_p = bias_t = mse_t = mc_t = nanv

    def mean_of(attr):
        vals = [getattr(r, attr) for r in ok if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    return BenchmarkReport(len(ok), len(results) - len(ok), phi_true.tolist(), theta_true.tolist(),
                           bias_p.tolist(), mse_p.tolist(), mc_p.tolist(),
                           bias_t.tolist(), mse_t.tolist(), mc_t.tolist(),
                           mean_of("rand_index"), mean_of("matching_distance"),
                           mean_of("temporal_average_error"))


def run_replication(cfg, spec, rep: int, seed: int, mode: str = "known", search=None,
                    nuisance: str = "pooled") -> ReplicationResult:
    """Simulate one panel and score the estimate against the truth.

    ``mode`` is ``known`` (true groups supplied) or ``unknown`` (full search).
    Estimated groups are matched to true groups before recording parameters.
    ``nuisance`` picks pooled or group-specific short-run terms for the
    known-group estimator.
    """
    from dataclasses import replace

    from .errors import GrpEcmError
    from .estimator import estimate_known_groups
    from .likelihood import concentrate
    from .search import vns_dca_pipeline
    from .simgen import generate_panel

    ss = np.random.SeedSequence([seed, rep])
    rng = np.random.default_rng(ss)
    try:
        sim = generate_panel(replace(cfg, seed=int(ss.generate_state(1)[0])), rng)
        cp = concentrate(sim.data, spec)
        if mode == "known":
            fit = estimate_known_groups(sim.data if nuisance == "group" else cp, spec, sim.u0,
                                        nuisance=nuisance)
        elif mode == "unknown":
            if search is not None:
                search = replace(search, seed=int(ss.generate_state(2)[1]))
            raw = search is not None and search.nuisance == "group"
            fit = vns_dca_pipeline(sim.data if raw else cp, spec, search)
        else:
            raise ValidationError(f"unknown benchmark mode {mode!r}")
        perm, _ = best_matching(fit.groups, sim.u0)
        params = fit.params.permuted(perm)
        u_hat = fit.groups
        res = ReplicationResult(
            rep, True, params.phi.tolist(), params.theta[:, 0].tolist(),
            rand_index=rand_index(fit.labels, sim.labels) if mode == "unknown" else None,
            matching_distance=matching_distance(u_hat, sim.u0) if mode == "unknown" else None,
            temporal_average_error=temporal_average_error(cp, fit.params, u_hat),
            objective=float(fit.ssce))
    except GrpEcmError as exc:
        log.warning("replication %d failed: %s", rep, exc)
        res = ReplicationResult(rep, False, error=f"{type(exc).__name__}: {exc}")
    return res


def benchmark_run(cfg, spec, n_reps: int = 50, seed: int = 0, mode: str = "known", search=None,
                  checkpoint_dir: str | Path | None = None, workers: int = 1,
                  nuisance: str = "pooled", run_key: str = "") -> tuple[BenchmarkReport, dict]:
    """Monte Carlo replications with optional per-replication checkpoint files.

    Existing checkpoint files are reused, so an interrupted run resumes; a
    checkpoint directory written under a different ``run_key`` is refused.
    Returns the report and a runtime summary kept apart from it so that
    reports of identical runs are identical.
    """
    import time

    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
        manifest = ckpt / "manifest.json"
        if manifest.exists():
            old = json.loads(manifest.read_text()).get("run_key")
            if old != run_key:
                raise ValidationError(f"checkpoint directory {ckpt} belongs to another run ({old})")
        else:
            manifest.write_text(json.dumps({"run_key": run_key}) + "\n")
    results: dict[int, ReplicationResult] = {}
    todo = []
    for rep in range(n_reps):
        f = ckpt / f"rep_{rep:05d}.json" if ckpt is not None else None
        if f is not None and f.exists():
            results[rep] = ReplicationResult.from_dict(json.loads(f.read_text()))
        else:
            todo.append(rep)
    t0 = time.perf_counter()

    def done(r: ReplicationResult) -> None:
        results[r.rep] = r
        if ckpt is not None:
            tmp = ckpt / f"rep_{r.rep:05d}.json.tmp"
            tmp.write_text(json.dumps(r.to_dict(), sort_keys=True))
            tmp.replace(ckpt / f"rep_{r.rep:05d}.json")

    if workers > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            futs = [ex.submit(run_replication, cfg, spec, rep, seed, mode, search, nuisance)
                    for rep in todo]
            for fu in futs:
                done(fu.result())
    else:
        for rep in todo:
            done(run_replication(cfg, spec, rep, seed, mode, search, nuisance))
    elapsed = time.perf_counter() - t0
    runtime = {"seconds": elapsed, "computed": len(todo), "resumed": n_reps - len(todo)}
    return summarize(list(results.values()), cfg.phi, cfg.theta), runtime
