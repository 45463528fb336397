"""Batch command-line front end: estimate, select, simulate, benchmark, randindex.

Exit codes: 0 success, 2 invalid input or configuration, 3 solver failure.
Result files are deterministic given inputs and seed; wall-clock timings go
to a separate ``runtime.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import RunConfig, config_hash, load_config, resolve
from .errors import GrpEcmError, ValidationError
from .metrics import benchmark_run, rand_index
from .model import read_labels_csv, read_panel_csv, write_labels_csv, write_panel_csv

log = logging.getLogger("grpecm")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (required for stochastic commands)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker processes for benchmark replications")
    common.add_argument("--out-dir", default=".", help="directory for result files")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p = _Parser(prog="grpecm", description="Grouped panel error-correction models with latent groups.")
    p.add_argument("--version", action="version", version=f"grpecm {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("estimate", parents=[common], help="fit one G (known or searched groups)")
    sub.add_parser("select", parents=[common], help="fit G = 1..g_max and choose by IC")
    sub.add_parser("simulate", parents=[common], help="write a simulated panel and its truth")
    sub.add_parser("benchmark", parents=[common], help="Monte Carlo bias/MSE report")
    ri = sub.add_parser("randindex", parents=[common], help="Rand index of two label files")
    ri.add_argument("labels_a")
    ri.add_argument("labels_b")
    return p


def _metadata(command: str, raw: dict, seed) -> dict:
    return {"tool": "grpecm", "version": __version__, "command": command,
            "config_hash": config_hash(raw), "seed": seed}


def _header_lines(meta: dict) -> list[str]:
    return [f"{k}: {meta[k]}" for k in sorted(meta)]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _require_seed(args, command: str) -> int:
    if args.seed is None:
        raise ValidationError(f"{command} is stochastic: --seed is required")
    return args.seed


def _block(cfg: RunConfig, name: str):
    blk = getattr(cfg, name)
    if blk is None:
        raise ValidationError(f"config needs a [{name}] block")
    return blk


def _omega(o):
    return tuple(o) if isinstance(o, (list, tuple)) else o


def _write_fit(out: Path, fit, meta: dict, unit_ids) -> None:
    _write_json(out / "fit.json", {"metadata": meta, "fit": fit.to_dict()})
    write_labels_csv(fit.labels, out / "labels.csv", unit_ids, _header_lines(meta))
    with (out / "trace.jsonl").open("w") as fh:
        for k, v in enumerate(fit.trace):
            fh.write(json.dumps({"step": k, "objective": float(v)}) + "\n")


def cmd_estimate(args, cfg: RunConfig, raw: dict, base: Path | None, out: Path) -> dict:
    from .estimator import estimate_known_groups
    from .search import vns_dca_pipeline

    blk = _block(cfg, "estimate")
    data = read_panel_csv(resolve(base, blk.panel))
    spec = cfg.model.to_spec(data.d_x)
    if blk.known_labels is not None:
        units, labels = read_labels_csv(resolve(base, blk.known_labels))
        if units != [str(u) for u in data.unit_ids]:
            raise ValidationError("known_labels units do not match the panel units")
        meta = _metadata("estimate", raw, args.seed)
        fit = estimate_known_groups(data, spec, labels, omega=_omega(blk.omega), alpha=blk.alpha,
                                    nuisance=blk.nuisance)
    else:
        seed = _require_seed(args, "estimate")
        meta = _metadata("estimate", raw, seed)
        fit = vns_dca_pipeline(data, spec, cfg.search.to_config(seed), _omega(blk.omega))
    _write_fit(out, fit, meta, data.unit_ids)
    return {"G": fit.G, "ic": fit.ic_value}


def cmd_select(args, cfg: RunConfig, raw: dict, base: Path | None, out: Path) -> dict:
    from .estimator import select_groups

    blk = _block(cfg, "select")
    seed = _require_seed(args, "select")
    meta = _metadata("select", raw, seed)
    data = read_panel_csv(resolve(base, blk.panel))
    spec = cfg.model.to_spec(data.d_x)
    table, best, _ = select_groups(data, spec, blk.g_max, cfg.search.to_config(seed), _omega(blk.omega))
    with (out / "ic_table.csv").open("w", newline="") as fh:
        for line in _header_lines(meta):
            fh.write(f"# {line}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["G", "ssce_term", "penalty_term", "ic", "argmin"])
        for r in table.rows:
            wr.writerow([r.G, repr(r.ssce_term), repr(r.penalty_term), repr(r.ic), int(r.argmin)])
    _write_fit(out, best, meta, data.unit_ids)
    return {"best_G": table.best_G}


def _dgp(blk, seed: int):
    from .simgen import DgpConfig, preset

    if (blk.preset is None) == (blk.dgp is None):
        raise ValidationError("give exactly one of 'preset' or 'dgp'")
    if blk.preset is not None:
        return preset(blk.preset, T=blk.T, seed=seed)
    return DgpConfig.from_dict({**blk.dgp, "T": blk.T, "seed": seed})


def cmd_simulate(args, cfg: RunConfig, raw: dict, base: Path | None, out: Path) -> dict:
    from .simgen import generate_panel

    blk = _block(cfg, "simulate")
    seed = _require_seed(args, "simulate")
    meta = _metadata("simulate", raw, seed)
    sim = generate_panel(_dgp(blk, seed))
    write_panel_csv(sim.data, out / "panel.csv", _header_lines(meta))
    write_labels_csv(sim.labels, out / "truth_labels.csv", sim.data.unit_ids, _header_lines(meta))
    _write_json(out / "truth.json", {"metadata": meta, "truth": sim.truth_dict()})
    return {"N": sim.data.n_units, "T": sim.data.n_periods}


def cmd_benchmark(args, cfg: RunConfig, raw: dict, base: Path | None, out: Path) -> dict:
    blk = _block(cfg, "benchmark")
    seed = _require_seed(args, "benchmark")
    meta = _metadata("benchmark", raw, seed)
    dgp = _dgp(blk, seed)
    spec = cfg.model.to_spec(1)
    if spec.G != dgp.G:
        raise ValidationError(f"model G={spec.G} but the design has {dgp.G} groups")
    search = cfg.search.to_config(seed) if blk.mode == "unknown" else None
    report, runtime = benchmark_run(dgp, spec, blk.n_reps, seed, blk.mode, search,
                                    checkpoint_dir=out / "checkpoints", workers=max(1, args.threads),
                                    nuisance=blk.nuisance, run_key=f"{meta['config_hash']}:{seed}")
    report.write(out / "report.json", out / "report.csv", meta)
    return {"n_reps": report.n_reps, "n_failed": report.n_failed, **runtime}


def cmd_randindex(args, cfg: RunConfig, raw: dict, base: Path | None, out: Path) -> dict:
    _, a = read_labels_csv(args.labels_a)
    _, b = read_labels_csv(args.labels_b)
    value = rand_index(a, b)
    print(repr(value))
    return {}


COMMANDS = {"estimate": cmd_estimate, "select": cmd_select, "simulate": cmd_simulate,
            "benchmark": cmd_benchmark, "randindex": cmd_randindex}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg, raw = load_config(args.config)
        base = Path(args.config).resolve().parent if args.config else None
        out = Path(args.out_dir)
        if args.command != "randindex":
            out.mkdir(parents=True, exist_ok=True)
        info = COMMANDS[args.command](args, cfg, raw, base, out)
    except ValidationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except GrpEcmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if args.command != "randindex":
        _write_json(out / "runtime.json", {"seconds": time.perf_counter() - t0, **info})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
