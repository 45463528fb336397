import json
from pathlib import Path

import pytest

from grpecm.cli import main

SMALL_DGP = """
[simulate]
T = 40
[simulate.dgp]
group_sizes = [4, 5, 5, 6]
lam = [-0.5, -0.05, 0.05, 0.5]
"""

SEARCH = """
[search]
n_starts = 1
k_max = 2
[search.sa]
tl_per_unit = 3
"""


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _simulate(tmp_path, seed=1) -> Path:
    cfg = _write(tmp_path / "sim.toml", SMALL_DGP)
    out = tmp_path / f"sim{seed}"
    assert main(["simulate", "--config", str(cfg), "--seed", str(seed), "--out-dir", str(out)]) == 0
    return out


def test_simulate_writes_panel_and_truth(tmp_path):
    out = _simulate(tmp_path)
    truth = json.loads((out / "truth.json").read_text())
    assert truth["metadata"]["seed"] == 1
    header = [ln for ln in (out / "panel.csv").read_text().splitlines() if not ln.startswith("#")][0]
    assert header.startswith("unit,time,y")
    assert (out / "runtime.json").exists()


def test_estimate_known_and_searched(tmp_path):
    sim = _simulate(tmp_path)
    cfg = _write(tmp_path / "est.toml", f"""
[estimate]
panel = "{sim / 'panel.csv'}"
known_labels = "{sim / 'truth_labels.csv'}"
nuisance = "group"
""")
    out = tmp_path / "known"
    assert main(["estimate", "--config", str(cfg), "--out-dir", str(out)]) == 0
    fit = json.loads((out / "fit.json").read_text())["fit"]
    assert fit["G"] == 4 and len(fit["labels"]) == 20
    cfg2 = _write(tmp_path / "est2.toml", SEARCH + f"""
[estimate]
panel = "{sim / 'panel.csv'}"
""")
    assert main(["estimate", "--config", str(cfg2), "--out-dir", str(tmp_path / "s")]) == 2
    assert main(["estimate", "--config", str(cfg2), "--seed", "4", "--out-dir", str(tmp_path / "s")]) == 0
    trace = (tmp_path / "s" / "trace.jsonl").read_text().splitlines()
    assert json.loads(trace[0])["step"] == 0


def test_select_writes_ic_table(tmp_path):
    sim = _simulate(tmp_path)
    cfg = _write(tmp_path / "sel.toml", SEARCH + f"""
[model]
G = 2
[select]
panel = "{sim / 'panel.csv'}"
g_max = 2
""")
    out = tmp_path / "sel"
    assert main(["select", "--config", str(cfg), "--seed", "2", "--out-dir", str(out)]) == 0
    rows = [ln for ln in (out / "ic_table.csv").read_text().splitlines() if not ln.startswith("#")]
    assert rows[0] == "G,ssce_term,penalty_term,ic,argmin"
    assert len(rows) == 3 and sum(int(r.split(",")[-1]) for r in rows[1:]) == 1


def test_benchmark_report(tmp_path):
    cfg = _write(tmp_path / "b.toml", """
[benchmark]
T = 40
n_reps = 2
[benchmark.dgp]
group_sizes = [4, 4, 4, 4]
lam = [-0.5, -0.05, 0.05, 0.5]
""")
    out = tmp_path / "b"
    assert main(["benchmark", "--config", str(cfg), "--seed", "3", "--threads", "1", "--out-dir", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())["report"]
    assert rep["n_reps"] == 2
    assert len(list((out / "checkpoints").glob("rep_*.json"))) == 2


def test_randindex_prints_value(tmp_path, capsys):
    a = _write(tmp_path / "a.csv", "unit,label\nu1,0\nu2,0\nu3,1\nu4,1\n")
    b = _write(tmp_path / "b.csv", "unit,label\nu1,0\nu2,1\nu3,0\nu4,1\n")
    assert main(["randindex", str(a), str(b)]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1 / 3)


def test_invalid_input_exit_codes(tmp_path):
    cfg = _write(tmp_path / "sim.toml", SMALL_DGP)
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2
    bad = _write(tmp_path / "bad.toml", "[search]\ncolour = 1\n")
    assert main(["simulate", "--config", str(bad), "--seed", "1"]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.toml"), "--seed", "1"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    short = _write(tmp_path / "a.csv", "unit,label\nu1,0\n")
    assert main(["randindex", str(short), str(_write(tmp_path / "b.csv", "unit,label\nu1,0\nu2,1\n"))]) == 2


def test_solver_failure_exit_code(tmp_path):
    cfg = _write(tmp_path / "x.toml", SMALL_DGP + "explosive_limit = 0.001\n")
    assert main(["simulate", "--config", str(cfg), "--seed", "1", "--out-dir", str(tmp_path / "x")]) == 3


def test_outputs_are_byte_identical(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = _simulate(tmp_path / "a", seed=7)
    b = _simulate(tmp_path / "b", seed=7)
    for name in ("panel.csv", "truth_labels.csv", "truth.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
