import json
import math
from pathlib import Path

import numpy as np
import pytest

from dagmiqp import moralize
from dagmiqp.cli import (CSV_VERSION, EmptyInput, ExperimentConfig, ResultRow, aggregate,
                         cmd_compare_astar, cmd_generate, cmd_report, cmd_solve, main,
                         read_rows, write_rows)
from dagmiqp.graph import read_superstructure, read_weighted_dag
from dagmiqp.sem import read_dataset


@pytest.fixture
def cfg(tmp_path):
    return ExperimentConfig(m_list=(6,), n_list=(100, 200), seeds=(0, 1), lambda_list=(0.1,),
                            output_dir=str(tmp_path / "out"), time_limit_factor=5.0)


def test_generate_layout(cfg):
    dirs = cmd_generate(cfg)
    assert len(dirs) == 2
    for d in dirs:
        assert sorted(p.name for p in d.iterdir()) == [
            "dag.txt", "data_n100.txt", "data_n200.txt", "moral.txt"]
        truth = read_weighted_dag(d / "dag.txt")
        assert read_superstructure(d / "moral.txt") == moralize(truth.digraph)
        small, big = read_dataset(d / "data_n100.txt"), read_dataset(d / "data_n200.txt")
        assert np.array_equal(small.X, big.X[:100])
        lines100 = (d / "data_n100.txt").read_text().splitlines()[1:]
        lines200 = (d / "data_n200.txt").read_text().splitlines()[1:101]
        assert lines100 == lines200


def test_ten_seeds_give_ten_instances(tmp_path):
    c = ExperimentConfig(m_list=(10,), n_list=(1000,), output_dir=str(tmp_path))
    dirs = cmd_generate(c)
    assert len(dirs) == 10
    assert sum(1 for d in dirs for p in d.glob("data_n*.txt")) == 10


def test_solve_row_and_determinism(cfg):
    inst = cmd_generate(cfg)[0]
    a = cmd_solve(inst, "LN", "L0", 0.1, cfg)
    assert a.status == "Optimal" and a.gap <= 1e-3
    assert a.m == 6 and a.n == 200 and a.seed == 0
    cmd_generate(cfg)
    b = cmd_solve(inst, "LN", "L0", 0.1, cfg)
    assert a.stable() == b.stable()
    traces = list((Path(cfg.output_dir) / "traces").glob("*.csv"))
    assert traces


def test_missing_instance_is_an_input_error(cfg, tmp_path):
    with pytest.raises(FileNotFoundError):
        cmd_solve(tmp_path / "missing_s3", "LN", "L0", 0.1, cfg)
    assert main(["solve", "--instance", str(tmp_path / "missing_s3"),
                 "--output-dir", str(tmp_path)]) == 1


def test_time_limit_row(tmp_path):
    c = ExperimentConfig(m_list=(9,), n_list=(100,), seeds=(2,), output_dir=str(tmp_path),
                         superstructure_mode="complete", time_limit_factor=0.01, gap_tol=0.0)
    inst = cmd_generate(c)[0]
    row = cmd_solve(inst, "TO", "L0", 0.1, c)
    assert row.status in ("TimeLimit", "GapReached")
    assert math.isfinite(row.ub) and math.isfinite(row.lb)


def test_compare_astar_agrees(cfg):
    inst = cmd_generate(cfg)[1]
    for lam in (0.0, 0.1):
        ln, star = cmd_compare_astar(inst, lam, cfg)
        assert star.status == "Optimal" and ln.status == "Optimal"
        assert abs(ln.ub - star.ub) <= 1e-4 * max(1.0, abs(star.ub))


def row(seed, shd, form="LN"):
    return ResultRow(seed, 10, 1000, 0.1, "L0", form, "moral", 1.0 + seed, 1.0, 0.0, 0.5,
                     0.9, 0.01, 7, float(shd), 1.0, 0.0, "Optimal")


def test_csv_roundtrip(tmp_path):
    rows = [row(s, s % 3) for s in range(4)]
    write_rows(rows, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == f"# {CSV_VERSION}"
    assert read_rows(tmp_path / "r.csv") == rows


def test_aggregate_means():
    assert aggregate([row(0, 2)])[0]["shd"] == 2.0
    rows = [row(s, s * 0.5) for s in range(10)]
    rec, = aggregate(rows)
    total = 0.0
    for r in rows:
        total += r.shd
    assert rec["count"] == 10
    assert rec["shd"] == pytest.approx(total / 10)
    assert rec["ub"] == pytest.approx(sum(1.0 + s for s in range(10)) / 10)


def test_report_outputs(tmp_path):
    write_rows([row(0, 1), row(1, 3), row(0, 2, "TO")], tmp_path / "results" / "a.csv")
    out = cmd_report(tmp_path)
    text = (out / "aggregate.csv").read_text().splitlines()
    assert len(text) == 4
    for metric in ("gap", "shd", "nodes", "time_s"):
        assert (out / f"{metric}.svg").read_text().startswith("<svg")
    with pytest.raises(EmptyInput):
        cmd_report(tmp_path / "nothing")


def test_config_files(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"m_list": [4], "seeds": [1, 2]}))
    c = ExperimentConfig.load(tmp_path / "c.json")
    assert c.m_list == (4,) and c.seeds == (1, 2)
    (tmp_path / "c.ini").write_text("[experiment]\nm_list = [5]\npenalty = L1\n")
    c = ExperimentConfig.load(tmp_path / "c.ini")
    assert c.m_list == (5,) and c.penalty == "L1"
    (tmp_path / "bad.json").write_text(json.dumps({"nope": 1}))
    with pytest.raises(ValueError):
        ExperimentConfig.load(tmp_path / "bad.json")
    with pytest.raises(ValueError):
        ExperimentConfig(formulations=("XX",))
    assert ExperimentConfig().time_limit(10) == 500.0


def test_main_end_to_end(tmp_path, capsys):
    out = str(tmp_path / "o")
    args = ["--m", "5", "--n", "100", "--seeds", "0", "--output-dir", out]
    assert main(["generate", *args]) == 0
    assert main(["solve", *args, "--formulations", "LN", "CP"]) == 0
    rows = read_rows(Path(out) / "results" / "solve.csv")
    assert {r.formulation for r in rows} == {"LN", "CP"}
    assert rows[0].ub == pytest.approx(rows[1].ub, rel=1e-3)
    assert main(["compare-astar", *args]) == 0
    assert main(["report", out]) == 0
    assert main(["report", str(tmp_path / "void")]) == 1
    assert main(["solve", *args, "--time-limit-factor", "1e-6", "--gap-tol", "0",
                 "--mode", "complete"]) in (0, 2)
