"""Experiment harness: generate instances, solve them, compare with A*, report.

Layout under ``output_dir``::

    instances/m{m}_s{seed}/data_n{n}.txt, dag.txt, moral.txt
    results/*.csv          one ResultRow per line
    traces/*.csv           branch-and-bound node logs
    report/aggregate.csv, report/*.svg
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .astar import FrontierOverflow, astar_lasso
from .bnb import OPTIMAL_STATUS, TIME_LIMIT, BnbConfig, solve
from .graph import (EmptyTruth, complete_superstructure, moralize, read_superstructure,
                    read_weighted_dag, shd, tpr_fpr, write_superstructure, write_weighted_dag)
from .model import KINDS, PENALTIES, FormulationSpec, build, estimate_big_m
from .sem import assign_weights, random_dag, read_dataset, sample_sem, write_dataset

CSV_VERSION = "dagmiqp-results v1"
MODES = ("moral", "complete", "file")


class EmptyInput(ValueError):
    pass


class ObjectiveMismatch(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    m_list: Sequence[int] = (10,)
    n_list: Sequence[int] = (1000,)
    d: float = 2.0
    lambda_list: Sequence[float] = (0.1,)
    penalty: str = "L0"
    formulations: Sequence[str] = ("LN",)
    superstructure_mode: str = "moral"
    seeds: Sequence[int] = tuple(range(10))
    gap_tol: float = 1e-3
    time_limit_factor: float = 50.0
    output_dir: str = "results"
    superstructure_file: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        for name in ("m_list", "n_list", "lambda_list", "formulations", "seeds"):
            val = tuple(getattr(self, name))
            if not val:
                raise ValueError(f"{name} must be nonempty")
            setattr(self, name, val)
        if self.penalty not in PENALTIES:
            raise ValueError(f"unknown penalty {self.penalty!r}")
        bad = [f for f in self.formulations if f not in KINDS]
        if bad:
            raise ValueError(f"unknown formulations {bad}")
        if self.superstructure_mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.superstructure_mode == "file" and not self.superstructure_file:
            raise ValueError("file mode needs superstructure_file")
        if self.time_limit_factor <= 0 or self.gap_tol < 0:
            raise ValueError("need time_limit_factor > 0 and gap_tol >= 0")

    def time_limit(self, m: int) -> float:
        return self.time_limit_factor * m

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a JSON file, or an INI file with an [experiment] section."""
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            cp = configparser.ConfigParser()
            cp.read_string(text)
            raw = {k: _parse_ini_value(v) for k, v in cp["experiment"].items()}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)


def _parse_ini_value(v: str):
    try:
        return json.loads(v)
    except json.JSONDecodeError:
        return v


@dataclass
class ResultRow:
    seed: int
    m: int
    n: int
    lam: float
    penalty: str
    formulation: str
    mode: str
    ub: float
    lb: float
    gap: float
    time_s: float
    root_relax_value: float
    root_relax_time: float
    nodes: int
    shd: float
    tpr: float
    fpr: float
    status: str

    TIMING = ("time_s", "root_relax_time")

    def stable(self) -> dict:
        """Every column except wall-clock timings."""
        d = asdict(self)
        for k in self.TIMING:
            d.pop(k)
        return d


ROW_FIELDS = [f.name for f in fields(ResultRow)]


# -- instances -----------------------------------------------------------------------

def instance_dir(cfg: ExperimentConfig, m: int, seed: int) -> Path:
    return Path(cfg.output_dir) / "instances" / f"m{m}_s{seed}"


def _streams(seed: int, m: int):
    return np.random.SeedSequence([seed, m]).spawn(3)


def cmd_generate(cfg: ExperimentConfig) -> list[Path]:
    """Write one dataset per n, the true DAG and its moral graph for every (m, seed).

    Smaller-n datasets are the leading rows of the largest one.
    """
    out = []
    n_max = max(cfg.n_list)
    for m in cfg.m_list:
        for seed in cfg.seeds:
            s_dag, s_w, s_x = _streams(seed, m)
            dag = random_dag(m, cfg.d, s_dag)
            wdag = assign_weights(dag, seed=s_w)
            data = sample_sem(wdag, n_max, seed=s_x)
            d = instance_dir(cfg, m, seed)
            d.mkdir(parents=True, exist_ok=True)
            for n in sorted(set(cfg.n_list)):
                write_dataset(data.head(n), d / f"data_n{n}.txt")
            write_weighted_dag(wdag, d / "dag.txt", comment=f"seed={seed}")
            write_superstructure(moralize(dag), d / "moral.txt", comment=f"seed={seed}")
            out.append(d)
    return out


def _load_instance(inst: Path, n: int, mode: str, ss_file=None):
    data = read_dataset(inst / f"data_n{n}.txt")
    truth = read_weighted_dag(inst / "dag.txt")
    if mode == "moral":
        ss = read_superstructure(inst / "moral.txt")
    elif mode == "complete":
        ss = complete_superstructure(data.m)
    else:
        ss = read_superstructure(ss_file)
    return data, truth, ss


def _seed_of(inst: Path) -> int:
    try:
        return int(inst.name.rsplit("_s", 1)[1])
    except (IndexError, ValueError):
        return -1


def _metrics(est, truth):
    if est is None:
        return math.nan, math.nan, math.nan
    try:
        tpr, fpr = tpr_fpr(est.digraph, truth.digraph)
    except EmptyTruth:
        tpr, fpr = math.nan, math.nan
    return float(shd(est.digraph, truth.digraph)), tpr, fpr


def cmd_solve(instance, formulation: str, penalty: str, lam: float, cfg: ExperimentConfig,
              n: Optional[int] = None, gap_tol: Optional[float] = None) -> ResultRow:
    """Big-M estimate, build, branch-and-bound and recovery metrics for one run."""
    inst = Path(instance)
    n = n or max(cfg.n_list)
    mode = cfg.superstructure_mode
    data, truth, ss = _load_instance(inst, n, mode, cfg.superstructure_file)
    m = data.m
    seed = _seed_of(inst)
    tag = f"{inst.name}_n{n}_{mode}_{formulation}_{penalty}_lam{lam:g}"
    trace_dir = Path(cfg.output_dir) / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    try:
        M = estimate_big_m(data, ss, lam, penalty)
        model = build(FormulationSpec(formulation, penalty, ss, lam, M), data)
        bcfg = BnbConfig(gap_tol=cfg.gap_tol if gap_tol is None else gap_tol,
                         time_limit=cfg.time_limit(m), trace_path=str(trace_dir / f"{tag}.csv"))
        out = solve(model, bcfg)
    except Exception as exc:  # recorded, not raised: one bad run must not kill a grid
        return ResultRow(seed, m, n, lam, penalty, formulation, mode, math.nan, math.nan,
                         math.nan, math.nan, math.nan, math.nan, 0, math.nan, math.nan,
                         math.nan, f"Error:{type(exc).__name__}")
    s, tpr, fpr = _metrics(out.dag, truth)
    return ResultRow(seed, m, n, lam, penalty, formulation, mode, out.ub, out.lb, out.gap,
                     out.wall_time, out.root_relax_value, out.root_relax_time,
                     out.nodes_explored, s, tpr, fpr, out.status)


def cmd_compare_astar(instance, lam: float, cfg: ExperimentConfig, n: Optional[int] = None,
                      max_states: int = 5_000_000) -> tuple[ResultRow, ResultRow]:
    """LN l1 branch-and-bound against A*-lasso on one instance.

    LN runs with a gap no looser than 1e-6 so that its upper bound is
    comparable at the 1e-4 agreement level.
    """
    import time

    inst = Path(instance)
    n = n or max(cfg.n_list)
    ln = cmd_solve(inst, "LN", "L1", lam, cfg, n=n, gap_tol=min(cfg.gap_tol, 1e-6))
    data, truth, ss = _load_instance(inst, n, cfg.superstructure_mode, cfg.superstructure_file)
    t = time.perf_counter()
    try:
        obj, dag, stats = astar_lasso(data, ss, lam, max_states=max_states)
        status, nodes = OPTIMAL_STATUS, stats["states_expanded"]
    except (FrontierOverflow, ValueError) as exc:
        obj, dag, status, nodes = math.nan, None, type(exc).__name__, 0
    elapsed = time.perf_counter() - t
    s, tpr, fpr = _metrics(dag, truth)
    star = ResultRow(_seed_of(inst), data.m, n, lam, "L1", "Astar", cfg.superstructure_mode,
                     obj, obj, 0.0 if status == OPTIMAL_STATUS else math.nan, elapsed,
                     math.nan, math.nan, nodes, s, tpr, fpr, status)
    if ln.status == OPTIMAL_STATUS and status == OPTIMAL_STATUS:
        if abs(ln.ub - obj) > 1e-4 * max(1.0, abs(obj)):
            ln = replace(ln, status="ObjectiveMismatch")
            star = replace(star, status="ObjectiveMismatch")
            raise ObjectiveMismatch(f"LN {ln.ub!r} vs A* {obj!r}", (ln, star))
    return ln, star


# -- result files ---------------------------------------------------------------------

def write_rows(rows: Sequence[ResultRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CSV_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(ROW_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in ROW_FIELDS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def read_rows(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# {CSV_VERSION}":
            raise ValueError(f"{path}: expected header comment '# {CSV_VERSION}'")
        rd = csv.DictReader(fh)
        if rd.fieldnames != ROW_FIELDS:
            raise ValueError(f"{path}: columns {rd.fieldnames} do not match the schema")
        rows = []
        for rec in rd:
            vals = {}
            for f in fields(ResultRow):
                raw = rec[f.name]
                vals[f.name] = int(raw) if f.type in ("int", int) else (
                    float(raw) if f.type in ("float", float) else raw)
            rows.append(ResultRow(**vals))
    return rows


# -- report ---------------------------------------------------------------------------

METRICS = ("gap", "time_s", "ub", "lb", "nodes", "shd", "tpr", "fpr")
GROUP = ("m", "n", "penalty", "lam", "mode", "formulation")


def aggregate(rows: Sequence[ResultRow]) -> list[dict]:
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(getattr(r, k) for k in GROUP), []).append(r)
    out = []
    for key in sorted(groups, key=lambda t: tuple(str(x) for x in t)):
        rs = groups[key]
        rec = dict(zip(GROUP, key))
        rec["count"] = len(rs)
        for k in METRICS:
            vals = np.array([float(getattr(r, k)) for r in rs])
            vals = vals[np.isfinite(vals)]
            rec[k] = float(vals.mean()) if len(vals) else math.nan
        out.append(rec)
    return out


def _svg_bars(title: str, labels: Sequence[str], series: dict, path) -> None:
    width, height, pad = 640, 360, 50
    names = list(series)
    vals = np.array([[series[s][i] for s in names] for i in range(len(labels))], dtype=float)
    top = np.nanmax(vals) if np.isfinite(vals).any() else 1.0
    top = top if top > 0 else 1.0
    group_w = (width - 2 * pad) / max(len(labels), 1)
    bar_w = group_w * 0.8 / max(len(names), 1)
    colors = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="20" text-anchor="middle">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
             'stroke="black"/>']
    for i, lab in enumerate(labels):
        x0 = pad + i * group_w + group_w * 0.1
        for j, _ in enumerate(names):
            v = vals[i, j]
            if not np.isfinite(v):
                continue
            h = (height - 2 * pad) * max(v, 0.0) / top
            parts.append(f'<rect x="{x0 + j * bar_w:.1f}" y="{height - pad - h:.1f}" '
                         f'width="{bar_w:.1f}" height="{h:.1f}" '
                         f'fill="{colors[j % len(colors)]}"><title>{v:.6g}</title></rect>')
        parts.append(f'<text x="{pad + (i + 0.5) * group_w:.1f}" y="{height - pad + 15}" '
                     f'font-size="10" text-anchor="middle">{lab}</text>')
    for j, s in enumerate(names):
        parts.append(f'<rect x="{width - pad - 90}" y="{30 + 14 * j}" width="10" height="10" '
                     f'fill="{colors[j % len(colors)]}"/>')
        parts.append(f'<text x="{width - pad - 75}" y="{39 + 14 * j}" font-size="10">{s}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def _svg_progress(trace_path, path) -> None:
    """Incumbent and best-bound estimate against nodes processed."""
    lbs, ubs = [], []
    with open(trace_path, newline="") as fh:
        for rec in csv.DictReader(fh):
            lbs.append(float(rec["lb"]))
            ubs.append(float(rec["ub"]))
    if not lbs:
        return
    ub = np.array(ubs)
    lb = np.minimum(np.maximum.accumulate(np.where(np.isfinite(lbs), lbs, -np.inf)), ub)
    finite = np.concatenate([ub[np.isfinite(ub)], lb[np.isfinite(lb)]])
    if not len(finite):
        return
    lo, hi = finite.min(), finite.max()
    hi = hi if hi > lo else lo + 1.0
    width, height, pad = 640, 360, 50

    def pts(y):
        out = []
        for i, v in enumerate(y):
            if np.isfinite(v):
                px = pad + (width - 2 * pad) * i / max(len(y) - 1, 1)
                py = height - pad - (height - 2 * pad) * (v - lo) / (hi - lo)
                out.append(f"{px:.1f},{py:.1f}")
        return " ".join(out)

    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
            f'<text x="{width / 2}" y="20" text-anchor="middle">{Path(trace_path).stem}</text>',
            f'<polyline fill="none" stroke="#ee6677" points="{pts(ub)}"/>',
            f'<polyline fill="none" stroke="#4477aa" points="{pts(lb)}"/>',
            f'<text x="{pad}" y="{height - 15}" font-size="10">nodes processed; '
            f'red UB, blue LB; range [{lo:.6g}, {hi:.6g}]</text>',
            "</svg>"]
    Path(path).write_text("\n".join(body) + "\n")


def cmd_report(result_dir) -> Path:
    """Aggregate every result CSV under ``result_dir`` and draw the plots."""
    result_dir = Path(result_dir)
    files = sorted(p for p in result_dir.rglob("*.csv")
                   if "traces" not in p.parts and "report" not in p.parts)
    rows = [r for p in files for r in read_rows(p)]
    if not rows:
        raise EmptyInput(f"no result rows under {result_dir}")
    agg = aggregate(rows)
    out = result_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    cols = list(GROUP) + ["count"] + list(METRICS)
    with open(out / "aggregate.csv", "w", newline="") as fh:
        fh.write(f"# {CSV_VERSION} aggregate\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for rec in agg:
            w.writerow([_fmt(rec[c]) for c in cols])
    labels = sorted({(rec["m"], rec["n"], rec["penalty"], rec["lam"], rec["mode"]) for rec in agg})
    forms = sorted({rec["formulation"] for rec in agg})
    lookup = {tuple(rec[c] for c in GROUP): rec for rec in agg}
    text = [f"m={m} n={n} {pen} lam={lam:g} {mode}" for m, n, pen, lam, mode in labels]
    for k in METRICS:
        series = {f: [lookup.get((*lab, f), {}).get(k, math.nan) for lab in labels] for f in forms}
        _svg_bars(k, text, series, out / f"{k}.svg")
    traces = result_dir / "traces"
    if traces.is_dir():
        for tp in sorted(traces.glob("*.csv")):
            _svg_progress(tp, out / f"progress_{tp.stem}.svg")
    return out


# -- command line ---------------------------------------------------------------------

def _grid(cfg: ExperimentConfig):
    for m in cfg.m_list:
        for seed in cfg.seeds:
            for n in cfg.n_list:
                for lam in cfg.lambda_list:
                    for f in cfg.formulations:
                        yield instance_dir(cfg, m, seed), f, cfg.penalty, lam, n


def _solve_task(args):
    inst, f, pen, lam, n, cfg = args
    return cmd_solve(inst, f, pen, lam, cfg, n=n)


def _exit_code(rows) -> int:
    if any(r.status.startswith("Error") or r.status == "ObjectiveMismatch" for r in rows):
        return 1
    if any(r.status == TIME_LIMIT for r in rows):
        return 2
    return 0


def _overrides(ns) -> dict:
    out = {}
    for name in ("m_list", "n_list", "lambda_list", "formulations", "seeds"):
        v = getattr(ns, name, None)
        if v is not None:
            out[name] = v
    for name in ("penalty", "superstructure_mode", "output_dir", "gap_tol",
                 "time_limit_factor", "workers", "d", "superstructure_file"):
        v = getattr(ns, name, None)
        if v is not None:
            out[name] = v
    return out


def _make_config(ns) -> ExperimentConfig:
    base = ExperimentConfig.load(ns.config) if ns.config else ExperimentConfig()
    return replace(base, **_overrides(ns))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dagmiqp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON or INI ([experiment] section) file")
        sp.add_argument("--m", dest="m_list", type=int, nargs="+")
        sp.add_argument("--n", dest="n_list", type=int, nargs="+")
        sp.add_argument("--lambda", dest="lambda_list", type=float, nargs="+")
        sp.add_argument("--formulations", nargs="+", choices=KINDS)
        sp.add_argument("--penalty", choices=PENALTIES)
        sp.add_argument("--mode", dest="superstructure_mode", choices=MODES)
        sp.add_argument("--superstructure-file", dest="superstructure_file")
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--d", type=float)
        sp.add_argument("--gap-tol", dest="gap_tol", type=float)
        sp.add_argument("--time-limit-factor", dest="time_limit_factor", type=float)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--output-dir", dest="output_dir")

    common(sub.add_parser("generate", help="write datasets, true DAGs and moral graphs"))
    sp = sub.add_parser("solve", help="solve the configured grid, or one --instance")
    common(sp)
    sp.add_argument("--instance", help="a single instance directory")
    sp.add_argument("--out", help="result CSV (default OUTPUT_DIR/results/solve.csv)")
    sp = sub.add_parser("compare-astar", help="LN l1 against A*-lasso")
    common(sp)
    sp.add_argument("--instance", help="a single instance directory")
    sp.add_argument("--out", help="result CSV (default OUTPUT_DIR/results/astar.csv)")
    sp = sub.add_parser("report", help="aggregate CSV and SVG plots")
    sp.add_argument("result_dir")
    return p


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        if ns.verb == "report":
            out = cmd_report(ns.result_dir)
            print(out)
            return 0
        cfg = _make_config(ns)
        if ns.verb == "generate":
            for d in cmd_generate(cfg):
                print(d)
            return 0
        if ns.verb == "solve":
            if ns.instance:
                tasks = [(Path(ns.instance), f, cfg.penalty, lam, n, cfg)
                         for n in cfg.n_list for lam in cfg.lambda_list for f in cfg.formulations]
            else:
                tasks = [(*t, cfg) for t in _grid(cfg)]
            if cfg.workers > 1:
                with ProcessPoolExecutor(cfg.workers) as pool:
                    rows = list(pool.map(_solve_task, tasks))
            else:
                rows = [_solve_task(t) for t in tasks]
            out = Path(ns.out or Path(cfg.output_dir) / "results" / "solve.csv")
            write_rows(rows, out)
            print(out)
            return _exit_code(rows)
        # compare-astar
        insts = [Path(ns.instance)] if ns.instance else [
            instance_dir(cfg, m, s) for m in cfg.m_list for s in cfg.seeds]
        rows, code = [], 0
        for inst in insts:
            for n in cfg.n_list:
                for lam in cfg.lambda_list:
                    try:
                        rows.extend(cmd_compare_astar(inst, lam, cfg, n=n))
                    except ObjectiveMismatch as exc:
                        rows.extend(exc.args[1])
                        print(f"error: {exc.args[0]}", file=sys.stderr)
        out = Path(ns.out or Path(cfg.output_dir) / "results" / "astar.csv")
        write_rows(rows, out)
        print(out)
        return max(code, _exit_code(rows))
    except (OSError, ValueError, EmptyInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
