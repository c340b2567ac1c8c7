"""Monte-Carlo replication runner and metric aggregation.

A study is a grid of cells (model flag x surrogate AUC pair); every cell is
replicated ``replications`` times with seeds derived from
``(base_seed, cell, replicate)``.  Replications are independent tasks; the
reduction runs in replicate order so outputs do not depend on scheduling.
"""
from __future__ import annotations

import configparser
import csv
import io
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .crossfit import DRConfig, SplineLearnerConfig, assign_folds, crossfit_dr, crossfit_lowdim
from .dgp import AUC_TO_ALPHA, HIGHDIM_FLAGS, ScenarioSpec, SurrogateSpec, generate
from .estimators import (
    AteEstimate, aipw_estimate, smmal_estimate, supervised_dml_estimate,
)

log = logging.getLogger(__name__)

__all__ = [
    "METHODS", "BENCHMARK", "METRICS_HEADER", "ConfigError", "ExperimentConfig", "MetricsRow",
    "load_config", "run_replication", "summarize", "run_study", "write_metrics_csv",
    "write_jsonl", "read_jsonl", "write_long_csv",
]

METHODS = ("smmal_spline", "smmal_dr", "dml_supervised", "dr_supervised")
# semi-supervised method -> the labeled-only benchmark it is compared against
BENCHMARK = {"smmal_spline": "dml_supervised", "smmal_dr": "dr_supervised"}
METRICS_HEADER = ("method", "scenario", "auc_a", "auc_y", "bias", "sd", "avg_se", "coverage",
                  "rel_eff", "n_success")
_SPLINE_METHODS = ("smmal_spline", "dml_supervised")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "lowdim"
    N: int = 10000
    n_labels: int = 500
    p: Optional[int] = None
    model_flags: Tuple[str, ...] = ("correct_both",)
    surrogate_grid: Tuple[Tuple[float, float], ...] = ((0.95, 0.95),)
    methods: Tuple[str, ...] = ("smmal_spline", "dml_supervised")
    replications: int = 200
    base_seed: int = 0
    K: int = 10
    alpha: float = 0.05
    M: float = 2.0
    output: Optional[str] = None

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if not self.methods:
            raise ConfigError("methods must be nonempty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if self.scenario == "highdim" and any(m in _SPLINE_METHODS for m in self.methods):
            raise ConfigError("spline methods need the one-dimensional lowdim scenario")
        for auc_a, auc_y in self.surrogate_grid:
            for auc in (auc_a, auc_y):
                if not any(abs(auc - k) < 1e-9 for k in AUC_TO_ALPHA):
                    raise ConfigError(f"AUC {auc} not in {sorted(AUC_TO_ALPHA)}")
        if not self.surrogate_grid:
            raise ConfigError("surrogate_grid must be nonempty")
        if self.K < 3:
            raise ConfigError("K must be >= 3")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        flags = self.model_flags if self.scenario == "highdim" else ()
        if any(f not in HIGHDIM_FLAGS for f in flags):
            raise ConfigError(f"model_flags must be drawn from {HIGHDIM_FLAGS}")
        try:
            for cell in range(len(self.cells)):
                self.scenario_spec(cell)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def cells(self) -> List[Tuple[str, Tuple[float, float]]]:
        flags = self.model_flags if self.scenario == "highdim" else ("correct_both",)
        return list(itertools.product(flags, self.surrogate_grid))

    def scenario_spec(self, cell: int, seed=0) -> ScenarioSpec:
        flag, _ = self.cells[cell]
        return ScenarioSpec(self.scenario, self.N, self.n_labels, self.p, flag, seed)

    def cell_label(self, cell: int) -> str:
        flag, _ = self.cells[cell]
        return self.scenario if self.scenario == "lowdim" else f"{self.scenario}/{flag}"


def _split_list(text):
    return [t.strip() for t in text.replace(";", ",").split(",") if t.strip()]


def load_config(path) -> ExperimentConfig:
    """Read an INI file with a ``[study]`` section.

    ``surrogate_grid`` is a comma-separated list of ``auc_a:auc_y`` pairs,
    ``methods`` and ``model_flags`` are comma-separated names.  A relative
    ``output`` is resolved against the config file's directory.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if "study" not in parser:
        raise ConfigError("config needs a [study] section")
    sec = parser["study"]
    known = {"scenario", "n", "n_labels", "p", "model_flags", "surrogate_grid", "methods",
             "replications", "base_seed", "k", "alpha", "m", "output"}
    extra = set(sec) - known
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    try:
        grid = []
        for item in _split_list(sec.get("surrogate_grid", "0.95:0.95")):
            a, y = item.split(":")
            grid.append((float(a), float(y)))
        p = sec.get("p", "").strip()
        output = sec.get("output", "").strip() or None
        if output and not os.path.isabs(output):
            output = str(Path(path).resolve().parent / output)
        return ExperimentConfig(
            scenario=sec.get("scenario", "lowdim").strip(),
            N=sec.getint("N", 10000),
            n_labels=sec.getint("n_labels", 500),
            p=int(p) if p else None,
            model_flags=tuple(_split_list(sec.get("model_flags", "correct_both"))),
            surrogate_grid=tuple(grid),
            methods=tuple(_split_list(sec.get("methods", "smmal_spline, dml_supervised"))),
            replications=sec.getint("replications", 200),
            base_seed=sec.getint("base_seed", 0),
            K=sec.getint("K", 10),
            alpha=sec.getfloat("alpha", 0.05),
            M=sec.getfloat("M", 2.0),
            output=output,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc


# ---------------------------------------------------------- replication

def replication_seeds(base_seed, cell, rep):
    """(data, fold, learner) integer seeds from SeedSequence((base_seed, cell, rep))."""
    state = np.random.SeedSequence([int(base_seed), int(cell), int(rep)]).generate_state(3)
    return tuple(int(s) for s in state)


def _record(est: AteEstimate, method, seed, elapsed):
    rec = est.record(method, seed)
    rec["elapsed"] = elapsed
    return rec


def run_replication(config: ExperimentConfig, cell: int, rep: int) -> dict:
    """One dataset, every configured method; a failing method does not stop the others.

    Returns a JSON-serialisable record with keys ``cell``, ``rep``,
    ``scenario``, ``auc_a``, ``auc_y``, ``truth`` and ``methods`` (method ->
    estimate record or ``{"error": ...}``).  A generator failure sets
    ``failed`` instead.
    """
    flag, (auc_a, auc_y) = config.cells[cell]
    data_seed, fold_seed, learner_seed = replication_seeds(config.base_seed, cell, rep)
    out = {"cell": cell, "rep": rep, "scenario": config.cell_label(cell),
           "auc_a": auc_a, "auc_y": auc_y, "truth": None, "methods": {}}
    try:
        data, truth = generate(config.scenario_spec(cell, data_seed),
                               SurrogateSpec.from_auc(auc_a, auc_y))
    except Exception as exc:  # noqa: BLE001 - isolation contract
        out["failed"] = f"{type(exc).__name__}: {exc}"
        return out
    out["truth"] = truth.ate
    plan = assign_folds(data.n_rows, config.K, fold_seed)
    lab = data.labeled
    lab_plan = plan.restrict(lab)
    A = data.treatment.filled(0)
    Y = data.outcome.filled(0.0)
    dr_preds = None

    for method in config.methods:
        t0 = time.perf_counter()
        try:
            if method == "smmal_spline":
                preds = crossfit_lowdim(data, plan, SplineLearnerConfig(seed=learner_seed))
                est = smmal_estimate(data, preds, config.alpha)
            elif method == "dml_supervised":
                est = supervised_dml_estimate(data, config.K, SplineLearnerConfig(seed=learner_seed),
                                              config.alpha, plan=lab_plan)
            elif method == "smmal_dr":
                dr_preds = crossfit_dr(data, plan, DRConfig(seed=learner_seed), config.M)
                est = smmal_estimate(data, dr_preds, config.alpha)
            else:  # dr_supervised
                if dr_preds is None:
                    dr_preds = crossfit_dr(data, plan, DRConfig(seed=learner_seed), config.M,
                                           use_imputation=False)
                # on labeled rows the pi and mu fits coincide with a labeled-only run
                # over the restricted fold plan, so the semi-supervised fits are reused
                est = aipw_estimate(A[lab], Y[lab], dr_preds.ps[:, lab], dr_preds.or_[:, lab],
                                    config.alpha)
        except Exception as exc:  # noqa: BLE001 - isolation contract
            log.info("cell %d rep %d: %s failed: %s", cell, rep, method, exc)
            out["methods"][method] = {"error": f"{type(exc).__name__}: {exc}",
                                      "elapsed": time.perf_counter() - t0}
            continue
        out["methods"][method] = _record(est, method, data_seed, time.perf_counter() - t0)
    return out


# ---------------------------------------------------------- aggregation

@dataclass
class MetricsRow:
    method: str
    scenario: str
    auc_a: float
    auc_y: float
    bias: float
    sd: float
    avg_se: float
    coverage: float
    rel_eff: float
    n_success: int
    replications: int = 0
    insufficient: bool = False

    def as_csv_row(self):
        return [self.method, self.scenario, repr(self.auc_a), repr(self.auc_y), repr(self.bias),
                repr(self.sd), repr(self.avg_se), repr(self.coverage), repr(self.rel_eff),
                str(self.n_success)]


def _method_stats(recs, truth):
    pts = np.array([r["point"] for r in recs])
    ses = np.array([np.sqrt(r["variance_scaled"] / r["n"]) for r in recs])
    lo = np.array([r["ci"][0] for r in recs])
    hi = np.array([r["ci"][1] for r in recs])
    if pts.size < 2:
        return dict(bias=float("nan"), sd=float("nan"), avg_se=float("nan"),
                    coverage=float("nan"))
    return dict(
        bias=float(pts.mean() - truth),
        sd=float(pts.std(ddof=1)),
        avg_se=float(ses.mean()),
        coverage=float(np.mean((lo <= truth) & (truth <= hi))),
    )


def summarize(records: Sequence[dict], truth: Optional[float] = None,
              methods: Optional[Sequence[str]] = None) -> List[MetricsRow]:
    """Per cell and method: bias, SD, average SE, coverage and relative efficiency.

    ``records`` are replication records (as returned by ``run_replication``).
    ``truth`` overrides the per-record ATE.  Relative efficiency is
    sd(benchmark)^2 / sd(method)^2 against the labeled-only benchmark of
    the same cell (1.0 for a benchmark itself, nan when it is absent).
    Cells with fewer than two successes are flagged ``insufficient``.
    """
    cells: Dict[int, List[dict]] = {}
    for r in records:
        cells.setdefault(r["cell"], []).append(r)
    rows = []
    for cell in sorted(cells):
        recs = sorted(cells[cell], key=lambda r: r["rep"])
        first = recs[0]
        ok_truths = [r["truth"] for r in recs if r.get("truth") is not None]
        cell_truth = truth if truth is not None else (ok_truths[0] if ok_truths else float("nan"))
        names = methods or [m for m in METHODS if any(m in r["methods"] for r in recs)]
        stats = {}
        for m in names:
            good = [r["methods"][m] for r in recs
                    if m in r["methods"] and "error" not in r["methods"][m]]
            stats[m] = (_method_stats(good, cell_truth), len(good))
        for m in names:
            s, n_ok = stats[m]
            bench = BENCHMARK.get(m)
            if m in BENCHMARK.values():
                rel = 1.0 if n_ok >= 2 else float("nan")
            elif bench in stats and stats[bench][1] >= 2 and n_ok >= 2:
                rel = stats[bench][0]["sd"] ** 2 / s["sd"] ** 2 if s["sd"] > 0 else float("inf")
            else:
                rel = float("nan")
            rows.append(MetricsRow(m, first["scenario"], first["auc_a"], first["auc_y"],
                                   rel_eff=rel, n_success=n_ok, replications=len(recs),
                                   insufficient=n_ok < 2, **s))
    return rows


# ---------------------------------------------------------- outputs

def metrics_csv_text(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.as_csv_row())
    return buf.getvalue()


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> None:
    Path(path).write_text(metrics_csv_text(rows))


def write_jsonl(records: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_long_csv(rows: Sequence[MetricsRow], path) -> None:
    """One line per (method, cell, metric), for heat maps over the AUC grid."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "scenario", "auc_a", "auc_y", "metric", "value"])
        for r in rows:
            for name in ("bias", "sd", "avg_se", "coverage", "rel_eff", "n_success"):
                w.writerow([r.method, r.scenario, repr(r.auc_a), repr(r.auc_y), name,
                            repr(getattr(r, name))])


# ---------------------------------------------------------- study

def _worker_count(requested=None) -> int:
    if requested:
        return max(1, int(requested))
    env = os.environ.get("SMMAL_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer SMMAL_THREADS=%r", env)
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1


def _task(args):
    config, cell, rep = args
    return run_replication(config, cell, rep)


@dataclass
class StudyResult:
    records: List[dict]
    metrics: List[MetricsRow]
    paths: dict = field(default_factory=dict)


def run_study(config: ExperimentConfig, workers: Optional[int] = None, output=None,
              progress=None) -> StudyResult:
    """Run every (cell, replicate) task and summarize.

    Work is spread over ``workers`` processes (default ``SMMAL_THREADS`` or
    the available CPUs).  Records come back in (cell, replicate) order.
    When an output directory is given (or configured), ``metrics.csv``,
    ``replications.jsonl`` and ``long.csv`` are written there.
    """
    tasks = [(config, c, r) for c in range(len(config.cells)) for r in range(config.replications)]
    n_workers = min(_worker_count(workers), len(tasks))
    records = []
    if n_workers <= 1:
        for t in tasks:
            records.append(_task(t))
            if progress:
                progress(len(records), len(tasks))
    else:
        with ProcessPoolExecutor(n_workers) as pool:
            for rec in pool.map(_task, tasks, chunksize=1):
                records.append(rec)
                if progress:
                    progress(len(records), len(tasks))
    metrics = summarize(records, methods=[m for m in METHODS if m in config.methods])
    result = StudyResult(records, metrics)
    out = output or config.output
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        result.paths = {"metrics": out / "metrics.csv", "replications": out / "replications.jsonl",
                        "long": out / "long.csv"}
        write_metrics_csv(metrics, result.paths["metrics"])
        write_jsonl(records, result.paths["replications"])
        write_long_csv(metrics, result.paths["long"])
    return result
