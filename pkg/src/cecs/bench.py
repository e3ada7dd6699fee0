"""Multi-seed synthetic benchmark: strategy comparison and the ablation grid."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .baselines import FeedbackStats, egreedy_select, independent_fit, popularity_select, preference_select
from .config import RunConfig
from .data import gen_world, simulate_logs, split_counts
from .metrics import EvalReport, evaluate, format_table
from .training import build_model, fit, predict_log

STRATEGIES = ("popularity", "egreedy", "preference")
ABLATIONS_DEFAULT = ("none", "no-cei", "both")
ABLATION_ROWS = {"none": "CECS", "no-cei": "CES only", "no-ces": "CEI only", "both": "neither"}

Log = Callable[[str], None]


def split_train_val(train: Sequence) -> tuple[list, list]:
    """Hold out the last tenth of the training log for model selection."""
    n_val = len(train) // 10
    if n_val == 0:
        return list(train), []
    return list(train[:-n_val]), list(train[-n_val:])


def strategy_selector(name: str, stats: FeedbackStats, seed: int = 0, epsilon: float = 0.1):
    if name == "popularity":
        fn = lambda m: popularity_select(stats, m)
    elif name == "preference":
        fn = lambda m: preference_select(stats, m)
    elif name == "egreedy":
        fn = lambda m: egreedy_select(stats, m, epsilon, seed)
    else:
        raise KeyError(name)
    return lambda imps: np.array([fn(m) for m in imps], dtype=np.int64).reshape(len(imps), -1)


@dataclass
class SeedResult:
    seed: int
    reports: dict[str, EvalReport] = field(default_factory=dict)
    ablations: dict[str, EvalReport] = field(default_factory=dict)
    seconds: float = 0.0


def run_seed(cfg: RunConfig, seed: int, ablations: Sequence[str] = ABLATIONS_DEFAULT,
             log: Log | None = None) -> SeedResult:
    say = log or (lambda s: None)
    cfg = cfg.with_seed(seed)
    t0 = time.perf_counter()
    world = gen_world(cfg.generator)
    logs = list(simulate_logs(world))
    n_train, _ = split_counts(len(logs))
    train, test = logs[:n_train], logs[n_train:]
    tr, val = split_train_val(train)
    weights = cfg.metric_weights()
    out = SeedResult(seed)

    stats = FeedbackStats.from_log(train)
    for name in STRATEGIES:
        out.reports[name] = evaluate(name, strategy_selector(name, stats, seed), test, weights,
                                     world=world, oracle=True)
        say(f"seed {seed} {name:12s} oracle-HR {out.reports[name].oracle_hr:.4f}")

    indep, _ = independent_fit(tr, val, cfg.model_config("independent"), cfg.train)
    out.reports["independent"] = evaluate("independent", lambda imps: predict_log(indep, imps), test, weights,
                                          world=world, oracle=True)
    say(f"seed {seed} {'independent':12s} oracle-HR {out.reports['independent'].oracle_hr:.4f}")

    for ab in ablations:
        mc = cfg.model_config("cecs", ab)
        params, _ = fit(tr, val, mc, cfg.train)
        model = build_model(mc, params)
        rep = evaluate(ABLATION_ROWS[ab], lambda imps: predict_log(model, imps), test, weights,
                       world=world, oracle=True)
        out.ablations[ab] = rep
        say(f"seed {seed} {ABLATION_ROWS[ab]:12s} oracle-HR {rep.oracle_hr:.4f}")
    if "none" in out.ablations:
        out.reports["cecs"] = out.ablations["none"]
    out.seconds = time.perf_counter() - t0
    return out


def _mean_report(method: str, reports: Sequence[EvalReport]) -> EvalReport:
    avg = lambda xs: math.fsum(xs) / len(xs)
    return EvalReport(
        method,
        sum(r.samples for r in reports),
        avg([r.hr for r in reports]),
        avg([r.pr for r in reports]),
        [avg(col) for col in zip(*(r.match_rates for r in reports))],
        avg([r.oracle_hr for r in reports]),
        avg([r.oracle_pr for r in reports]),
        [avg(col) for col in zip(*(r.oracle_match_rates for r in reports))],
    )


@dataclass
class BenchResult:
    seeds: list[SeedResult]
    table1: list[EvalReport]
    table2: list[EvalReport]
    checks: dict[str, dict]
    seconds: float

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = {
            "seeds": [s.seed for s in self.seeds],
            "table1": [r.to_dict() for r in self.table1],
            "table2": [r.to_dict() for r in self.table2],
            "per_seed": [{"seed": s.seed,
                          "reports": {k: r.to_dict() for k, r in s.reports.items()},
                          "ablations": {k: r.to_dict() for k, r in s.ablations.items()}} for s in self.seeds],
            "checks": self.checks,
        }
        if include_runtime:
            d["seconds"] = self.seconds
        return d

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())


def directional_checks(table1: dict[str, float], table2: dict[str, float], seconds: float,
                       budget: float = 900.0) -> dict[str, dict]:
    """Compare mean oracle-HR values with the expected orderings."""
    checks = {}
    if "cecs" in table1 and "independent" in table1:
        gap = table1["cecs"] - table1["independent"]
        checks["cecs_beats_independent"] = {"passed": gap >= 0.02, "observed": gap, "expected": ">= 0.02"}
    learned = [m for m in ("cecs", "independent") if m in table1]
    margins = [table1[m] - table1[s] for m in learned for s in STRATEGIES if s in table1]
    if margins:
        checks["learned_beat_strategies"] = {"passed": min(margins) > 0, "observed": min(margins),
                                             "expected": "> 0 (smallest margin)"}
    if all(k in table2 for k in ("none", "no-cei", "both")):
        full, ces, neither = table2["none"], table2["no-cei"], table2["both"]
        worst_inv = max(ces - full, neither - ces)
        checks["ablation_order"] = {"passed": worst_inv <= 0.005, "observed": worst_inv,
                                    "expected": "adjacent inversions <= 0.005"}
        checks["ablation_gap"] = {"passed": full - neither >= 0.015, "observed": full - neither,
                                  "expected": ">= 0.015"}
    checks["runtime"] = {"passed": seconds < budget, "observed": seconds, "expected": f"< {budget:g} s"}
    return checks


def run_bench(cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2),
              ablations: Sequence[str] = ABLATIONS_DEFAULT, log: Log | None = None) -> BenchResult:
    t0 = time.perf_counter()
    results = [run_seed(cfg, s, ablations, log) for s in seeds]
    order = [m for m in (*STRATEGIES, "independent", "cecs") if all(m in r.reports for r in results)]
    table1 = [_mean_report(m, [r.reports[m] for r in results]) for m in order]
    table2 = [_mean_report(ABLATION_ROWS[a], [r.ablations[a] for r in results]) for a in ablations]
    seconds = time.perf_counter() - t0
    checks = directional_checks({r.method: r.oracle_hr for r in table1},
                                {a: r.oracle_hr for a, r in zip(ablations, table2)}, seconds)
    return BenchResult(results, table1, table2, checks, seconds)


def write_bench(result: BenchResult, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "table1.txt").write_text(format_table(result.table1, oracle=True), encoding="utf-8")
    (out / "table2.txt").write_text(format_table(result.table2, oracle=True), encoding="utf-8")
