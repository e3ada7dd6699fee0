"""Weighted hit ratio / precision over combinations and the evaluation harness."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, UsageError

DEFAULT_WEIGHTS_K3 = (0.5, 0.3, 0.2)


@dataclass(frozen=True)
class MetricWeights:
    """Per-category weights, normalized to sum to one."""

    w: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if not w or any(x < 0 or not math.isfinite(x) for x in w):
            raise ConfigError(f"metric weights must be finite and non-negative, got {list(w)}")
        total = math.fsum(w)
        if total <= 0:
            raise ConfigError("metric weights must not all be zero")
        object.__setattr__(self, "w", tuple(x / total for x in w))

    @classmethod
    def default(cls, k: int = 3) -> "MetricWeights":
        return cls(DEFAULT_WEIGHTS_K3 if k == 3 else (1.0,) * k)

    def __len__(self) -> int:
        return len(self.w)


def _matches(pred, truth, w: MetricWeights) -> list[int]:
    if len(pred) != len(truth) or len(pred) != len(w):
        raise UsageError(f"length mismatch: pred {len(pred)}, truth {len(truth)}, weights {len(w)}")
    return [int(int(p) == int(t)) for p, t in zip(pred, truth)]


def hr(pred: Sequence[int], truth: Sequence[int], w: MetricWeights) -> float:
    """Weighted intersection over weighted union of per-category singletons."""
    m = _matches(pred, truth, w)
    num = math.fsum(wi * mi for wi, mi in zip(w.w, m))
    den = math.fsum(wi * (2 - mi) for wi, mi in zip(w.w, m))
    return num / den if den > 0 else 1.0


def pr(pred: Sequence[int], truth: Sequence[int], w: MetricWeights) -> float:
    m = _matches(pred, truth, w)
    return math.fsum(wi * mi for wi, mi in zip(w.w, m))


@dataclass
class EvalReport:
    method: str
    samples: int
    hr: float
    pr: float
    match_rates: list[float]
    oracle_hr: float | None = None
    oracle_pr: float | None = None
    oracle_match_rates: list[float] | None = None
    runtime: float = field(default=0.0, compare=False)

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = {
            "method": self.method,
            "samples": self.samples,
            "hr": self.hr,
            "pr": self.pr,
            "match_rates": self.match_rates,
            "oracle_hr": self.oracle_hr,
            "oracle_pr": self.oracle_pr,
            "oracle_match_rates": self.oracle_match_rates,
        }
        if include_runtime:
            d["runtime"] = self.runtime
        return d


Selector = Callable[[Sequence], np.ndarray]


def _means(preds: np.ndarray, truths: np.ndarray, w: MetricWeights):
    hrs = [hr(p, t, w) for p, t in zip(preds, truths)]
    prs = [pr(p, t, w) for p, t in zip(preds, truths)]
    rates = [math.fsum((preds[:, c] == truths[:, c]).astype(float)) / len(preds)
             for c in range(preds.shape[1])]
    return math.fsum(hrs) / len(hrs), math.fsum(prs) / len(prs), rates


def evaluate(method: str, selector: Selector, test: Sequence, weights: MetricWeights | None = None,
             *, world=None, oracle: bool = False) -> EvalReport:
    """Mean HR/PR of ``selector`` on the clicked impressions of ``test``.

    ``selector`` maps a list of impressions to an (n, k) array of candidate
    indices.  With ``oracle=True`` the same predictions are also scored
    against the true best combination from ``world``.
    """
    clicked = [m for m in test if m.label == 1]
    if not clicked:
        raise DataError("test log has no clicked impressions")
    k = len(clicked[0].shown)
    weights = weights or MetricWeights.default(k)
    if oracle and world is None:
        raise UsageError("oracle metrics need the world file")
    t0 = time.perf_counter()
    preds = np.asarray(selector(clicked), dtype=np.int64).reshape(len(clicked), k)
    for p, m in zip(preds, clicked):
        if any(not 0 <= j < len(c) for j, c in zip(p, m.cands)):
            raise UsageError(f"{method}: invalid selection {p.tolist()} for impression {m.id}")
    truth = np.array([m.shown for m in clicked], dtype=np.int64)
    mhr, mpr, rates = _means(preds, truth, weights)
    report = EvalReport(method, len(clicked), mhr, mpr, rates)
    if oracle:
        from .data import oracle_best

        best = np.array([oracle_best(world, None, m.user, m.shop, m.cands) for m in clicked], dtype=np.int64)
        report.oracle_hr, report.oracle_pr, report.oracle_match_rates = _means(preds, best, weights)
    report.runtime = time.perf_counter() - t0
    return report


def format_table(reports: Sequence[EvalReport], oracle: bool = False) -> str:
    """Plain-text table, columns Model | HR | PR (plus oracle columns on request)."""
    header = ["Model", "HR", "PR"]
    if oracle:
        header += ["Oracle-HR", "Oracle-PR"]
    rows = []
    for r in reports:
        row = [r.method, f"{r.hr:.4f}", f"{r.pr:.4f}"]
        if oracle:
            row += ["-" if r.oracle_hr is None else f"{r.oracle_hr:.4f}",
                    "-" if r.oracle_pr is None else f"{r.oracle_pr:.4f}"]
        rows.append(row)
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    fmt = lambda cells: " | ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(r) for r in rows]) + "\n"


def reports_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2) + "\n"
