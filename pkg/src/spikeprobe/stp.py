"""Three-arm temporal probe: train under STBP, SDBP and NoTD, then compare.

A task only exercises temporal processing if removing temporal credit
assignment (SDBP) and removing temporal dynamics altogether (NoTD) both
cost a clear amount of performance relative to full STBP training.
"""

from __future__ import annotations

import csv
import io
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .neurons import NetworkSpec, init_params
from .training import ALGORITHMS, TrainPlan, fit

EFFECTIVE = "effective"
BACKWARD_UNUSED = "ineffective-backward-unused"
NO_TEMPORAL_INFO = "unsuitable-no-temporal-info"
INCONCLUSIVE = "inconclusive"
VERDICTS = (EFFECTIVE, BACKWARD_UNUSED, NO_TEMPORAL_INFO, INCONCLUSIVE)


@dataclass(frozen=True)
class ProbeConfig:
    spec: NetworkSpec = field(default_factory=NetworkSpec)
    plan: TrainPlan = field(default_factory=TrainPlan)
    direction: str = "higher"
    similar: float = 1.0  # epsilon, metric points
    degraded: float = 2.0  # delta, metric points
    workers: int = 1

    def __post_init__(self):
        if self.direction not in ("higher", "lower"):
            raise ValueError("direction must be 'higher' or 'lower'")
        if not (0 < self.similar <= self.degraded):
            raise ValueError("thresholds must satisfy 0 < similar <= degraded")


def verdict(stbp: float, sdbp: float, notd: float, direction: str = "higher",
            similar: float = 1.0, degraded: float = 2.0) -> str:
    """Classify a task from the three arm metrics.

    Rules are applied in order: NoTD close to STBP, then SDBP close to
    STBP, then both clearly worse, else inconclusive.
    """
    vals = np.array([stbp, sdbp, notd], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("metrics must be finite")
    if direction == "lower":
        vals = -vals
    elif direction != "higher":
        raise ValueError("direction must be 'higher' or 'lower'")
    gap_sdbp = vals[0] - vals[1]
    gap_notd = vals[0] - vals[2]
    if gap_notd < similar:
        return NO_TEMPORAL_INFO
    if gap_sdbp < similar:
        return BACKWARD_UNUSED
    if gap_sdbp >= degraded and gap_notd >= degraded:
        return EFFECTIVE
    return INCONCLUSIVE


@dataclass
class ProbeReport:
    metrics: dict[str, float]
    gaps: dict[str, float]
    verdict: str
    direction: str
    similar: float
    degraded: float
    arms: dict[str, dict] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["partial"] = self.partial
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["algorithm", "metric", "gap_vs_stbp", "epochs", "steps_per_second"])
        for alg in ALGORITHMS:
            arm = self.arms.get(alg, {})
            gap = 0.0 if alg == "stbp" else self.gaps.get(f"stbp-{alg}", float("nan"))
            w.writerow([alg, self.metrics.get(alg, float("nan")), gap,
                        len(arm.get("epochs", [])), arm.get("steps_per_second", float("nan"))])
        return buf.getvalue()


def _oriented_gaps(metrics: dict[str, float], direction: str) -> dict[str, float]:
    sign = 1.0 if direction == "higher" else -1.0
    return {f"stbp-{alg}": sign * (metrics["stbp"] - metrics[alg]) for alg in ("sdbp", "notd")}


def assemble_report(cfg: ProbeConfig, metrics: dict[str, float], arms=None, failures=None) -> ProbeReport:
    failures = dict(failures or {})
    if failures or any(a not in metrics for a in ALGORITHMS):
        gaps = {}
        v = INCONCLUSIVE
    else:
        gaps = _oriented_gaps(metrics, cfg.direction)
        v = verdict(metrics["stbp"], metrics["sdbp"], metrics["notd"], cfg.direction,
                    cfg.similar, cfg.degraded)
    return ProbeReport(metrics, gaps, v, cfg.direction, cfg.similar, cfg.degraded,
                       arms=dict(arms or {}), failures=failures)


def _train_arm(spec, plan, train, test, init):
    params = {k: v.copy() for k, v in init.items()}
    params, report = fit(spec, train, plan, test=test, params=params)
    return params, report


def run_probe(cfg: ProbeConfig, train, test, keep_params: bool = False):
    """Train the three arms from identical initial weights and compare them.

    The metric is final test accuracy in percentage points. All arms share
    the initial weights and shuffling order; they differ only in the
    backward algorithm and, for NoTD, the memoryless forward. Returns the
    report, plus the trained parameters per arm when ``keep_params``.
    """
    init = init_params(cfg.spec, cfg.plan.seed)
    plans = {alg: replace(cfg.plan, algorithm=alg) for alg in ALGORITHMS}
    results, failures = {}, {}
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futs = {alg: pool.submit(_train_arm, cfg.spec, plans[alg], train, test, init)
                    for alg in ALGORITHMS}
            for alg, fut in futs.items():
                try:
                    results[alg] = fut.result()
                except Exception as exc:  # noqa: BLE001 - recorded in the report
                    failures[alg] = f"{type(exc).__name__}: {exc}"
    else:
        for alg in ALGORITHMS:
            try:
                results[alg] = _train_arm(cfg.spec, plans[alg], train, test, init)
            except Exception as exc:  # noqa: BLE001
                failures[alg] = f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
    metrics = {alg: 100.0 * rep.final_test_acc for alg, (_, rep) in results.items()}
    arms = {alg: rep.to_dict() for alg, (_, rep) in results.items()}
    report = assemble_report(cfg, metrics, arms, failures)
    if keep_params:
        return report, {alg: p for alg, (p, _) in results.items()}
    return report
