"""Cross-track error, intervention counting and autonomy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from equinav.worldsim import GateCourse, Track

TAKEOVER_S = 6.0
AIR_DEVIATION_LIMIT = 2.5


@dataclass(frozen=True)
class InterventionRule:
    """Fires when the cross-track error exceeds ``threshold`` meters."""

    threshold: float

    def violated(self, cte):
        return np.asarray(cte) > self.threshold


def rule_for(world) -> InterventionRule:
    if isinstance(world, Track):
        return InterventionRule(world.lane_half_width)
    if isinstance(world, GateCourse):
        return InterventionRule(AIR_DEVIATION_LIMIT)
    raise TypeError(f"unsupported world type {type(world).__name__}")


def trigger_now(violating, armed, prev_violating, prev_armed):
    """A new intervention starts on a rising edge of (violating and armed).

    ``armed`` means the policy held control during the previous step, so
    violations during an expert takeover never retrigger.
    """
    return bool(violating and armed and not (prev_violating and prev_armed))


def intervention_triggers(cte, policy_control, rule: InterventionRule) -> np.ndarray:
    cond = rule.violated(cte)
    pc = np.asarray(policy_control, dtype=bool)
    out = np.zeros(len(cond), dtype=bool)
    prev_v, prev_a = False, False
    for t in range(len(cond)):
        armed = t == 0 or pc[t - 1]
        out[t] = trigger_now(cond[t], armed, prev_v, prev_a)
        prev_v, prev_a = bool(cond[t]), armed
    return out


def metric_cte(log) -> float:
    """Mean cross-track error over policy-controlled steps (nan if there are none)."""
    mask = np.asarray(log.policy_control, dtype=bool)
    if not mask.any():
        return float("nan")
    return float(np.mean(np.asarray(log.cte)[mask]))


def metric_interventions(log, rule: InterventionRule) -> int:
    return int(intervention_triggers(log.cte, log.policy_control, rule).sum())


def metric_autonomy(n, elapsed_s, takeover_s=TAKEOVER_S) -> float:
    if n < 0:
        raise ValueError("intervention count must be non-negative")
    if not elapsed_s > 0:
        raise ValueError("elapsed time must be positive")
    return (1.0 - n * takeover_s / elapsed_s) * 100.0


@dataclass
class MetricsRecord:
    strategy: str
    iteration: int
    seed: int
    mean_cte_m: float
    interventions: int
    elapsed_s: float
    autonomy_pct: float
    world_id: str = ""
    ood_flag: bool = False

    FIELDS = ("strategy", "iteration", "seed", "mean_cte_m", "interventions", "elapsed_s",
              "autonomy_pct", "world_id", "ood_flag")

    def __post_init__(self):
        if self.interventions < 0:
            raise ValueError("interventions must be >= 0")
        if not (self.mean_cte_m >= 0 or math.isnan(self.mean_cte_m)):
            raise ValueError("mean CTE must be >= 0")

    @property
    def key(self):
        return (self.strategy, int(self.iteration), int(self.seed))

    def as_row(self):
        d = asdict(self)
        return [d[f] for f in self.FIELDS]

    @classmethod
    def from_logs(cls, logs, rule, strategy, iteration, seed, world_id="", ood_flag=False):
        """Pool every policy-controlled step across ``logs``; counts and times add up."""
        ctes = np.concatenate([np.asarray(l.cte)[l.policy_control] for l in logs]) if logs else np.zeros(0)
        n = sum(metric_interventions(l, rule) for l in logs)
        elapsed = float(sum(len(l) for l in logs) * (logs[0].dt if logs else 0.1))
        mean = float(ctes.mean()) if len(ctes) else float("nan")
        return cls(strategy, int(iteration), int(seed), mean, int(n), elapsed,
                   metric_autonomy(n, elapsed), world_id, bool(ood_flag))
