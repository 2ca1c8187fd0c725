"""Cooler allocation policies and their realized return on investment.

ROI = (incremental margin + cost savings) / total cooler investment, where
the cost savings count coolers the volume baseline would have placed with
clients that then missed the growth target, and that the evaluated policy
avoided. Growth here is associational: it is observed after installation,
not attributed to the cooler.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_COOLER_COST = 974.0
OBSERVATIONAL_CAVEAT = (
    "Realized growth is observational: clients were not randomly assigned coolers, so "
    "these figures describe targeting outcomes associated with each policy, not the "
    "causal effect of the cooler."
)


@dataclass(frozen=True)
class EconomicsConfig:
    margin_per_hl: float
    budget_coolers: int
    cooler_cost: float = DEFAULT_COOLER_COST

    def __post_init__(self):
        if self.margin_per_hl <= 0 or self.cooler_cost <= 0 or self.budget_coolers <= 0:
            raise ValueError("economics parameters must be positive")


@dataclass(frozen=True)
class Outcome:
    v_pre: float
    v_post: float

    @property
    def growth(self) -> float:
        return (self.v_post - self.v_pre) / self.v_pre if self.v_pre > 0 else float("inf")


@dataclass
class AllocationPlan:
    policy_name: str
    selected_clients: list[str]
    realized_growth_source: str
    roi: float
    incremental_margin: float
    cost_savings: float
    total_investment: float
    tau: float
    avoided_failures: list[str] = field(default_factory=list)
    hit_rate: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def allocate(values: Mapping[str, float], budget: int) -> list[str]:
    """Top-``budget`` clients by value (a score or a volume), ties by client_id."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if budget > len(values):
        logger.warning("budget %d exceeds population %d; clamping", budget, len(values))
        budget = len(values)
    ranked = sorted(values.items(), key=lambda kv: (-kv[1], kv[0]))
    return [cid for cid, _ in ranked[:budget]]


def volume_baseline(outcomes: Mapping[str, Outcome], budget: int) -> list[str]:
    return allocate({cid: o.v_pre for cid, o in outcomes.items()}, budget)


def evaluate_plan(selected: Sequence[str], outcomes: Mapping[str, Outcome], econ: EconomicsConfig,
                  tau: float, reference: Sequence[str] | None = None, policy_name: str = "policy",
                  source: str = "holdout labels") -> AllocationPlan:
    """Realized ROI of a selection.

    ``reference`` is the comparator selection (normally the volume baseline);
    its clients that were skipped by ``selected`` and failed to reach ``tau``
    are counted as avoided investments.
    """
    if not selected:
        raise ValueError("empty selection")
    if len(selected) > econ.budget_coolers:
        raise ValueError("selection exceeds the cooler budget")
    chosen = set(selected)
    # fsum is exact, so the total does not depend on selection order
    inc_hl = math.fsum(max(outcomes[c].v_post - outcomes[c].v_pre, 0.0) for c in selected)
    incremental = econ.margin_per_hl * inc_hl
    avoided = sorted(c for c in (reference or ()) if c not in chosen and outcomes[c].growth < tau)
    savings = econ.cooler_cost * len(avoided)
    investment = econ.cooler_cost * len(selected)
    hits = sum(outcomes[c].growth >= tau for c in selected)
    return AllocationPlan(
        policy_name=policy_name,
        selected_clients=list(selected),
        realized_growth_source=source,
        roi=(incremental + savings) / investment,
        incremental_margin=incremental,
        cost_savings=savings,
        total_investment=investment,
        tau=tau,
        avoided_failures=avoided,
        hit_rate=hits / len(selected),
    )


def compare_policies(scores: Mapping[str, float], outcomes: Mapping[str, Outcome],
                     econ: EconomicsConfig, tau: float,
                     source: str = "holdout labels") -> tuple[AllocationPlan, AllocationPlan]:
    """(model plan, baseline plan) at the same budget."""
    baseline = volume_baseline(outcomes, econ.budget_coolers)
    model = allocate(scores, econ.budget_coolers)
    return (
        evaluate_plan(model, outcomes, econ, tau, reference=baseline, policy_name="model_score",
                      source=source),
        evaluate_plan(baseline, outcomes, econ, tau, reference=baseline,
                      policy_name="volume_baseline", source=source),
    )


def write_allocation_report(plans: Sequence[AllocationPlan], econ: EconomicsConfig,
                            path: str | Path, extra: dict | None = None) -> dict:
    doc = {
        "economics": asdict(econ),
        "caveat": OBSERVATIONAL_CAVEAT,
        "policies": [p.to_dict() for p in plans],
        **(extra or {}),
    }
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return doc


def format_table(plans: Sequence[AllocationPlan]) -> str:
    head = f"{'policy':<16}{'selected':>9}{'hit rate':>10}{'incr. margin':>15}{'savings':>12}{'ROI':>8}"
    lines = [head, "-" * len(head)]
    for p in plans:
        lines.append(f"{p.policy_name:<16}{len(p.selected_clients):>9d}{p.hit_rate:>10.3f}"
                     f"{p.incremental_margin:>15,.0f}{p.cost_savings:>12,.0f}{p.roi:>8.3f}")
    return "\n".join(lines)


def outcomes_from_arrays(ids: Sequence[str], v_pre: Sequence[float],
                         v_post: Sequence[float]) -> dict[str, Outcome]:
    return {c: Outcome(float(a), float(b)) for c, a, b in zip(ids, np.asarray(v_pre), np.asarray(v_post))}
