"""Online privacy-budget allocation for prefetch candidates.

A video becomes a prefetch candidate only if its utility-per-budget ratio
clears a threshold that rises as the video's budget depletes, and only if
enough budget remains for one more charge. Budget accounting is exact
rational arithmetic, so the per-video cap is never violated by float drift.
An exact offline optimum (branch and bound over the step/budget feasible
assignments) backs an empirical check of the online algorithm's
competitive ratio, which is bounded by ``1 + ln(upper/lower)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np


class InstanceTooLarge(ValueError):
    """Offline oracle guard; use :func:`offline_lp_bound` for bigger instances."""


class CompetitiveRatioViolation(AssertionError):
    """Empirical worst ratio exceeded the theoretical bound plus slack."""


@dataclass(frozen=True)
class ThresholdConfig:
    """Ratio bounds: every utility/cost ratio is assumed inside (lower, upper)."""

    upper: float
    lower: float

    def __post_init__(self):
        if not (0 < self.lower <= self.upper):
            raise ValueError("need 0 < lower <= upper")

    @property
    def knee(self) -> float:
        """Consumed fraction below which the threshold stays at the lower bound."""
        return 1.0 / (1.0 + math.log(self.upper / self.lower))

    @property
    def cr_bound(self) -> float:
        return 1.0 + math.log(self.upper / self.lower)


def threshold(consumed_fraction: float, cfg: ThresholdConfig) -> float:
    """Admission bar for a video that has spent ``consumed_fraction`` of its budget.

    Flat at the lower bound up to the knee, then exponential up to the upper
    bound at full consumption; continuous and non-decreasing.
    """
    if not 0 <= consumed_fraction <= 1:
        raise ValueError("consumed_fraction must lie in [0, 1]")
    if consumed_fraction <= cfg.knee:
        return cfg.lower
    return (cfg.upper * math.e / cfg.lower) ** consumed_fraction * cfg.lower / math.e


@dataclass
class PrivacyLedger:
    """Per-video budget accounting for one edge, in exact fractions.

    ``total_budget`` is the lifetime allowance per video, ``unit_cost[i]``
    the charge for selecting video ``i`` once, and ``consumed[i]`` the sum of
    committed charges, always at most the total. A zero total budget is legal
    and makes every admission impossible.
    """

    total_budget: Fraction
    unit_cost: list[Fraction]
    prefetch_cap: int
    consumed: list[Fraction] = field(default_factory=list)

    def __post_init__(self):
        self.total_budget = Fraction(self.total_budget)
        self.unit_cost = [Fraction(c) for c in self.unit_cost]
        if self.total_budget < 0:
            raise ValueError("total_budget must be non-negative")
        if any(c <= 0 for c in self.unit_cost):
            raise ValueError("unit costs must be positive")
        if self.prefetch_cap < 0:
            raise ValueError("prefetch_cap must be non-negative")
        if not self.consumed:
            self.consumed = [Fraction(0)] * len(self.unit_cost)
        if len(self.consumed) != len(self.unit_cost):
            raise ValueError("consumed/unit_cost length mismatch")

    @classmethod
    def uniform(cls, catalog_size: int, total_budget, unit_cost, prefetch_cap: int) -> "PrivacyLedger":
        return cls(
            total_budget=Fraction(total_budget),
            unit_cost=[Fraction(unit_cost)] * catalog_size,
            prefetch_cap=prefetch_cap,
        )

    @property
    def catalog_size(self) -> int:
        return len(self.unit_cost)

    def consumed_fraction(self, video: int) -> Fraction:
        if self.total_budget == 0:
            return Fraction(0)
        return self.consumed[video] / self.total_budget

    def residual_fraction(self, video: int) -> Fraction:
        return Fraction(1) - self.consumed_fraction(video)

    def can_charge(self, video: int) -> bool:
        """Strict feasibility test of one more charge (cost < remaining budget)."""
        return self.unit_cost[video] < self.total_budget - self.consumed[video]

    def charge(self, video: int) -> None:
        if self.consumed[video] + self.unit_cost[video] > self.total_budget:
            raise ValueError("charge would exceed the per-video budget")
        self.consumed[video] += self.unit_cost[video]

    def copy(self) -> "PrivacyLedger":
        return PrivacyLedger(
            total_budget=self.total_budget,
            unit_cost=list(self.unit_cost),
            prefetch_cap=self.prefetch_cap,
            consumed=list(self.consumed),
        )


@dataclass(frozen=True)
class CandidateSet:
    """Videos admitted for one prefetch step, in admission order."""

    videos: tuple[int, ...]
    cap: int

    def __post_init__(self):
        if len(self.videos) > self.cap:
            raise ValueError("candidate set exceeds the prefetch cap")
        if len(set(self.videos)) != len(self.videos):
            raise ValueError("candidate set contains duplicates")

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    def __contains__(self, video: int) -> bool:
        return video in self.videos


def select_candidates(
    utilities: np.ndarray,
    ledger: PrivacyLedger,
    cfg: ThresholdConfig,
    rng,
) -> tuple[CandidateSet, PrivacyLedger]:
    """Admit up to ``prefetch_cap`` videos drawn uniformly without replacement.

    A drawn video is admitted iff its utility/cost ratio strictly clears the
    threshold at its current consumed fraction and one more charge fits in
    its remaining budget; admissions charge the ledger immediately. The
    ledger is updated in place and returned.
    """
    utilities = np.asarray(utilities, dtype=np.float64)
    if utilities.shape[0] != ledger.catalog_size:
        raise ValueError("utility vector length must match the ledger catalog")
    admitted: list[int] = []
    for video in rng.permutation(ledger.catalog_size):
        if len(admitted) >= ledger.prefetch_cap:
            break
        video = int(video)
        gamma = float(ledger.consumed_fraction(video))
        ratio = utilities[video] / float(ledger.unit_cost[video])
        if ratio > threshold(gamma, cfg) and ledger.can_charge(video):
            ledger.charge(video)
            admitted.append(video)
    return CandidateSet(videos=tuple(admitted), cap=ledger.prefetch_cap), ledger


def _max_admissions(ledger: PrivacyLedger) -> list[int]:
    out = []
    for cost in ledger.unit_cost:
        out.append(int(ledger.total_budget // cost) if ledger.total_budget > 0 else 0)
    return out


def offline_optimum(utilities_per_step: np.ndarray, ledger_template: PrivacyLedger) -> float:
    """Exact maximum total utility over all feasible binary assignments.

    Feasibility: at most ``prefetch_cap`` videos per step, and each video's
    total charges within its budget. Solved by depth-first branch and bound
    over per-step subsets with a top-``cap`` suffix bound; guarded to at most
    24 binary variables.
    """
    util = np.asarray(utilities_per_step, dtype=np.float64)
    if util.ndim != 2:
        raise ValueError("utilities_per_step must be a steps x videos matrix")
    steps, n_videos = util.shape
    if n_videos != ledger_template.catalog_size:
        raise ValueError("utility matrix width must match the ledger catalog")
    if steps * n_videos > 24:
        raise InstanceTooLarge(
            f"{steps * n_videos} binary variables exceed the exact-search guard of 24; "
            "use offline_lp_bound for an upper bound"
        )
    if np.any(util < 0):
        raise ValueError("utilities must be non-negative")
    cap = ledger_template.prefetch_cap
    quota = _max_admissions(ledger_template)

    # Upper bound on the remaining steps: the top-cap utilities of each,
    # ignoring budgets (admissible, never underestimates).
    step_best = []
    for k in range(steps):
        top = np.sort(util[k])[::-1][: min(cap, n_videos)]
        step_best.append(float(np.sum(top)))
    suffix = [0.0] * (steps + 1)
    for k in range(steps - 1, -1, -1):
        suffix[k] = suffix[k + 1] + step_best[k]

    subsets_cache: list[list[tuple[float, tuple[int, ...]]]] = []
    for k in range(steps):
        options = []
        videos = list(range(n_videos))
        for mask in range(1 << n_videos):
            chosen = tuple(v for v in videos if mask & (1 << v))
            if len(chosen) > cap:
                continue
            options.append((float(sum(util[k][v] for v in chosen)), chosen))
        options.sort(key=lambda t: -t[0])
        subsets_cache.append(options)

    best = 0.0
    remaining = list(quota)

    def search(k: int, value: float):
        nonlocal best
        if value + suffix[k] <= best:
            return
        if k == steps:
            best = max(best, value)
            return
        for subset_value, chosen in subsets_cache[k]:
            if any(remaining[v] <= 0 for v in chosen):
                continue
            for v in chosen:
                remaining[v] -= 1
            search(k + 1, value + subset_value)
            for v in chosen:
                remaining[v] += 1

    search(0, 0.0)
    return best


def offline_lp_bound(utilities_per_step: np.ndarray, ledger_template: PrivacyLedger) -> float:
    """LP relaxation of the offline problem; an upper bound on the optimum."""
    from scipy.optimize import linprog

    util = np.asarray(utilities_per_step, dtype=np.float64)
    steps, n_videos = util.shape
    n = steps * n_videos
    # Variables x[k, i] flattened row-major; maximize sum(util * x).
    a_rows, b_vals = [], []
    for k in range(steps):
        row = np.zeros(n)
        row[k * n_videos : (k + 1) * n_videos] = 1.0
        a_rows.append(row)
        b_vals.append(float(ledger_template.prefetch_cap))
    for i in range(n_videos):
        row = np.zeros(n)
        row[i::n_videos] = float(ledger_template.unit_cost[i])
        a_rows.append(row)
        b_vals.append(float(ledger_template.total_budget))
    res = linprog(
        c=-util.ravel(),
        A_ub=np.array(a_rows),
        b_ub=np.array(b_vals),
        bounds=[(0.0, 1.0)] * n,
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"LP relaxation failed: {res.message}")
    return float(-res.fun)


@dataclass(frozen=True)
class CrInstance:
    """One random allocation instance for competitive-ratio measurement."""

    utilities: np.ndarray  # steps x videos
    ledger: PrivacyLedger
    cfg: ThresholdConfig


def random_cr_instances(
    count: int,
    n_videos: int,
    steps: int,
    prefetch_cap: int,
    cfg: ThresholdConfig,
    budget_units: int,
    seed: int,
) -> list[CrInstance]:
    """Instances with unit costs, ``budget_units`` charges per video, and
    utility/cost ratios drawn strictly inside (lower, upper)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        margin = 1e-9 * (cfg.upper - cfg.lower)
        lo, hi = cfg.lower + margin, cfg.upper - margin
        if hi <= lo:
            ratios = np.full((steps, n_videos), cfg.upper)
        else:
            ratios = np.exp(rng.uniform(math.log(lo), math.log(hi), size=(steps, n_videos)))
        ledger = PrivacyLedger.uniform(
            catalog_size=n_videos,
            total_budget=budget_units,
            unit_cost=1,
            prefetch_cap=prefetch_cap,
        )
        out.append(CrInstance(utilities=ratios, ledger=ledger, cfg=cfg))
    return out


def run_online_allocation(instance: CrInstance, rng) -> float:
    """Total utility collected by the online rule over the instance's steps."""
    ledger = instance.ledger.copy()
    total = 0.0
    for k in range(instance.utilities.shape[0]):
        chosen, ledger = select_candidates(instance.utilities[k], ledger, instance.cfg, rng)
        total += float(sum(instance.utilities[k][v] for v in chosen))
    return total


def empirical_cr(instances: Sequence[CrInstance], seed: int, slack_factor: float = 0.15) -> float:
    """Worst observed offline/online utility ratio over the instances.

    Enforces the small-cost assumption (unit cost at most budget/20) and
    raises :class:`CompetitiveRatioViolation` if the worst ratio exceeds the
    theoretical bound inflated by ``slack_factor``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    bound = 0.0
    for inst in instances:
        if any(cost * 20 > inst.ledger.total_budget for cost in inst.ledger.unit_cost):
            raise ValueError("instances must satisfy unit_cost <= total_budget / 20")
        online = run_online_allocation(inst, rng)
        optimum = offline_optimum(inst.utilities, inst.ledger)
        if optimum == 0.0:
            continue
        if online == 0.0:
            ratio = math.inf
        else:
            ratio = optimum / online
        worst = max(worst, ratio)
        bound = max(bound, inst.cfg.cr_bound)
    if worst > bound * (1.0 + slack_factor):
        raise CompetitiveRatioViolation(
            f"worst ratio {worst:.4f} exceeds bound {bound:.4f} with slack {slack_factor:.2f}"
        )
    return worst
