"""Trace-driven simulation of privacy-preserving prefetching at the edge.

Every request first probes its edge's cache. A miss triggers one utility
sweep shared by candidate selection, sensitivity calibration, noisy
prefetch sampling, and cache scoring; the fetch sent upstream is the viewed
video plus the sampled prefetches, and that union is all the content
provider ever observes. Model parameters refresh on a fixed schedule
through federated fitting over the edges' private logs. The warmup period
exercises caches and state but spends no privacy budget and counts toward
no metric.

Edges are independent state machines between fitting barriers, so their
event streams may be processed on worker threads; all randomness flows
from per-edge seeded streams and all reductions are order-independent,
making reports identical for any worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import cache as cache_mod
from . import cdp, scheduler
from .federation import TrainConfig, run_fit_round
from .predictor import KernelState, ModelParams, TrainWindow, advance_state, intensity_sweep
from .trace import EventLog

POLICIES = ("ppvf", "sage", "bestfit", "mav", "lru", "lfu")
_MEP_POLICIES = {"ppvf", "sage", "bestfit"}


@dataclass(frozen=True)
class SimConfig:
    policy: str = "ppvf"
    init_horizon: float = 240.0
    test_horizon: float = 720.0
    total_budget: float = 15.0
    unit_cost: float = 1.0
    prefetch_cap: int = 4
    cache_fraction: float = 0.01
    bounds: tuple[float, float] | None = None  # (lower, upper); None = warmup estimate
    decay: float = 0.01
    latent_dim: int = 10
    truncation: float = math.exp(-0.48)
    train: TrainConfig = field(default_factory=TrainConfig)
    slot_hours: float = 1.0
    mav_weight: float = 0.9
    seed: int = 0
    workers: int | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if not 0 <= self.init_horizon < self.test_horizon:
            raise ValueError("need 0 <= init_horizon < test_horizon")
        if self.total_budget < 0 or self.unit_cost <= 0:
            raise ValueError("total_budget must be >= 0 and unit_cost positive")
        if self.prefetch_cap < 1:
            raise ValueError("prefetch_cap must be >= 1")
        if not 0 < self.cache_fraction <= 1:
            raise ValueError("cache_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class FetchRecord:
    """One upstream fetch: the viewed video joined with its prefetch noise."""

    edge_id: int
    step: int
    viewed: int
    prefetched: tuple[int, ...]

    @property
    def fetched(self) -> tuple[int, ...]:
        return (self.viewed,) + tuple(v for v in self.prefetched if v != self.viewed)


@dataclass
class SimReport:
    policy: str
    cache_capacity: int
    hits: int = 0
    requests: int = 0
    per_edge_hits: list[int] = field(default_factory=list)
    per_edge_requests: list[int] = field(default_factory=list)
    per_edge_fetches: list[int] = field(default_factory=list)
    per_user_js: dict[tuple[int, int], float] = field(default_factory=dict)
    residual_fractions: list[float] = field(default_factory=list)
    fl_losses: list[tuple[float, int, float]] = field(default_factory=list)
    hit_sequence: list[bool] = field(default_factory=list)

    @property
    def chr_value(self) -> float:
        return 0.0 if self.requests == 0 else self.hits / self.requests

    @property
    def mean_js(self) -> float:
        if not self.per_user_js:
            return 0.0
        return float(np.mean(list(self.per_user_js.values())))


def jaccard_similarity(profile_a: set, profile_b: set) -> float:
    """Overlap of two request supports; both empty counts as identical-empty 0."""
    if not profile_a and not profile_b:
        return 0.0
    union = profile_a | profile_b
    return len(profile_a & profile_b) / len(union)


def cache_hit_ratio(hits: int, requests: int) -> float:
    if requests <= 0:
        raise ValueError("cache hit ratio undefined without requests")
    value = hits / requests
    if not 0 <= value <= 1:
        raise ValueError("hit count exceeds request count")
    return value


def budget_cdf(ledgers) -> list[tuple[float, float]]:
    """Empirical CDF of per-video residual budget fractions, pooled over edges."""
    residuals = []
    for ledger in ledgers:
        for video in range(ledger.catalog_size):
            residuals.append(float(ledger.residual_fraction(video)))
    if not residuals:
        return []
    values, counts = np.unique(np.array(residuals), return_counts=True)
    fractions = np.cumsum(counts) / len(residuals)
    return [(float(x), float(c)) for x, c in zip(values, fractions)]


class _BoundTracker:
    """Running utility/cost ratio extremes during warmup, frozen at test time."""

    def __init__(self, fixed: tuple[float, float] | None):
        self.lo = math.inf
        self.hi = 0.0
        self.cfg = (
            scheduler.ThresholdConfig(lower=fixed[0], upper=fixed[1]) if fixed else None
        )

    def observe(self, ratios: np.ndarray) -> None:
        if self.cfg is not None:
            return
        positive = ratios[ratios > 0]
        if positive.size:
            self.lo = min(self.lo, float(positive.min()))
            self.hi = max(self.hi, float(positive.max()))

    def frozen(self, fallback_ratios: np.ndarray) -> scheduler.ThresholdConfig:
        if self.cfg is None:
            if self.hi <= 0.0:
                self.observe(fallback_ratios)
            if self.hi <= 0.0:
                self.lo = self.hi = 1.0
            self.cfg = scheduler.ThresholdConfig(lower=min(self.lo, self.hi), upper=self.hi)
        return self.cfg


class _EdgeRuntime:
    """All mutable per-edge state driven by that edge's event stream."""

    def __init__(self, edge_id: int, cfg: SimConfig, catalog_size: int, capacity: int):
        self.edge_id = edge_id
        self.cfg = cfg
        self.kernel = KernelState.empty(catalog_size, cfg.latent_dim)
        self.pending_ts: float | None = None
        self.pending_videos: list[int] = []
        self.history_t: list[float] = []
        self.history_v: list[int] = []
        self.ledger = scheduler.PrivacyLedger.uniform(
            catalog_size, Fraction(cfg.total_budget), Fraction(cfg.unit_cost), cfg.prefetch_cap
        )
        self.corr = cdp.CorrelationState(catalog_size)
        self.bounds = _BoundTracker(cfg.bounds)
        if cfg.policy == "lru":
            self.cache = cache_mod.LruCache(capacity)
        elif cfg.policy == "lfu":
            self.cache = cache_mod.LfuCache(capacity)
        else:
            self.cache = cache_mod.EdgeCache(capacity)
        self.mav = (
            cache_mod.MavState(catalog_size, cfg.slot_hours, cfg.mav_weight)
            if cfg.policy == "mav"
            else None
        )
        self.rng_sched = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(edge_id, 0))
        )
        self.rng_em = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(edge_id, 1))
        )
        self.hits = 0
        self.requests = 0
        self.miss_step = 0
        self.exposed: set[int] = set()
        self.user_profiles: dict[int, set[int]] = {}
        self.hit_sequence: list[bool] = []

    # -- kernel bookkeeping ------------------------------------------------

    def _fold_pending(self, params: ModelParams) -> None:
        if self.pending_ts is None:
            return
        advance_state(
            params,
            self.kernel,
            self.pending_ts,
            [self.pending_ts] * len(self.pending_videos),
            self.pending_videos,
            in_place=True,
        )
        self.pending_ts = None
        self.pending_videos = []

    def _left_limit_state(self, params: ModelParams, at_time: float) -> KernelState:
        """Kernel state at ``at_time`` excluding any event at exactly that instant."""
        if self.pending_ts is not None and at_time > self.pending_ts:
            self._fold_pending(params)
        fade = math.exp(-params.decay * (at_time - self.kernel.last_update))
        return KernelState(
            self.kernel.decayed_counts * fade, self.kernel.source_mix * fade, at_time
        )

    def _record_event(self, params: ModelParams, video: int, ts: float) -> None:
        if self.pending_ts is not None and ts > self.pending_ts:
            self._fold_pending(params)
        self.pending_ts = ts
        self.pending_videos.append(video)
        self.history_t.append(ts)
        self.history_v.append(video)

    # -- event processing ----------------------------------------------------

    def process(self, params: ModelParams, user: int, video: int, ts: float) -> None:
        cfg = self.cfg
        in_test = ts >= cfg.init_horizon
        if in_test:
            self.requests += 1
            self.user_profiles.setdefault(user, set()).add(video)

        if cfg.policy in ("lru", "lfu"):
            step = cache_mod.baseline_step(cfg.policy, self.cache, video)
            if in_test:
                self.hits += int(step.hit)
                self.hit_sequence.append(step.hit)
                self.exposed.update(step.fetched)
            return

        hit = self.cache.lookup(video)
        if in_test:
            self.hits += int(hit)
            self.hit_sequence.append(hit)
        if not hit:
            self._on_miss(params, video, ts, in_test)

        if self.mav is not None:
            self.mav.record(video, ts)
        if cfg.policy in _MEP_POLICIES:
            self._record_event(params, video, ts)

    def _sweep(self, params: ModelParams, ts: float) -> np.ndarray:
        if self.mav is not None:
            return self.mav.scores(ts)
        state = self._left_limit_state(params, ts)
        return intensity_sweep(params, state)

    def _on_miss(self, params: ModelParams, video: int, ts: float, in_test: bool) -> None:
        cfg = self.cfg
        self.miss_step += 1
        lam = self._sweep(params, ts)
        ratios = lam / cfg.unit_cost

        prefetched: tuple[int, ...] = ()
        if not in_test:
            self.bounds.observe(ratios)
            # Warmup exercises the cache and state only; no budget is spent.
            self.corr.update(lam)
        else:
            candidates = self._select_candidates(lam, ratios)
            self.corr.update(lam, tracked_videos=tuple(candidates))
            if len(candidates):
                state = (
                    self._left_limit_state(params, ts)
                    if self.mav is None
                    else KernelState.empty(len(lam), params.dim, ts)
                )
                sens = cdp.candidate_sensitivities(params, state, self.corr, candidates)
                worst = cdp.global_sensitivity(sens)
                eps_step = float(
                    sum(self.ledger.unit_cost[v] for v in candidates) / self.ledger.prefetch_cap
                )
                decision = cdp.em_sample(
                    candidates,
                    lam[list(candidates)],
                    eps_step,
                    worst,
                    self.ledger.prefetch_cap,
                    self.rng_em,
                )
                prefetched = decision.chosen

        record = FetchRecord(
            edge_id=self.edge_id, step=self.miss_step, viewed=video, prefetched=prefetched
        )
        if in_test:
            self.exposed.update(record.fetched)
        self.cache.refresh_scores(lam)
        self.cache.admit([(v, lam[v]) for v in record.fetched])

    def _select_candidates(self, lam: np.ndarray, ratios: np.ndarray) -> scheduler.CandidateSet:
        cfg = self.cfg
        if cfg.policy == "bestfit":
            cands, _ = cache_mod.select_candidates_best_utility(lam, self.ledger)
        elif cfg.policy == "sage":
            cands, _ = cache_mod.select_candidates_random(lam, self.ledger, self.rng_sched)
        else:  # ppvf, mav: threshold rule
            tc = self.bounds.frozen(ratios)
            cands, _ = scheduler.select_candidates(lam, self.ledger, tc, self.rng_sched)
        return cands


def _fl_schedule(cfg: SimConfig, horizon: float) -> list[float]:
    interval = cfg.train.update_interval_hours
    times = []
    t = interval
    while t < horizon:
        times.append(t)
        t += interval
    return times


def run_simulation(cfg: SimConfig, log: EventLog) -> SimReport:
    if log.horizon > cfg.test_horizon:
        raise ValueError("log horizon extends past the configured test horizon")
    catalog = log.catalog_size
    capacity = max(1, round(cfg.cache_fraction * catalog))
    params = ModelParams.constant(catalog, cfg.latent_dim, 1.0, cfg.decay)
    edges = [_EdgeRuntime(e, cfg, catalog, capacity) for e in range(log.edge_count)]

    barriers = _fl_schedule(cfg, cfg.test_horizon) if cfg.policy in _MEP_POLICIES else []
    report = SimReport(policy=cfg.policy, cache_capacity=capacity)

    ts_all = log.timestamps
    cursor = 0
    n = len(ts_all)
    for barrier in barriers + [math.inf]:
        stop = n if math.isinf(barrier) else int(np.searchsorted(ts_all, barrier, side="left"))
        if stop > cursor:
            segment = slice(cursor, stop)
            _process_segment(cfg, params, edges, log, segment)
            cursor = stop
        if math.isinf(barrier):
            break
        for rt in edges:
            rt._fold_pending(params)
        window = TrainWindow.from_truncation(barrier, cfg.truncation, cfg.decay)
        edge_logs = [_edge_history_log(rt, catalog, log.edge_count, barrier) for rt in edges]
        result = run_fit_round(edge_logs, params, window, cfg.train, workers=cfg.workers)
        params = result.params
        for idx, loss in enumerate(result.losses):
            report.fl_losses.append((barrier, idx, loss))
        for rt in edges:
            rt.kernel.rebuild_mix(params)

    _finalize_report(report, edges)
    return report


def _process_segment(cfg: SimConfig, params: ModelParams, edges, log: EventLog, segment: slice) -> None:
    edge_ids = log.edge_ids[segment]
    users = log.user_ids[segment]
    videos = log.video_ids[segment]
    times = log.timestamps[segment]

    def run_edge(rt: _EdgeRuntime) -> None:
        mask = edge_ids == rt.edge_id
        for u, v, t in zip(users[mask], videos[mask], times[mask]):
            rt.process(params, int(u), int(v), float(t))

    if cfg.workers is not None and cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(run_edge, edges))
    else:
        for rt in edges:
            run_edge(rt)


def _edge_history_log(rt: _EdgeRuntime, catalog: int, edge_count: int, horizon: float) -> EventLog:
    n = len(rt.history_t)
    return EventLog(
        edge_ids=np.full(n, rt.edge_id, dtype=np.int64),
        user_ids=np.zeros(n, dtype=np.int64),
        video_ids=np.array(rt.history_v, dtype=np.int64),
        timestamps=np.array(rt.history_t, dtype=np.float64),
        catalog_size=catalog,
        edge_count=edge_count,
        horizon=horizon,
    )


def _finalize_report(report: SimReport, edges) -> None:
    for rt in edges:
        report.hits += rt.hits
        report.requests += rt.requests
        report.per_edge_hits.append(rt.hits)
        report.per_edge_requests.append(rt.requests)
        report.per_edge_fetches.append(len(rt.exposed))
        for user, profile in sorted(rt.user_profiles.items()):
            report.per_user_js[(rt.edge_id, user)] = jaccard_similarity(profile, rt.exposed)
        for video in range(rt.ledger.catalog_size):
            report.residual_fractions.append(float(rt.ledger.residual_fraction(video)))
        report.hit_sequence.extend(rt.hit_sequence)


# -- CSV serialization -------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_reports(
    out_dir,
    runs: list[tuple[str, float, SimReport]],
    sweep_name: str,
    cache_fraction: float,
) -> list[str]:
    """Emit the metric CSVs for a batch of (policy, sweep value, report) runs.

    Returns the written file names. Per-run distribution files carry the
    policy and sweep value in their names once more than one run is present.
    """
    written = []

    chr_rows = [(policy, cache_fraction if sweep_name != "c" else value, rep.chr_value) for policy, value, rep in runs]
    write_csv(os.path.join(out_dir, "chr.csv"), ["policy", "capacity", "chr"], chr_rows)
    written.append("chr.csv")

    js_rows = [(policy, value, rep.mean_js) for policy, value, rep in runs]
    write_csv(os.path.join(out_dir, "js.csv"), ["policy", sweep_name, "mean_js"], js_rows)
    written.append("js.csv")

    single = len(runs) == 1
    for policy, value, rep in runs:
        suffix = "" if single else f".{policy}.{_fmt(float(value))}"
        cdf_name = f"budget_cdf{suffix}.csv"
        ledger_points = _cdf_points(rep)
        write_csv(os.path.join(out_dir, cdf_name), ["x", "cdf"], ledger_points)
        written.append(cdf_name)
        loss_name = f"fl_loss{suffix}.csv"
        write_csv(
            os.path.join(out_dir, loss_name),
            ["t_theta", "round", "loss"],
            rep.fl_losses,
        )
        written.append(loss_name)
    return written


def _cdf_points(report: SimReport) -> list[tuple[float, float]]:
    residuals = np.array(report.residual_fractions)
    if residuals.size == 0:
        return []
    values, counts = np.unique(residuals, return_counts=True)
    fractions = np.cumsum(counts) / residuals.size
    return [(float(x), float(c)) for x, c in zip(values, fractions)]
