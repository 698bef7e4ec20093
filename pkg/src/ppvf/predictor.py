"""Per-video utility via a mutual-exciting point process with exponential kernel.

The request rate of video ``i`` at time ``t`` is

    rate_i(t) = base_rate[i] + target_factors[i] . mix(t)
    mix(t)    = sum_j source_factors[j] * decayed_counts[j](t)
    decayed_counts[j](t) = sum over past requests of j of exp(-decay * lag)

so a full sweep costs O(I*D) and a single video O(D) once the latent mix is
cached. The pairwise influence ``target_factors[i] . source_factors[j]`` is
never materialized as an I x I matrix. Model fitting maximizes the
log-likelihood restricted to a recent window while keeping the full history
inside each intensity evaluation; the window integral has a closed form, so
quadrature appears only in test oracles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

PARAM_FLOOR = 1e-8


class LikelihoodError(ValueError):
    """Raised when an event intensity is non-positive (corrupted state)."""


@dataclass(frozen=True)
class ModelParams:
    """Positive parameters of the excitation model.

    base_rate: (I,) spontaneous request rates.
    target_factors: (I, D) how strongly each video responds to excitation.
    source_factors: (I, D) how strongly each video's requests excite others.
    decay: kernel decay per hour, exp(-decay * lag).
    """

    base_rate: np.ndarray
    target_factors: np.ndarray
    source_factors: np.ndarray
    decay: float

    def __post_init__(self):
        base = np.asarray(self.base_rate, dtype=np.float64)
        tgt = np.asarray(self.target_factors, dtype=np.float64)
        src = np.asarray(self.source_factors, dtype=np.float64)
        object.__setattr__(self, "base_rate", base)
        object.__setattr__(self, "target_factors", tgt)
        object.__setattr__(self, "source_factors", src)
        if base.ndim != 1 or tgt.ndim != 2 or src.ndim != 2:
            raise ValueError("base_rate must be 1-D; factor matrices 2-D")
        if tgt.shape != src.shape or tgt.shape[0] != base.shape[0]:
            raise ValueError("parameter shapes disagree")
        if self.decay <= 0:
            raise ValueError("decay must be positive")
        if base.min(initial=np.inf) < 0 or tgt.min(initial=np.inf) < 0 or src.min(initial=np.inf) < 0:
            raise ValueError("parameters must be non-negative")

    @property
    def catalog_size(self) -> int:
        return self.base_rate.shape[0]

    @property
    def dim(self) -> int:
        return self.target_factors.shape[1]

    @classmethod
    def constant(cls, catalog_size: int, dim: int, value: float = 1.0, decay: float = 0.01) -> "ModelParams":
        """All-ones style initialization used before any fitting."""
        return cls(
            base_rate=np.full(catalog_size, value),
            target_factors=np.full((catalog_size, dim), value),
            source_factors=np.full((catalog_size, dim), value),
            decay=decay,
        )

    def clamped(self, floor: float = PARAM_FLOOR) -> "ModelParams":
        """Project all entries onto [floor, inf); keeps log-intensities finite."""
        return replace(
            self,
            base_rate=np.maximum(self.base_rate, floor),
            target_factors=np.maximum(self.target_factors, floor),
            source_factors=np.maximum(self.source_factors, floor),
        )

    def to_json_dict(self) -> dict:
        return {
            "beta": self.base_rate.tolist(),
            "p": self.target_factors.tolist(),
            "q": self.source_factors.tolist(),
            "delta": self.decay,
            "D": self.dim,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ModelParams":
        params = cls(
            base_rate=np.array(doc["beta"], dtype=np.float64),
            target_factors=np.array(doc["p"], dtype=np.float64),
            source_factors=np.array(doc["q"], dtype=np.float64),
            decay=float(doc["delta"]),
        )
        if "D" in doc and int(doc["D"]) != params.dim:
            raise ValueError("declared latent dimension disagrees with factor shape")
        return params

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass
class KernelState:
    """Incrementally maintained kernel sums for one edge.

    ``decayed_counts[j]`` is the kernel-weighted count of video ``j``'s past
    requests; ``source_mix`` caches its projection through the source factors
    so per-video intensity queries cost O(D). The mix must be rebuilt whenever
    the source factors change (after a federated update).
    """

    decayed_counts: np.ndarray
    source_mix: np.ndarray
    last_update: float

    @classmethod
    def empty(cls, catalog_size: int, dim: int, at_time: float = -math.inf) -> "KernelState":
        # Starting before any representable instant lets events at t = 0 fold
        # in through the strict (last_update, to_time] contract.
        return cls(np.zeros(catalog_size), np.zeros(dim), at_time)

    def copy(self) -> "KernelState":
        return KernelState(self.decayed_counts.copy(), self.source_mix.copy(), self.last_update)

    def rebuild_mix(self, params: ModelParams) -> None:
        self.source_mix = params.source_factors.T @ self.decayed_counts


def advance_state(
    params: ModelParams,
    state: KernelState,
    to_time: float,
    event_times=(),
    event_videos=(),
    in_place: bool = False,
) -> KernelState:
    """Decay the state to ``to_time`` and fold in new events.

    Events must be sorted, lie in ``(last_update, to_time]``, and an event at
    exactly ``to_time`` contributes kernel weight 1 (zero lag).
    """
    if to_time < state.last_update:
        raise ValueError("cannot advance state backwards in time")
    out = state if in_place else state.copy()
    times = np.asarray(event_times, dtype=np.float64)
    vids = np.asarray(event_videos, dtype=np.int64)
    if times.shape != vids.shape:
        raise ValueError("event_times and event_videos must have equal length")
    if len(times):
        if np.any(np.diff(times) < 0):
            raise ValueError("new events must be sorted by time")
        if times[0] <= state.last_update or times[-1] > to_time:
            raise ValueError("new events must lie in (last_update, to_time]")
        weights = np.exp(-params.decay * (to_time - times))
        out.decayed_counts *= math.exp(-params.decay * (to_time - state.last_update))
        np.add.at(out.decayed_counts, vids, weights)
        out.source_mix *= math.exp(-params.decay * (to_time - state.last_update))
        out.source_mix += params.source_factors[vids].T @ weights
    else:
        fade = math.exp(-params.decay * (to_time - state.last_update))
        out.decayed_counts *= fade
        out.source_mix *= fade
    out.last_update = to_time
    return out


def rebuild_state(params: ModelParams, event_times, event_videos, at_time: float) -> KernelState:
    """Recompute the state from raw events (consistency oracle for advance_state)."""
    times = np.asarray(event_times, dtype=np.float64)
    vids = np.asarray(event_videos, dtype=np.int64)
    keep = times <= at_time
    times, vids = times[keep], vids[keep]
    counts = np.zeros(params.catalog_size)
    np.add.at(counts, vids, np.exp(-params.decay * (at_time - times)))
    state = KernelState(counts, np.zeros(params.dim), at_time)
    state.rebuild_mix(params)
    return state


def intensity(params: ModelParams, state: KernelState, video: int) -> float:
    """Request rate of one video at the state's time; O(D)."""
    return float(params.base_rate[video] + params.target_factors[video] @ state.source_mix)


def intensity_sweep(params: ModelParams, state: KernelState) -> np.ndarray:
    """Request rates of every video at the state's time; O(I*D)."""
    return params.base_rate + params.target_factors @ state.source_mix


def intensity_sweep_at(params: ModelParams, state: KernelState, at_time: float) -> np.ndarray:
    """Sweep at a later instant without mutating the state (pure decay)."""
    if at_time < state.last_update:
        raise ValueError("cannot evaluate before the state's time")
    fade = math.exp(-params.decay * (at_time - state.last_update))
    return params.base_rate + params.target_factors @ (state.source_mix * fade)


def kernel_integral(a: float, b: float, decay: float) -> float:
    """Integral of exp(-decay * t) over [a, b]; b may be infinite."""
    if a < 0 or a > b:
        raise ValueError("need 0 <= a <= b")
    hi = 0.0 if math.isinf(b) else math.exp(-decay * b)
    return (math.exp(-decay * a) - hi) / decay


@dataclass(frozen=True)
class TrainWindow:
    """Half-open likelihood window [end - length, end)."""

    end: float
    length: float

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("window length must be positive")

    @property
    def start(self) -> float:
        return self.end - self.length

    @classmethod
    def from_truncation(cls, end: float, truncation: float, decay: float) -> "TrainWindow":
        """Window whose far edge is where the kernel falls to ``truncation``."""
        if not 0 < truncation < 1:
            raise ValueError("truncation must lie in (0, 1)")
        return cls(end=end, length=-math.log(truncation) / decay)


class WindowStats:
    """Parameter-independent kernel statistics of one (log, window) pair.

    Everything here depends only on the event times and the decay, so one
    precomputation serves every likelihood/gradient evaluation of a fitting
    loop. ``counts_at`` holds, for each distinct in-window event time, the
    left-limit decayed counts vector (history strictly before that instant:
    simultaneous requests do not excite each other).
    """

    def __init__(self, event_times, event_videos, catalog_size: int, decay: float, window: TrainWindow):
        times = np.asarray(event_times, dtype=np.float64)
        vids = np.asarray(event_videos, dtype=np.int64)
        if len(times):
            if np.any(np.diff(times) < 0):
                raise ValueError("events must be sorted by time")
            if times[0] < 0 or times[-1] >= window.end:
                raise ValueError("log must cover [0, window.end) only")
        self.catalog_size = catalog_size
        self.decay = decay
        self.window = window

        start, end = window.start, window.end
        pre = times < start
        ins = (times >= start) & (times < end)
        pre_t, pre_v = times[pre], vids[pre]
        in_t, in_v = times[ins], vids[ins]

        counts0 = np.zeros(catalog_size)
        np.add.at(counts0, pre_v, np.exp(-decay * (start - pre_t)))

        uniq, inverse = np.unique(in_t, return_inverse=True)
        counts_at = np.empty((len(uniq), catalog_size))
        running = counts0
        prev = start
        for k, t in enumerate(uniq):
            running = running * math.exp(-decay * (t - prev))
            counts_at[k] = running
            group = in_v[inverse == k]
            np.add.at(running, group, 1.0)  # zero-lag kernel weight
            prev = t

        # Closed-form window integral weights per source video: events before
        # the window contribute over [start - tau, end - tau], in-window
        # events over [0, end - tau].
        integral_w = np.zeros(catalog_size)
        if len(pre_t):
            vals = (np.exp(-decay * (start - pre_t)) - np.exp(-decay * (end - pre_t))) / decay
            np.add.at(integral_w, pre_v, vals)
        if len(in_t):
            vals = (1.0 - np.exp(-decay * (end - in_t))) / decay
            np.add.at(integral_w, in_v, vals)

        self.event_videos = in_v
        self.event_group = inverse
        self.counts_at = counts_at
        self.integral_weights = integral_w
        self.n_events = len(in_t)

    def event_intensities(self, params: ModelParams) -> np.ndarray:
        """Left-limit intensity of each in-window event under ``params``."""
        if self.n_events == 0:
            return np.empty(0)
        mix_at = self.counts_at @ params.source_factors  # (n_ts, D)
        lam = params.base_rate[self.event_videos] + np.einsum(
            "nd,nd->n", params.target_factors[self.event_videos], mix_at[self.event_group]
        )
        return lam


def window_stats(params: ModelParams, log, window: TrainWindow) -> WindowStats:
    """Precompute reusable kernel statistics for a per-edge log."""
    return WindowStats(log.timestamps, log.video_ids, params.catalog_size, params.decay, window)


def window_log_likelihood(params: ModelParams, log, window: TrainWindow, stats: WindowStats | None = None) -> float:
    """Log-likelihood of the in-window events given the full history.

    Sum over window events of log rate, minus the integral of the total rate
    over the window (closed form via the exponential kernel).
    """
    if stats is None:
        stats = window_stats(params, log, window)
    lam = stats.event_intensities(params)
    if np.any(lam <= 0):
        raise LikelihoodError("non-positive intensity at an event; parameters or state corrupted")
    event_term = math.fsum(np.log(lam).tolist())
    source_total = params.source_factors.T @ stats.integral_weights  # (D,)
    integral = window.length * float(np.sum(params.base_rate)) + float(
        params.target_factors.sum(axis=0) @ source_total
    )
    return event_term - integral


@dataclass
class GradientBundle:
    """Analytic gradients of the window log-likelihood."""

    base_rate: np.ndarray
    target_factors: np.ndarray
    source_factors: np.ndarray

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.base_rate))
            and np.all(np.isfinite(self.target_factors))
            and np.all(np.isfinite(self.source_factors))
        )


def window_gradients(params: ModelParams, log, window: TrainWindow, stats: WindowStats | None = None) -> GradientBundle:
    """Gradients of :func:`window_log_likelihood` in the same parameterization.

    Event terms accumulate 1/rate weights; integral terms reuse the
    closed-form per-source weights, shared across all target rows.
    """
    if stats is None:
        stats = window_stats(params, log, window)
    I, D = params.catalog_size, params.dim
    g_base = np.full(I, -window.length)
    g_tgt = np.zeros((I, D))
    g_src = np.zeros((I, D))

    if stats.n_events:
        lam = stats.event_intensities(params)
        if np.any(lam <= 0):
            raise LikelihoodError("non-positive intensity at an event; parameters or state corrupted")
        inv = 1.0 / lam
        mix_at = stats.counts_at @ params.source_factors  # (n_ts, D)
        np.add.at(g_base, stats.event_videos, inv)
        np.add.at(g_tgt, stats.event_videos, mix_at[stats.event_group] * inv[:, None])
        weights = np.zeros((stats.counts_at.shape[0], D))
        np.add.at(weights, stats.event_group, params.target_factors[stats.event_videos] * inv[:, None])
        g_src += stats.counts_at.T @ weights

    source_total = params.source_factors.T @ stats.integral_weights  # (D,)
    g_tgt -= source_total[None, :]
    g_src -= np.outer(stats.integral_weights, params.target_factors.sum(axis=0))
    return GradientBundle(g_base, g_tgt, g_src)
