"""Request traces: loading real-format logs, synthetic generation, edge partitioning.

A trace is an ordered sequence of viewing requests ``(edge, user, video, t)``
with timestamps in hours. Synthetic traces are drawn from a multivariate
mutual-exciting process with exponential kernel by Ogata thinning, so tests
can recover known ground-truth parameters without an external dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .predictor import ModelParams


class TraceFormatError(ValueError):
    """Raised when a trace file cannot be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class StabilityError(ValueError):
    """Raised when the ground-truth excitation is explosive (branching ratio >= 1)."""


class RequestEvent(NamedTuple):
    edge_id: int
    user_id: int
    video_id: int
    timestamp: float


@dataclass(frozen=True)
class EventLog:
    """Time-sorted viewing requests over a fixed catalog and edge set.

    Events are stored as parallel arrays for fast scanning; iteration yields
    :class:`RequestEvent` tuples. All timestamps lie in ``[0, horizon)`` and
    ties preserve input order (stable sort), so replays are deterministic.
    """

    edge_ids: np.ndarray
    user_ids: np.ndarray
    video_ids: np.ndarray
    timestamps: np.ndarray
    catalog_size: int
    edge_count: int
    horizon: float

    def __post_init__(self):
        n = len(self.timestamps)
        if not (len(self.edge_ids) == len(self.user_ids) == len(self.video_ids) == n):
            raise ValueError("parallel event arrays must have equal length")
        if n:
            if np.any(np.diff(self.timestamps) < 0):
                raise ValueError("events must be sorted by timestamp")
            if self.timestamps[0] < 0 or self.timestamps[-1] >= self.horizon:
                raise ValueError("timestamps must lie in [0, horizon)")
            if int(self.video_ids.max()) >= self.catalog_size:
                raise ValueError("video id outside catalog")
            if int(self.edge_ids.max()) >= self.edge_count:
                raise ValueError("edge id outside edge set")

    def __len__(self) -> int:
        return len(self.timestamps)

    def __iter__(self) -> Iterator[RequestEvent]:
        for e, u, v, t in zip(self.edge_ids, self.user_ids, self.video_ids, self.timestamps):
            yield RequestEvent(int(e), int(u), int(v), float(t))

    @property
    def events(self) -> list[RequestEvent]:
        return list(self)

    @classmethod
    def from_events(
        cls,
        events: Sequence[RequestEvent],
        catalog_size: int | None = None,
        edge_count: int | None = None,
        horizon: float | None = None,
    ) -> "EventLog":
        evs = sorted(events, key=lambda ev: ev.timestamp)
        edge = np.array([ev.edge_id for ev in evs], dtype=np.int64)
        user = np.array([ev.user_id for ev in evs], dtype=np.int64)
        vid = np.array([ev.video_id for ev in evs], dtype=np.int64)
        ts = np.array([ev.timestamp for ev in evs], dtype=np.float64)
        if catalog_size is None:
            catalog_size = int(vid.max()) + 1 if len(evs) else 1
        if edge_count is None:
            edge_count = int(edge.max()) + 1 if len(evs) else 1
        if horizon is None:
            horizon = float(ts[-1]) + 1.0 if len(evs) else 1.0
        return cls(edge, user, vid, ts, catalog_size, edge_count, horizon)


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground-truth configuration for synthetic trace generation.

    ``users_per_edge`` controls how many synthetic user identities each edge
    draws events for; user ids are globally unique (edge * users_per_edge + k).
    """

    catalog_size: int
    edge_count: int
    horizon: float
    ground_truth: ModelParams
    base_rate_scale: float = 1.0
    rng_seed: int = 0
    users_per_edge: int = 8

    def __post_init__(self):
        if self.catalog_size < 1 or self.edge_count < 1:
            raise ValueError("catalog_size and edge_count must be >= 1")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.base_rate_scale < 0:
            raise ValueError("base_rate_scale must be non-negative")
        if self.users_per_edge < 1:
            raise ValueError("users_per_edge must be >= 1")
        if self.ground_truth.catalog_size != self.catalog_size:
            raise ValueError("ground_truth catalog size mismatch")


def load_trace(
    path,
    quantize_hours: float = 1.0,
    catalog_size: int | None = None,
) -> EventLog:
    """Parse a line-delimited ``edge_id,user_id,video_id,timestamp`` file.

    Timestamps are floored to multiples of ``quantize_hours``. Lines starting
    with ``#`` and blank lines are skipped. Duplicate records are preserved:
    request multiplicity carries signal for frequency-based policies and for
    the likelihood. The catalog defaults to ``1 + max(video_id)`` unless
    overridden.
    """
    if quantize_hours <= 0:
        raise ValueError("quantize_hours must be positive")
    edges, users, vids, tss = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise TraceFormatError(
                    f"expected 4 comma-separated fields, got {len(parts)}", line_no
                )
            try:
                e, u, v = int(parts[0]), int(parts[1]), int(parts[2])
                t = float(parts[3])
            except ValueError as exc:
                raise TraceFormatError(str(exc), line_no) from None
            if t < 0:
                raise TraceFormatError("negative timestamp", line_no)
            if e < 0 or v < 0:
                raise TraceFormatError("negative edge or video id", line_no)
            edges.append(e)
            users.append(u)
            vids.append(v)
            tss.append(t)
    if not edges:
        raise TraceFormatError("trace file contains no records")

    ts = np.array(tss, dtype=np.float64)
    # The tiny bias guards against 2.9999999 from float division of an
    # already-quantized stamp; it keeps quantization idempotent.
    ts = np.floor(ts / quantize_hours + 1e-9) * quantize_hours
    order = np.argsort(ts, kind="stable")

    vid_arr = np.array(vids, dtype=np.int64)
    inferred = int(vid_arr.max()) + 1
    if catalog_size is None:
        catalog_size = inferred
    elif catalog_size < inferred:
        raise TraceFormatError(
            f"catalog_size override {catalog_size} smaller than 1 + max video id {inferred - 1}"
        )
    horizon = float(ts.max()) + quantize_hours
    return EventLog(
        edge_ids=np.array(edges, dtype=np.int64)[order],
        user_ids=np.array(users, dtype=np.int64)[order],
        video_ids=vid_arr[order],
        timestamps=ts[order],
        catalog_size=catalog_size,
        edge_count=int(max(edges)) + 1,
        horizon=horizon,
    )


def excitation_branching_ratio(params: ModelParams) -> float:
    """Spectral radius of the excitation matrix integrated over all lags.

    The pairwise influence is ``target_factors[i] . source_factors[j]`` with
    total kernel mass ``1/decay``; the process is stable (finite expected
    event count) iff this radius is < 1. Computed on the latent ``D x D``
    product so the full catalog-squared matrix is never materialized.
    """
    small = params.source_factors.T @ params.target_factors
    if small.size == 0:
        return 0.0
    eigs = np.linalg.eigvals(small)
    return float(np.max(np.abs(eigs)) / params.decay)


def generate_synthetic(spec: SyntheticSpec) -> EventLog:
    """Draw a trace by Ogata thinning from the mutual-exciting intensity.

    Each edge runs an independent process seeded from ``rng_seed`` via
    deterministic spawn keys, so identical specs produce bit-identical logs
    regardless of generation order or thread count.
    """
    ratio = excitation_branching_ratio(spec.ground_truth)
    if ratio >= 1.0:
        raise StabilityError(
            f"excitation branching ratio {ratio:.4f} >= 1; the process is explosive"
        )
    per_edge = [_thin_one_edge(spec, e) for e in range(spec.edge_count)]
    edges = np.concatenate([p[0] for p in per_edge])
    users = np.concatenate([p[1] for p in per_edge])
    vids = np.concatenate([p[2] for p in per_edge])
    tss = np.concatenate([p[3] for p in per_edge])
    order = np.argsort(tss, kind="stable")
    return EventLog(
        edge_ids=edges[order],
        user_ids=users[order],
        video_ids=vids[order],
        timestamps=tss[order],
        catalog_size=spec.catalog_size,
        edge_count=spec.edge_count,
        horizon=spec.horizon,
    )


def _thin_one_edge(spec: SyntheticSpec, edge: int):
    gt = spec.ground_truth
    rng = np.random.default_rng(np.random.SeedSequence(spec.rng_seed, spawn_key=(edge,)))
    base = spec.base_rate_scale * gt.base_rate
    tgt, src, decay = gt.target_factors, gt.source_factors, gt.decay

    times: list[float] = []
    vids: list[int] = []
    # Decayed per-video event counts and their latent projection; both decay
    # by the same factor between events, so the total intensity right after
    # an event upper-bounds it until the next one (exponential kernel).
    counts = np.zeros(spec.catalog_size)
    mix = np.zeros(gt.dim)
    t = 0.0
    while True:
        bound = float(base.sum() + tgt.sum(axis=0) @ mix)
        if bound <= 0:
            break
        dt = rng.exponential(1.0 / bound)
        t += dt
        if t >= spec.horizon:
            break
        fade = np.exp(-decay * dt)
        counts *= fade
        mix *= fade
        lam = base + tgt @ mix
        total = float(lam.sum())
        if rng.random() * bound > total:
            continue  # thinned out
        video = int(rng.choice(spec.catalog_size, p=lam / total))
        times.append(t)
        vids.append(video)
        counts[video] += 1.0
        mix += src[video]

    n = len(times)
    users = edge * spec.users_per_edge + rng.integers(0, spec.users_per_edge, size=n)
    return (
        np.full(n, edge, dtype=np.int64),
        users.astype(np.int64),
        np.array(vids, dtype=np.int64),
        np.array(times, dtype=np.float64),
    )


def partition_by_edge(log: EventLog) -> list[EventLog]:
    """Split a log into per-edge logs; the union of parts equals the input."""
    parts = []
    for e in range(log.edge_count):
        mask = log.edge_ids == e
        parts.append(
            EventLog(
                edge_ids=log.edge_ids[mask],
                user_ids=log.user_ids[mask],
                video_ids=log.video_ids[mask],
                timestamps=log.timestamps[mask],
                catalog_size=log.catalog_size,
                edge_count=log.edge_count,
                horizon=log.horizon,
            )
        )
    return parts


def write_trace(log: EventLog, path) -> None:
    """Emit the flat CSV format accepted by :func:`load_trace`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# edge_id,user_id,video_id,timestamp\n")
        for ev in log:
            fh.write(f"{ev.edge_id},{ev.user_id},{ev.video_id},{ev.timestamp!r}\n")
