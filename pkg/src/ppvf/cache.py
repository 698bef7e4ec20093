"""Edge caches and baseline policies.

The primary cache ranks residents by predicted utility: an incoming video
displaces the lowest-scored resident only if it scores strictly higher,
with ties kept by the incumbent. LRU and LFU are eviction-only baselines
that fetch nothing but the viewed video. SAGE and BESTFIT replace the
threshold-based candidate selection (random feasible picks, respectively
top-utility feasible picks) and share the downstream exponential-mechanism
path; MAV replaces the utility predictor with a per-slot moving average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scheduler import CandidateSet, PrivacyLedger


class EdgeCache:
    """Fixed-capacity, utility-scored video cache for one edge."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.scores: dict[int, float] = {}

    def __len__(self) -> int:
        return len(self.scores)

    def lookup(self, video: int) -> bool:
        """Pure membership test; access bookkeeping happens elsewhere."""
        return video in self.scores

    def contents(self) -> set[int]:
        return set(self.scores)

    def refresh_scores(self, utilities: np.ndarray) -> None:
        """Re-score residents from the latest utility sweep."""
        for video in self.scores:
            self.scores[video] = float(utilities[video])

    def admit(self, incoming) -> list[int]:
        """Admit scored videos, evicting the weakest resident when full.

        ``incoming`` is an iterable of ``(video, score)``. A video enters if
        there is room or its score strictly exceeds the current minimum; ties
        favor the incumbent. Returns the evicted videos.
        """
        evicted: list[int] = []
        for video, score in incoming:
            score = float(score)
            if video in self.scores:
                self.scores[video] = score
                continue
            if len(self.scores) < self.capacity:
                self.scores[video] = score
                continue
            weakest = min(self.scores, key=lambda v: (self.scores[v], v))
            if score > self.scores[weakest]:
                del self.scores[weakest]
                evicted.append(weakest)
                self.scores[video] = score
        return evicted


class LruCache:
    """Classic least-recently-used cache; always admits on miss."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.clock = 0
        self.last_access: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.last_access)

    def lookup(self, video: int) -> bool:
        return video in self.last_access

    def contents(self) -> set[int]:
        return set(self.last_access)

    def access(self, video: int) -> tuple[bool, list[int]]:
        """Serve one request; returns (hit, evicted)."""
        self.clock += 1
        if video in self.last_access:
            self.last_access[video] = self.clock
            return True, []
        evicted = []
        if len(self.last_access) >= self.capacity:
            victim = min(self.last_access, key=lambda v: self.last_access[v])
            del self.last_access[victim]
            evicted.append(victim)
        self.last_access[video] = self.clock
        return False, evicted


class LfuCache:
    """Frequency-gated cache: a miss enters only if its lifetime request
    count reaches the weakest resident's; ties evict the least recently
    accessed resident, so all-distinct traffic degenerates to insertion-order
    eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.clock = 0
        self.counts: dict[int, int] = {}  # lifetime request counts, all videos
        self.resident_access: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.resident_access)

    def lookup(self, video: int) -> bool:
        return video in self.resident_access

    def contents(self) -> set[int]:
        return set(self.resident_access)

    def access(self, video: int) -> tuple[bool, list[int]]:
        self.clock += 1
        self.counts[video] = self.counts.get(video, 0) + 1
        if video in self.resident_access:
            self.resident_access[video] = self.clock
            return True, []
        if len(self.resident_access) < self.capacity:
            self.resident_access[video] = self.clock
            return False, []
        victim = min(
            self.resident_access,
            key=lambda v: (self.counts[v], self.resident_access[v]),
        )
        evicted = []
        if self.counts[video] >= self.counts[victim]:
            del self.resident_access[victim]
            evicted.append(victim)
            self.resident_access[video] = self.clock
        return False, evicted


class MavState:
    """Per-video exponentially weighted moving average of per-slot requests.

    Folding happens at slot boundaries: each completed slot contributes its
    request count with weight (1 - smoothing); older slots decay by the
    smoothing factor.
    """

    def __init__(self, catalog_size: int, slot_hours: float = 1.0, smoothing: float = 0.9):
        if not 0 <= smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")
        if slot_hours <= 0:
            raise ValueError("slot_hours must be positive")
        self.slot_hours = slot_hours
        self.smoothing = smoothing
        self.values = np.zeros(catalog_size)
        self.pending = np.zeros(catalog_size)
        self.current_slot = 0

    def _slot_of(self, time: float) -> int:
        return int(np.floor(time / self.slot_hours + 1e-9))

    def fold_until(self, time: float) -> None:
        """Complete every slot strictly before ``time``'s slot."""
        slot = self._slot_of(time)
        if slot <= self.current_slot:
            return
        self.values = self.smoothing * self.values + (1 - self.smoothing) * self.pending
        self.pending[:] = 0.0
        gap = slot - self.current_slot - 1
        if gap:
            self.values *= self.smoothing**gap
        self.current_slot = slot

    def record(self, video: int, time: float) -> None:
        self.fold_until(time)
        self.pending[video] += 1.0

    def scores(self, time: float) -> np.ndarray:
        """Averages over completed slots as of ``time``."""
        self.fold_until(time)
        return self.values.copy()


def select_candidates_random(
    utilities: np.ndarray, ledger: PrivacyLedger, rng
) -> tuple[CandidateSet, PrivacyLedger]:
    """Random budget-feasible candidate picks (no utility filter), charging
    the ledger per admission until the cap or the feasible pool runs out."""
    admitted: list[int] = []
    for video in rng.permutation(ledger.catalog_size):
        if len(admitted) >= ledger.prefetch_cap:
            break
        video = int(video)
        if ledger.can_charge(video):
            ledger.charge(video)
            admitted.append(video)
    return CandidateSet(videos=tuple(admitted), cap=ledger.prefetch_cap), ledger


def select_candidates_best_utility(
    utilities: np.ndarray, ledger: PrivacyLedger
) -> tuple[CandidateSet, PrivacyLedger]:
    """Top-utility budget-feasible candidate picks, charging per admission."""
    utilities = np.asarray(utilities, dtype=np.float64)
    order = np.argsort(-utilities, kind="stable")
    admitted: list[int] = []
    for video in order:
        if len(admitted) >= ledger.prefetch_cap:
            break
        video = int(video)
        if ledger.can_charge(video):
            ledger.charge(video)
            admitted.append(video)
    return CandidateSet(videos=tuple(admitted), cap=ledger.prefetch_cap), ledger


@dataclass
class BaselineStep:
    hit: bool
    fetched: tuple[int, ...]
    evicted: tuple[int, ...]


def baseline_step(policy: str, cache, video: int) -> BaselineStep:
    """One eviction-only baseline access (LRU or LFU): fetch only on miss."""
    if policy == "lru":
        if not isinstance(cache, LruCache):
            raise ValueError("lru policy requires an LruCache")
    elif policy == "lfu":
        if not isinstance(cache, LfuCache):
            raise ValueError("lfu policy requires an LfuCache")
    else:
        raise ValueError(f"unknown eviction-only policy {policy!r}")
    hit, evicted = cache.access(video)
    fetched = () if hit else (video,)
    return BaselineStep(hit=hit, fetched=fetched, evicted=tuple(evicted))
