"""Correlated differential privacy for prefetch obfuscation.

Each cache miss contributes one utility sweep to a running Pearson state.
Sensitivity of a candidate video is the correlation-weighted sum of how much
deleting each co-candidate's history would move its utility; with the
exponential kernel that deletion difference has the closed form
``influence(i,j) * decayed_counts[j]``, so no rebuild is needed. Prefetch
decisions sample candidates without replacement through an exponential
mechanism scaled by the worst candidate sensitivity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .predictor import KernelState, ModelParams
from .scheduler import CandidateSet

DENSE_CATALOG_LIMIT = 4096
_VARIANCE_EPS = 1e-12


@dataclass
class _PairStats:
    """Suffix statistics for one tracked video pair (sparse mode only)."""

    cross: float = 0.0
    sum_i: float = 0.0
    sum_j: float = 0.0
    sq_i: float = 0.0
    sq_j: float = 0.0
    n: int = 0


class CorrelationState:
    """Running sums behind the per-pair Pearson correlation of utilities.

    Dense mode (catalog up to 4096) keeps the full cross-product matrix and
    matches the batch recomputation exactly. Larger catalogs track only pairs
    that have co-occurred in a candidate set, each from its first
    co-occurrence onward; untracked pairs read as uncorrelated. The sparse
    numbers are exact Pearson over the tracked suffix.
    """

    def __init__(self, catalog_size: int, dense_limit: int = DENSE_CATALOG_LIMIT):
        self.catalog_size = catalog_size
        self.steps = 0
        self.sums = np.zeros(catalog_size)
        self.sq_sums = np.zeros(catalog_size)
        self.dense = catalog_size <= dense_limit
        if self.dense:
            self.cross = np.zeros((catalog_size, catalog_size))
        else:
            self.pairs: dict[tuple[int, int], _PairStats] = {}

    def update(self, utilities: np.ndarray, tracked_videos=()) -> None:
        """Fold one utility sweep into the state.

        ``tracked_videos`` names the current candidate set; in sparse mode its
        pairs start or continue accumulation, in dense mode it is ignored.
        """
        lam = np.asarray(utilities, dtype=np.float64)
        if lam.shape[0] != self.catalog_size:
            raise ValueError("utility vector length must match the catalog")
        if not np.all(np.isfinite(lam)):
            raise ValueError("utilities must be finite")
        self.steps += 1
        self.sums += lam
        self.sq_sums += lam * lam
        if self.dense:
            self.cross += np.outer(lam, lam)
        else:
            vids = sorted(set(int(v) for v in tracked_videos))
            for a_idx, i in enumerate(vids):
                for j in vids[a_idx:]:
                    st = self.pairs.setdefault((i, j), _PairStats())
                    st.cross += lam[i] * lam[j]
                    st.sum_i += lam[i]
                    st.sum_j += lam[j]
                    st.sq_i += lam[i] * lam[i]
                    st.sq_j += lam[j] * lam[j]
                    st.n += 1


def update_correlation(state: CorrelationState, utilities: np.ndarray, tracked_videos=()) -> CorrelationState:
    state.update(utilities, tracked_videos)
    return state


def correlation_degree(state: CorrelationState, i: int, j: int) -> float:
    """Pearson correlation of the two videos' utility histories, in [-1, 1].

    Degenerate (near-constant) series read as uncorrelated; fewer than two
    incorporated steps is an error.
    """
    if state.steps < 2:
        raise ValueError("correlation undefined before two incorporated steps")
    if state.dense:
        n = state.steps
        cross = state.cross[i, j]
        s_i, s_j = state.sums[i], state.sums[j]
        var_i = n * state.sq_sums[i] - s_i * s_i
        var_j = n * state.sq_sums[j] - s_j * s_j
    else:
        key = (i, j) if i <= j else (j, i)
        st = state.pairs.get(key)
        if st is None or st.n < 2:
            return 0.0
        n = st.n
        cross, s_i, s_j = st.cross, st.sum_i, st.sum_j
        var_i = n * st.sq_i - s_i * s_i
        var_j = n * st.sq_j - s_j * s_j
    if var_i <= _VARIANCE_EPS or var_j <= _VARIANCE_EPS:
        return 0.0
    value = (n * cross - s_i * s_j) / (math.sqrt(var_i) * math.sqrt(var_j))
    return min(1.0, max(-1.0, value))


def video_sensitivity(
    params: ModelParams,
    kernel_state: KernelState,
    corr: CorrelationState,
    candidates: CandidateSet,
    video: int,
) -> float:
    """Correlation-weighted utility shift from deleting any co-candidate's history.

    Deleting all of video ``j``'s requests removes exactly its excitation
    term, so the per-pair deletion difference is
    ``(target_factors[video] . source_factors[j]) * decayed_counts[j]``.
    Correlation magnitudes weight the terms: anti-correlation still implies
    exposure, and the scale must stay non-negative.
    """
    if video not in candidates:
        raise ValueError("sensitivity is defined for candidate videos only")
    if corr.steps < 2:
        # Correlation is undefined this early; zero sensitivity makes the
        # sampler fall back to its uniform, budget-charging limit.
        return 0.0
    tgt_row = params.target_factors[video]
    total = 0.0
    for j in candidates:
        corr_w = abs(correlation_degree(corr, video, j))
        deletion = float(tgt_row @ params.source_factors[j]) * float(kernel_state.decayed_counts[j])
        total += corr_w * deletion
    return total


def global_sensitivity(per_video: dict[int, float] | list[float]) -> float:
    """Worst candidate sensitivity; scales the exponential mechanism."""
    values = list(per_video.values()) if isinstance(per_video, dict) else list(per_video)
    if not values:
        raise ValueError("candidate set must be non-empty")
    return max(values)


def candidate_sensitivities(
    params: ModelParams,
    kernel_state: KernelState,
    corr: CorrelationState,
    candidates: CandidateSet,
) -> dict[int, float]:
    """All per-candidate sensitivities; O(cap^2) given utilities and state."""
    return {
        v: video_sensitivity(params, kernel_state, corr, candidates, v) for v in candidates
    }


@dataclass(frozen=True)
class PrefetchDecision:
    """Videos chosen for redundant fetching, in draw order."""

    chosen: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.chosen)

    def __iter__(self):
        return iter(self.chosen)


def em_weights(utilities: np.ndarray, eps_step: float, sensitivity: float) -> np.ndarray:
    """Normalized exponential-mechanism probabilities for a single draw."""
    lam = np.asarray(utilities, dtype=np.float64)
    if sensitivity < 0:
        raise ValueError("sensitivity must be non-negative")
    if sensitivity == 0.0 or eps_step == 0.0:
        # No usable signal: the uniform draw is the privacy-safe limit.
        return np.full(lam.shape, 1.0 / lam.shape[0])
    scores = eps_step * lam / (2.0 * sensitivity)
    scores -= scores.max()
    w = np.exp(scores)
    return w / w.sum()


def em_sample(
    candidates: CandidateSet,
    utilities: np.ndarray,
    eps_step: float,
    sensitivity: float,
    prefetch_cap: int,
    rng,
) -> PrefetchDecision:
    """Draw up to ``prefetch_cap`` distinct candidates, utility-weighted.

    Each sequential draw is an exponential mechanism over the remaining pool;
    the accounted cost of the step is draws * eps_step under composition. An
    empty candidate set yields an empty decision.
    """
    pool = list(candidates)
    lam = np.asarray(utilities, dtype=np.float64)
    if lam.shape[0] != len(pool):
        raise ValueError("need one utility per candidate")
    chosen: list[int] = []
    while pool and len(chosen) < prefetch_cap:
        probs = em_weights(lam, eps_step, sensitivity)
        idx = int(rng.choice(len(pool), p=probs))
        chosen.append(pool.pop(idx))
        lam = np.delete(lam, idx)
    return PrefetchDecision(chosen=tuple(chosen))


def dp_ratio_check(
    candidates: CandidateSet,
    utilities: np.ndarray,
    adjacent_utilities: np.ndarray,
    eps_step: float,
    sensitivity: float,
) -> float:
    """Worst log-probability ratio of one draw under adjacent utility vectors.

    The premise is that the vectors differ by at most the sensitivity per
    entry; the returned ratio is then guaranteed at most ``eps_step``.
    """
    lam = np.asarray(utilities, dtype=np.float64)
    adj = np.asarray(adjacent_utilities, dtype=np.float64)
    if lam.shape != adj.shape or lam.shape[0] != len(candidates):
        raise ValueError("utility vectors must match the candidate set")
    if sensitivity <= 0:
        raise ValueError("sensitivity must be positive for the ratio premise")
    if np.any(np.abs(lam - adj) > sensitivity * (1 + 1e-12)):
        raise ValueError("adjacent utilities differ by more than the sensitivity")
    p = em_weights(lam, eps_step, sensitivity)
    p_adj = em_weights(adj, eps_step, sensitivity)
    ratios = np.abs(np.log(p) - np.log(p_adj))
    return float(ratios.max())
