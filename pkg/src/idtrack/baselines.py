"""Cosine-similarity trackers for comparing against ID prediction.

A trajectory is summarised by the mean of its last ``T`` stored
embeddings; detections are matched to trajectories by cosine similarity
(greedy or Hungarian) above a fixed threshold, and confident leftovers
start new trajectories.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .inference import TrackingResult
from .scene import LabeledSequence


@dataclass(frozen=True)
class BaselineConfig:
    window: int = 19
    similarity_threshold: float = 0.1
    use_hungarian: bool = True
    lambda_det: float = 0.3
    lambda_new: float = 0.6
    miss_tolerance: int = 30


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def greedy_match(sim: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Repeatedly take the globally most similar remaining pair above ``threshold``."""
    pairs = []
    sim = sim.astype(np.float64).copy()
    while sim.size:
        r, c = np.unravel_index(np.argmax(sim), sim.shape)
        if sim[r, c] <= threshold:
            break
        pairs.append((int(r), int(c)))
        sim[r, :] = -np.inf
        sim[:, c] = -np.inf
    return pairs


def hungarian_match(sim: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    if sim.size == 0:
        return []
    rows, cols = linear_sum_assignment(sim, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if sim[r, c] > threshold]


def reid_baseline_tracker(
    sequence: LabeledSequence,
    encoder: Callable[[np.ndarray], np.ndarray] | None = None,
    config: BaselineConfig | None = None,
) -> TrackingResult:
    """Track ``sequence`` by cosine similarity of (optionally encoded) features.

    ``encoder`` maps an ``(n, C)`` feature block to ``(n, E)`` embeddings;
    ``None`` uses the raw features.
    """
    config = config or BaselineConfig()
    embed = encoder or (lambda f: np.asarray(f, np.float64))
    tracks: dict[int, deque] = {}
    last_seen: dict[int, int] = {}
    next_id = 1
    result = TrackingResult()
    for t, frame in enumerate(sequence.frames):
        keep = np.flatnonzero(frame.scores > config.lambda_det)
        assigned: dict[int, int] = {}
        if len(keep):
            emb = _normalize(np.asarray(embed(frame.features[keep]), np.float64))
            ids = sorted(tracks)
            if ids:
                means = _normalize(np.stack([np.mean(tracks[i], axis=0) for i in ids]))
                sim = emb @ means.T
                match = hungarian_match if config.use_hungarian else greedy_match
                for r, c in match(sim, config.similarity_threshold):
                    assigned[r] = ids[c]
            for r in range(len(keep)):
                if r not in assigned and frame.scores[keep[r]] > config.lambda_new:
                    assigned[r] = next_id
                    tracks[next_id] = deque(maxlen=config.window)
                    next_id += 1
            for r, tid in assigned.items():
                tracks[tid].append(emb[r])
                last_seen[tid] = t
                d = int(keep[r])
                result.rows.append((t + 1, tid, tuple(float(v) for v in frame.boxes[d]), float(frame.scores[d])))
                result.assignments[(t, d)] = tid
        for tid in [i for i in tracks if t - last_seen[i] > config.miss_tolerance]:
            del tracks[tid]
            del last_seen[tid]
    return result
