"""Online tracking with a trained ID predictor.

Per frame: threshold detections, decode them against the trajectory window,
take the most probable label per detection, resolve duplicate claims by
detection confidence, start new trajectories for confident leftovers, then
update the window and the label bookkeeping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .core import TrackerState, TrajectoryWindow, acquire_label, expire_stale, form_tracklet
from .dataset import format_mot_line
from .decoder import IDPredictor
from .errors import CapacityError, CheckpointError, ConfigError
from .scene import Frame, LabeledSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InferenceConfig:
    lambda_det: float = 0.3
    lambda_new: float = 0.6
    lambda_id: float = 0.2
    use_hungarian: bool = False
    miss_tolerance: int = 30
    restrict_to_active: bool = True
    # Keep the special (newborn) class out of the softmax as well.
    mask_special: bool = False
    # Apply lambda_new to detections that lose a duplicate claim.
    strict_newborn: bool = False
    window: int = 0  # 0 means the model's max_rel_offset
    # "error" raises when every label is taken, "drop" leaves the detection untracked
    capacity_policy: str = "error"

    def validate(self) -> "InferenceConfig":
        for name in ("lambda_det", "lambda_new", "lambda_id"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(name, f"threshold {v} outside [0, 1]")
        if self.miss_tolerance < 0:
            raise ConfigError("miss_tolerance", "must be >= 0")
        if self.capacity_policy not in ("error", "drop"):
            raise ConfigError("capacity_policy", "expected 'error' or 'drop'")
        return self


@dataclass
class FrameAssignment:
    """Outcome for the detections kept in one frame.

    ``detection_index`` refers to rows of the input frame.
    """

    detection_index: np.ndarray
    external_ids: np.ndarray
    labels: np.ndarray
    id_probability: np.ndarray
    is_newborn: np.ndarray

    def __len__(self) -> int:
        return len(self.detection_index)


def hungarian_assign(prob: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one (row, column) pairs maximising the summed probability."""
    prob = np.asarray(prob, dtype=np.float64)
    if prob.size == 0:
        return []
    rows, cols = linear_sum_assignment(prob, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def _greedy_claims(probs: np.ndarray, candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best candidate column per row (first index on ties) and its probability."""
    sub = probs[:, candidates]
    best = np.argmax(sub, axis=1)
    return candidates[best], sub[np.arange(len(sub)), best]


def track_frame(
    frame: Frame,
    state: TrackerState,
    window: TrajectoryWindow,
    model: IDPredictor,
    config: InferenceConfig,
    t: int,
) -> FrameAssignment:
    K = model.K
    window.prune(t)
    keep = np.flatnonzero(frame.scores > config.lambda_det)
    scores = frame.scores[keep]
    n = len(keep)
    labels = np.zeros(n, np.int64)
    probs_out = np.zeros(n, np.float64)
    newborn = np.zeros(n, bool)
    want_new = np.zeros(n, bool)

    if n and not window.is_empty():
        with torch.no_grad():
            queries = model.query_tokens(frame.features[keep])
            memory, mem_times, _ = window.memory()
            logits = model.decode(queries, memory, t, mem_times).double()
        active = np.array(sorted(state.active_labels), np.int64)
        if config.restrict_to_active:
            mask = torch.ones(K + 1, dtype=torch.bool)
            mask[torch.as_tensor(active - 1)] = False
            mask[K] = config.mask_special
            logits = logits.masked_fill(mask, float("-inf"))
        elif config.mask_special:
            logits[:, K] = float("-inf")
        probs = torch.softmax(logits, dim=1).numpy()
        cand = np.arange(K + 1) if not config.mask_special else np.arange(K)
        if config.restrict_to_active:
            cand = np.concatenate([active - 1, [] if config.mask_special else [K]]).astype(np.int64)

        if config.use_hungarian and len(active):
            label_cols = active - 1
            P = probs[:, label_cols]
            if not config.mask_special:
                # one private "newborn" column per detection
                P = np.concatenate([P, np.diag(probs[:, K])], axis=1)
            for r, c in hungarian_assign(P):
                if c < len(label_cols) and P[r, c] > config.lambda_id:
                    labels[r] = label_cols[c] + 1
                    probs_out[r] = P[r, c]
        else:
            cols, p = _greedy_claims(probs, cand)
            claimed = (cols != K) & (p > config.lambda_id)
            claimed &= np.isin(cols + 1, list(state.active_labels))
            for label in np.unique(cols[claimed] + 1):
                rivals = np.flatnonzero(claimed & (cols + 1 == label))
                # highest confidence wins; np.argmax keeps the earliest on ties
                winner = rivals[np.argmax(scores[rivals])]
                labels[winner] = label
                probs_out[winner] = p[winner]
                for loser in rivals[rivals != winner]:
                    want_new[loser] = True
                    probs_out[loser] = p[loser]

    unassigned = labels == 0
    if config.strict_newborn:
        want_new = unassigned & (scores > config.lambda_new)
    else:
        want_new = unassigned & (want_new | (scores > config.lambda_new))
    for i in np.flatnonzero(want_new):
        try:
            label = acquire_label(state, t)
        except CapacityError:
            if config.capacity_policy == "error":
                raise
            log.warning("frame %d: no free ID label, detection %d dropped", t, int(keep[i]))
            continue
        window.open(label)
        labels[i] = label
        newborn[i] = True

    kept = labels > 0
    ext = np.zeros(n, np.int64)
    window.prune(t + 1)
    for i in np.flatnonzero(kept):
        label = int(labels[i])
        state.touch(label, t)
        ext[i] = state.external_id(label)
        word = model.dictionary.word(label).detach()
        window.push(label, form_tracklet(torch.as_tensor(frame.features[keep[i]], dtype=word.dtype), word, t, label))
    expire_stale(state, window, t)
    return FrameAssignment(keep[kept], ext[kept], labels[kept], probs_out[kept], newborn[kept])


@dataclass
class TrackingResult:
    rows: list[tuple[int, int, tuple[float, float, float, float], float]] = field(default_factory=list)
    # (frame index, detection index) -> external id
    assignments: dict[tuple[int, int], int] = field(default_factory=dict)

    def lines(self) -> list[str]:
        ordered = sorted(self.rows, key=lambda r: (r[0], r[1]))
        return [format_mot_line(f, tid, box, conf) for f, tid, box, conf in ordered]

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()))


class OnlineTracker:
    def __init__(self, model: IDPredictor, config: InferenceConfig | None = None):
        self.model = model
        self.config = (config or InferenceConfig()).validate()
        span = self.config.window or model.config.max_rel_offset
        self.state = TrackerState(model.K, self.config.miss_tolerance)
        self.window = TrajectoryWindow(span)

    def step(self, frame: Frame, t: int) -> FrameAssignment:
        return track_frame(frame, self.state, self.window, self.model, self.config, t)


def run_sequence(sequence: LabeledSequence, model: IDPredictor, config: InferenceConfig | None = None) -> TrackingResult:
    if model.config.feature_dim != sequence.feature_dim:
        raise CheckpointError(f"model expects {model.config.feature_dim}-dim features, sequence has {sequence.feature_dim}")
    model.eval()
    tracker = OnlineTracker(model, config)
    result = TrackingResult()
    for t, frame in enumerate(sequence.frames):
        out = tracker.step(frame, t)
        for d, ext in zip(out.detection_index, out.external_ids):
            result.rows.append((t + 1, int(ext), tuple(float(v) for v in frame.boxes[d]), float(frame.scores[d])))
            result.assignments[(t, int(d))] = int(ext)
    return result
