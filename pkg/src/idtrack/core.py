"""ID dictionary, tracklet formation, trajectory window and label lifecycle.

Internal labels run 1..K and map to dictionary rows 0..K-1; row K is the
special word attached to current-frame detections (and used as the class
for objects with no history). Labels are recycled once a trajectory
concludes, so every (label, generation) pair is mapped to a fresh external
track id for output.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import CapacityError, ConfigError, DimensionError, StateError

SPECIAL = 0


class IDDictionary(nn.Module):
    """``K`` identity words plus one special word, each ``C``-dimensional."""

    def __init__(self, K: int, C: int, init_sigma: float = 0.02, seed: int = 0, dtype=torch.float32):
        super().__init__()
        if K < 1:
            raise ConfigError("K", "dictionary capacity must be >= 1")
        if C < 1:
            raise ConfigError("C", "word dimension must be >= 1")
        if init_sigma < 0:
            raise ConfigError("init_sigma", "must be non-negative")
        self.K = K
        self.C = C
        gen = torch.Generator().manual_seed(seed)
        words = torch.randn(K + 1, C, generator=gen, dtype=torch.float64) * init_sigma
        self.words = nn.Parameter(words.to(dtype))

    @property
    def special_index(self) -> int:
        return self.K

    @property
    def special(self) -> torch.Tensor:
        return self.words[self.K]

    def word(self, label: int) -> torch.Tensor:
        if not 1 <= label <= self.K:
            raise StateError(f"label {label} outside 1..{self.K}")
        return self.words[label - 1]

    def lookup(self, labels: torch.Tensor) -> torch.Tensor:
        """Words for a tensor of labels; :data:`SPECIAL` maps to the special word."""
        rows = torch.where(labels == SPECIAL, torch.full_like(labels, self.K), labels - 1)
        return self.words[rows]


def new_dictionary(K: int, C: int, init_sigma: float = 0.02, seed: int = 0) -> IDDictionary:
    return IDDictionary(K, C, init_sigma, seed)


@dataclass
class Tracklet:
    vector: torch.Tensor
    source_label: int
    frame_index: int

    @property
    def feature(self) -> torch.Tensor:
        return self.vector[: self.vector.shape[0] // 2]

    @property
    def word(self) -> torch.Tensor:
        return self.vector[self.vector.shape[0] // 2 :]


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def form_tracklet(feature, word, frame_index: int, source_label: int) -> Tracklet:
    word = _as_tensor(word)
    feature = _as_tensor(feature, like=word).to(word.dtype)
    if feature.ndim != 1 or word.ndim != 1 or feature.shape[0] != word.shape[0]:
        raise DimensionError(f"feature {tuple(feature.shape)} and word {tuple(word.shape)} must both be length C")
    return Tracklet(torch.cat([feature, word]), source_label, frame_index)


def attach_special(feature, dictionary: IDDictionary, frame_index: int) -> Tracklet:
    feature = _as_tensor(feature)
    if feature.shape != (dictionary.C,):
        raise DimensionError(f"feature shape {tuple(feature.shape)} does not match C={dictionary.C}")
    return form_tracklet(feature, dictionary.special, frame_index, SPECIAL)


class TrajectoryWindow:
    """Per-label tracklets from the last ``span`` frames before ``time``.

    At time ``t`` every stored tracklet has ``t - span <= frame_index <= t - 1``.
    """

    def __init__(self, span: int, time: int = 0):
        if span < 1:
            raise ConfigError("T", "window span must be >= 1")
        self.span = span
        self.time = time
        self.tracks: dict[int, list[Tracklet]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.tracks.values())

    def is_empty(self) -> bool:
        return len(self) == 0

    def open(self, label: int) -> None:
        if label in self.tracks:
            raise StateError(f"label {label} already has a trajectory in the window")
        self.tracks[label] = []

    def close(self, label: int) -> None:
        self.tracks.pop(label, None)

    def push(self, label: int, tracklet: Tracklet) -> None:
        if label not in self.tracks:
            raise StateError(f"push to unknown label {label}")
        if tracklet.frame_index != self.time - 1:
            raise StateError(f"tracklet at frame {tracklet.frame_index} pushed at time {self.time}")
        history = self.tracks[label]
        if history and history[-1].frame_index >= tracklet.frame_index:
            raise StateError(f"label {label} already has a tracklet at frame {tracklet.frame_index}")
        history.append(tracklet)

    def prune(self, t: int) -> None:
        """Advance to time ``t`` and drop tracklets older than ``t - span``."""
        if t < self.time:
            raise StateError(f"window cannot move back from {self.time} to {t}")
        self.time = t
        oldest = t - self.span
        for label, history in self.tracks.items():
            if history and history[0].frame_index < oldest:
                self.tracks[label] = [tr for tr in history if tr.frame_index >= oldest]

    def memory(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Stacked ``(vectors, frame_indices, labels)`` in label-then-time order."""
        items = [(label, tr) for label in sorted(self.tracks) for tr in self.tracks[label]]
        if not items:
            return torch.zeros(0, 0), torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long)
        vectors = torch.stack([tr.vector for _, tr in items])
        times = torch.tensor([tr.frame_index for _, tr in items], dtype=torch.long)
        labels = torch.tensor([label for label, _ in items], dtype=torch.long)
        return vectors, times, labels


def push_observation(window: TrajectoryWindow, label: int, tracklet: Tracklet) -> TrajectoryWindow:
    window.push(label, tracklet)
    return window


def prune(window: TrajectoryWindow, t: int, T: int | None = None) -> TrajectoryWindow:
    if T is not None and T != window.span:
        raise StateError(f"window span is {window.span}, not {T}")
    window.prune(t)
    return window


@dataclass
class TrackerState:
    K: int
    miss_tolerance: int = 30
    active_labels: set[int] = field(default_factory=set)
    free_labels: deque = field(default_factory=deque)
    next_fresh_label: int = 1
    generation: dict[int, int] = field(default_factory=dict)
    external_id_map: dict[tuple[int, int], int] = field(default_factory=dict)
    last_seen: dict[int, int] = field(default_factory=dict)
    next_external_id: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K", "must be >= 1")
        if self.miss_tolerance < 0:
            raise ConfigError("miss_tolerance", "must be >= 0")

    def external_id(self, label: int) -> int:
        if label not in self.active_labels:
            raise StateError(f"label {label} is not active")
        return self.external_id_map[(label, self.generation[label])]

    def touch(self, label: int, t: int) -> None:
        if label not in self.active_labels:
            raise StateError(f"label {label} is not active")
        self.last_seen[label] = t

    def release(self, label: int) -> None:
        if label not in self.active_labels:
            raise StateError(f"label {label} is not active")
        self.active_labels.remove(label)
        self.last_seen.pop(label, None)
        self.free_labels.append(label)


def acquire_label(state: TrackerState, t: int | None = None) -> int:
    if len(state.active_labels) >= state.K:
        raise CapacityError(f"all {state.K} ID labels are in use; raise K")
    if state.next_fresh_label <= state.K:
        label = state.next_fresh_label
        state.next_fresh_label += 1
    else:
        label = state.free_labels.popleft()
    state.active_labels.add(label)
    gen = state.generation.get(label, 0) + 1
    state.generation[label] = gen
    state.external_id_map[(label, gen)] = state.next_external_id
    state.next_external_id += 1
    if t is not None:
        state.last_seen[label] = t
    return label


def expire_stale(state: TrackerState, window: TrajectoryWindow | None, t: int) -> list[int]:
    stale = sorted(
        label for label in state.active_labels if t - state.last_seen.get(label, t) > state.miss_tolerance
    )
    for label in stale:
        state.release(label)
        if window is not None:
            window.close(label)
    return stale
