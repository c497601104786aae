"""Synthetic multi-object sequences standing in for a learned detector.

Each ground-truth object carries a unit-norm identity latent; every visible
frame emits one detection whose appearance feature is that latent plus
isotropic gaussian noise. Objects move with a perturbed constant velocity,
bounce off the arena walls, get occluded for random stretches, and are born
and die at random. False positives carry random unit features.

Three independent random streams are spawned from the sequence seed: one
for identity latents, one for scene dynamics, one for appearance noise.
Latents are therefore reproducible on their own, in track-id order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError

NO_TRACK = -1
LATENT_RETRIES = 10_000


@dataclass(frozen=True)
class SceneConfig:
    num_frames: int = 60
    max_objects: int = 8
    feature_dim: int = 32
    appearance_noise_sigma: float = 0.1
    identity_min_separation: float = 0.5
    occlusion_prob_per_frame: float = 0.05
    occlusion_duration_range: tuple[int, int] = (2, 6)
    birth_prob_per_frame: float = 0.1
    death_prob_per_frame: float = 0.01
    false_positive_rate: float = 0.0
    confidence_range: tuple[float, float] = (0.7, 1.0)
    arena_size: tuple[float, float] = (1920.0, 1080.0)
    velocity_sigma: float = 1.0
    seed: int = 0

    def validate(self) -> "SceneConfig":
        if self.num_frames < 0:
            raise ConfigError("num_frames", "must be >= 0")
        if self.max_objects < 0:
            raise ConfigError("max_objects", "must be >= 0")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim", "must be >= 2")
        for name in ("appearance_noise_sigma", "identity_min_separation", "false_positive_rate", "velocity_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        for name in ("occlusion_prob_per_frame", "birth_prob_per_frame", "death_prob_per_frame"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(name, f"probability {p} outside [0, 1]")
        lo, hi = self.occlusion_duration_range
        if lo < 1 or hi < lo:
            raise ConfigError("occlusion_duration_range", f"need 1 <= min <= max, got {lo}, {hi}")
        clo, chi = self.confidence_range
        if not 0.0 <= clo <= chi <= 1.0:
            raise ConfigError("confidence_range", f"need 0 <= lo <= hi <= 1, got {clo}, {chi}")
        if min(self.arena_size) <= 0:
            raise ConfigError("arena_size", "must be positive")
        if self.identity_min_separation > 2.0:
            raise ConfigError("identity_min_separation", "unit vectors are at most 2 apart")
        return self


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    confidence: float
    feature: np.ndarray


@dataclass
class Frame:
    """Detections of one frame as parallel arrays.

    ``boxes`` are ``(n, 4)`` top-left ``x, y, w, h``; ``gt_ids`` holds
    :data:`NO_TRACK` for false positives (and for unlabeled input).
    """

    boxes: np.ndarray
    scores: np.ndarray
    features: np.ndarray
    gt_ids: np.ndarray

    @classmethod
    def empty(cls, feature_dim: int) -> "Frame":
        return cls(
            np.zeros((0, 4), np.float64),
            np.zeros(0, np.float64),
            np.zeros((0, feature_dim), np.float32),
            np.zeros(0, np.int64),
        )

    def __len__(self) -> int:
        return len(self.scores)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in (
                (self.boxes, other.boxes),
                (self.scores, other.scores),
                (self.features, other.features),
                (self.gt_ids, other.gt_ids),
            )
        )

    def detection(self, i: int) -> Detection:
        return Detection(tuple(float(v) for v in self.boxes[i]), float(self.scores[i]), self.features[i])

    def subset(self, index) -> "Frame":
        return Frame(self.boxes[index], self.scores[index], self.features[index], self.gt_ids[index])


@dataclass
class GroundTruthTrack:
    track_id: int
    identity_latent: np.ndarray
    frames: list[int] = field(default_factory=list)
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    visible: list[bool] = field(default_factory=list)


@dataclass
class LabeledSequence:
    name: str
    feature_dim: int
    frames: list[Frame]
    # Generator-side ground truth (latents, occluded states); not serialized.
    tracks: list[GroundTruthTrack] = field(default_factory=list, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledSequence):
            return NotImplemented
        return (
            self.name == other.name
            and self.feature_dim == other.feature_dim
            and len(self.frames) == len(other.frames)
            and all(a == b for a, b in zip(self.frames, other.frames))
        )

    def track_ids(self) -> list[int]:
        ids = set()
        for frame in self.frames:
            ids.update(int(i) for i in frame.gt_ids if i != NO_TRACK)
        return sorted(ids)


def random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def sample_identity_latent(rng: np.random.Generator, existing: list[np.ndarray], dim: int, min_sep: float) -> np.ndarray:
    """Rejection-sample a unit vector at least ``min_sep`` from every latent in ``existing``."""
    for _ in range(LATENT_RETRIES):
        v = random_unit(rng, dim)
        if not existing or np.min(np.linalg.norm(np.asarray(existing) - v, axis=1)) >= min_sep:
            return v
    raise GenerationError(
        f"could not place identity latent #{len(existing) + 1} at separation {min_sep} "
        f"in {dim} dims after {LATENT_RETRIES} tries"
    )


def spawn_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Latent, dynamics and noise generators for one sequence seed."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


@dataclass
class _Obj:
    track: GroundTruthTrack
    latent64: np.ndarray
    cx: float
    cy: float
    vx: float
    vy: float
    w: float
    h: float
    occluded_for: int = 0


def generate_sequence(config: SceneConfig, name: str | None = None) -> LabeledSequence:
    config.validate()
    C = config.feature_dim
    W, H = config.arena_size
    latent_rng, rng, noise_rng = spawn_streams(config.seed)
    latents: list[np.ndarray] = []
    tracks: list[GroundTruthTrack] = []
    alive: list[_Obj] = []

    def spawn() -> _Obj:
        latent = sample_identity_latent(latent_rng, latents, C, config.identity_min_separation)
        latents.append(latent)
        track = GroundTruthTrack(len(tracks) + 1, latent.astype(np.float32))
        tracks.append(track)
        w = rng.uniform(0.02, 0.06) * W
        h = w * rng.uniform(1.5, 3.0)
        h = min(h, 0.5 * H)
        return _Obj(
            track, latent,
            cx=rng.uniform(w / 2, W - w / 2), cy=rng.uniform(h / 2, H - h / 2),
            vx=rng.normal(0.0, 5.0), vy=rng.normal(0.0, 5.0), w=w, h=h,
        )

    frames: list[Frame] = []
    dmin, dmax = config.occlusion_duration_range
    clo, chi = config.confidence_range
    for f in range(config.num_frames):
        born_now: set[int] = set()
        if f == 0:
            if config.max_objects > 0:
                for _ in range(int(rng.integers(1, config.max_objects + 1))):
                    obj = spawn()
                    alive.append(obj)
                    born_now.add(obj.track.track_id)
        else:
            survivors = []
            for obj in alive:
                if rng.random() >= config.death_prob_per_frame:
                    survivors.append(obj)
            alive = survivors
            if len(alive) < config.max_objects and rng.random() < config.birth_prob_per_frame:
                obj = spawn()
                alive.append(obj)
                born_now.add(obj.track.track_id)

        boxes, scores, feats, ids = [], [], [], []
        for obj in alive:
            if obj.track.track_id not in born_now:
                obj.vx += rng.normal(0.0, config.velocity_sigma)
                obj.vy += rng.normal(0.0, config.velocity_sigma)
                obj.cx, obj.vx = _reflect(obj.cx + obj.vx, obj.vx, obj.w / 2, W - obj.w / 2)
                obj.cy, obj.vy = _reflect(obj.cy + obj.vy, obj.vy, obj.h / 2, H - obj.h / 2)
                if obj.occluded_for > 0:
                    obj.occluded_for -= 1
                elif rng.random() < config.occlusion_prob_per_frame:
                    obj.occluded_for = int(rng.integers(dmin, dmax + 1))
            visible = obj.occluded_for == 0
            box = (obj.cx - obj.w / 2, obj.cy - obj.h / 2, obj.w, obj.h)
            obj.track.frames.append(f)
            obj.track.boxes.append(box)
            obj.track.visible.append(visible)
            if visible:
                noise = noise_rng.normal(0.0, config.appearance_noise_sigma, C)
                boxes.append(box)
                scores.append(rng.uniform(clo, chi))
                feats.append((obj.latent64 + noise).astype(np.float32))
                ids.append(obj.track.track_id)
        for _ in range(int(rng.poisson(config.false_positive_rate)) if config.false_positive_rate > 0 else 0):
            w = rng.uniform(0.02, 0.06) * W
            h = min(w * rng.uniform(1.5, 3.0), 0.5 * H)
            boxes.append((rng.uniform(0, W - w), rng.uniform(0, H - h), w, h))
            scores.append(rng.uniform(0.0, 1.0))
            feats.append(random_unit(rng, C).astype(np.float32))
            ids.append(NO_TRACK)
        if boxes:
            order = rng.permutation(len(boxes))
            frame = Frame(
                np.asarray(boxes, np.float64)[order],
                np.asarray(scores, np.float64)[order],
                np.asarray(feats, np.float32)[order],
                np.asarray(ids, np.int64)[order],
            )
        else:
            frame = Frame.empty(C)
        frames.append(frame)
    return LabeledSequence(name or f"seed{config.seed}", C, frames, tracks)


def _reflect(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        return (lo + hi) / 2, 0.0
    for _ in range(8):
        if pos < lo:
            pos, vel = 2 * lo - pos, -vel
        elif pos > hi:
            pos, vel = 2 * hi - pos, -vel
        else:
            break
    return min(max(pos, lo), hi), vel


def generate_corpus(config: SceneConfig, n_sequences: int, base_seed: int) -> list[LabeledSequence]:
    if n_sequences < 1:
        raise ConfigError("n_sequences", "must be >= 1")
    return [generate_sequence(dataclasses.replace(config, seed=base_seed + i)) for i in range(n_sequences)]
