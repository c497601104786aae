"""Training: clip sampling, in-context label assignment, trajectory
augmentation, the ID loss, and the optimizer loop with checkpoints.

Also hosts the two embedding objectives used by the cosine-similarity
baselines (per-trajectory classification and infoNCE).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_tensors, save_tensors
from .decoder import DecoderConfig, IDPredictor
from .errors import CapacityError, CheckpointError, ConfigError, NumericError
from .scene import NO_TRACK, Frame, LabeledSequence

log = logging.getLogger(__name__)

IGNORE = -100
OBJECTIVES = ("id_pred", "re_id", "contra")


@dataclass(frozen=True)
class TrainConfig:
    T: int = 19
    interval_range: tuple[int, int] = (1, 4)
    lambda_occ: float = 0.5
    lambda_sw: float = 0.5
    lambda_cls: float = 2.0
    lambda_L1: float = 5.0
    lambda_giou: float = 2.0
    lambda_id: float = 1.0
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    lr_drop_epochs: tuple[int, ...] = ()
    epochs: int = 10
    batch_size: int = 4
    grad_clip_norm: float = 1.0
    seed: int = 0
    objective: str = "id_pred"
    supervise_newborns: bool = True
    checkpoint_every: int = 0
    temperature: float = 0.1
    embedding_dim: int = 0  # baselines: 0 means feature_dim
    enhance_layers: int = 0  # baselines: self-attention layers over the frame's detections

    @property
    def clip_len(self) -> int:
        return self.T + 1

    def validate(self) -> "TrainConfig":
        if self.T < 1:
            raise ConfigError("T", "clip_len = T + 1 must be >= 2")
        lo, hi = self.interval_range
        if lo < 1 or hi < lo:
            raise ConfigError("interval_range", f"need 1 <= lo <= hi, got {lo}, {hi}")
        for name in ("lambda_occ", "lambda_sw"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(name, f"probability {p} outside [0, 1]")
        for name in ("lambda_cls", "lambda_L1", "lambda_giou", "lambda_id"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "loss weights must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ConfigError("objective", f"expected one of {OBJECTIVES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be positive")
        return self


# --------------------------------------------------------------------------- clips


@dataclass
class Clip:
    """``T + 1`` frames sampled at a constant interval from one sequence."""

    sequence: str
    frame_indices: list[int]
    frames: list[Frame]
    interval: int

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def track_ids(self) -> list[int]:
        ids = set()
        for frame in self.frames:
            ids.update(int(i) for i in frame.gt_ids if i != NO_TRACK)
        return sorted(ids)


def sample_clip(dataset, T: int, interval_range: tuple[int, int], rng: np.random.Generator) -> Clip | None:
    """Sample ``T + 1`` frames at a uniform interval; the interval shrinks to fit short sequences.

    ``dataset`` is a sequence or a list of them. Sequences shorter than
    ``T + 1`` frames are skipped with a warning; ``None`` if nothing fits.
    """
    if isinstance(dataset, LabeledSequence):
        candidates = [dataset]
    else:
        candidates = list(dataset)
    eligible = []
    for seq in candidates:
        if len(seq) < T + 1:
            log.warning("sequence %s has %d frames, need %d; skipped", seq.name, len(seq), T + 1)
        else:
            eligible.append(seq)
    if not eligible:
        return None
    seq = eligible[int(rng.integers(len(eligible)))] if len(eligible) > 1 else eligible[0]
    lo, hi = interval_range
    fit = (len(seq) - 1) // T
    hi = min(hi, fit)
    lo = min(lo, hi)
    interval = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, len(seq) - interval * T))
    idx = [start + i * interval for i in range(T + 1)]
    return Clip(seq.name, idx, [seq.frames[i] for i in idx], interval)


def assign_training_labels(clip: Clip, K: int, rng: np.random.Generator) -> dict[int, int]:
    """Uniformly random injective map from the clip's trajectories to labels 1..K."""
    ids = clip.track_ids()
    if len(ids) > K:
        raise CapacityError(f"clip holds {len(ids)} trajectories but K={K}")
    labels = rng.permutation(K)[: len(ids)] + 1
    return {gt: int(k) for gt, k in zip(ids, labels)}


@dataclass
class ClipWindow:
    """Historical tokens of a clip (frames ``0..T-1``) as parallel arrays.

    ``word_labels`` is the label whose ID word each token carries; it equals
    the trajectory's label unless a swap augmentation changed it.
    """

    times: np.ndarray
    track_ids: np.ndarray
    word_labels: np.ndarray
    features: np.ndarray
    swapped_frames: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.times)

    def subset(self, keep: np.ndarray) -> "ClipWindow":
        return ClipWindow(self.times[keep], self.track_ids[keep], self.word_labels[keep], self.features[keep], list(self.swapped_frames))


def build_window(clip: Clip, labels: dict[int, int]) -> ClipWindow:
    times, tids, feats = [], [], []
    for t, frame in enumerate(clip.frames[:-1]):
        for i in np.flatnonzero(frame.gt_ids != NO_TRACK):
            times.append(t)
            tids.append(int(frame.gt_ids[i]))
            feats.append(frame.features[i])
    C = clip.frames[0].features.shape[1]
    return ClipWindow(
        np.asarray(times, np.int64),
        np.asarray(tids, np.int64),
        np.asarray([labels[t] for t in tids], np.int64),
        np.asarray(feats, np.float32).reshape(-1, C),
    )


def augment_occlusion(window: ClipWindow, lambda_occ: float, rng: np.random.Generator) -> ClipWindow:
    """Drop each historical token independently with probability ``lambda_occ``."""
    keep = rng.random(len(window)) >= lambda_occ
    return window.subset(keep)


def augment_swap(window: ClipWindow, lambda_sw: float, rng: np.random.Generator) -> ClipWindow:
    """Per frame, with probability ``lambda_sw``, exchange the ID words of one random pair of tokens."""
    out = window.subset(np.ones(len(window), bool))
    out.swapped_frames = []
    for t in np.unique(out.times):
        idx = np.flatnonzero(out.times == t)
        if len(idx) < 2:
            continue
        if rng.random() < lambda_sw:
            a, b = idx[rng.choice(len(idx), size=2, replace=False)]
            out.word_labels[a], out.word_labels[b] = out.word_labels[b], out.word_labels[a]
            out.swapped_frames.append(int(t))
    return out


def id_targets(clip: Clip, t: int, labels: dict[int, int], window: ClipWindow, K: int, supervise_newborns: bool = True) -> np.ndarray:
    """Class index per non-false-positive detection of frame ``t``.

    Trajectories with a token before ``t`` in the window map to their label's
    column ``k - 1``; those without history map to the special column ``K``
    (or are ignored when newborns are not supervised).
    """
    frame = clip.frames[t]
    seen = window.track_ids[window.times < t]
    targets = []
    for gt in frame.gt_ids[frame.gt_ids != NO_TRACK]:
        if np.any(seen == gt):
            targets.append(labels[int(gt)] - 1)
        else:
            targets.append(K if supervise_newborns else IGNORE)
    return np.asarray(targets, np.int64)


@dataclass
class ClipTensors:
    query_features: torch.Tensor
    query_times: torch.Tensor
    targets: torch.Tensor
    memory_features: torch.Tensor
    memory_labels: torch.Tensor
    memory_times: torch.Tensor
    num_frames: int


def build_clip_tensors(clip: Clip, labels: dict[int, int], window: ClipWindow, K: int, dtype=torch.float32, supervise_newborns: bool = True) -> ClipTensors:
    qf, qt, tg = [], [], []
    for t in range(1, clip.num_frames):
        frame = clip.frames[t]
        real = frame.gt_ids != NO_TRACK
        qf.append(frame.features[real])
        qt.append(np.full(int(real.sum()), t, np.int64))
        tg.append(id_targets(clip, t, labels, window, K, supervise_newborns))
    C = clip.frames[0].features.shape[1]
    return ClipTensors(
        torch.as_tensor(np.concatenate(qf).reshape(-1, C), dtype=dtype),
        torch.as_tensor(np.concatenate(qt)),
        torch.as_tensor(np.concatenate(tg)),
        torch.as_tensor(window.features, dtype=dtype),
        torch.as_tensor(window.word_labels),
        torch.as_tensor(window.times),
        clip.num_frames,
    )


def prepare_clip(clip: Clip, K: int, cfg: TrainConfig, rng: np.random.Generator, dtype=torch.float32) -> ClipTensors:
    labels = assign_training_labels(clip, K, rng)
    window = build_window(clip, labels)
    window = augment_occlusion(window, cfg.lambda_occ, rng)
    window = augment_swap(window, cfg.lambda_sw, rng)
    return build_clip_tensors(clip, labels, window, K, dtype, cfg.supervise_newborns)


# --------------------------------------------------------------------------- losses


def id_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over supervised rows (targets equal to ``IGNORE`` are skipped)."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.shape[0] == 0 or not bool((targets != IGNORE).any()):
        log.warning("id_loss called with no supervised detections; returning 0")
        return logits.sum() * 0.0
    return F.cross_entropy(logits, targets, ignore_index=IGNORE)


def total_loss(components: dict[str, float | torch.Tensor], weights: dict[str, float] | TrainConfig) -> float | torch.Tensor:
    """Weighted sum of ``cls``, ``L1``, ``giou`` and ``id`` terms; missing terms count as 0."""
    if isinstance(weights, TrainConfig):
        weights = {"cls": weights.lambda_cls, "L1": weights.lambda_L1, "giou": weights.lambda_giou, "id": weights.lambda_id}
    total = 0.0
    for name, w in weights.items():
        if w < 0:
            raise ConfigError(f"lambda_{name}", "loss weights must be non-negative")
        if name in components:
            total = total + w * components[name]
    return total


def reid_objective(logits: torch.Tensor, class_indices: torch.Tensor) -> torch.Tensor:
    """Classification of each detection into its corpus-wide trajectory class."""
    return id_loss(logits, class_indices)


def contra_objective(features: torch.Tensor, identities, temperature: float = 0.1, frames=None) -> torch.Tensor:
    """infoNCE over positive pairs (same identity, different frames) against in-batch negatives."""
    z = F.normalize(features, dim=1)
    n = z.shape[0]
    ids = torch.as_tensor(identities)
    sim = (z @ z.T) / temperature
    eye = torch.eye(n, dtype=torch.bool)
    pos = (ids[:, None] == ids[None, :]) & ~eye
    if frames is not None:
        fr = torch.as_tensor(frames)
        pos = pos & (fr[:, None] != fr[None, :])
    if not bool(pos.any()):
        log.warning("contra_objective: batch has no positive pair; returning 0")
        return features.sum() * 0.0
    log_prob = sim - torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    return -(log_prob[pos]).mean()


# --------------------------------------------------------------------------- checkpoints


def _optimizer_tensors(model: nn.Module, optimizer: torch.optim.Optimizer | None) -> dict[str, torch.Tensor]:
    if optimizer is None:
        return {}
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if state:
            out[f"optim.{name}.exp_avg"] = state["exp_avg"]
            out[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"]
            out[f"optim.{name}.step"] = torch.as_tensor(state["step"], dtype=torch.float64).reshape(1)
    return out


def save_model(path, model: nn.Module, meta: dict, optimizer=None) -> None:
    tensors = {f"param.{k}": v for k, v in model.state_dict().items()}
    tensors.update(_optimizer_tensors(model, optimizer))
    save_tensors(path, tensors, meta)


def _restore_optimizer(model: nn.Module, optimizer: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]) -> None:
    for name, p in model.named_parameters():
        key = f"optim.{name}.exp_avg"
        if key in tensors:
            optimizer.state[p] = {
                "step": tensors[f"optim.{name}.step"].reshape(()).to(torch.float32),
                "exp_avg": tensors[key].to(p.dtype).clone(),
                "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"].to(p.dtype).clone(),
            }


def load_model(path) -> tuple[nn.Module, dict, dict[str, torch.Tensor]]:
    """Rebuild the model stored at ``path``; returns ``(model, meta, raw tensors)``."""
    tensors, meta = load_tensors(path)
    kind = meta.get("kind", "id_pred")
    if kind == "id_pred":
        model = IDPredictor(DecoderConfig(**_tuples(meta["decoder"])))
    elif kind in ("re_id", "contra"):
        model = EmbeddingEncoder(**meta["encoder"])
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    state = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    expected = model.state_dict()
    for name, value in expected.items():
        if name not in state:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if tuple(state[name].shape) != tuple(value.shape):
            raise CheckpointError(f"{path}: {name} has shape {tuple(state[name].shape)}, model expects {tuple(value.shape)}")
    model.load_state_dict({k: state[k].to(expected[k].dtype) for k in expected})
    return model, meta, tensors


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# --------------------------------------------------------------------------- baseline encoder


class EmbeddingEncoder(nn.Module):
    """Feature-to-embedding map for the cosine baselines.

    A linear projection (identity-initialised when square), optionally
    followed by self-attention layers across the detections of one frame.
    """

    def __init__(self, feature_dim: int, embedding_dim: int = 0, enhance_layers: int = 0, num_heads: int = 4, num_classes: int = 0, seed: int = 0, dtype: str = "float32"):
        super().__init__()
        embedding_dim = embedding_dim or feature_dim
        self.feature_dim = feature_dim
        self.embedding_dim = embedding_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.proj = nn.Linear(feature_dim, embedding_dim)
            if embedding_dim == feature_dim:
                with torch.no_grad():
                    self.proj.weight.copy_(torch.eye(feature_dim))
                    self.proj.bias.zero_()
            heads = num_heads if embedding_dim % num_heads == 0 else 1
            self.enhance = nn.ModuleList(
                nn.TransformerEncoderLayer(embedding_dim, heads, 2 * embedding_dim, dropout=0.0, batch_first=True, norm_first=True)
                for _ in range(enhance_layers)
            )
            self.classifier = nn.Linear(embedding_dim, num_classes) if num_classes else None
        self.to(torch.float64 if dtype == "float64" else torch.float32)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = self.proj(features)
        if len(self.enhance):
            x = x.unsqueeze(0)
            for layer in self.enhance:
                x = layer(x)
            x = x.squeeze(0)
        return x

    @torch.no_grad()
    def embed(self, features: np.ndarray) -> np.ndarray:
        dtype = self.proj.weight.dtype
        return self.forward(torch.as_tensor(features, dtype=dtype)).numpy()


# --------------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: nn.Module
    steps: int
    losses: list[float]
    checkpoint: Path | None = None


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for e in cfg.lr_drop_epochs if epoch >= e)
    return cfg.learning_rate * (0.1 ** drops)


def _clip_rng(seed: int, epoch: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, slot])


def _batch_loss(model: IDPredictor, clips: list[ClipTensors]) -> torch.Tensor:
    logits, valid = model.batched_forward(clips)
    targets = torch.full(valid.shape, IGNORE, dtype=torch.long)
    for b, c in enumerate(clips):
        targets[b, : c.targets.shape[0]] = c.targets
    return id_loss(logits[valid], targets[valid])


def _embedding_batch_loss(model: EmbeddingEncoder, cfg: TrainConfig, clips: list[Clip], class_of: dict) -> torch.Tensor:
    dtype = model.proj.weight.dtype
    losses = []
    for clip in clips:
        feats, ids, frames = [], [], []
        for t, frame in enumerate(clip.frames):
            real = frame.gt_ids != NO_TRACK
            if not real.any():
                continue
            emb = model(torch.as_tensor(frame.features[real], dtype=dtype))
            feats.append(emb)
            ids.extend(int(i) for i in frame.gt_ids[real])
            frames.extend([t] * int(real.sum()))
        if not feats:
            continue
        emb = torch.cat(feats)
        if cfg.objective == "re_id":
            classes = torch.as_tensor([class_of[(clip.sequence, i)] for i in ids])
            losses.append(reid_objective(model.classifier(emb), classes))
        else:
            losses.append(contra_objective(emb, ids, cfg.temperature, frames))
    return torch.stack(losses).mean()


def build_model(cfg: TrainConfig, dec_cfg: DecoderConfig, corpus: Sequence[LabeledSequence]) -> tuple[nn.Module, dict]:
    if cfg.objective == "id_pred":
        return IDPredictor(dec_cfg), {}
    class_of = {}
    for seq in corpus:
        for tid in seq.track_ids():
            class_of[(seq.name, tid)] = len(class_of)
    model = EmbeddingEncoder(
        dec_cfg.feature_dim,
        cfg.embedding_dim,
        cfg.enhance_layers,
        num_classes=len(class_of) if cfg.objective == "re_id" else 0,
        seed=dec_cfg.seed,
        dtype=dec_cfg.dtype,
    )
    return model, class_of


def model_meta(model: nn.Module, cfg: TrainConfig, dec_cfg: DecoderConfig, step: int, epoch: int) -> dict:
    meta = {
        "kind": cfg.objective,
        "train": dataclasses.asdict(cfg),
        "decoder": dataclasses.asdict(dec_cfg),
        "step": step,
        "epoch": epoch,
        "optimizer": {"name": "adamw", "betas": [0.9, 0.999], "eps": 1e-8, "weight_decay": cfg.weight_decay},
    }
    if isinstance(model, EmbeddingEncoder):
        meta["encoder"] = {
            "feature_dim": model.feature_dim,
            "embedding_dim": model.embedding_dim,
            "enhance_layers": len(model.enhance),
            "num_classes": model.classifier.out_features if model.classifier is not None else 0,
            "seed": dec_cfg.seed,
            "dtype": dec_cfg.dtype,
        }
    return meta


def train(
    corpus: Sequence[LabeledSequence],
    cfg: TrainConfig,
    dec_cfg: DecoderConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Optimise the model on clips drawn from ``corpus``.

    One epoch visits every eligible sequence once (shuffled) in batches of
    ``batch_size`` clips. With ``out_dir`` set, writes ``metrics.log``
    (``step loss lr grad_norm``), periodic ``ckpt_<step>.bin`` files and a
    final ``checkpoint.bin``.
    """
    cfg.validate()
    dec_cfg.validate()
    if dec_cfg.max_rel_offset < cfg.T:
        raise ConfigError("max_rel_offset", f"must be >= T={cfg.T}")
    if not corpus:
        raise ConfigError("corpus", "training corpus is empty")
    eligible = [s for s in corpus if len(s) >= cfg.clip_len]
    for s in corpus:
        if len(s) < cfg.clip_len:
            log.warning("sequence %s shorter than %d frames; excluded", s.name, cfg.clip_len)
    if not eligible:
        raise ConfigError("corpus", f"no sequence has {cfg.clip_len} frames")

    model, class_of = build_model(cfg, dec_cfg, eligible)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    step = 0
    start_epoch = 0
    if resume is not None:
        loaded, meta, tensors = load_model(resume)
        model.load_state_dict(loaded.state_dict())
        _restore_optimizer(model, optimizer, tensors)
        step = int(meta["step"])
        start_epoch = int(meta["epoch"])

    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    last_good = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.log", "a" if resume is not None else "w")
        if resume is None:
            last_good = out / "ckpt_0.bin"
            save_model(last_good, model, model_meta(model, cfg, dec_cfg, 0, 0), optimizer)
        else:
            last_good = Path(resume)

    dtype = dec_cfg.torch_dtype
    losses: list[float] = []
    per_epoch = math.ceil(len(eligible) / cfg.batch_size)
    model.train()
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = learning_rate_at(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(eligible))
            for b in range(per_epoch):
                batch_idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                clips = []
                for slot, si in enumerate(batch_idx):
                    rng = _clip_rng(cfg.seed, epoch, b, slot)
                    for _ in range(16):
                        clip = sample_clip(eligible[si], cfg.T, cfg.interval_range, rng)
                        try:
                            if cfg.objective == "id_pred":
                                clips.append(prepare_clip(clip, dec_cfg.num_ids, cfg, rng, dtype))
                            else:
                                clips.append(clip)
                            break
                        except CapacityError as err:
                            log.warning("clip rejected: %s", err)
                if not clips:
                    continue
                if cfg.objective == "id_pred":
                    loss = cfg.lambda_id * _batch_loss(model, clips)
                else:
                    loss = _embedding_batch_loss(model, cfg, clips, class_of)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss at step {step + 1}; last good checkpoint: {last_good}")
                optimizer.zero_grad(set_to_none=False)
                loss.backward()
                grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm if cfg.grad_clip_norm > 0 else float("inf")))
                if not math.isfinite(grad_norm):
                    raise NumericError(f"non-finite gradient at step {step + 1}; last good checkpoint: {last_good}")
                optimizer.step()
                step += 1
                losses.append(value)
                if metrics is not None:
                    metrics.write(f"{step} {value!r} {lr!r} {grad_norm!r}\n")
                if on_step is not None:
                    on_step(step, value)
                if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    last_good = out / f"ckpt_{step}.bin"
                    save_model(last_good, model, model_meta(model, cfg, dec_cfg, step, epoch), optimizer)
    finally:
        if metrics is not None:
            metrics.close()
    model.eval()
    final = None
    if out is not None:
        final = out / "checkpoint.bin"
        save_model(final, model, model_meta(model, cfg, dec_cfg, step, cfg.epochs), optimizer)
    return TrainResult(model, step, losses, final)
