"""ID Decoder: a pre-norm transformer decoder over tracklet tokens.

Queries are current detections carrying the special word, memory is the
labeled trajectory window. Every layer runs self-attention among queries of
the same frame (optional), cross-attention into memory, then a feedforward
block. Cross-attention keys and values are ``memory + rel[gap]`` where
``gap = query_time - memory_time`` is clamped to ``max_rel_offset``; since
the projections are linear this is evaluated as a content term plus a
per-gap term, so the same masked pass serves one frame or a whole clip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import SPECIAL, IDDictionary
from .errors import ConfigError, DimensionError, EmptyMemoryError, NumericError, TemporalOrderError

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class DecoderConfig:
    feature_dim: int = 256
    num_ids: int = 50
    num_layers: int = 6
    num_heads: int = 8
    feedforward_width: int = 0  # 0 means 4 * model_width
    max_rel_offset: int = 29
    self_attention_enabled: bool = True
    dropout_rate: float = 0.0
    init_sigma: float = 0.02
    project_to_feature_dim: bool = False
    dtype: str = "float32"
    seed: int = 0

    @property
    def model_width(self) -> int:
        return self.feature_dim if self.project_to_feature_dim else 2 * self.feature_dim

    @property
    def ff_width(self) -> int:
        return self.feedforward_width or 4 * self.model_width

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def validate(self) -> "DecoderConfig":
        if self.feature_dim < 1:
            raise ConfigError("feature_dim", "must be >= 1")
        if self.num_ids < 1:
            raise ConfigError("num_ids", "must be >= 1")
        if self.num_layers < 1:
            raise ConfigError("num_layers", "must be >= 1")
        if self.num_heads < 1 or self.model_width % self.num_heads:
            raise ConfigError("num_heads", f"model width {self.model_width} not divisible by {self.num_heads}")
        if self.max_rel_offset < 1:
            raise ConfigError("max_rel_offset", "must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate", "must be in [0, 1)")
        if self.dtype not in DTYPES:
            raise ConfigError("dtype", f"expected one of {sorted(DTYPES)}")
        return self


def relative_encoding(delta_t: int, table: torch.Tensor) -> torch.Tensor:
    if delta_t <= 0:
        raise TemporalOrderError(f"memory must precede the query, got gap {delta_t}")
    return table[min(delta_t, table.shape[0] - 1)]


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # (..., L, width) -> (..., heads, L, head_dim)
        return x.unflatten(-1, (self.heads, self.head_dim)).transpose(-3, -2)

    def forward(self, x, context, allowed, rel_table=None, gaps=None, return_weights=False):
        """Batched attention: ``x`` is ``(B, N, W)``, ``context`` ``(B, M, W)``.

        ``allowed[b, i, j]`` says whether query ``i`` may look at context
        ``j``; rows with no allowed entry receive a zero attention output.
        ``gaps[b, i, j]`` indexes ``rel_table`` for the relative term.
        """
        B, N, M = x.shape[0], x.shape[1], context.shape[1]
        scale = 1.0 / math.sqrt(self.head_dim)
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        scores = q @ k.transpose(-1, -2)
        if rel_table is not None:
            idx = gaps.unsqueeze(1).expand(B, self.heads, N, M)
            k_rel = self._split(F.linear(rel_table, self.k_proj.weight))
            scores = scores + torch.gather(q @ k_rel.transpose(-1, -2), 3, idx)
        scores = scores * scale
        allowed = allowed.unsqueeze(1)
        has_any = allowed.any(dim=-1, keepdim=True)
        scores = scores.masked_fill(~allowed, float("-inf"))
        scores = scores.masked_fill(~has_any, 0.0)
        weights = torch.softmax(scores, dim=-1) * has_any
        weights = self.dropout(weights)
        out = weights @ v
        if rel_table is not None:
            v_rel = self._split(F.linear(rel_table, self.v_proj.weight))
            per_gap = weights.new_zeros(B, self.heads, N, rel_table.shape[0]).scatter_add(3, idx, weights)
            out = out + per_gap @ v_rel
        out = self.out_proj(out.transpose(-3, -2).flatten(-2))
        return (out, weights) if return_weights else out


class DecoderLayer(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        width = config.model_width
        self.self_attention_enabled = config.self_attention_enabled
        if self.self_attention_enabled:
            self.norm_self = nn.LayerNorm(width)
            self.self_attn = MultiHeadAttention(width, config.num_heads, config.dropout_rate)
        self.norm_cross = nn.LayerNorm(width)
        self.cross_attn = MultiHeadAttention(width, config.num_heads, config.dropout_rate)
        self.norm_ff = nn.LayerNorm(width)
        self.ff = nn.Sequential(
            nn.Linear(width, config.ff_width),
            nn.ReLU(),
            nn.Dropout(config.dropout_rate),
            nn.Linear(config.ff_width, width),
        )

    def forward(self, x, memory, self_mask, cross_mask, rel_table, gaps, attn_log=None):
        if self.self_attention_enabled:
            h = self.norm_self(x)
            x = x + self.self_attn(h, h, self_mask)
        out = self.cross_attn(self.norm_cross(x), memory, cross_mask, rel_table, gaps, return_weights=attn_log is not None)
        if attn_log is not None:
            out, weights = out
            attn_log.append(weights.detach())
        x = x + out
        return x + self.ff(self.norm_ff(x))


class IDDecoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        width = config.model_width
        self.input_proj = nn.Linear(2 * config.feature_dim, width) if config.project_to_feature_dim else None
        self.rel_table = nn.Parameter(torch.randn(config.max_rel_offset + 1, width) * 0.02)
        self.memory_norm = nn.LayerNorm(width)
        self.layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.num_layers))
        self.final_norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, config.num_ids + 1)

    def forward(self, queries, memory, query_times, memory_times, query_valid=None, memory_valid=None, attn_log=None):
        """Logits ``(..., N, K+1)`` for query tokens against memory tokens.

        Inputs are either unbatched (``(N, 2C)``, ``(M, 2C)``, ``(N,)``,
        ``(M,)``) or padded batches with a leading clip dimension and
        validity masks. A query sees valid memory strictly earlier than its
        own time and valid queries of the same time.
        """
        unbatched = queries.ndim == 2
        if unbatched:
            queries, memory = queries.unsqueeze(0), memory.unsqueeze(0)
            query_times, memory_times = query_times.unsqueeze(0), memory_times.unsqueeze(0)
        if self.input_proj is not None:
            queries = self.input_proj(queries)
            memory = self.input_proj(memory)
        qt = query_times.unsqueeze(-1)
        cross_mask = memory_times.unsqueeze(-2) < qt
        self_mask = query_times.unsqueeze(-2) == qt
        if memory_valid is not None:
            cross_mask = cross_mask & memory_valid.unsqueeze(-2)
        if query_valid is not None:
            self_mask = self_mask & query_valid.unsqueeze(-2)
        gaps = (qt - memory_times.unsqueeze(-2)).clamp(0, self.config.max_rel_offset)
        memory = self.memory_norm(memory)
        x = queries
        for layer in self.layers:
            x = layer(x, memory, self_mask, cross_mask, self.rel_table, gaps, attn_log)
        logits = self.head(self.final_norm(x))
        return logits.squeeze(0) if unbatched else logits


class IDPredictor(nn.Module):
    """ID dictionary and ID decoder trained jointly."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.dictionary = IDDictionary(config.num_ids, config.feature_dim, config.init_sigma, config.seed)
            self.decoder = IDDecoder(config)
        self.to(config.torch_dtype)

    @property
    def K(self) -> int:
        return self.config.num_ids

    @property
    def dtype(self) -> torch.dtype:
        return self.dictionary.words.dtype

    def query_tokens(self, features: torch.Tensor) -> torch.Tensor:
        features = torch.as_tensor(features, dtype=self.dtype)
        return torch.cat([features, self.dictionary.special.expand(features.shape[0], -1)], dim=1)

    def memory_tokens(self, features: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        features = torch.as_tensor(features, dtype=self.dtype)
        return torch.cat([features, self.dictionary.lookup(labels)], dim=1)

    def decode(self, queries, memory, t: int, memory_times, attn_log=None) -> torch.Tensor:
        width = 2 * self.config.feature_dim
        if memory.shape[0] == 0:
            raise EmptyMemoryError("no historical tracklets to decode against")
        if queries.ndim != 2 or queries.shape[1] != width or memory.ndim != 2 or memory.shape[1] != width:
            raise DimensionError(f"tracklets must be (n, {width}), got {tuple(queries.shape)} and {tuple(memory.shape)}")
        memory_times = torch.as_tensor(memory_times, dtype=torch.long)
        if int(memory_times.max()) >= t:
            raise TemporalOrderError(f"memory at frame {int(memory_times.max())} is not before query time {t}")
        query_times = torch.full((queries.shape[0],), t, dtype=torch.long)
        return self.decoder(queries, memory, query_times, memory_times, attn_log=attn_log)

    def parallel_forward(self, query_features, query_times, memory_features, memory_labels, memory_times) -> torch.Tensor:
        """All frames of one clip in a single causally masked pass."""
        queries = self.query_tokens(query_features)
        memory = self.memory_tokens(memory_features, memory_labels)
        return self.decoder(queries, memory, query_times, memory_times)

    def batched_forward(self, clips) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad several clips into one batch; returns ``(logits (B, N, K+1), query_valid (B, N))``."""
        B = len(clips)
        N = max(int(c.query_times.shape[0]) for c in clips)
        M = max(max(int(c.memory_times.shape[0]) for c in clips), 1)
        C = self.config.feature_dim
        qf = torch.zeros(B, N, C, dtype=self.dtype)
        qt = torch.zeros(B, N, dtype=torch.long)
        qv = torch.zeros(B, N, dtype=torch.bool)
        mf = torch.zeros(B, M, C, dtype=self.dtype)
        ml = torch.ones(B, M, dtype=torch.long)
        mt = torch.zeros(B, M, dtype=torch.long)
        mv = torch.zeros(B, M, dtype=torch.bool)
        for b, c in enumerate(clips):
            n, m = c.query_times.shape[0], c.memory_times.shape[0]
            qf[b, :n] = c.query_features
            qt[b, :n] = c.query_times
            qv[b, :n] = True
            mf[b, :m] = c.memory_features
            ml[b, :m] = c.memory_labels
            mt[b, :m] = c.memory_times
            mv[b, :m] = True
        queries = torch.cat([qf, self.dictionary.special.expand(B, N, C)], dim=-1)
        memory = torch.cat([mf, self.dictionary.lookup(ml)], dim=-1)
        return self.decoder(queries, memory, qt, mt, qv, mv), qv


def init_weights(config: DecoderConfig, K: int | None = None) -> IDPredictor:
    if K is not None and K != config.num_ids:
        raise ConfigError("num_ids", f"config has K={config.num_ids} but {K} was requested")
    return IDPredictor(config)


def decode(queries, memory, t, memory_times, model: IDPredictor) -> torch.Tensor:
    return model.decode(queries, memory, t, memory_times)


def parallel_training_forward(model: IDPredictor, clip) -> list[torch.Tensor]:
    """Per-frame logits for a clip built by :func:`idtrack.training.build_clip_tensors`.

    Returns one ``(n_t, K+1)`` tensor per supervised frame ``1..T``.
    """
    logits = model.parallel_forward(
        clip.query_features, clip.query_times, clip.memory_features, clip.memory_labels, clip.memory_times
    )
    out = []
    for t in range(1, clip.num_frames):
        out.append(logits[clip.query_times == t])
    return out


def gradient(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Backpropagate ``loss`` and return the gradient of every parameter."""
    model.zero_grad(set_to_none=False)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}", parameter=name)
        grads[name] = g
    return grads


__all__ = [
    "SPECIAL",
    "DecoderConfig",
    "IDDecoder",
    "IDPredictor",
    "MultiHeadAttention",
    "decode",
    "gradient",
    "init_weights",
    "parallel_training_forward",
    "relative_encoding",
]
