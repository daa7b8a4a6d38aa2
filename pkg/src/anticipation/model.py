"""Causal transformer decoder with learnable gap tokens and multi-scale pooling.

One model serves three input regimes:

* base       — observed clip features only, prediction read from the last
               observed position;
* full video — observed plus real gap-clip features (the teacher's view);
* student    — observed features concatenated with learnable future-embedding
               tokens standing in for the gap clips the student cannot see.

Positions attend strictly causally; classifier heads score every position and
the final position carries the anticipation prediction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class ModelConfig:
    """Architecture hyperparameters."""

    feature_dim: int
    k_verb: int
    k_noun: int
    k_action: int | None = None
    n_layers: int = 4
    n_heads: int = 4
    embed_dim: int = 256
    feedforward_dim: int | None = None  # defaults to 4 * embed_dim
    dropout: float = 0.1
    multi_scale: bool = False
    scales: tuple[int, ...] = (1, 2, 4)
    max_seq_len: int = 64
    max_gap: int = 8  # capacity of the future-embedding token table

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.scales = tuple(int(s) for s in self.scales)
        if any(s < 1 or s > self.max_seq_len for s in self.scales):
            raise ValueError("scales must lie in [1, max_seq_len]")
        if self.max_gap < 1:
            raise ValueError("max_gap must be >= 1")

    @property
    def ff_dim(self) -> int:
        return self.feedforward_dim if self.feedforward_dim else 4 * self.embed_dim


@dataclass
class LogitBundle:
    """Per-position verb/noun(/action) logits for one sequence."""

    verb: torch.Tensor  # (..., T, k_verb)
    noun: torch.Tensor  # (..., T, k_noun)
    action: torch.Tensor | None = None

    @property
    def seq_len(self) -> int:
        return self.verb.shape[-2]

    def at(self, position: int) -> "LogitBundle":
        return LogitBundle(
            verb=self.verb[..., position, :],
            noun=self.noun[..., position, :],
            action=None if self.action is None else self.action[..., position, :],
        )

    def final(self) -> "LogitBundle":
        return self.at(self.seq_len - 1)

    def slice_positions(self, start: int, stop: int) -> "LogitBundle":
        return LogitBundle(
            verb=self.verb[..., start:stop, :],
            noun=self.noun[..., start:stop, :],
            action=None if self.action is None else self.action[..., start:stop, :],
        )

    def head(self, name: str) -> torch.Tensor | None:
        return {"verb": self.verb, "noun": self.noun, "action": self.action}[name]


class CausalSelfAttention(nn.Module):
    """Multi-head self-attention where position i sees positions <= i."""

    def __init__(self, embed_dim: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = embed_dim // n_heads
        self.qkv = nn.Linear(embed_dim, 3 * embed_dim)
        self.out = nn.Linear(embed_dim, embed_dim)
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, e = x.shape
        q, k, v = self.qkv(x).split(e, dim=-1)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        mask = torch.triu(
            torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1
        )
        attn = attn.masked_fill(mask, float("-inf"))
        weights = F.softmax(attn, dim=-1)
        weights = F.dropout(weights, self.dropout, training=self.training)
        mixed = (weights @ v).transpose(1, 2).reshape(b, t, e)
        return self.out(mixed)


class DecoderBlock(nn.Module):
    """Pre-norm block: masked self-attention then feedforward, both residual."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.embed_dim)
        self.attn = CausalSelfAttention(config.embed_dim, config.n_heads, config.dropout)
        self.ln2 = nn.LayerNorm(config.embed_dim)
        self.fc1 = nn.Linear(config.embed_dim, config.ff_dim)
        self.fc2 = nn.Linear(config.ff_dim, config.embed_dim)
        self.dropout = config.dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + F.dropout(self.attn(self.ln1(x)), self.dropout, training=self.training)
        h = self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x + F.dropout(h, self.dropout, training=self.training)


def causal_average_pool(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Mean over the trailing window of length `scale` at each position.

    Windows clip at the sequence start, so position t averages
    x[max(0, t-scale+1) .. t].
    """
    if scale == 1:
        return x
    b, t, e = x.shape
    cumsum = torch.cumsum(x, dim=1)
    shifted = torch.zeros_like(cumsum)
    if t > scale:
        shifted[:, scale:] = cumsum[:, :-scale]
    window_sums = cumsum - shifted
    counts = torch.clamp(
        torch.arange(1, t + 1, device=x.device, dtype=x.dtype), max=float(scale)
    )
    return window_sums / counts.view(1, t, 1)


class MultiScaleBlock(nn.Module):
    """Sum of causally pooled streams at several window lengths, plus residual.

    Each scale's pooled stream passes through its own linear map; when every
    per-scale map is zero the block is the identity.
    """

    def __init__(self, embed_dim: int, scales: tuple[int, ...]):
        super().__init__()
        self.scales = scales
        self.projections = nn.ModuleList(
            nn.Linear(embed_dim, embed_dim) for _ in scales
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if any(s > x.shape[1] for s in self.scales):
            raise ValueError(
                f"scales {self.scales} exceed sequence length {x.shape[1]}"
            )
        out = x
        for scale, projection in zip(self.scales, self.projections):
            out = out + projection(causal_average_pool(x, scale))
        return out


class AnticipationModel(nn.Module):
    """Input projection, causal decoder stack, gap tokens, and task heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        e = config.embed_dim
        self.input_proj = nn.Linear(config.feature_dim, e)
        self.pos_embed = nn.Parameter(torch.empty(config.max_seq_len, e))
        self.future_tokens = nn.Parameter(torch.empty(config.max_gap, e))
        self.blocks = nn.ModuleList(
            DecoderBlock(config) for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(e)
        self.multi_scale = (
            MultiScaleBlock(e, config.scales) if config.multi_scale else None
        )
        self.head_verb = nn.Linear(e, config.k_verb)
        self.head_noun = nn.Linear(e, config.k_noun)
        self.head_action = (
            nn.Linear(e, config.k_action) if config.k_action else None
        )
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
        nn.init.normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.future_tokens, std=0.02)

    # --- sequence assembly -------------------------------------------------

    def project(self, features: torch.Tensor) -> torch.Tensor:
        """Linear projection of clip features, before positions are added."""
        return self.input_proj(features)

    def add_positions(self, x: torch.Tensor) -> torch.Tensor:
        t = x.shape[-2]
        if t > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {t} exceeds max_seq_len {self.config.max_seq_len}"
            )
        return x + self.pos_embed[:t]

    def embed_features(self, features: torch.Tensor) -> torch.Tensor:
        """Project real clip features and add positional embeddings."""
        return self.add_positions(self.project(features))

    def build_student_input(self, observed: torch.Tensor, gap: int) -> torch.Tensor:
        """Observed projections followed by `gap` future tokens, with positions
        applied over the full concatenated length."""
        if gap < 1:
            raise ValueError("gap must be >= 1 (the anticipation time is never empty)")
        if gap > self.config.max_gap:
            raise ValueError(f"gap {gap} exceeds future-token capacity {self.config.max_gap}")
        projected = self.project(observed)
        tokens = self.future_tokens[:gap].expand(projected.shape[0], gap, -1)
        return self.add_positions(torch.cat([projected, tokens], dim=1))

    # --- decoding and heads -------------------------------------------------

    def decode(self, embedded: torch.Tensor) -> torch.Tensor:
        """Run the causal decoder stack; applies the multi-scale block if configured."""
        if not torch.isfinite(embedded).all():
            raise ValueError("non-finite values in decoder input")
        x = embedded
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        if self.multi_scale is not None:
            x = self.multi_scale(x)
        return x

    def classify(self, hidden: torch.Tensor) -> LogitBundle:
        return LogitBundle(
            verb=self.head_verb(hidden),
            noun=self.head_noun(hidden),
            action=None if self.head_action is None else self.head_action(hidden),
        )

    # --- entry points -------------------------------------------------------

    def forward_features(self, features: torch.Tensor) -> LogitBundle:
        """Score a sequence of real clip features (base and teacher regimes)."""
        return self.classify(self.decode(self.embed_features(features)))

    def forward_student(self, observed: torch.Tensor, gap: int) -> LogitBundle:
        """Score observed features plus learnable gap tokens (student regime)."""
        return self.classify(self.decode(self.build_student_input(observed, gap)))

    def forward(self, features: torch.Tensor) -> LogitBundle:
        return self.forward_features(features)


def count_parameters(config: ModelConfig) -> int:
    """Closed-form parameter count for AnticipationModel.

    input projection   D*E + E
    positional table   max_seq_len * E
    future tokens      max_gap * E
    per decoder block  4E^2 + 2*E*F + 9E + F   (two norms, qkv+out, two fcs)
    final norm         2E
    multi-scale        len(scales) * (E^2 + E)
    heads              (E+1) * (K_v + K_n [+ K_a])
    """
    e, f, d = config.embed_dim, config.ff_dim, config.feature_dim
    total = d * e + e
    total += config.max_seq_len * e
    total += config.max_gap * e
    total += config.n_layers * (4 * e * e + 2 * e * f + 9 * e + f)
    total += 2 * e
    if config.multi_scale:
        total += len(config.scales) * (e * e + e)
    total += (e + 1) * (config.k_verb + config.k_noun)
    if config.k_action:
        total += (e + 1) * config.k_action
    return total
