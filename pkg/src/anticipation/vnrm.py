"""Verb-noun relation model: predict the future verb, then transform observed
noun evidence into an anticipated noun representation conditioned on it.

The verb branch scores every position of the causal trunk; the expected verb
embedding under the final position's predicted distribution becomes a query
that cross-attends over the observed positions' hidden states (the noun
tokens). The attended value, plus a residual projection of the query, feeds
the noun classifier. The knowledge-distillation teacher is asymmetric: its
verb branch consumes the full sequence including real gap clips, while its
noun tokens come from observed positions only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .distill import DistillConfig
from .model import AnticipationModel, ModelConfig


@dataclass
class VnrmConfig:
    """Relation-module hyperparameters."""

    verb_context_dim: int | None = None  # defaults to the trunk embed_dim
    relation_heads: int = 4
    use_kd: bool = False
    distill: DistillConfig = field(default_factory=DistillConfig)
    share_backbone: bool = True
    # student regime: True appends learnable gap tokens to the observed clips
    # (the verb branch reads the final gap slot); False reads the last
    # observed position directly
    gap_tokens: bool = True

    def resolved_dim(self, embed_dim: int) -> int:
        dim = self.verb_context_dim or embed_dim
        if dim % self.relation_heads != 0:
            raise ValueError(
                f"relation_heads ({self.relation_heads}) must divide "
                f"verb_context_dim ({dim})"
            )
        return dim


@dataclass
class VnrmOutput:
    """Every tensor the relation model produces for one batch."""

    verb_positions: torch.Tensor  # (B, T, k_verb) per-position verb logits
    noun_positions: torch.Tensor  # (B, T, k_noun) auxiliary per-position noun logits
    final_verb: torch.Tensor  # (B, k_verb)
    final_noun: torch.Tensor  # (B, k_noun)
    final_action: torch.Tensor | None  # (B, k_action)
    verb_context: torch.Tensor  # (B, context_dim)
    anticipated_noun: torch.Tensor  # (B, context_dim)
    attention: torch.Tensor  # (B, relation_heads, n_obs)
    noun_tokens: torch.Tensor  # (B, n_obs, embed_dim) what the noun branch consumed

    def final_head(self, name: str) -> torch.Tensor | None:
        return {
            "verb": self.final_verb,
            "noun": self.final_noun,
            "action": self.final_action,
        }[name]


class RelationCrossAttention(nn.Module):
    """Multi-head cross-attention from one query vector over a token sequence."""

    def __init__(self, context_dim: int, token_dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = context_dim // n_heads
        self.q_proj = nn.Linear(context_dim, context_dim)
        self.k_proj = nn.Linear(token_dim, context_dim)
        self.v_proj = nn.Linear(token_dim, context_dim)
        self.out_proj = nn.Linear(context_dim, context_dim)

    def forward(
        self, query: torch.Tensor, tokens: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (attended vector (B, C), attention weights (B, heads, L))."""
        if tokens.shape[1] < 1:
            raise ValueError("relation attention requires at least one token")
        b, l, _ = tokens.shape
        h, d = self.n_heads, self.head_dim
        q = self.q_proj(query).view(b, h, 1, d)
        k = self.k_proj(tokens).view(b, l, h, d).transpose(1, 2)
        v = self.v_proj(tokens).view(b, l, h, d).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(d)
        weights = F.softmax(scores, dim=-1)  # (B, h, 1, L)
        mixed = (weights @ v).view(b, h * d)
        return self.out_proj(mixed), weights.view(b, h, l)


class VerbNounRelationModel(nn.Module):
    """Causal trunk plus verb branch, relation block, and anticipation heads."""

    def __init__(self, model_config: ModelConfig, vnrm_config: VnrmConfig):
        super().__init__()
        self.config = model_config
        self.vnrm_config = vnrm_config
        context_dim = vnrm_config.resolved_dim(model_config.embed_dim)
        self.context_dim = context_dim

        trunk_config = ModelConfig(**{**model_config.__dict__, "k_action": None})
        self.trunk = AnticipationModel(trunk_config)
        self.noun_trunk = (
            None if vnrm_config.share_backbone else AnticipationModel(trunk_config)
        )

        self.verb_class_embed = nn.Parameter(
            torch.empty(model_config.k_verb, context_dim)
        )
        self.relation = RelationCrossAttention(
            context_dim, model_config.embed_dim, vnrm_config.relation_heads
        )
        self.context_proj = nn.Linear(context_dim, context_dim)
        self.noun_head = nn.Linear(context_dim, model_config.k_noun)
        self.action_head = (
            nn.Linear(2 * context_dim, model_config.k_action)
            if model_config.k_action
            else None
        )
        # the relation block is an adapter on top of normalized trunk states,
        # not a residual-stacked layer: keep fan-in-scaled default init so its
        # output carries instance signal from the first step; small init here
        # stalls the noun branch for a large part of a short schedule
        nn.init.normal_(self.verb_class_embed, std=1.0 / math.sqrt(context_dim))
        for head in (self.noun_head, self.action_head):
            if head is not None:
                nn.init.trunc_normal_(head.weight, std=0.02)
                nn.init.zeros_(head.bias)

    # --- branch operations ---------------------------------------------------

    def verb_branch(self, hidden: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-position verb logits and the expected future-verb embedding.

        The context vector is the predicted final-position verb distribution
        times the verb class embedding table, so a one-hot prediction returns
        that verb's embedding row exactly.
        """
        logits = self.trunk.head_verb(hidden)
        probs = torch.softmax(logits[:, -1], dim=-1)
        context = probs @ self.verb_class_embed
        return logits, context

    def relate(
        self, verb_context: torch.Tensor, noun_tokens: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Anticipated noun vector from observed noun tokens and the verb query."""
        attended, weights = self.relation(verb_context, noun_tokens)
        return attended + self.context_proj(verb_context), weights

    def _noun_tokens(
        self, hidden: torch.Tensor, observed: torch.Tensor, n_obs: int
    ) -> torch.Tensor:
        if self.noun_trunk is None:
            return hidden[:, :n_obs]
        embedded = self.noun_trunk.embed_features(observed[:, :n_obs])
        return self.noun_trunk.decode(embedded)

    def _wire(
        self, hidden: torch.Tensor, observed: torch.Tensor, n_obs: int
    ) -> VnrmOutput:
        verb_logits, verb_context = self.verb_branch(hidden)
        noun_tokens = self._noun_tokens(hidden, observed, n_obs)
        anticipated, weights = self.relate(verb_context, noun_tokens)
        final_noun = self.noun_head(anticipated)
        final_action = None
        if self.action_head is not None:
            final_action = self.action_head(
                torch.cat([verb_context, anticipated], dim=-1)
            )
        return VnrmOutput(
            verb_positions=verb_logits,
            noun_positions=self.trunk.head_noun(hidden),
            final_verb=verb_logits[:, -1],
            final_noun=final_noun,
            final_action=final_action,
            verb_context=verb_context,
            anticipated_noun=anticipated,
            attention=weights,
            noun_tokens=noun_tokens,
        )

    # --- entry points ----------------------------------------------------------

    def forward_observed(self, observed: torch.Tensor) -> VnrmOutput:
        """Observation-only regime: the verb context comes from the last
        observed position; gap clips are never consumed."""
        hidden = self.trunk.decode(self.trunk.embed_features(observed))
        return self._wire(hidden, observed, n_obs=observed.shape[1])

    def forward_student(self, observed: torch.Tensor, gap: int) -> VnrmOutput:
        """Student regime: observed clips plus learnable gap tokens. The verb
        branch reads the final gap slot; the noun tokens still cover observed
        positions only, so real gap features are never consumed."""
        hidden = self.trunk.decode(self.trunk.build_student_input(observed, gap))
        return self._wire(hidden, observed, n_obs=observed.shape[1])

    def forward_teacher(self, full: torch.Tensor, n_obs: int) -> VnrmOutput:
        """Asymmetric teacher: the verb branch sees observed + gap clips, the
        noun tokens stop at the last observed position. With no gap clips this
        degenerates to the observation-only regime."""
        if full.shape[1] < n_obs:
            raise ValueError("teacher input shorter than the observed window")
        hidden = self.trunk.decode(self.trunk.embed_features(full))
        return self._wire(hidden, full, n_obs=n_obs)

    def forward(self, observed: torch.Tensor) -> VnrmOutput:
        return self.forward_observed(observed)
