"""Pattern construction and the Gaussian prompt estimator."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import torch
from torch import nn

from .backbone import CLS, MASK, SEP, UNK, Vocabulary
from .data import Event, event_to_tokens, chain_tokens

PROMPT_SLOTS = 4
# sqrt(floor) ~ 1.5e-8: keeps sqrt differentiable without visibly moving a near-zero-variance sample
VARIANCE_FLOOR = 2.220446049250313e-16


@dataclass(frozen=True)
class PatternSequence:
    token_ids: tuple[int, ...]
    prompt_slot_positions: tuple[int, int, int, int]
    mask_position: int
    candidate_index: int

    def __len__(self):
        return len(self.token_ids)


def build_pattern(
    chain: Sequence[Event],
    candidate: Event,
    j: int,
    vocab: Vocabulary,
    max_length: Optional[int] = None,
    prompt_ids: Optional[Sequence[int]] = None,
) -> PatternSequence:
    """``[CLS] chain t1 t2 t3 t4 [MASK] candidate [SEP]``.

    Prompt slots carry ``prompt_ids`` when given (manual prompt) and the
    ``[UNK]`` placeholder otherwise; placeholder rows are overwritten before
    encoding.
    """
    chain_ids = vocab.ids(chain_tokens(chain))
    slots = list(prompt_ids) if prompt_ids is not None else [UNK] * PROMPT_SLOTS
    if len(slots) != PROMPT_SLOTS:
        raise ValueError(f"expected {PROMPT_SLOTS} prompt ids, got {len(slots)}")
    ids = [CLS] + chain_ids + slots + [MASK] + vocab.ids(event_to_tokens(candidate)) + [SEP]
    if max_length is not None and len(ids) > max_length:
        raise ValueError(f"pattern length {len(ids)} exceeds max_sequence_length {max_length}")
    first = 1 + len(chain_ids)
    return PatternSequence(
        token_ids=tuple(ids),
        prompt_slot_positions=tuple(range(first, first + PROMPT_SLOTS)),
        mask_position=first + PROMPT_SLOTS,
        candidate_index=j,
    )


class GaussianEmbedding(NamedTuple):
    mean: torch.Tensor
    variance: torch.Tensor


class Attention(nn.Module):
    """Single-head scaled dot-product attention with an output projection."""

    def __init__(self, d: int):
        super().__init__()
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, queries, keys_values, key_mask=None):
        q = self.query(queries)
        k = self.key(keys_values)
        v = self.value(keys_values)
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
        return self.out(torch.softmax(scores, dim=-1) @ v)


class PromptEstimator(nn.Module):
    """The coupled mean/log-variance attentions, shared by all four prompt slots."""

    def __init__(self, d: int, logvar_init: float = 0.0):
        super().__init__()
        self.attn_mu = Attention(d)
        self.attn_sigma = Attention(d)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.attn_sigma.out.bias, logvar_init)

    def forward(self, candidate_args, chain_args, chain_mask=None) -> GaussianEmbedding:
        """``candidate_args`` (B, m, 4, d) against ``chain_args`` (B, 4n, d)."""
        b, m, k, d = candidate_args.shape
        queries = candidate_args.reshape(b, m * k, d)
        mu = self.attn_mu(queries, chain_args, chain_mask)
        var = torch.exp(self.attn_sigma(queries, chain_args, chain_mask))
        return GaussianEmbedding(mu.reshape(b, m, k, d), var.reshape(b, m, k, d))


def estimate_prompt_gaussians(candidate_args, chain_args, estimator: PromptEstimator):
    """Four prompt Gaussians for one candidate: ``candidate_args`` (4, d) in
    subject/verb/object/indirect order, ``chain_args`` (4n, d)."""
    g = estimator(candidate_args[None, None], chain_args[None])
    return [GaussianEmbedding(g.mean[0, 0, i], g.variance[0, 0, i]) for i in range(PROMPT_SLOTS)]


def sample_prompt(g: GaussianEmbedding, noise) -> torch.Tensor:
    return g.mean + noise * torch.sqrt(torch.clamp(g.variance, min=VARIANCE_FLOOR))
