"""The full scoring pipeline: patterns, prompt sampling, MLM, label distribution, KL scores."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import MANUAL_PROMPT, MaskedLM, PAD, Vocabulary
from .data import ScriptInstance, chain_tokens, event_to_tokens
from .prompt import PROMPT_SLOTS, VARIANCE_FLOOR, PromptEstimator, build_pattern
from .verbalizer import VerbalizerEstimator

PROB_FLOOR = 1e-12
SIGNS = {"negated": -1.0, "paper-literal": 1.0}


@dataclass
class AblationFlags:
    no_pe_variance: bool = False
    no_ve_variance: bool = False
    static_prompt: bool = False
    plain_sum_aggregation: bool = False
    single_label_token: bool = False
    manual_pvp: bool = False
    learnable_prompt_lr: bool = False

    def __post_init__(self):
        if self.manual_pvp and self.learnable_prompt_lr:
            raise ValueError("manual_pvp and learnable_prompt_lr are mutually exclusive")

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]

    def label(self) -> str:
        return "+".join(self.active()) or "none"

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "AblationFlags":
        known = {f.name for f in fields(cls)}
        unknown = set(names) - known
        if unknown:
            raise ValueError(f"unknown ablation flag(s): {sorted(unknown)}")
        return cls(**{n: True for n in names})


@dataclass
class ModelConfig:
    label_token_count: int = 3
    lam: float = 1.0
    sign: str = "negated"
    aggregation_sigma: str = "std"
    prompt_logvar_init: float = 0.0
    manual_label_token: str = "then"
    lr_label_token: str = "then"
    freeze_mlm_head: bool = False

    def __post_init__(self):
        if self.sign not in SIGNS:
            raise ValueError(f"sign must be one of {sorted(SIGNS)}")
        if self.label_token_count < 1:
            raise ValueError("label_token_count must be >= 1")
        if self.lam <= 0:
            raise ValueError("lam must be > 0")


# -- scoring primitives ------------------------------------------------------


def kl_divergence(p, q):
    """D_KL(p || q) over the last axis with both sides floored inside the log."""
    log_p = torch.log(torch.clamp(p, min=PROB_FLOOR))
    log_q = torch.log(torch.clamp(q, min=PROB_FLOOR))
    return (p * (log_p - log_q)).sum(-1)


def score_candidates(distributions, p_v, sign: str = "negated"):
    """Softmax over candidates of the signed divergences ``D_KL(p_j || p_v)``.

    ``distributions`` is (..., m, V) and ``p_v`` is (..., V). With the default
    ``negated`` sign the candidate closest to the label distribution scores
    highest; ``paper-literal`` uses ``+D_KL``.
    """
    distributions = torch.as_tensor(distributions)
    p_v = torch.as_tensor(p_v, dtype=distributions.dtype)
    kl = kl_divergence(distributions, p_v.unsqueeze(-2))
    return torch.softmax(SIGNS[sign] * kl, dim=-1)


def predict(scores) -> int | np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    arr = np.asarray(scores.detach() if isinstance(scores, torch.Tensor) else scores)
    out = np.argmax(arr, axis=-1)
    return int(out) if out.ndim == 0 else out


def instance_loss(scores, gold):
    """Negative log of the gold candidate's score, floored so it stays finite."""
    scores = torch.as_tensor(scores)
    gold_t = torch.as_tensor(gold, dtype=torch.long)
    m = scores.shape[-1]
    if bool(((gold_t < 0) | (gold_t >= m)).any()):
        raise ValueError(f"gold out of range for {m} candidates")
    picked = scores.gather(-1, gold_t.unsqueeze(-1)).squeeze(-1)
    return -torch.log(torch.clamp(picked, min=PROB_FLOOR))


# -- batching and noise ------------------------------------------------------


class EncodedBatch(NamedTuple):
    ids: torch.Tensor            # (B, m, L)
    real: torch.Tensor           # (B, m, L) bool
    slots: torch.Tensor          # (B, m, L, 4) one-hot of prompt slot positions
    mask_pos: torch.Tensor       # (B, m)
    chain_ids: torch.Tensor      # (B, 4n)
    chain_mask: torch.Tensor     # (B, 4n) bool
    cand_ids: torch.Tensor       # (B, m, 4)
    gold: torch.Tensor           # (B,)


def encode_batch(instances: Sequence[ScriptInstance], vocab: Vocabulary, max_length: int,
                 prompt_ids: Optional[Sequence[int]] = None) -> EncodedBatch:
    m = len(instances[0].candidates)
    if any(len(inst.candidates) != m for inst in instances):
        raise ValueError("all instances in a batch need the same candidate count")
    patterns = [[build_pattern(inst.chain, c, j, vocab, max_length, prompt_ids)
                 for j, c in enumerate(inst.candidates)] for inst in instances]
    b = len(instances)
    length = max(len(p) for row in patterns for p in row)
    ids = torch.full((b, m, length), PAD, dtype=torch.long)
    slots = torch.zeros((b, m, length, PROMPT_SLOTS))
    mask_pos = torch.zeros((b, m), dtype=torch.long)
    for i, row in enumerate(patterns):
        for j, p in enumerate(row):
            ids[i, j, : len(p)] = torch.tensor(p.token_ids)
            for k, pos in enumerate(p.prompt_slot_positions):
                slots[i, j, pos, k] = 1.0
            mask_pos[i, j] = p.mask_position
    chains = [vocab.ids(chain_tokens(inst.chain)) for inst in instances]
    n4 = max(len(c) for c in chains)
    chain_ids = torch.full((b, n4), PAD, dtype=torch.long)
    for i, c in enumerate(chains):
        chain_ids[i, : len(c)] = torch.tensor(c)
    cand_ids = torch.tensor([[vocab.ids(event_to_tokens(c)) for c in inst.candidates]
                             for inst in instances], dtype=torch.long)
    return EncodedBatch(ids, ids != PAD, slots, mask_pos, chain_ids, chain_ids != PAD, cand_ids,
                        torch.tensor([inst.gold for inst in instances], dtype=torch.long))


class Noise(NamedTuple):
    prompt: torch.Tensor  # (S, B, m, 4, d)
    label: torch.Tensor   # (S, B, V)


STREAMS = {"train": 1, "eval": 2, "check": 3}


def draw_noise(seed: int, stream: str, uids: Sequence[int], counter: int, samples: int,
               m: int, d: int, vocab_size: int, dtype=torch.float32) -> Noise:
    """Standard-normal noise, one independent generator per instance keyed by
    ``(seed, stream, uid, counter)`` so results never depend on batch order."""
    prompt, label = [], []
    for uid in uids:
        rng = np.random.default_rng([seed, STREAMS[stream], int(uid), counter])
        prompt.append(rng.standard_normal((samples, m, PROMPT_SLOTS, d)))
        label.append(rng.standard_normal((samples, vocab_size)))
    return Noise(torch.as_tensor(np.stack(prompt, axis=1), dtype=dtype),
                 torch.as_tensor(np.stack(label, axis=1), dtype=dtype))


def zero_noise(batch: int, samples: int, m: int, d: int, vocab_size: int, dtype=torch.float32) -> Noise:
    return Noise(torch.zeros((samples, batch, m, PROMPT_SLOTS, d), dtype=dtype),
                 torch.zeros((samples, batch, vocab_size), dtype=dtype))


class Output(NamedTuple):
    p_j: torch.Tensor     # (B, m, V)
    p_v: torch.Tensor     # (B, V)
    scores: torch.Tensor  # (B, m)


# -- the model ---------------------------------------------------------------


class P2GModel(nn.Module):
    def __init__(self, backbone: MaskedLM, vocab: Vocabulary, config: ModelConfig,
                 flags: Optional[AblationFlags] = None):
        super().__init__()
        self.backbone = backbone
        self.vocab = vocab
        self.config = config
        self.flags = flags or AblationFlags()
        d = backbone.cfg.hidden_size
        label_count = 1 if self.flags.single_label_token else config.label_token_count
        self.prompt = PromptEstimator(d, config.prompt_logvar_init)
        self.verbalizer = VerbalizerEstimator(d, label_count, config.lam)
        if self.flags.static_prompt:
            self.static_mu = nn.Parameter(torch.randn(PROMPT_SLOTS, d) * 0.02)
            self.static_logvar = nn.Parameter(torch.full((PROMPT_SLOTS, d), config.prompt_logvar_init))
        if self.flags.learnable_prompt_lr:
            self.free_prompt = nn.Parameter(torch.randn(PROMPT_SLOTS, d) * 0.02)
        if config.freeze_mlm_head:
            for p in backbone.head.parameters():
                p.requires_grad_(False)

    @property
    def d(self) -> int:
        return self.backbone.cfg.hidden_size

    @property
    def vocab_size(self) -> int:
        return self.backbone.vocab_size

    def head_parameters(self):
        """Everything outside the backbone: estimators, label tokens, projections, free prompts."""
        own = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in own and p.requires_grad]

    def encode(self, instances: Sequence[ScriptInstance]) -> EncodedBatch:
        prompt_ids = self.vocab.ids(MANUAL_PROMPT) if self.flags.manual_pvp else None
        return encode_batch(instances, self.vocab, self.backbone.cfg.max_sequence_length, prompt_ids)

    def label_id(self) -> Optional[int]:
        if self.flags.manual_pvp:
            return self.vocab.id(self.config.manual_label_token)
        if self.flags.learnable_prompt_lr:
            return self.vocab.id(self.config.lr_label_token)
        return None

    def prompt_gaussians(self, batch: EncodedBatch):
        """Mean and variance (B, m, 4, d) of the four prompt tokens per candidate."""
        b, m = batch.cand_ids.shape[:2]
        if self.flags.static_prompt:
            mu = self.static_mu.expand(b, m, PROMPT_SLOTS, self.d)
            return mu, torch.exp(self.static_logvar).expand_as(mu)
        emb = self.backbone.embed
        return self.prompt(emb(batch.cand_ids), emb(batch.chain_ids), batch.chain_mask)

    def prompt_rows(self, batch: EncodedBatch, noise: torch.Tensor, zero_variance: bool):
        """Prompt vectors (S, B, m, 4, d), or ``None`` when the slots keep their token rows."""
        if self.flags.manual_pvp:
            return None
        b, m = batch.cand_ids.shape[:2]
        if self.flags.learnable_prompt_lr:
            return self.free_prompt.expand(1, b, m, PROMPT_SLOTS, self.d)
        mu, var = self.prompt_gaussians(batch)
        if self.flags.no_pe_variance:
            return mu.unsqueeze(0)
        std = torch.zeros_like(var) if zero_variance else torch.sqrt(torch.clamp(var, min=VARIANCE_FLOOR))
        return mu.unsqueeze(0) + noise * std.unsqueeze(0)

    def candidate_logits(self, batch: EncodedBatch, noise: torch.Tensor, zero_variance: bool = False):
        """MASK-position logits mean-pooled over the prompt samples: (B, m, V)."""
        base = self.backbone.embed(batch.ids)
        z = self.prompt_rows(batch, noise, zero_variance)
        if z is None:
            rows = base.unsqueeze(0)
        else:
            slots = batch.slots.to(base.dtype)
            keep = 1.0 - slots.sum(-1, keepdim=True)
            rows = base.unsqueeze(0) * keep + torch.einsum("bmlk,sbmkd->sbmld", slots, z)
        states = self.backbone.encode(rows, batch.real.expand(rows.shape[:-1]))
        idx = batch.mask_pos[None, :, :, None, None].expand(rows.shape[0], -1, -1, 1, self.d)
        at_mask = states.gather(3, idx).squeeze(3)
        return self.backbone.mlm_logits(at_mask).mean(0)

    def label_distribution(self, batch_size: int, noise: torch.Tensor, zero_variance: bool = False):
        """p_v (B, V) from the label samples mean-pooled before the softmax."""
        label = self.label_id()
        if label is not None:
            one_hot = F.one_hot(torch.tensor(label), self.vocab_size).to(noise.dtype)
            return one_hot.expand(batch_size, -1)
        g = self.verbalizer(self.backbone.mlm_logits, plain_sum=self.flags.plain_sum_aggregation,
                            sigma=self.config.aggregation_sigma)
        if self.flags.no_ve_variance:
            v = g.mean.expand(1, batch_size, -1)
        else:
            std = torch.zeros_like(g.variance) if zero_variance else torch.sqrt(
                torch.clamp(g.variance, min=VARIANCE_FLOOR))
            v = g.mean + noise * std
        return torch.softmax(v.mean(0), dim=-1)

    def forward(self, batch: EncodedBatch, noise: Noise, zero_variance: bool = False) -> Output:
        p_j = torch.softmax(self.candidate_logits(batch, noise.prompt, zero_variance), dim=-1)
        p_v = self.label_distribution(batch.ids.shape[0], noise.label, zero_variance)
        return Output(p_j, p_v, score_candidates(p_j, p_v, self.config.sign))

    def loss(self, batch: EncodedBatch, noise: Noise) -> tuple[torch.Tensor, Output]:
        out = self(batch, noise)
        return instance_loss(out.scores, batch.gold).sum(), out

    def candidate_distribution(self, instance: ScriptInstance, j: int, noise: Noise) -> torch.Tensor:
        """p_j for candidate ``j`` of one instance (noise shaped for a batch of one)."""
        return self(self.encode([instance]), noise).p_j[0, j]
