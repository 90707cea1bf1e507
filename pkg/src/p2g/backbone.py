"""A small masked language model trained from scratch.

Whitespace tokens only. The encoder is a stack of pre-norm transformer blocks;
the MLM head is a single linear map from hidden states to vocabulary scores.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import NULL_TOKEN, ScriptInstance, chain_tokens
from .optim import AdamW

log = logging.getLogger(__name__)

PAD, CLS, SEP, MASK, NULL_ID, UNK = 0, 1, 2, 3, 4, 5
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", NULL_TOKEN, "[UNK]")

# Fixed words for the manual-PVP and learnable-prompt baselines.
MANUAL_PROMPT = ("the", "next", "event", "is")
LABEL_WORDS = ("then", "preferred", "added")


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, tokens: Iterable[str]) -> "Vocabulary":
        extra = set(tokens) | set(MANUAL_PROMPT) | set(LABEL_WORDS)
        extra -= set(RESERVED)
        return cls(list(RESERVED) + sorted(extra))

    @classmethod
    def from_corpus(cls, instances: Iterable[ScriptInstance]) -> "Vocabulary":
        toks = set()
        for inst in instances:
            toks.update(chain_tokens(inst.chain))
            toks.update(chain_tokens(inst.candidates))
        return cls.build(toks)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]


@dataclass
class BackboneConfig:
    hidden_size: int = 128
    layer_count: int = 4
    head_count: int = 4
    feed_forward_size: int = 256
    max_sequence_length: int = 64
    dropout_rate: float = 0.0
    tie_weights: bool = False

    def __post_init__(self):
        for name in ("hidden_size", "layer_count", "head_count", "feed_forward_size",
                     "max_sequence_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_size % self.head_count:
            raise ValueError("hidden_size must be divisible by head_count")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        b, length, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(x).view(b, length, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        w = self.drop(torch.softmax(scores, dim=-1))
        o = (w @ v).transpose(1, 2).reshape(b, length, d)
        return self.out(o)


class EncoderBlock(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.hidden_size
        self.ln1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, cfg.head_count, cfg.dropout_rate)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(
            nn.Linear(d, cfg.feed_forward_size), nn.GELU(), nn.Linear(cfg.feed_forward_size, d)
        )
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, mask):
        x = x + self.drop(self.attn(self.ln1(x), mask))
        return x + self.drop(self.ff(self.ln2(x)))


class MaskedLM(nn.Module):
    def __init__(self, cfg: BackboneConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        d = cfg.hidden_size
        self.tok_emb = nn.Embedding(vocab_size, d)
        self.pos_emb = nn.Embedding(cfg.max_sequence_length, d)
        self.drop = nn.Dropout(cfg.dropout_rate)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.layer_count))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, vocab_size)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, std=0.02)
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)
        if self.cfg.tie_weights:
            self.head.weight = self.tok_emb.weight

    def embed(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Token-table rows only; position embeddings are added in ``encode``."""
        token_ids = torch.as_tensor(token_ids, dtype=torch.long)
        if token_ids.numel() and (token_ids.min() < 0 or token_ids.max() >= self.vocab_size):
            raise IndexError("unknown token id")
        return self.tok_emb(token_ids)

    def encode(self, rows: torch.Tensor, real_mask: torch.Tensor) -> torch.Tensor:
        """Contextual states for ``rows`` (..., L, d); padded positions come back zeroed."""
        real_mask = torch.as_tensor(real_mask, dtype=torch.bool)
        lead = rows.shape[:-2]
        length, d = rows.shape[-2:]
        if length > self.cfg.max_sequence_length:
            raise ValueError(f"sequence length {length} exceeds {self.cfg.max_sequence_length}")
        x = rows.reshape(-1, length, d)
        mask = real_mask.reshape(-1, length)
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("input sequence is all padding")
        x = self.drop(x + self.pos_emb.weight[:length])
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_f(x) * mask[..., None]
        return x.reshape(*lead, length, d)

    def mlm_logits(self, states: torch.Tensor) -> torch.Tensor:
        return self.head(states)

    def forward(self, token_ids, real_mask):
        return self.mlm_logits(self.encode(self.embed(token_ids), real_mask))


# -- pretraining -------------------------------------------------------------


def pretraining_batch(instances: Sequence[ScriptInstance], vocab: Vocabulary):
    """``[CLS] chain [SEP]`` id rows padded to a common length, with the real-token mask."""
    seqs = [[CLS] + vocab.ids(chain_tokens(inst.chain)) + [SEP] for inst in instances]
    length = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), length), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s)
    return ids, ids != PAD


def sample_mask_positions(ids: torch.Tensor, probability: float, rng: np.random.Generator):
    """Bernoulli mask over maskable positions, at least one per row."""
    if probability <= 0:
        raise ValueError("no masked positions: mask_probability must be > 0")
    maskable = ((ids != PAD) & (ids != CLS) & (ids != SEP)).numpy()
    chosen = (rng.random(maskable.shape) < probability) & maskable
    for row in np.flatnonzero(~chosen.any(axis=1)):
        cols = np.flatnonzero(maskable[row])
        if len(cols):
            chosen[row, cols[rng.integers(len(cols))]] = True
    if not chosen.any():
        raise ValueError("no masked positions")
    return torch.from_numpy(chosen)


def masked_lm_loss(model: MaskedLM, ids, real_mask, positions) -> torch.Tensor:
    """Mean cross-entropy over the masked positions."""
    if not bool(positions.any()):
        raise ValueError("no masked positions")
    inputs = ids.masked_fill(positions, MASK)
    logits = model(inputs, real_mask)
    return F.cross_entropy(logits[positions], ids[positions])


@dataclass
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    mask_probability: float = 0.15
    log_every: int = 50
    seed: int = 0


def heldout_loss(model: MaskedLM, vocab: Vocabulary, instances, mask_probability: float,
                 seed: int, batch_size: int = 256) -> float:
    """Masked-token cross-entropy on ``instances`` with a fixed masking draw."""
    rng = np.random.default_rng([seed, 7])
    total, count = 0.0, 0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(instances), batch_size):
            ids, real = pretraining_batch(instances[start:start + batch_size], vocab)
            pos = sample_mask_positions(ids, mask_probability, rng)
            n = int(pos.sum())
            total += float(masked_lm_loss(model, ids, real, pos)) * n
            count += n
    model.train(was_training)
    return total / count


def pretrain(
    corpus: Sequence[ScriptInstance],
    vocab: Vocabulary,
    config: BackboneConfig,
    train_cfg: PretrainConfig,
    heldout: Optional[Sequence[ScriptInstance]] = None,
) -> tuple[MaskedLM, list[dict]]:
    """Masked-token pretraining on chain text. Returns the model and the loss log."""
    if not corpus:
        raise ValueError("empty corpus")
    if train_cfg.mask_probability <= 0:
        raise ValueError("no masked positions: mask_probability must be > 0")
    torch.manual_seed(train_cfg.seed)
    model = MaskedLM(config, len(vocab))
    opt = AdamW(model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng([train_cfg.seed, 1])
    rows = []
    model.train()
    for step in range(1, train_cfg.steps + 1):
        idx = rng.integers(len(corpus), size=train_cfg.batch_size)
        ids, real = pretraining_batch([corpus[i] for i in idx], vocab)
        pos = sample_mask_positions(ids, train_cfg.mask_probability, rng)
        loss = masked_lm_loss(model, ids, real, pos)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite pretraining loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % train_cfg.log_every == 0 or step == train_cfg.steps:
            row = {"step": step, "split": "train", "loss": loss.item()}
            if heldout:
                row_h = {"step": step, "split": "heldout",
                         "loss": heldout_loss(model, vocab, heldout, train_cfg.mask_probability,
                                              train_cfg.seed)}
                rows.extend([row, row_h])
                log.info("pretrain step %d loss %.4f heldout %.4f", step, row["loss"], row_h["loss"])
            else:
                rows.append(row)
                log.info("pretrain step %d loss %.4f", step, row["loss"])
    model.eval()
    return model, rows
