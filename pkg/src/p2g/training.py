"""Training loop, multi-sample evaluation and run configuration."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import BackboneConfig, MaskedLM, Vocabulary
from .data import ScriptInstance
from .model import AblationFlags, ModelConfig, Noise, P2GModel, draw_noise, predict, zero_noise
from .optim import AdamW

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    backbone_lr: float = 1e-4
    head_lr: float = 3e-4
    weight_decay: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    train_samples: int = 1
    eval_samples: int = 1
    eval_every: int = 250
    dev_eval_limit: int = 0  # 0 = whole dev set
    eval_batch_size: int = 64
    record_wall_clock: bool = False
    from_scratch: bool = False
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.backbone_lr <= 0 or self.head_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.eval_samples < 0 or self.train_samples < 0:
            raise ValueError("sample counts must be >= 0")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive, steps >= 0")


class NaNLossError(FloatingPointError):
    def __init__(self, step: int, group_norms: dict):
        self.step = step
        self.group_norms = group_norms
        norms = ", ".join(f"{k}={v:.4g}" for k, v in group_norms.items())
        super().__init__(f"non-finite loss at step {step}; parameter-group norms: {norms}")


@dataclass
class TrainState:
    model: P2GModel
    optimizer: AdamW
    config: RunConfig
    step: int = 0
    best_step: int = 0
    best_dev_accuracy: float = float("-inf")

    @property
    def vocab(self) -> Vocabulary:
        return self.model.vocab


@dataclass
class EvalResult:
    accuracy: float
    records: list[dict]
    mean_loss: float


# Table-4 style rows: the full model, then one component removed at a time.
ABLATIONS = (
    ("full", ()),
    ("-pe_uncertainty", ("no_pe_variance",)),
    ("-ve_uncertainty", ("no_ve_variance",)),
    ("-pe_ve_uncertainty", ("no_pe_variance", "no_ve_variance")),
    ("-scenario_aware_prompt", ("static_prompt",)),
    ("-uncertainty_aggregation", ("plain_sum_aggregation",)),
    ("-multi_label_tokens", ("single_label_token",)),
)

METRIC_COLUMNS = ("step", "split", "accuracy", "mean_loss", "n", "ablation_flags", "seed", "wall_clock_ms")


def build_model(vocab: Vocabulary, config: RunConfig, pretrained: Optional[MaskedLM] = None,
                backbone_config: Optional[BackboneConfig] = None) -> P2GModel:
    torch.manual_seed(config.seed)
    if pretrained is None:
        if not config.from_scratch:
            raise ValueError("a pretrained backbone is required unless from_scratch is set")
        backbone = MaskedLM(backbone_config or BackboneConfig(), len(vocab))
    else:
        if pretrained.vocab_size != len(vocab):
            raise ValueError("vocabulary mismatch between backbone and run")
        backbone = copy.deepcopy(pretrained)
    return P2GModel(backbone, vocab, config.model, config.flags)


def make_optimizer(model: P2GModel, config: RunConfig) -> AdamW:
    backbone = [p for p in model.backbone.parameters() if p.requires_grad]
    groups = [
        {"params": backbone, "lr": config.backbone_lr, "name": "backbone"},
        {"params": model.head_parameters(), "lr": config.head_lr, "name": "head"},
    ]
    return AdamW(groups, lr=config.head_lr, weight_decay=config.weight_decay)


def group_norms(optimizer: AdamW) -> dict:
    return {g["name"]: float(torch.sqrt(sum((p.detach() ** 2).sum() for p in g["params"])))
            for g in optimizer.param_groups}


def batch_noise(model: P2GModel, seed: int, stream: str, uids, counter: int, samples: int,
                m: int) -> Noise:
    if samples == 0:
        return zero_noise(len(uids), 1, m, model.d, model.vocab_size)
    return draw_noise(seed, stream, uids, counter, samples, m, model.d, model.vocab_size)


@torch.no_grad()
def evaluate(model: P2GModel, dataset: Sequence[ScriptInstance], n: int, seed: int = 0,
             repeat: int = 0, zero_variance: bool = False, batch_size: int = 64,
             noise_override: Optional[str] = None) -> EvalResult:
    """Accuracy with ``n`` Monte Carlo samples per prompt and label token.

    ``n=0`` uses the Gaussian means (the ``n=1`` path with zero noise).
    ``noise_override="zero"`` forces zero noise at any ``n``.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    was_training = model.training
    model.eval()
    records, correct, total_loss = [], 0, 0.0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        batch = model.encode(chunk)
        m = batch.ids.shape[1]
        uids = range(start, start + len(chunk))
        if noise_override == "zero":
            noise = zero_noise(len(chunk), max(n, 1), m, model.d, model.vocab_size)
        else:
            noise = batch_noise(model, seed, "eval", uids, repeat, n, m)
        out = model(batch, noise, zero_variance=zero_variance)
        preds = predict(out.scores)
        losses = -torch.log(torch.clamp(out.scores.gather(1, batch.gold[:, None]).squeeze(1), min=1e-12))
        for i, uid in enumerate(uids):
            pred = int(preds[i])
            gold = int(batch.gold[i])
            correct += pred == gold
            total_loss += float(losses[i])
            records.append({"index": uid, "gold": gold, "pred": pred,
                            "scores": out.scores[i].tolist()})
    model.train(was_training)
    return EvalResult(correct / len(dataset), records, total_loss / len(dataset))


def train(
    corpus: Sequence[ScriptInstance],
    dev_set: Sequence[ScriptInstance],
    config: RunConfig,
    vocab: Vocabulary,
    pretrained: Optional[MaskedLM] = None,
    backbone_config: Optional[BackboneConfig] = None,
) -> tuple[TrainState, list[dict]]:
    """Minimize the summed gold-candidate NLL; keep the best-dev parameters.

    Metric rows follow ``METRIC_COLUMNS``.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    model = build_model(vocab, config, pretrained, backbone_config)
    optimizer = make_optimizer(model, config)
    state = TrainState(model, optimizer, config)
    rng = np.random.default_rng([config.seed, 11])
    dev = list(dev_set[: config.dev_eval_limit] if config.dev_eval_limit else dev_set)
    flags = config.flags.label()
    best_params = None
    rows: list[dict] = []
    window_loss, window_correct, window_count = 0.0, 0, 0
    t0 = time.perf_counter()

    def clock():
        return int((time.perf_counter() - t0) * 1000) if config.record_wall_clock else 0

    model.train()
    for step in range(1, config.steps + 1):
        idx = rng.integers(len(corpus), size=config.batch_size)
        batch = model.encode([corpus[i] for i in idx])
        noise = batch_noise(model, config.seed, "train", idx, step, config.train_samples,
                            batch.ids.shape[1])
        loss, out = model.loss(batch, noise)
        if not torch.isfinite(loss):
            raise NaNLossError(step, group_norms(optimizer))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        state.step = step
        window_loss += loss.item()
        window_correct += int((torch.as_tensor(predict(out.scores)) == batch.gold).sum())
        window_count += len(idx)

        if step % config.eval_every == 0 or step == config.steps:
            rows.append({"step": step, "split": "train", "accuracy": window_correct / window_count,
                         "mean_loss": window_loss / window_count, "n": config.train_samples,
                         "ablation_flags": flags, "seed": config.seed, "wall_clock_ms": clock()})
            window_loss, window_correct, window_count = 0.0, 0, 0
            if dev:
                res = evaluate(model, dev, config.eval_samples, seed=config.seed,
                               batch_size=config.eval_batch_size)
                rows.append({"step": step, "split": "dev", "accuracy": res.accuracy,
                             "mean_loss": res.mean_loss, "n": config.eval_samples,
                             "ablation_flags": flags, "seed": config.seed, "wall_clock_ms": clock()})
                log.info("step %d train_loss %.4f dev_acc %.4f", step, rows[-2]["mean_loss"], res.accuracy)
                if res.accuracy > state.best_dev_accuracy:
                    state.best_dev_accuracy = res.accuracy
                    state.best_step = step
                    best_params = copy.deepcopy(model.state_dict())
    if best_params is not None:
        model.load_state_dict(best_params)
    model.eval()
    return state, rows
