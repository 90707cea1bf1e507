"""Versioned checkpoint container: config, vocabulary and named tensors in one file."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional

import torch

from .backbone import BackboneConfig, MaskedLM, Vocabulary
from .model import AblationFlags, ModelConfig, P2GModel
from .training import RunConfig

FORMAT = "p2g-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


class VocabularyMismatch(CheckpointError):
    pass


def run_config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def run_config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    d["model"] = ModelConfig(**d.get("model", {}))
    d["flags"] = AblationFlags(**d.get("flags", {}))
    return RunConfig(**d)


def _save(path, kind: str, vocab: Vocabulary, backbone_cfg: BackboneConfig, tensors: dict,
          run_config: Optional[RunConfig] = None, extra: Optional[dict] = None):
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "vocab": list(vocab.tokens),
        "vocab_hash": vocab.hash,
        "backbone_config": dataclasses.asdict(backbone_cfg),
        "run_config": run_config_to_dict(run_config) if run_config else None,
        "extra": extra or {},
        "tensors": {k: v.detach().cpu().clone() for k, v in tensors.items()},
    }
    torch.save(payload, Path(path))


def _load(path, kind: str, expected_vocab_hash: Optional[str] = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a p2g checkpoint")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    if payload["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {payload['kind']}")
    vocab = Vocabulary(payload["vocab"])
    if vocab.hash != payload["vocab_hash"]:
        raise VocabularyMismatch(f"vocabulary mismatch: {path} stores hash {payload['vocab_hash']} "
                                 f"but its vocabulary hashes to {vocab.hash}")
    if expected_vocab_hash is not None and expected_vocab_hash != vocab.hash:
        raise VocabularyMismatch(f"vocabulary mismatch: checkpoint {vocab.hash}, "
                                 f"expected {expected_vocab_hash}")
    payload["vocab"] = vocab
    return payload


def save_backbone(path, model: MaskedLM, vocab: Vocabulary, extra: Optional[dict] = None):
    _save(path, "backbone", vocab, model.cfg, model.state_dict(), extra=extra)


def load_backbone(path, expected_vocab_hash: Optional[str] = None) -> tuple[MaskedLM, Vocabulary]:
    payload = _load(path, "backbone", expected_vocab_hash)
    model = MaskedLM(BackboneConfig(**payload["backbone_config"]), len(payload["vocab"]))
    model.load_state_dict(payload["tensors"])
    model.eval()
    return model, payload["vocab"]


def save_model(path, model: P2GModel, run_config: RunConfig, extra: Optional[dict] = None):
    _save(path, "p2g", model.vocab, model.backbone.cfg, model.state_dict(), run_config, extra)


def load_model(path, expected_vocab_hash: Optional[str] = None) -> tuple[P2GModel, RunConfig]:
    payload = _load(path, "p2g", expected_vocab_hash)
    vocab = payload["vocab"]
    run_config = run_config_from_dict(payload["run_config"])
    backbone = MaskedLM(BackboneConfig(**payload["backbone_config"]), len(vocab))
    model = P2GModel(backbone, vocab, run_config.model, run_config.flags)
    model.load_state_dict(payload["tensors"])
    model.eval()
    return model, run_config
