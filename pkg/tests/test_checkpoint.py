import pytest
import torch

from conftest import SMALL_BACKBONE
from p2g.backbone import MaskedLM, Vocabulary
from p2g.checkpoint import (
    CheckpointError, VocabularyMismatch, load_backbone, load_model, save_backbone, save_model,
)
from p2g.model import AblationFlags, ModelConfig
from p2g.training import RunConfig, build_model


def test_backbone_round_trip(tmp_path, small_vocab):
    torch.manual_seed(0)
    model = MaskedLM(SMALL_BACKBONE, len(small_vocab))
    save_backbone(tmp_path / "b.pt", model, small_vocab)
    loaded, vocab = load_backbone(tmp_path / "b.pt", small_vocab.hash)
    assert vocab == small_vocab and loaded.cfg == model.cfg
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k


def test_model_round_trip(tmp_path, small_vocab):
    torch.manual_seed(0)
    cfg = RunConfig(seed=3, model=ModelConfig(lam=0.5), flags=AblationFlags(static_prompt=True))
    model = build_model(small_vocab, cfg, MaskedLM(SMALL_BACKBONE, len(small_vocab)))
    save_model(tmp_path / "m.pt", model, cfg, extra={"best_step": 7})
    loaded, run_cfg = load_model(tmp_path / "m.pt")
    assert run_cfg == cfg
    assert set(loaded.state_dict()) == set(model.state_dict())
    assert all(torch.equal(loaded.state_dict()[k], v) for k, v in model.state_dict().items())
    assert "static_mu" in loaded.state_dict()


def test_vocabulary_mismatch(tmp_path, small_vocab):
    save_backbone(tmp_path / "b.pt", MaskedLM(SMALL_BACKBONE, len(small_vocab)), small_vocab)
    other = Vocabulary.build(["zzz"])
    with pytest.raises(VocabularyMismatch, match="vocabulary mismatch"):
        load_backbone(tmp_path / "b.pt", other.hash)


def test_wrong_kind_and_missing_file(tmp_path, small_vocab):
    save_backbone(tmp_path / "b.pt", MaskedLM(SMALL_BACKBONE, len(small_vocab)), small_vocab)
    with pytest.raises(CheckpointError, match="expected a p2g checkpoint"):
        load_model(tmp_path / "b.pt")
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "absent.pt")
    torch.save({"hello": 1}, tmp_path / "junk.pt")
    with pytest.raises(CheckpointError, match="not a p2g checkpoint"):
        load_backbone(tmp_path / "junk.pt")
