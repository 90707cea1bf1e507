import math

import numpy as np
import pytest
import torch

from conftest import SMALL_BACKBONE, fd_grad, rel_err
from p2g.backbone import (
    CLS, MASK, NULL_ID, PAD, RESERVED, SEP, UNK, BackboneConfig, MaskedLM, PretrainConfig, Vocabulary,
    masked_lm_loss, pretrain, pretraining_batch, sample_mask_positions,
)
from p2g.data import GeneratorConfig, generate_corpus

TINY = BackboneConfig(hidden_size=8, layer_count=1, head_count=2, feed_forward_size=16,
                      max_sequence_length=16)


def _tiny(vocab_size=20, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return MaskedLM(TINY, vocab_size).to(dtype).eval()


def test_reserved_ids():
    assert (PAD, CLS, SEP, MASK, NULL_ID, UNK) == (0, 1, 2, 3, 4, 5)
    v = Vocabulary.build(["b", "a"])
    assert v.tokens[:6] == list(RESERVED)
    assert v.id("[NULL]") == NULL_ID and v.id("never-seen") == UNK


def test_vocabulary_bijective_and_validated():
    v = Vocabulary.build(["x", "y", "x"])
    assert len(set(v.tokens)) == len(v) and all(v.id(t) == i for i, t in enumerate(v.tokens))
    with pytest.raises(ValueError, match="reserved"):
        Vocabulary(["a"] + list(RESERVED))
    with pytest.raises(ValueError, match="duplicate"):
        Vocabulary(list(RESERVED) + ["a", "a"])


def test_vocabulary_hash_is_content_addressed():
    assert Vocabulary.build(["a", "b"]).hash == Vocabulary.build(["b", "a"]).hash
    assert Vocabulary.build(["a", "b"]).hash != Vocabulary.build(["a", "c"]).hash


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        BackboneConfig(hidden_size=10, head_count=4)
    with pytest.raises(ValueError):
        BackboneConfig(layer_count=0)


def test_embed_rows():
    m = _tiny()
    e = m.embed([7, 7, 3])
    assert e.shape == (3, 8)
    assert torch.equal(e[0], e[1])
    assert torch.equal(e[2], m.tok_emb.weight[3])
    with pytest.raises(IndexError, match="unknown token id"):
        m.embed([20])


def test_encode_single_token_matches_length_one():
    m = _tiny()
    row = m.embed([9])
    padded = torch.cat([row, m.embed([PAD, PAD, PAD])])
    alone = m.encode(row[None], torch.tensor([[True]]))
    with_pad = m.encode(padded[None], torch.tensor([[True, False, False, False]]))
    assert torch.allclose(with_pad[0, 0], alone[0, 0], atol=1e-12)
    assert torch.all(with_pad[0, 1:] == 0)


def test_encode_ignores_padded_rows():
    m = _tiny()
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(1, 6, 8, generator=gen, dtype=torch.float64)
    mask = torch.tensor([[True, True, True, True, False, False]])
    y = x.clone()
    y[0, 4], y[0, 5] = x[0, 5] * 3.0, x[0, 4] - 1.0
    a, b = m.encode(x, mask), m.encode(y, mask)
    assert torch.allclose(a[0, :4], b[0, :4], atol=1e-12)


def test_encode_errors():
    m = _tiny()
    with pytest.raises(ValueError, match="all padding"):
        m.encode(torch.zeros(1, 3, 8, dtype=torch.float64), torch.zeros(1, 3, dtype=torch.bool))
    with pytest.raises(ValueError, match="exceeds"):
        m.encode(torch.zeros(1, 17, 8, dtype=torch.float64), torch.ones(1, 17, dtype=torch.bool))


def test_mlm_logits_shape_and_zero_input():
    m = _tiny(vocab_size=33)
    out = m.mlm_logits(torch.zeros(8, dtype=torch.float64))
    assert out.shape == (33,) and torch.all(out == 0)
    p = torch.softmax(m.mlm_logits(torch.randn(4, 8, dtype=torch.float64)), -1)
    assert torch.allclose(p.sum(-1), torch.ones(4, dtype=torch.float64), atol=1e-6)


def test_initial_masked_loss_near_uniform():
    corpus = generate_corpus(GeneratorConfig(instance_count=256, seed=1))
    vocab = Vocabulary.from_corpus(corpus)
    torch.manual_seed(0)
    model = MaskedLM(BackboneConfig(), len(vocab)).eval()
    ids, real = pretraining_batch(corpus, vocab)
    pos = sample_mask_positions(ids, 0.15, np.random.default_rng(0))
    with torch.no_grad():
        loss = float(masked_lm_loss(model, ids, real, pos))
    assert abs(loss - math.log(len(vocab))) < 0.05


def test_mask_probability_zero_errors():
    ids = torch.tensor([[CLS, 7, 8, SEP]])
    with pytest.raises(ValueError, match="no masked positions"):
        sample_mask_positions(ids, 0.0, np.random.default_rng(0))


def test_mask_positions_skip_special_tokens():
    ids = torch.tensor([[CLS, 7, 8, 9, SEP, PAD], [CLS, 7, SEP, PAD, PAD, PAD]])
    pos = sample_mask_positions(ids, 0.99, np.random.default_rng(0))
    assert pos.sum(1).min() >= 1
    assert not pos[ids == PAD].any() and not pos[ids == CLS].any() and not pos[ids == SEP].any()


def test_masked_loss_gradient_matches_finite_differences():
    m = _tiny()
    with torch.no_grad():
        for name, p in m.named_parameters():
            if "ln" not in name:
                p.normal_(0, 0.3)
    ids = torch.tensor([[CLS, 6, 7, 8, 9, SEP], [CLS, 10, 11, 12, SEP, PAD]])
    real = ids != PAD
    pos = torch.zeros_like(ids, dtype=torch.bool)
    pos[0, 2] = pos[0, 4] = pos[1, 1] = True

    def f():
        return masked_lm_loss(m, ids, real, pos)

    f().backward()
    rng = np.random.default_rng(3)
    params = [p for p in m.parameters()]
    checked = 0
    for _ in range(12):
        p = params[rng.integers(len(params))]
        i = int(rng.integers(p.numel()))
        analytic = float(p.grad.view(-1)[i])
        numeric = fd_grad(f, p.data.view(-1), i)
        assert rel_err(analytic, numeric) < 1e-3, (p.shape, i, analytic, numeric)
        checked += 1
    assert checked >= 10


def test_pretrain_is_deterministic_and_learns():
    corpus = generate_corpus(GeneratorConfig(scenario_count=3, vocab_per_scenario=16, chain_length=3,
                                             instance_count=200, seed=2))
    vocab = Vocabulary.from_corpus(corpus)
    cfg = PretrainConfig(steps=60, batch_size=16, lr=3e-3, log_every=20, seed=4)
    a, rows_a = pretrain(corpus, vocab, SMALL_BACKBONE, cfg, heldout=corpus[:50])
    b, rows_b = pretrain(corpus, vocab, SMALL_BACKBONE, cfg, heldout=corpus[:50])
    assert rows_a == rows_b
    for (na, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), na
    held = [r["loss"] for r in rows_a if r["split"] == "heldout"]
    assert held[-1] < held[0]


def test_pretrain_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        pretrain([], Vocabulary.build([]), SMALL_BACKBONE, PretrainConfig(steps=1))
