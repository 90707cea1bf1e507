import json
import math
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from p2g.data import (
    CorpusError, Event, GeneratorConfig, NULL_TOKEN, ScriptInstance, event_to_tokens,
    generate_corpus, parse_instance, read_corpus, serialize_instance, write_corpus,
)


def _record(chain_len=8, m=5, gold=2):
    chain = [[f"s{i}", f"v{i}", f"o{i}", "NULL" if i % 2 else f"p{i}"] for i in range(chain_len)]
    cands = [[f"s{j}", f"c{j}", f"o{j}", "NULL"] for j in range(m)]
    return json.dumps({"chain": chain, "candidates": cands, "gold": gold})


def test_parse_well_formed_round_trip():
    line = _record()
    inst = parse_instance(line)
    assert len(inst.chain) == 8 and len(inst.candidates) == 5 and inst.gold == 2
    assert serialize_instance(inst) == line


def test_null_argument_preserved():
    line = json.dumps({"chain": [["waiter", "give", "bob", "NULL"]] * 2,
                       "candidates": [["waiter", "give", "bob", "food"]] * 2, "gold": 0})
    inst = parse_instance(line)
    assert inst.chain[0] == Event("waiter", "give", "bob", "NULL")
    assert inst.chain[0].indirect_object == "NULL"


def test_gold_out_of_range_reports_line():
    with pytest.raises(CorpusError, match="line 7: gold out of range"):
        parse_instance(_record(gold=7), lineno=7)


@pytest.mark.parametrize("line, message", [
    ("{not json", "malformed record"),
    ("[1, 2]", "malformed record"),
    (json.dumps({"chain": [], "candidates": []}), "missing field"),
    (json.dumps({"chain": [["a", "b", "c"]], "candidates": [["a", "b", "c", "d"]], "gold": 0}),
     "4 strings"),
    (json.dumps({"chain": [["a", "NULL", "c", "d"]], "candidates": [["a", "b", "c", "d"]], "gold": 0}),
     "verb may not be NULL"),
    (json.dumps({"chain": [["a", "", "c", "d"]], "candidates": [["a", "b", "c", "d"]], "gold": 0}),
     "non-empty"),
])
def test_malformed_records(line, message):
    with pytest.raises(CorpusError, match=message):
        parse_instance(line, lineno=3)


def test_arity_mismatch_against_expected_shape():
    with pytest.raises(CorpusError, match="line 2: wrong arity"):
        parse_instance(_record(chain_len=7), lineno=2, chain_length=8)
    with pytest.raises(CorpusError, match="wrong arity"):
        parse_instance(_record(m=4), candidate_count=5)


def test_read_corpus_pins_shape_from_first_record(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(_record() + "\n" + _record(chain_len=6) + "\n")
    with pytest.raises(CorpusError, match="line 2"):
        read_corpus(path)


_token = st.text(alphabet="abcxyz_0123456789", min_size=1, max_size=6)
_arg = st.one_of(_token, st.just("NULL"))
_event = st.builds(lambda s, v, o, p: [s, v, o, p], _arg, _token, _arg, _arg)


@settings(max_examples=60, deadline=None)
@given(chain=st.lists(_event, min_size=1, max_size=8), cands=st.lists(_event, min_size=1, max_size=5),
       data=st.data())
def test_round_trip_property(chain, cands, data):
    gold = data.draw(st.integers(0, len(cands) - 1))
    line = json.dumps({"chain": chain, "candidates": cands, "gold": gold})
    assert serialize_instance(parse_instance(line)) == line


def test_event_to_tokens_examples():
    assert event_to_tokens(Event("waiter", "give", "bob", "food")) == ["waiter", "give", "bob", "food"]
    assert event_to_tokens(Event("clinton", "boasted", "public", "NULL")) == [
        "clinton", "boasted", "public", NULL_TOKEN]


@given(e=_event)
def test_event_to_tokens_arity(e):
    assert len(event_to_tokens(Event(*e))) == 4


def test_generator_is_deterministic(tmp_path):
    cfg = GeneratorConfig(instance_count=300, seed=9)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_corpus(a, generate_corpus(cfg))
    write_corpus(b, generate_corpus(cfg))
    assert a.read_bytes() == b.read_bytes()
    assert read_corpus(a) == generate_corpus(cfg)


def test_generator_gold_index_uniform():
    m, count = 5, 10000
    corpus = generate_corpus(GeneratorConfig(instance_count=count, candidate_count=m, seed=3))
    freq = Counter(inst.gold for inst in corpus)
    sd = math.sqrt(count * (1 / m) * (1 - 1 / m))
    for j in range(m):
        assert abs(freq[j] - count / m) < 3 * sd, (j, freq[j])


def test_generator_rate_zero_has_no_null():
    corpus = generate_corpus(GeneratorConfig(instance_count=500, null_argument_rate=0.0, seed=4))
    for inst in corpus:
        for e in inst.chain + inst.candidates:
            assert "NULL" not in e.to_list()


def test_generator_shape_and_provenance():
    cfg = GeneratorConfig(instance_count=500, seed=8)
    for inst in generate_corpus(cfg):
        assert len(inst.chain) == cfg.chain_length and len(inst.candidates) == cfg.candidate_count
        prov = inst.provenance
        assert prov.candidate_scenarios[inst.gold] == prov.chain_scenario
        assert prov.candidate_kinds[inst.gold] == "gold"
        assert any(s != prov.chain_scenario for j, s in enumerate(prov.candidate_scenarios)
                   if j != inst.gold)
        assert len(set(inst.candidates)) == len(inst.candidates) or True  # duplicates allowed


def test_generator_rejects_single_scenario():
    with pytest.raises(ValueError, match="scenario_count"):
        generate_corpus(GeneratorConfig(scenario_count=1))


@pytest.mark.parametrize("kw", [dict(chain_length=1), dict(candidate_count=1),
                                dict(null_argument_rate=1.5), dict(instance_count=0)])
def test_generator_config_validation(kw):
    with pytest.raises(ValueError):
        GeneratorConfig(**kw)


def test_provenance_not_serialized():
    inst = generate_corpus(GeneratorConfig(instance_count=1))[0]
    assert set(json.loads(serialize_instance(inst))) == {"chain", "candidates", "gold"}
    assert ScriptInstance(inst.chain, inst.candidates, inst.gold) == inst
