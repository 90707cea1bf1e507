"""Script events, corpus I/O and the synthetic scenario generator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

NULL = "NULL"
NULL_TOKEN = "[NULL]"

SCENARIO_NAMES = (
    "restaurant", "election", "basketball", "hospital", "airport", "courtroom",
    "market", "school", "wedding", "concert", "factory", "museum",
)


class CorpusError(ValueError):
    """A corpus record failed validation."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        prefix = f"line {lineno}: " if lineno is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Event:
    subject: str
    verb: str
    object: str
    indirect_object: str

    def __post_init__(self):
        for name in ("subject", "verb", "object", "indirect_object"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise CorpusError(f"event field {name!r} must be a non-empty string")
            if any(c.isspace() for c in value):
                raise CorpusError(f"event field {name!r} contains whitespace: {value!r}")
        if self.verb == NULL:
            raise CorpusError("event verb may not be NULL")

    @classmethod
    def from_list(cls, fields) -> "Event":
        if not isinstance(fields, (list, tuple)) or len(fields) != 4:
            raise CorpusError(f"event must be a list of 4 strings, got {fields!r}")
        return cls(*fields)

    def to_list(self) -> list[str]:
        return [self.subject, self.verb, self.object, self.indirect_object]


@dataclass(frozen=True)
class Provenance:
    """Generator-side labels. Never serialized and never shown to the model."""

    chain_scenario: int
    candidate_scenarios: tuple[int, ...]
    candidate_kinds: tuple[str, ...]


@dataclass(frozen=True)
class ScriptInstance:
    chain: tuple[Event, ...]
    candidates: tuple[Event, ...]
    gold: int
    provenance: Optional[Provenance] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.chain) < 1:
            raise CorpusError("chain is empty")
        if len(self.candidates) < 1:
            raise CorpusError("candidate list is empty")
        if isinstance(self.gold, bool) or not isinstance(self.gold, (int, np.integer)):
            raise CorpusError(f"gold must be an integer, got {self.gold!r}")
        if not 0 <= self.gold < len(self.candidates):
            raise CorpusError(f"gold out of range: {self.gold} not in [0, {len(self.candidates)})")

    def to_record(self) -> dict:
        return {
            "chain": [e.to_list() for e in self.chain],
            "candidates": [e.to_list() for e in self.candidates],
            "gold": int(self.gold),
        }


def serialize_instance(instance: ScriptInstance) -> str:
    return json.dumps(instance.to_record(), ensure_ascii=False)


def parse_instance(
    line: str,
    lineno: Optional[int] = None,
    chain_length: Optional[int] = None,
    candidate_count: Optional[int] = None,
) -> ScriptInstance:
    """Parse one JSON-lines record.

    ``chain_length``/``candidate_count`` pin the expected arity; errors carry
    ``lineno`` when given.
    """
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"malformed record: {exc.msg}", lineno) from None
    if not isinstance(record, dict):
        raise CorpusError("malformed record: expected a JSON object", lineno)
    missing = {"chain", "candidates", "gold"} - record.keys()
    if missing:
        raise CorpusError(f"malformed record: missing field(s) {sorted(missing)}", lineno)
    extra = record.keys() - {"chain", "candidates", "gold"}
    if extra:
        raise CorpusError(f"malformed record: unknown field(s) {sorted(extra)}", lineno)
    chain, candidates = record["chain"], record["candidates"]
    if not isinstance(chain, list) or not isinstance(candidates, list):
        raise CorpusError("malformed record: chain and candidates must be lists", lineno)
    if chain_length is not None and len(chain) != chain_length:
        raise CorpusError(f"wrong arity: chain has {len(chain)} events, expected {chain_length}", lineno)
    if candidate_count is not None and len(candidates) != candidate_count:
        raise CorpusError(
            f"wrong arity: {len(candidates)} candidates, expected {candidate_count}", lineno
        )
    try:
        return ScriptInstance(
            chain=tuple(Event.from_list(e) for e in chain),
            candidates=tuple(Event.from_list(e) for e in candidates),
            gold=record["gold"],
        )
    except CorpusError as exc:
        raise CorpusError(str(exc), lineno) from None


def read_corpus(
    path: str | Path,
    chain_length: Optional[int] = None,
    candidate_count: Optional[int] = None,
) -> list[ScriptInstance]:
    """Read a JSON-lines corpus. The first record fixes n and m unless given."""
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            inst = parse_instance(line, lineno, chain_length, candidate_count)
            if chain_length is None:
                chain_length = len(inst.chain)
            if candidate_count is None:
                candidate_count = len(inst.candidates)
            instances.append(inst)
    return instances


def write_corpus(path: str | Path, instances: Iterable[ScriptInstance]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(serialize_instance(inst) + "\n")


def event_to_tokens(event: Event) -> list[str]:
    return [NULL_TOKEN if a == NULL else a for a in event.to_list()]


def chain_tokens(chain: Iterable[Event]) -> list[str]:
    return [tok for e in chain for tok in event_to_tokens(e)]


# -- synthetic generator -----------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    scenario_count: int = 6
    vocab_per_scenario: int = 32
    chain_length: int = 8
    candidate_count: int = 5
    null_argument_rate: float = 0.1
    distractor_overlap_rate: float = 0.3
    instance_count: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("scenario_count", "vocab_per_scenario", "chain_length",
                     "candidate_count", "instance_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.chain_length < 2 or self.candidate_count < 2:
            raise ValueError("chain_length and candidate_count must both be >= 2")
        for name in ("null_argument_rate", "distractor_overlap_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.vocab_per_scenario < 4:
            raise ValueError("vocab_per_scenario must be >= 4 (one token per role)")


@dataclass(frozen=True)
class Scenario:
    name: str
    verbs: tuple[str, ...]
    subjects: tuple[str, ...]
    objects: tuple[str, ...]
    indirects: tuple[str, ...]


def scenario_name(index: int) -> str:
    if index < len(SCENARIO_NAMES):
        return SCENARIO_NAMES[index]
    return f"scenario{index}"


def build_scenarios(scenario_count: int, vocab_per_scenario: int) -> list[Scenario]:
    """Per-scenario role vocabularies. Depends only on the two sizes, never on the seed,
    so splits generated with different seeds share one vocabulary and verb grammar."""
    v = vocab_per_scenario
    n_verbs = max(1, v * 3 // 8)
    n_subj = max(1, v // 8)
    n_obj = max(1, v // 4)
    n_ind = max(1, v - n_verbs - n_subj - n_obj)
    out = []
    for i in range(scenario_count):
        name = scenario_name(i)
        out.append(Scenario(
            name=name,
            verbs=tuple(f"{name}_v{k}" for k in range(n_verbs)),
            subjects=tuple(f"{name}_s{k}" for k in range(n_subj)),
            objects=tuple(f"{name}_o{k}" for k in range(n_obj)),
            indirects=tuple(f"{name}_p{k}" for k in range(n_ind)),
        ))
    return out


def corpus_tokens(config: GeneratorConfig) -> list[str]:
    """Every surface token the generator can emit, in a fixed order."""
    toks = []
    for sc in build_scenarios(config.scenario_count, config.vocab_per_scenario):
        toks.extend(sc.verbs + sc.subjects + sc.objects + sc.indirects)
    return toks


class _Sampler:
    def __init__(self, config: GeneratorConfig, rng: np.random.Generator):
        self.cfg = config
        self.rng = rng
        self.scenarios = build_scenarios(config.scenario_count, config.vocab_per_scenario)

    def pick(self, pool):
        return pool[int(self.rng.integers(len(pool)))]

    def maybe_null(self, token: str) -> str:
        if self.cfg.null_argument_rate > 0 and self.rng.random() < self.cfg.null_argument_rate:
            return NULL
        return token

    def event(self, sc: Scenario, subject: str, verb: str, nullable_subject: bool) -> Event:
        subj = self.maybe_null(subject) if nullable_subject else subject
        return Event(subj, verb, self.maybe_null(self.pick(sc.objects)),
                     self.maybe_null(self.pick(sc.indirects)))

    def other_scenario_event(self, own: int) -> tuple[int, Event]:
        k = int(self.rng.integers(len(self.scenarios) - 1))
        k = k + 1 if k >= own else k
        sc = self.scenarios[k]
        return k, self.event(sc, self.pick(sc.subjects), self.pick(sc.verbs), nullable_subject=False)

    def swapped_event(self, sc: Scenario, protagonist: str, verb: str) -> Event:
        # the object is never NULL here, so the swap always differs from the gold
        return Event(self.pick(sc.objects), verb, protagonist, self.maybe_null(self.pick(sc.indirects)))

    def wrong_step_event(self, sc: Scenario, protagonist: str, gold_verb: str) -> Event:
        verb = self.pick([v for v in sc.verbs if v != gold_verb])
        return self.event(sc, protagonist, verb, nullable_subject=False)

    def instance(self) -> ScriptInstance:
        cfg = self.cfg
        s = int(self.rng.integers(len(self.scenarios)))
        sc = self.scenarios[s]
        protagonist = self.pick(sc.subjects)
        start = int(self.rng.integers(len(sc.verbs)))
        verbs = [sc.verbs[(start + i) % len(sc.verbs)] for i in range(cfg.chain_length + 1)]
        chain = tuple(self.event(sc, protagonist, verbs[i], nullable_subject=True)
                      for i in range(cfg.chain_length))
        gold_event = self.event(sc, protagonist, verbs[-1], nullable_subject=False)

        distractors = [self.other_scenario_event(s) + ("other",)]
        for _ in range(cfg.candidate_count - 2):
            if self.rng.random() < cfg.distractor_overlap_rate:
                if self.rng.random() < 0.5 or len(sc.verbs) < 2:
                    distractors.append((s, self.swapped_event(sc, protagonist, verbs[-1]), "swap"))
                else:
                    distractors.append((s, self.wrong_step_event(sc, protagonist, verbs[-1]), "step"))
            else:
                distractors.append(self.other_scenario_event(s) + ("other",))
        order = self.rng.permutation(len(distractors))
        distractors = [distractors[i] for i in order]
        gold = int(self.rng.integers(cfg.candidate_count))
        distractors.insert(gold, (s, gold_event, "gold"))
        return ScriptInstance(
            chain=chain,
            candidates=tuple(e for _, e, _ in distractors),
            gold=gold,
            provenance=Provenance(
                chain_scenario=s,
                candidate_scenarios=tuple(k for k, _, _ in distractors),
                candidate_kinds=tuple(kind for _, _, kind in distractors),
            ),
        )


def generate_corpus(config: GeneratorConfig) -> list[ScriptInstance]:
    """Deterministic synthetic corpus.

    Each chain walks ``chain_length`` consecutive verbs of one scenario's cyclic
    verb order with a fixed protagonist; the gold candidate is the next verb with
    the same protagonist. One distractor always comes from another scenario.
    Each remaining one is, with probability ``distractor_overlap_rate``, a
    same-scenario near miss (equally often the gold verb with subject and
    object swapped, or the protagonist doing a wrong verb), else an event from
    another scenario.
    """
    if config.scenario_count < 2:
        raise ValueError("scenario_count must be >= 2")
    sampler = _Sampler(config, np.random.default_rng(config.seed))
    return [sampler.instance() for _ in range(config.instance_count)]
