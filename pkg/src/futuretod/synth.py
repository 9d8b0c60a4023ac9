"""Synthetic task-oriented dialogues with latent intent, slot and act labels.

Each intent owns a canonical domain noun (used by the system), a set of
user-side synonyms, and its own slots and values. The system side repeats
the domain noun and the slot values the user supplied, so the future of a
dialogue is predictable from its context.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .corpus import SYSTEM, USER, CorpusError, Dialogue, Utterance

logger = logging.getLogger(__name__)

OOD_LABEL = "oos"
ACTS = ("greet", "request", "inform", "offer", "book", "reqmore", "bye")

DEFAULT_TEMPLATES: dict[str, list[str]] = {
    "open": [
        "i need a {syn}",
        "i am looking for a {syn}",
        "i want to find a {syn}",
        "can you help me find a {syn}",
        "please get me a {syn}",
    ],
    "greeting": ["hello", "hi", "good morning"],
    "mention": ["with {slot} {value}", "where the {slot} is {value}"],
    "request": [
        "which {slot} would you like for the {noun} ?",
        "what {slot} do you want for your {noun} ?",
        "do you have a preferred {slot} for the {noun} ?",
    ],
    "inform": ["{value} please", "i would like {slot} {value}", "the {slot} should be {value}"],
    "offer": [
        "i found a {noun} with {slots} . shall i book it ?",
        "there is a {noun} with {slots} . do you want me to book it ?",
    ],
    "accept": ["yes please book it", "sure go ahead", "yes that works for me"],
    "book": [
        "your {noun} is booked , reference {ref} . anything else ?",
        "done , the {noun} reference is {ref} . can i help with anything else ?",
    ],
    "decline": ["no thanks goodbye", "that is all thank you", "nothing else bye"],
    "bye": ["goodbye and enjoy your {noun}", "thank you for using our service , bye"],
    "greet_reply": ["hello !", "welcome !"],
    "ood": [
        "tell me a joke about {w}",
        "what is the weather like in {w}",
        "how do i say {w} in another language",
        "who won the {w} game",
        "play some {w} music",
    ],
}

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SynthSpec:
    dialogues: int = 2000
    min_turns: int = 3
    max_turns: int = 6
    intents: int = 8
    slots_per_intent: int = 3
    values_per_slot: int = 6
    synonyms_per_intent: int = 6
    ood_utterances: int = 200
    task_dialogues: int = 600
    task_splits: tuple[float, float, float] = (0.6, 0.2, 0.2)
    greeting_prob: float = 0.3
    lexicon_seed: int = 0
    seed: int = 0
    templates: dict[str, list[str]] = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise CorpusError(f"unknown synth spec keys: {unknown}")
        doc = dict(doc)
        if "templates" in doc:
            doc["templates"] = {**DEFAULT_TEMPLATES, **doc["templates"]}
        if "task_splits" in doc:
            doc["task_splits"] = tuple(doc["task_splits"])
        spec = cls(**doc)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def validate(self) -> None:
        if self.intents < 1:
            raise CorpusError("synth spec needs at least one intent")
        if min(self.slots_per_intent, self.values_per_slot, self.synonyms_per_intent) < 1:
            raise CorpusError("slots, values and synonyms per intent must be >= 1")
        if self.dialogues < 1:
            raise CorpusError("dialogue count must be >= 1")
        if len(self.task_splits) != 3 or min(self.task_splits) < 0 or abs(sum(self.task_splits) - 1) > 1e-9:
            raise CorpusError("task_splits must be three non-negative fractions summing to 1")
        if not 1 <= self.min_turns <= self.max_turns:
            raise CorpusError("need 1 <= min_turns <= max_turns")
        if self.max_turns - 3 > self.slots_per_intent:
            raise CorpusError("max_turns exceeds 3 + slots_per_intent; not enough slots to request")
        for key in DEFAULT_TEMPLATES:
            if not self.templates.get(key):
                raise CorpusError(f"template list {key!r} is empty")


@dataclass
class Lexicon:
    nouns: list[str]
    synonyms: list[list[str]]
    slots: list[list[str]]
    values: list[list[list[str]]]
    refs: list[str]
    ood_words: list[str]

    def ontology(self) -> dict[str, list[str]]:
        """``domain.slot`` -> value list, with "none" first."""
        return {
            f"{noun}.{slot}": ["none", *self.values[k][j]]
            for k, noun in enumerate(self.nouns)
            for j, slot in enumerate(self.slots[k])
        }


def _template_words(templates: dict[str, list[str]]) -> set[str]:
    words = set()
    for entries in templates.values():
        for t in entries:
            words.update(w for w in t.split() if not w.startswith("{"))
    return words


def build_lexicon(spec: SynthSpec) -> Lexicon:
    rng = np.random.default_rng(spec.lexicon_seed)
    taken = _template_words(spec.templates)

    def word() -> str:
        while True:
            n = int(rng.integers(2, 4))
            w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n))
            if w not in taken:
                taken.add(w)
                return w

    nouns = [word() for _ in range(spec.intents)]
    synonyms = [[word() for _ in range(spec.synonyms_per_intent)] for _ in range(spec.intents)]
    slots = [[word() for _ in range(spec.slots_per_intent)] for _ in range(spec.intents)]
    values = [
        [[word() for _ in range(spec.values_per_slot)] for _ in range(spec.slots_per_intent)]
        for _ in range(spec.intents)
    ]
    refs = [f"r{i:02d}" for i in range(20)]
    ood_words = [word() for _ in range(40)]
    return Lexicon(nouns, synonyms, slots, values, refs, ood_words)


def intent_name(noun: str) -> str:
    return f"find_{noun}"


class _Generator:
    def __init__(self, spec: SynthSpec, lexicon: Lexicon, rng: np.random.Generator):
        self.spec = spec
        self.lex = lexicon
        self.rng = rng

    def pick(self, seq: Sequence[Any]) -> Any:
        return seq[int(self.rng.integers(len(seq)))]

    def fill(self, key: str, **kw: str) -> str:
        return self.pick(self.spec.templates[key]).format(**kw)

    def dialogue(self, idx: int, k: int, prefix: str = "synth") -> Dialogue:
        spec, lex = self.spec, self.lex
        noun = lex.nouns[k]
        n = int(self.rng.integers(spec.min_turns, spec.max_turns + 1))
        missing = max(0, n - 3)
        slot_order = [int(j) for j in self.rng.permutation(spec.slots_per_intent)]
        goal = {j: self.pick(lex.values[k][j]) for j in slot_order}
        told = slot_order[: spec.slots_per_intent - missing]
        asked = slot_order[spec.slots_per_intent - missing:]

        turns: list[Utterance] = []
        acts: list[list[str]] = []
        states: list[dict[str, str]] = []
        state: dict[str, str] = {}

        def note(js: Sequence[int]) -> None:
            for j in js:
                state[f"{noun}.{lex.slots[k][j]}"] = goal[j]
            states.append(dict(state))

        greeted = bool(self.rng.random() < spec.greeting_prob)
        opening = self.fill("open", syn=self.pick(lex.synonyms[k]))
        mentions = [self.fill("mention", slot=lex.slots[k][j], value=goal[j]) for j in told]
        if mentions:
            opening += " " + " and ".join(mentions)
        if greeted:
            opening = f"{self.pick(spec.templates['greeting'])} {opening}"
        turns.append(Utterance(USER, opening))
        note(told)

        def system(text: str, turn_acts: list[str]) -> None:
            if len(turns) == 1 and greeted:
                text = f"{self.pick(spec.templates['greet_reply'])} {text}"
                turn_acts = ["greet", *turn_acts]
            turns.append(Utterance(SYSTEM, text))
            acts.append(turn_acts)

        for j in asked:
            system(self.fill("request", slot=lex.slots[k][j], noun=noun), ["request"])
            turns.append(Utterance(USER, self.fill("inform", slot=lex.slots[k][j], value=goal[j])))
            note([j])
        slots_text = " and ".join(f"{lex.slots[k][j]} {goal[j]}" for j in sorted(goal))
        system(self.fill("offer", noun=noun, slots=slots_text), ["inform", "offer"])
        turns.append(Utterance(USER, self.pick(spec.templates["accept"])))
        note([])
        system(self.fill("book", noun=noun, ref=self.pick(lex.refs)), ["book", "reqmore"])
        turns.append(Utterance(USER, self.pick(spec.templates["decline"])))
        note([])
        system(self.fill("bye", noun=noun), ["bye"])

        turns = turns[: 2 * n]
        meta = {
            "intent": intent_name(noun),
            "domain": noun,
            "acts": acts[:n],
            "states": states[:n],
        }
        return Dialogue(f"{prefix}-{idx:06d}", tuple(turns), meta)

    def ood_utterance(self) -> str:
        return self.fill("ood", w=self.pick(self.lex.ood_words))


def synth_corpus(
    spec: SynthSpec, rng: np.random.Generator, count: int | None = None, prefix: str = "synth"
) -> list[Dialogue]:
    """Generate ``spec.dialogues`` (or ``count``) dialogues with intents assigned in equal shares."""
    spec.validate()
    gen = _Generator(spec, build_lexicon(spec), rng)
    intents = np.arange(spec.dialogues if count is None else count) % spec.intents
    rng.shuffle(intents)
    return [gen.dialogue(i, int(k), prefix) for i, k in enumerate(intents)]


def split_records(records: Sequence[Any], fractions: Sequence[float]) -> tuple[list, list, list]:
    n = len(records)
    a = round(n * fractions[0])
    b = a + round(n * fractions[1])
    return list(records[:a]), list(records[a:b]), list(records[b:])


def ood_utterances(spec: SynthSpec, rng: np.random.Generator, count: int | None = None) -> list[str]:
    gen = _Generator(spec, build_lexicon(spec), rng)
    return [gen.ood_utterance() for _ in range(spec.ood_utterances if count is None else count)]


def _history(turns: Sequence[Utterance]) -> list[dict[str, str]]:
    return [asdict(u) for u in turns]


def task_records(
    dialogues: Sequence[Dialogue], spec: SynthSpec, ood: Sequence[str] = ()
) -> dict[str, list[dict[str, Any]]]:
    """Labeled examples for the four downstream tasks, in their JSONL layouts."""
    ontology = build_lexicon(spec).ontology()
    out: dict[str, list[dict[str, Any]]] = {"intent": [], "act": [], "dst": [], "rs": []}
    for d in dialogues:
        if "intent" not in d.meta:
            raise CorpusError(f"dialogue {d.id!r} carries no synthetic labels")
        out["intent"].append({"text": d.turns[0].text, "label": d.meta["intent"]})
        for t in range(1, len(d.turns) // 2 + 1):
            history = _history(d.turns[: 2 * t - 1])
            state = d.meta["states"][t - 1]
            out["act"].append({"history": history, "acts": list(d.meta["acts"][t - 1])})
            out["dst"].append({"history": history, "slots": {key: state.get(key, "none") for key in ontology}})
            out["rs"].append({"history": history, "response": asdict(d.turns[2 * t - 1])})
    out["intent"].extend({"text": text, "label": OOD_LABEL} for text in ood)
    return out


def write_jsonl(records: Sequence[dict[str, Any]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_synthetic(spec: SynthSpec, out_dir: str | Path) -> dict[str, Path]:
    """Pre-training corpus plus held-out labeled task splits.

    Layout: ``corpus.jsonl`` and ``tasks/{intent,act,dst,rs}_{train,dev,test}.jsonl``.
    Corpus and task dialogues come from separate seeded streams over one lexicon.
    """
    from .corpus import save_corpus
    from .seeding import stream

    out = Path(out_dir)
    (out / "tasks").mkdir(parents=True, exist_ok=True)
    paths = {"corpus": out / "corpus.jsonl"}
    save_corpus(synth_corpus(spec, stream(spec.seed, "corpus")), paths["corpus"])
    held_out = synth_corpus(spec, stream(spec.seed, "tasks"), spec.task_dialogues, prefix="task")
    ood = ood_utterances(spec, stream(spec.seed, "ood"))
    parts = zip(("train", "dev", "test"), split_records(held_out, spec.task_splits), split_records(ood, spec.task_splits))
    for split, dialogues, ood_part in parts:
        for task, records in task_records(dialogues, spec, ood_part).items():
            path = out / "tasks" / f"{task}_{split}.jsonl"
            write_jsonl(records, path)
            paths[f"{task}_{split}"] = path
    return paths
