"""Synthetic multilingual world.

A fixed concept vocabulary (entities, attributes with value sets, relations)
yields subject/predicate/object statements.  Each synthetic language is a
bijective lexicon onto words written in its own alphabet plus a permutation
of the three slots, so every sentence has a known meaning and a known
translation in every other language.  Language seed 0 is the Latin-script
pivot whose lexicon is the identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, DataError, RealizationError

ATTRIBUTES: dict[str, tuple[str, ...]] = {
    "color": ("red", "blue", "green", "yellow", "black", "white"),
    "size": ("tiny", "small", "medium", "large", "huge", "giant"),
    "food": ("bread", "rice", "fish", "apples", "honey", "cheese"),
    "home": ("forest", "river", "mountain", "desert", "island", "valley"),
    "pet": ("dog", "cat", "horse", "goat", "rabbit", "parrot"),
    "tool": ("hammer", "knife", "rope", "lamp", "spade", "needle"),
    "drink": ("tea", "milk", "water", "juice", "coffee", "cider"),
    "season": ("spring", "summer", "autumn", "winter", "monsoon", "harvest"),
    "sport": ("chess", "tennis", "rowing", "archery", "hockey", "boxing"),
    "metal": ("gold", "silver", "copper", "iron", "tin", "bronze"),
    "music": ("drum", "flute", "harp", "violin", "trumpet", "lute"),
    "craft": ("pottery", "weaving", "carving", "painting", "baking", "sewing"),
}
RELATIONS: tuple[str, ...] = (
    "friend", "rival", "teacher", "neighbor", "cousin", "partner",
    "mentor", "student", "guest", "leader", "sibling", "employer",
)
QUESTION_WORD = "what"
N_ENTITIES = 210

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _make_entities(n: int) -> tuple[str, ...]:
    # fixed generator: the concept vocabulary is part of the world, not of a seed
    rng = np.random.default_rng(20240501)
    taken = set(ATTRIBUTES) | set(RELATIONS) | {QUESTION_WORD}
    for vals in ATTRIBUTES.values():
        taken.update(vals)
    out: list[str] = []
    while len(out) < n:
        syl = int(rng.integers(2, 4))
        name = "".join(
            _CONSONANTS[int(rng.integers(len(_CONSONANTS)))]
            + _VOWELS[int(rng.integers(len(_VOWELS)))]
            for _ in range(syl)
        )
        if name not in taken:
            taken.add(name)
            out.append(name)
    return tuple(out)


ENTITIES = _make_entities(N_ENTITIES)
PREDICATES: tuple[str, ...] = tuple(ATTRIBUTES) + RELATIONS
VALUES: tuple[str, ...] = tuple(v for vals in ATTRIBUTES.values() for v in vals)
CONCEPT_SYMBOLS: tuple[str, ...] = ENTITIES + PREDICATES + VALUES + (QUESTION_WORD,)

# (tag, first code point, letter count); each entry yields 20-letter alphabets
_SCRIPT_BLOCKS = (
    ("cyrl", 0x0430, 32),
    ("grek", 0x03B1, 25),
    ("geor", 0x10D0, 33),
    ("armn", 0x0561, 38),
    ("deva", 0x0915, 37),
    ("hebr", 0x05D0, 27),
    ("thai", 0x0E01, 46),
    ("ethi", 0x1200, 320),
    ("hang", 0xAC00, 11172),
)
_ALPHABET = 20


def _script_slices() -> list[tuple[str, list[str]]]:
    slices = []
    for tag, start, count in _SCRIPT_BLOCKS:
        for k in range(count // _ALPHABET):
            letters = [chr(start + k * _ALPHABET + i) for i in range(_ALPHABET)]
            slices.append((tag if k == 0 else f"{tag}{k}", letters))
    return slices


SCRIPT_SLICES = _script_slices()

ORDER_RULES: dict[str, tuple[int, ...]] = {
    "".join("SVO"[i] for i in p): p for p in permutations(range(3))
}


@dataclass(frozen=True)
class LanguageSpec:
    lang_id: str
    lexicon: Mapping[str, str]
    word_order: str
    seed: int

    @property
    def order(self) -> tuple[int, ...]:
        return ORDER_RULES[self.word_order]

    def inverse_lexicon(self) -> dict[str, str]:
        return {form: sym for sym, form in self.lexicon.items()}

    def to_dict(self) -> dict:
        return {
            "lang_id": self.lang_id,
            "seed": self.seed,
            "word_order": self.word_order,
            "lexicon": dict(sorted(self.lexicon.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LanguageSpec":
        return cls(d["lang_id"], dict(d["lexicon"]), d["word_order"], int(d["seed"]))


def make_language(seed: int, order_rule: str = "SVO") -> LanguageSpec:
    """Deterministic synthetic language.

    Seed 0 is the Latin pivot with the identity lexicon.  Seed ``s >= 1``
    draws its words from alphabet slice ``s - 1``; slices never share code
    points, so languages with different seeds never share a word form.
    """
    if order_rule not in ORDER_RULES:
        raise ConfigError(f"unknown word order {order_rule!r}; choose from {sorted(ORDER_RULES)}")
    if seed == 0:
        return LanguageSpec("latn", {s: s for s in CONCEPT_SYMBOLS}, order_rule, 0)
    if not 1 <= seed <= len(SCRIPT_SLICES):
        raise ConfigError(f"language seed must be in [0, {len(SCRIPT_SLICES)}], got {seed}")
    tag, letters = SCRIPT_SLICES[seed - 1]
    rng = np.random.default_rng(seed)
    forms: set[str] = set()
    lexicon: dict[str, str] = {}
    for sym in CONCEPT_SYMBOLS:
        while True:
            n = int(rng.integers(2, 5))
            w = "".join(letters[int(i)] for i in rng.integers(0, len(letters), n))
            if w not in forms:
                break
        forms.add(w)
        lexicon[sym] = w
    return LanguageSpec(tag, lexicon, order_rule, seed)


@dataclass(frozen=True)
class ConceptStatement:
    template: str  # "attr" or "rel"
    subject: str
    predicate: str
    obj: str

    @property
    def meaning_key(self) -> str:
        return f"{self.template}|{self.subject}|{self.predicate}|{self.obj}"

    @property
    def slots(self) -> tuple[str, str, str]:
        return (self.subject, self.predicate, self.obj)

    @classmethod
    def from_key(cls, key: str) -> "ConceptStatement":
        template, s, p, o = key.split("|")
        return cls(template, s, p, o)

    @classmethod
    def from_slots(cls, s: str, p: str, o: str) -> "ConceptStatement":
        return cls("attr" if p in ATTRIBUTES else "rel", s, p, o)


def kb_capacity() -> int:
    return len(ENTITIES) * len(PREDICATES)


def generate_kb(seed: int, n_statements: int) -> list[ConceptStatement]:
    """``n_statements`` facts with distinct (subject, predicate) pairs."""
    if n_statements < 1:
        raise ConfigError("n_statements must be >= 1")
    cap = kb_capacity()
    if n_statements > cap:
        raise CapacityError(f"{n_statements} statements requested; the world holds {cap}")
    rng = np.random.default_rng(seed)
    picks = rng.permutation(cap)[:n_statements]
    kb = []
    for code in picks.tolist():
        subj = ENTITIES[code // len(PREDICATES)]
        pred = PREDICATES[code % len(PREDICATES)]
        if pred in ATTRIBUTES:
            vals = ATTRIBUTES[pred]
            kb.append(ConceptStatement("attr", subj, pred, vals[int(rng.integers(len(vals)))]))
        else:
            while True:
                other = ENTITIES[int(rng.integers(len(ENTITIES)))]
                if other != subj:
                    break
            kb.append(ConceptStatement("rel", subj, pred, other))
    return kb


def realize_slots(slots: Sequence[str], spec: LanguageSpec) -> str:
    words = []
    for i in spec.order:
        sym = slots[i]
        try:
            words.append(spec.lexicon[sym])
        except KeyError:
            raise RealizationError(f"{sym!r} has no form in language {spec.lang_id}") from None
    return " ".join(words)


def realize(statement: ConceptStatement, spec: LanguageSpec) -> str:
    return realize_slots(statement.slots, spec)


def invert(sentence: str, spec: LanguageSpec) -> ConceptStatement:
    """Recover the statement a sentence of ``spec`` expresses."""
    inv = spec.inverse_lexicon()
    words = sentence.split(" ")
    if len(words) != 3:
        raise RealizationError(f"expected 3 words, got {len(words)}: {sentence!r}")
    slots = [""] * 3
    for pos, i in enumerate(spec.order):
        try:
            slots[i] = inv[words[pos]]
        except KeyError:
            raise RealizationError(f"{words[pos]!r} is not a word of {spec.lang_id}") from None
    return ConceptStatement.from_slots(*slots)


def question_text(statement: ConceptStatement, spec: LanguageSpec) -> str:
    return realize_slots((statement.subject, statement.predicate, QUESTION_WORD), spec)


# -- parallel corpora ---------------------------------------------------------
@dataclass
class ParallelItem:
    meaning_key: str
    texts: dict[str, str]

    @property
    def statement(self) -> ConceptStatement:
        return ConceptStatement.from_key(self.meaning_key)


@dataclass
class ParallelCorpus:
    languages: list[str]
    items: list[ParallelItem]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def split(self, name: str) -> list[ParallelItem]:
        keys = set(self.splits[name])
        return [it for it in self.items if it.meaning_key in keys]

    def texts(self, lang: str, split: str | None = None) -> list[str]:
        items = self.items if split is None else self.split(split)
        return [it.texts[lang] for it in items]

    def to_jsonl(self, path) -> None:
        where = {k: name for name, keys in self.splits.items() for k in keys}
        with open(path, "w", encoding="utf-8") as fh:
            for it in self.items:
                for lang in self.languages:
                    rec = {
                        "meaning_key": it.meaning_key,
                        "lang": lang,
                        "text": it.texts[lang],
                        "split": where.get(it.meaning_key, ""),
                    }
                    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "ParallelCorpus":
        items: dict[str, ParallelItem] = {}
        langs: list[str] = []
        splits: dict[str, list[str]] = {}
        for rec in read_jsonl(path):
            key = rec["meaning_key"]
            if rec["lang"] not in langs:
                langs.append(rec["lang"])
            it = items.get(key)
            if it is None:
                it = items[key] = ParallelItem(key, {})
                if rec.get("split"):
                    splits.setdefault(rec["split"], []).append(key)
            it.texts[rec["lang"]] = rec["text"]
        return cls(langs, list(items.values()), splits)


def build_parallel_corpus(
    kb: Sequence[ConceptStatement],
    specs: Sequence[LanguageSpec],
    split_ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> ParallelCorpus:
    """Every statement in every language, split train/valid/test by meaning."""
    if len(specs) < 2:
        raise ConfigError("a parallel corpus needs at least two languages")
    if len(split_ratios) != 3 or any(r < 0 for r in split_ratios):
        raise ConfigError("split_ratios must be three nonnegative numbers")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios sum to {sum(split_ratios)}, not 1")
    ids = [s.lang_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate language ids {ids}")
    items = [ParallelItem(st.meaning_key, {s.lang_id: realize(st, s) for s in specs}) for st in kb]
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(round(split_ratios[0] * len(items)))
    n_valid = int(round(split_ratios[1] * len(items)))
    keys = [items[i].meaning_key for i in order.tolist()]
    splits = {
        "train": keys[:n_train],
        "valid": keys[n_train : n_train + n_valid],
        "test": keys[n_train + n_valid :],
    }
    return ParallelCorpus(ids, items, splits)


# -- multiple choice QA -------------------------------------------------------
@dataclass
class QaItem:
    meaning_key: str
    question: dict[str, str]
    options: dict[str, list[str]]
    answer: int

    @property
    def statement(self) -> ConceptStatement:
        return ConceptStatement.from_key(self.meaning_key)

    def records(self) -> Iterable[dict]:
        for lang in sorted(self.question):
            yield {
                "meaning_key": self.meaning_key,
                "lang": lang,
                "question": self.question[lang],
                "options": self.options[lang],
                "answer": self.answer,
            }


def build_qa_corpus(
    kb: Sequence[ConceptStatement],
    specs: Sequence[LanguageSpec],
    n_items: int,
    seed: int = 0,
) -> list[QaItem]:
    """Four-option questions asking for a statement's object.

    Distractors are objects of other statements with the same predicate
    (falling back to the same template).  Option order and the correct
    position are shared by all languages.
    """
    if n_items > len(kb):
        raise CapacityError(f"{n_items} QA items requested from a KB of {len(kb)}")
    by_pred: dict[str, set[str]] = {}
    by_template: dict[str, set[str]] = {}
    for st in kb:
        by_pred.setdefault(st.predicate, set()).add(st.obj)
        by_template.setdefault(st.template, set()).add(st.obj)
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(len(kb))[:n_items]
    out = []
    for i in chosen.tolist():
        st = kb[i]
        pool = sorted(by_pred[st.predicate] - {st.obj})
        if len(pool) < 3:
            pool = sorted(by_template[st.template] - {st.obj})
        if len(pool) < 3:
            raise CapacityError(f"fewer than 3 distractors for {st.meaning_key}")
        picks = rng.choice(len(pool), size=3, replace=False)
        opts = [pool[int(j)] for j in picks]
        answer = int(rng.integers(4))
        opts.insert(answer, st.obj)
        out.append(
            QaItem(
                st.meaning_key,
                {s.lang_id: question_text(st, s) for s in specs},
                {s.lang_id: [s.lexicon[o] for o in opts] for s in specs},
                answer,
            )
        )
    return out


def qa_to_jsonl(items: Sequence[QaItem], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            for rec in it.records():
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def qa_from_jsonl(path) -> list[QaItem]:
    items: dict[str, QaItem] = {}
    for rec in read_jsonl(path):
        it = items.get(rec["meaning_key"])
        if it is None:
            it = items[rec["meaning_key"]] = QaItem(rec["meaning_key"], {}, {}, int(rec["answer"]))
        elif it.answer != rec["answer"]:
            raise DataError(f"answer index differs across languages for {rec['meaning_key']}")
        it.question[rec["lang"]] = rec["question"]
        it.options[rec["lang"]] = list(rec["options"])
    return list(items.values())


def read_jsonl(path) -> Iterable[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def default_orders(n: int) -> list[str]:
    """Word orders for languages 0..n-1: the pivot is SVO, the rest cycle."""
    cycle = ["SOV", "VSO", "OVS", "VOS", "OSV", "SVO"]
    return ["SVO"] + [cycle[i % len(cycle)] for i in range(n - 1)]


def make_languages(n: int) -> list[LanguageSpec]:
    return [make_language(i, o) for i, o in enumerate(default_orders(n))]


def write_world(out_dir, specs: Sequence[LanguageSpec], corpus: ParallelCorpus,
                qa: Sequence[QaItem]) -> dict[str, str]:
    """Write languages.json, parallel.jsonl and qa.jsonl; returns file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "languages.json", "w", encoding="utf-8") as fh:
        json.dump([s.to_dict() for s in specs], fh, ensure_ascii=False, sort_keys=True)
    corpus.to_jsonl(out / "parallel.jsonl")
    qa_to_jsonl(qa, out / "qa.jsonl")
    return {"languages": "languages.json", "parallel": "parallel.jsonl", "qa": "qa.jsonl"}


def load_languages(path) -> list[LanguageSpec]:
    with open(path, encoding="utf-8") as fh:
        return [LanguageSpec.from_dict(d) for d in json.load(fh)]
