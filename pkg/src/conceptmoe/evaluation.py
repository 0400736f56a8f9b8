"""Perplexity, cross-lingual alignment, QA consistency and fertility reports.

Everything here runs without gradient tracking and is a pure function of
the model parameters, the data and (for guessing policies) a seed.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import ParallelCorpus, QaItem
from .errors import ConfigError, DataError
from .model import ConceptModel, ConceptPipeline, pad_batch
from .numerics import log_softmax, no_grad
from .tokenizer import BOS, EOS, FertilityReport, TokenizerModel, fertility, token_ratio
from .training import mean_pool

CHANCE_QA = 0.25


# -- perplexity ---------------------------------------------------------------
def perplexity(model, sequences: Sequence[Sequence[int]], batch_size: int = 64) -> float:
    """``exp`` of the mean next-token NLL over ``[BOS] + seq + [EOS]``."""
    concept = model.concept if isinstance(model, ConceptPipeline) else model
    seqs = [list(s) for s in sequences]
    if not seqs:
        raise ConfigError("perplexity of an empty corpus")
    total, count = 0.0, 0
    with no_grad():
        for lo in range(0, len(seqs), batch_size):
            chunk = [[BOS] + s + [EOS] for s in seqs[lo : lo + batch_size]]
            inputs, lengths = pad_batch([s[:-1] for s in chunk])
            gold, _ = pad_batch([s[1:] for s in chunk], pad=-1)
            logp = log_softmax(concept.lm_forward(inputs, lengths), axis=-1).data
            keep = gold >= 0
            b, t = np.nonzero(keep)
            total -= float(logp[b, t, gold[keep]].sum())
            count += int(keep.sum())
    return math.exp(total / count)


def text_perplexity(model, tokenizer: TokenizerModel, texts: Sequence[str]) -> float:
    return perplexity(model, [tokenizer.encode(t) for t in texts])


# -- alignment ----------------------------------------------------------------
@dataclass
class AlignmentScore:
    lang_a: str
    lang_b: str
    n_pairs: int
    parallel_cosine: float
    random_cosine: float
    retrieval_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


def pooled_encodings(pipeline: ConceptPipeline, seqs: Sequence[Sequence[int]], lang: str,
                     batch_size: int = 128) -> np.ndarray:
    li = pipeline.lang_index(lang)
    out = []
    with no_grad():
        for lo in range(0, len(seqs), batch_size):
            chunk = seqs[lo : lo + batch_size]
            enc, lengths = pipeline.encode_batch(chunk, [li] * len(chunk))
            out.append(mean_pool(enc, lengths).data)
    return np.concatenate(out, axis=0)


def alignment_from_vectors(a: np.ndarray, b: np.ndarray, lang_a: str = "a",
                           lang_b: str = "b") -> AlignmentScore:
    """Statistics for row-parallel pooled encodings ``a`` and ``b``."""
    n = a.shape[0]
    if n < 2 or b.shape != a.shape:
        raise ConfigError("alignment needs at least two row-parallel encodings")
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    sims = an @ bn.T
    diag = np.diag(sims)
    off = sims[~np.eye(n, dtype=bool)]
    nearest = np.argmax(sims, axis=1)
    return AlignmentScore(
        lang_a, lang_b, n,
        float(np.clip(diag.mean(), -1, 1)),
        float(np.clip(off.mean(), -1, 1)),
        float(np.mean(nearest == np.arange(n))),
    )


def alignment_score(pipeline: ConceptPipeline, corpus: ParallelCorpus, lang_pair: tuple[str, str],
                    split: str | None = "test", n_pairs: int | None = 200) -> AlignmentScore:
    a, b = lang_pair
    for lang in lang_pair:
        if lang not in corpus.languages:
            raise ConfigError(f"language {lang!r} is not in the corpus {corpus.languages}")
    items = corpus.items if split is None else corpus.split(split)
    if n_pairs is not None:
        items = items[:n_pairs]
    if len(items) < 2:
        raise ConfigError(f"only {len(items)} test pairs available")
    ea = pooled_encodings(pipeline, [pipeline.tokenize(it.texts[a]) for it in items], a)
    eb = pooled_encodings(pipeline, [pipeline.tokenize(it.texts[b]) for it in items], b)
    return alignment_from_vectors(ea, eb, a, b)


def alignment_report(pipeline: ConceptPipeline, corpus: ParallelCorpus, split: str | None = "test",
                     n_pairs: int | None = 200) -> list[AlignmentScore]:
    """Scores for every unordered language pair of the corpus."""
    return [
        alignment_score(pipeline, corpus, pair, split, n_pairs)
        for pair in itertools.combinations(corpus.languages, 2)
    ]


def alignment_table(scores: Sequence[AlignmentScore]) -> str:
    lines = [f"{'pair':<12} {'n':>5} {'parallel':>9} {'random':>9} {'retrieval':>9}"]
    for s in scores:
        lines.append(f"{s.lang_a + '-' + s.lang_b:<12} {s.n_pairs:>5} {s.parallel_cosine:>9.4f} "
                     f"{s.random_cosine:>9.4f} {s.retrieval_accuracy:>9.4f}")
    return "\n".join(lines) + "\n"


def random_retrieval_accuracy(n: int, trials: int, seed: int = 0) -> float:
    """Retrieval accuracy of a policy that picks a candidate uniformly."""
    rng = np.random.default_rng(seed)
    return float(np.mean(rng.integers(n, size=trials) == rng.integers(n, size=trials)))


# -- QA consistency -----------------------------------------------------------
@dataclass
class ConsistencyReport:
    languages: list[str]
    accuracy: dict[str, float]
    n_items: int
    chance: float = CHANCE_QA
    predictions: dict[str, list[int]] = field(default_factory=dict, repr=False)

    @property
    def gap(self) -> float:
        vals = [self.accuracy[l] for l in self.languages]
        return max(vals) - min(vals)

    def to_dict(self) -> dict:
        return {
            "languages": self.languages,
            "accuracy": self.accuracy,
            "gap": self.gap,
            "chance": self.chance,
            "n_items": self.n_items,
        }

    def to_text(self) -> str:
        lines = [f"{'lang':<8} {'accuracy':>9}"]
        lines += [f"{l:<8} {self.accuracy[l]:>9.4f}" for l in self.languages]
        lines.append(f"{'gap':<8} {self.gap:>9.4f}")
        lines.append(f"{'chance':<8} {self.chance:>9.4f}")
        return "\n".join(lines) + "\n"


QaPolicy = Callable[[Sequence[QaItem], str], list[int]]


def _constrained_choice(next_logp: Callable[[list[list[int]], np.ndarray], np.ndarray],
                        options: list[list[list[int]]]) -> list[int]:
    """Greedy decoding restricted to continuations of the given options.

    ``next_logp(prefixes, active)`` returns next-token log-probabilities
    (len(active), V) for the prefixes of the active rows.  At each step the
    allowed tokens are the next tokens of options consistent with the prefix
    and EOS for an option already complete; the best allowed token is taken
    (ties to the lower id) until a single option is fully decoded.
    """
    n = len(options)
    prefixes: list[list[int]] = [[] for _ in range(n)]
    choice = [-1] * n
    while True:
        active = np.array([i for i in range(n) if choice[i] < 0], dtype=np.int64)
        if active.size == 0:
            return choice
        logp = next_logp([prefixes[i] for i in active], active)
        for row, i in enumerate(active.tolist()):
            t = len(prefixes[i])
            live = [k for k, o in enumerate(options[i]) if o[:t] == prefixes[i]]
            allowed: dict[int, int] = {}
            for k in live:
                tok = options[i][k][t] if len(options[i][k]) > t else EOS
                allowed.setdefault(tok, k)
            tok = min(allowed, key=lambda x: (-logp[row, x], x))
            if tok == EOS:
                choice[i] = allowed[tok]
                continue
            prefixes[i].append(tok)
            live = [k for k in live if options[i][k][: t + 1] == prefixes[i]]
            if all(len(options[i][k]) == t + 1 for k in live):
                choice[i] = live[0]


class PipelinePolicy:
    """Answers by constrained greedy decoding through encoder, concept model and decoder."""

    def __init__(self, pipeline: ConceptPipeline, batch_size: int = 256):
        self.pipeline = pipeline
        self.batch_size = batch_size

    def __call__(self, items: Sequence[QaItem], lang: str) -> list[int]:
        p = self.pipeline
        li = p.lang_index(lang)
        out: list[int] = []
        with no_grad():
            for lo in range(0, len(items), self.batch_size):
                chunk = items[lo : lo + self.batch_size]
                q = [p.tokenize(it.question[lang]) for it in chunk]
                _, concepts, q_len = p.concepts_batch(q, [li] * len(chunk))
                opts = [[p.tokenize(o) for o in it.options[lang]] for it in chunk]

                def next_logp(prefixes, active):
                    ids, lengths = pad_batch([[BOS] + pre for pre in prefixes])
                    mem = concepts[active]
                    logits = p.decoder(ids, [li] * len(active), mem, q_len[active])
                    last = logits.data[np.arange(len(active)), lengths - 1]
                    return log_softmax(last, axis=-1).data

                out.extend(_constrained_choice(next_logp, opts))
        return out


class LanguageModelPolicy:
    """Answers with a plain causal LM reading ``question answer`` text."""

    def __init__(self, model: ConceptModel, tokenizer: TokenizerModel, batch_size: int = 256):
        self.model = model
        self.tokenizer = tokenizer
        self.batch_size = batch_size

    def __call__(self, items: Sequence[QaItem], lang: str) -> list[int]:
        tok = self.tokenizer
        out: list[int] = []
        with no_grad():
            for lo in range(0, len(items), self.batch_size):
                chunk = items[lo : lo + self.batch_size]
                q = [tok.encode(it.question[lang]) for it in chunk]
                opts = [[tok.encode(" " + o) for o in it.options[lang]] for it in chunk]

                def next_logp(prefixes, active):
                    seqs = [[BOS] + q[i] + pre for i, pre in zip(active.tolist(), prefixes)]
                    ids, lengths = pad_batch(seqs)
                    logits = self.model.lm_forward(ids, lengths)
                    last = logits.data[np.arange(len(seqs)), lengths - 1]
                    return log_softmax(last, axis=-1).data

                out.extend(_constrained_choice(next_logp, opts))
        return out


class RandomGuessPolicy:
    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, items: Sequence[QaItem], lang: str) -> list[int]:
        salt = sum(lang.encode())
        rng = np.random.default_rng([self.seed, salt])
        return rng.integers(4, size=len(items)).tolist()


def check_aligned(items: Sequence[QaItem], langs: Sequence[str]) -> None:
    for it in items:
        missing = [l for l in langs if l not in it.question or l not in it.options]
        if missing:
            raise DataError(f"QA item {it.meaning_key} lacks languages {missing}")
        if len({len(it.options[l]) for l in langs}) != 1:
            raise DataError(f"QA item {it.meaning_key} has differing option counts")


def align_qa_sets(sets: Mapping[str, Sequence[QaItem]]) -> list[QaItem]:
    """Join per-language QA lists into meaning-aligned items."""
    keysets = {lang: [it.meaning_key for it in items] for lang, items in sets.items()}
    ref = None
    for lang, keys in keysets.items():
        if ref is None:
            ref = keys
        elif sorted(keys) != sorted(ref):
            raise DataError(f"QA set for {lang} covers different meaning keys")
    merged: dict[str, QaItem] = {}
    for lang, items in sets.items():
        for it in items:
            m = merged.setdefault(it.meaning_key, QaItem(it.meaning_key, {}, {}, it.answer))
            if m.answer != it.answer:
                raise DataError(f"answer index differs across languages for {it.meaning_key}")
            m.question[lang] = it.question[lang]
            m.options[lang] = it.options[lang]
    return [merged[k] for k in ref]


def consistency_eval(model, qa_items: Sequence[QaItem], langs: Sequence[str]) -> ConsistencyReport:
    """Per-language accuracy on meaning-aligned multiple-choice items."""
    langs = list(langs)
    if not langs:
        raise ConfigError("consistency_eval needs at least one language")
    check_aligned(qa_items, langs)
    policy: QaPolicy = PipelinePolicy(model) if isinstance(model, ConceptPipeline) else model
    acc, preds = {}, {}
    for lang in langs:
        guess = policy(qa_items, lang)
        preds[lang] = [int(g) for g in guess]
        acc[lang] = float(np.mean([g == it.answer for g, it in zip(guess, qa_items)])) if qa_items else 0.0
    return ConsistencyReport(langs, acc, len(qa_items), CHANCE_QA, preds)


# -- fertility ----------------------------------------------------------------
@dataclass
class FertilityComparison:
    base: FertilityReport
    other: FertilityReport
    ratio: dict[str, float]

    def to_dict(self) -> dict:
        return {"base": self.base.to_dict(), "other": self.other.to_dict(), "token_ratio": self.ratio}

    def to_text(self) -> str:
        lines = [f"{'lang':<8} {'base':>8} {'other':>8} {'ratio':>8}"]
        for row in self.base.rows:
            o = self.other.row(row.lang)
            r = self.ratio.get(row.lang)
            lines.append(f"{row.lang:<8} {row.tokens:>8} {o.tokens:>8} "
                         f"{'-' if r is None else f'{r:.4f}':>8}")
        return "\n".join(lines) + "\n"


def fertility_eval(tokenizer: TokenizerModel, corpus_by_lang: Mapping[str, Sequence[str]],
                   compare_to: TokenizerModel | None = None, reference: str = "corpus"):
    """Fertility of ``tokenizer``; with ``compare_to`` also the token-count
    ratio ``tokenizer / compare_to`` per language."""
    report = fertility(tokenizer, corpus_by_lang, reference)
    if compare_to is None:
        return report
    base = fertility(compare_to, corpus_by_lang, reference)
    return FertilityComparison(base, report, token_ratio(report, base))


def dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, ensure_ascii=False)
        fh.write("\n")
