"""Glue shared by the command line and the end-to-end tests.

Builds the desk-scale synthetic world, the base/extension/merged
tokenizers, and the tokenized corpora that each training phase consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import corpus as C
from . import tokenizer as T
from .errors import ConfigError
from .model import ConceptPipeline, ModelConfig
from .training import qa_lm_sequences


# Desk training recipes per phase, used by the CLI as defaults.
DESK_RECIPES = {
    1: {"steps": 500, "lr": 3e-3, "batch_size": 32},
    # the hinge term must dominate early or all encodings drift to one direction
    2: {"steps": 5000, "lr": 3e-3, "batch_size": 32, "lambda_contrast": 10.0, "margin": 0.8},
    3: {"steps": 300, "lr": 2e-3, "batch_size": 32},
}

# Monolingual baseline: the phase-1 concept LM fine-tuned on pivot QA lines.
BASELINE_RECIPE = {"phase": 1, "steps": 300, "lr": 3e-3, "batch_size": 32}


@dataclass
class World:
    specs: list[C.LanguageSpec]
    kb: list[C.ConceptStatement]
    parallel: C.ParallelCorpus
    qa: list[C.QaItem]

    @property
    def pivot(self) -> str:
        return self.specs[0].lang_id

    @property
    def languages(self) -> list[str]:
        return [s.lang_id for s in self.specs]


def build_world(n_langs: int = 3, n_statements: int = 5000, n_qa: int = 300,
                seed: int = 7) -> World:
    specs = C.make_languages(n_langs)
    kb = C.generate_kb(seed, n_statements)
    parallel = C.build_parallel_corpus(kb, specs, (0.8, 0.1, 0.1), seed)
    qa = C.build_qa_corpus(kb, specs, n_qa, seed)
    return World(specs, kb, parallel, qa)


def load_world(directory) -> World:
    from pathlib import Path

    d = Path(directory)
    specs = C.load_languages(d / "languages.json")
    parallel = C.ParallelCorpus.from_jsonl(d / "parallel.jsonl")
    qa = C.qa_from_jsonl(d / "qa.jsonl") if (d / "qa.jsonl").exists() else []
    kb = [it.statement for it in parallel.items]
    return World(specs, kb, parallel, qa)


def train_tokenizers(world: World, base_size: int = 512, ext_size: int = 768):
    """(base, extension, merged): the base learns pivot text only, the
    extension learns the other scripts, and the merge keeps base ranks first."""
    base = T.train(world.parallel.texts(world.pivot, "train"), base_size)
    others = [t for lang in world.languages[1:] for t in world.parallel.texts(lang, "train")]
    ext = T.train(others, ext_size)
    return base, ext, T.merge_vocabs(base, ext)


def pivot_lm_texts(world: World, split: str = "train") -> list[str]:
    """Pivot statements followed by a question-and-answer line for each."""
    spec = world.specs[0]
    out = []
    for it in world.parallel.split(split):
        st = it.statement
        out.append(it.texts[world.pivot])
        out.append(C.question_text(st, spec) + " " + spec.lexicon[st.obj])
    return out


def take_tokens(tokenizer: T.TokenizerModel, texts: Sequence[str], max_tokens: int | None) -> list[list[int]]:
    """Tokenize texts in order until ``max_tokens`` (counting one EOS per
    sequence) would be exceeded."""
    out, n = [], 0
    for t in texts:
        ids = tokenizer.encode(t)
        if max_tokens is not None and n + len(ids) + 1 > max_tokens:
            break
        out.append(ids)
        n += len(ids) + 1
    return out


def lm_sequences(world: World, tokenizer: T.TokenizerModel, source: str = "statements",
                 max_tokens: int | None = 50000) -> list[list[int]]:
    """Phase-1 data: pivot training statements, or the pivot QA lines."""
    if source == "statements":
        return take_tokens(tokenizer, pivot_lm_texts(world, "train"), max_tokens)
    if source == "qa":
        return qa_lm_sequences(world.qa, tokenizer, world.pivot)
    raise ConfigError(f"unknown LM source {source!r}; expected 'statements' or 'qa'")


def new_pipeline(tokenizer: T.TokenizerModel, languages: Sequence[str], **overrides) -> ConceptPipeline:
    cfg = ModelConfig(**{"vocab_size": tokenizer.vocab_size, "languages": tuple(languages), **overrides})
    return ConceptPipeline(cfg, tokenizer)
