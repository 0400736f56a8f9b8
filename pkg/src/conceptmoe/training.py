"""The three training phases and their losses.

Phase 1 trains the concept model as a causal LM on pivot-language text.
Phase 2 trains the language encoder and decoder on parallel sentences with a
translation loss plus a concept-alignment loss, keeping the concept model
frozen by default.  Phase 3 fine-tunes the whole pipeline on multilingual
question -> answer pairs.

Every loop is a pure function of (config, data, initial parameters): batch
order comes from ``TrainConfig.seed`` and nothing reads the clock except the
wall-time field of the report.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ParallelCorpus, QaItem
from .errors import ConfigError, ContextError, StateError
from .model import ConceptModel, ConceptPipeline, pad_batch, save_checkpoint
from .numerics import (
    Adam,
    NonFiniteError,
    Tensor,
    clip_grad_norm,
    cross_entropy,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sqrt,
    sum_,
    transpose,
)
from .tokenizer import BOS, EOS

SUBMODULES = ("encoder", "concept", "decoder")


@dataclass
class TrainConfig:
    phase: int = 1
    lr: float = 3e-3
    steps: int = 500
    batch_size: int = 32
    seed: int = 0
    lambda_translate: float = 1.0
    lambda_align: float = 1.0
    lambda_contrast: float = 1.0
    margin: float = 0.2
    warmup_frac: float = 0.05
    clip_norm: float = 1.0
    freeze: dict = field(default_factory=dict)
    checkpoint_every: int = 0

    def __post_init__(self):
        defaults = {"encoder": False, "concept": self.phase == 2, "decoder": False}
        unknown = set(self.freeze) - set(SUBMODULES)
        if unknown:
            raise ConfigError(f"unknown freeze flags {sorted(unknown)}; expected {list(SUBMODULES)}")
        self.freeze = {k: bool(self.freeze.get(k, v)) for k, v in defaults.items()}
        self.validate()

    def validate(self) -> None:
        if self.phase not in (1, 2, 3):
            raise ConfigError(f"invalid phase {self.phase}; expected 1, 2 or 3")
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ConfigError("steps and checkpoint_every must be >= 0, batch_size >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("lambda_translate", "lambda_align", "lambda_contrast", "margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.warmup_frac <= 1:
            raise ConfigError("warmup_frac must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def lr_at(self, step: int) -> float:
        warm = max(1, math.ceil(self.warmup_frac * self.steps))
        return self.lr * min(1.0, (step + 1) / warm)


@dataclass
class TrainReport:
    phase: int
    seed: int
    data_fingerprint: str
    config: dict
    losses: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None

    @property
    def steps(self) -> int:
        return len(self.losses)

    def total_losses(self) -> list[float]:
        return [row["total"] for row in self.losses]

    def to_dict(self, include_timing: bool = False) -> dict:
        """Report contents; wall time is left out unless asked for so that
        reports of identical runs compare equal byte for byte."""
        d = {
            "phase": self.phase,
            "seed": self.seed,
            "data_fingerprint": self.data_fingerprint,
            "config": self.config,
            "steps": self.steps,
            "losses": self.losses,
            "checkpoint": self.checkpoint,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, indent=1)

    def to_text(self, every: int = 1) -> str:
        if not self.losses:
            return "step  (no steps)\n"
        keys = list(self.losses[0])
        lines = ["step " + " ".join(f"{k:>12}" for k in keys)]
        for i, row in enumerate(self.losses):
            if i % every == 0 or i == len(self.losses) - 1:
                lines.append(f"{i:>4} " + " ".join(f"{row[k]:>12.6f}" for k in keys))
        return "\n".join(lines) + "\n"


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# -- losses -------------------------------------------------------------------
def mean_pool(x: Tensor, lengths) -> Tensor:
    """Average of the first ``lengths[b]`` positions of each row of (B, T, d)."""
    b, t, _ = x.shape
    lengths = np.asarray(lengths)
    w = (np.arange(t)[None, :] < lengths[:, None]) / lengths[:, None].astype(np.float64)
    return sum_(mul(x, w[:, :, None]), axis=1)


def _unit_rows(x: Tensor) -> Tensor:
    return x / sqrt(sum_(x * x, axis=-1, keepdims=True) + 1e-12)


def alignment_loss(a: Tensor, b: Tensor, lambda_contrast: float = 1.0,
                   margin: float = 0.2) -> Tensor:
    """Cosine pull between parallel rows plus a hardest-negative hinge.

    ``mean_i (1 - cos(a_i, b_i)) + lambda_contrast * mean_i max(0, margin
    + max_{j != i} cos(a_i, b_j) - cos(a_i, b_i))``.  The hardest negative
    is picked at the evaluation point and treated as fixed.
    """
    if a.shape != b.shape or a.ndim != 2:
        raise ConfigError(f"alignment_loss needs equal (B, d) batches, got {a.shape} and {b.shape}")
    n = a.shape[0]
    sims = matmul(_unit_rows(a), transpose(_unit_rows(b), (1, 0)))
    idx = np.arange(n)
    pos = sims[idx, idx]
    loss = mean(1.0 - pos)
    if n < 2:
        if lambda_contrast > 0:
            warnings.warn("batch of one: contrastive term disabled", RuntimeWarning, stacklevel=2)
        return loss
    if lambda_contrast == 0:
        return loss
    off = np.where(np.eye(n, dtype=bool), -np.inf, sims.data)
    hardest = np.argmax(off, axis=1)
    hinge = relu(pos * -1.0 + sims[idx, hardest] + margin)
    return loss + mean(hinge) * lambda_contrast


def _check_len(seq, limit: int, what: str) -> None:
    if len(seq) > limit:
        raise ContextError(f"{what} of {len(seq)} tokens exceeds context window {limit}")


def translation_loss(pipeline: ConceptPipeline, batch, return_parts: bool = False):
    """Teacher-forced cross-entropy of targets given sources.

    ``batch`` holds (source ids, source lang, target ids, target lang)
    tuples; languages are ids or indices.  Every target token and the
    closing EOS count once in the mean.
    """
    cw = pipeline.cfg.context_window
    srcs, s_lang, tgts, t_lang = [], [], [], []
    for src, sl, tgt, tl in batch:
        _check_len(src, cw, "source")
        _check_len(tgt, cw - 1, "target")
        if len(src) == 0:
            raise ConfigError("empty source sequence")
        srcs.append(list(src))
        tgts.append(list(tgt))
        s_lang.append(sl if isinstance(sl, (int, np.integer)) else pipeline.lang_index(sl))
        t_lang.append(tl if isinstance(tl, (int, np.integer)) else pipeline.lang_index(tl))
    enc, concepts, src_len = pipeline.concepts_batch(srcs, s_lang)
    logits, gold, _ = pipeline.decoder_logits(concepts, src_len, tgts, t_lang)
    v = logits.shape[-1]
    loss = cross_entropy(reshape(logits, (-1, v)), gold.reshape(-1), ignore_index=-1)
    if return_parts:
        return loss, enc, src_len
    return loss


def lm_loss(model: ConceptModel, seqs: Sequence[Sequence[int]]) -> Tensor:
    """Next-token cross-entropy of ``[BOS] + seq + [EOS]`` sequences."""
    full = [[BOS] + list(s) + [EOS] for s in seqs]
    for s in full:
        _check_len(s[:-1], model.cfg.context_window, "sequence")
    inputs, lengths = pad_batch([s[:-1] for s in full])
    gold, _ = pad_batch([s[1:] for s in full], pad=-1)
    logits = model.lm_forward(inputs, lengths)
    return cross_entropy(reshape(logits, (-1, logits.shape[-1])), gold.reshape(-1), ignore_index=-1)


# -- loop machinery -------------------------------------------------------------
class _Batches:
    """Deterministic epoch-shuffled index batches."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise ConfigError("training data is empty")
        self.n, self.bs, self.rng = n, min(batch_size, n), rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.bs > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos : self.pos + self.bs]
        self.pos += self.bs
        return out


def _apply_freeze(pipeline: ConceptPipeline, cfg: TrainConfig) -> None:
    for name in SUBMODULES:
        getattr(pipeline, name).set_trainable(not cfg.freeze[name])


@contextlib.contextmanager
def _diagnose(step: int, batch_id):
    """Tag non-finite failures inside a forward pass with the step and batch."""
    try:
        yield
    except NonFiniteError as e:
        raise NonFiniteError(f"{e} at step {step} (batch {batch_id})") from e


def _step(opt: Adam | None, loss: Tensor, cfg: TrainConfig, step: int, batch_id) -> None:
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"non-finite loss at step {step} (batch {batch_id})")
    if opt is None:
        return
    opt.zero_grad()
    loss.backward()
    if cfg.clip_norm > 0:
        norm = clip_grad_norm(opt.params, cfg.clip_norm)
        if not math.isfinite(norm):
            raise NonFiniteError(f"non-finite gradient norm at step {step} (batch {batch_id})")
    opt.step(cfg.lr_at(step))


def _finish(report: TrainReport, pipeline, start: float, checkpoint_dir) -> TrainReport:
    report.wall_time = time.perf_counter() - start
    if checkpoint_dir is not None and isinstance(pipeline, ConceptPipeline):
        path = Path(checkpoint_dir) / f"phase{report.phase}.ckpt"
        save_checkpoint(pipeline, path)
        report.checkpoint = path.name
    return report


def _maybe_checkpoint(pipeline, cfg: TrainConfig, step: int, checkpoint_dir) -> None:
    if (checkpoint_dir is not None and cfg.checkpoint_every
            and isinstance(pipeline, ConceptPipeline) and (step + 1) % cfg.checkpoint_every == 0):
        save_checkpoint(pipeline, Path(checkpoint_dir) / f"phase{cfg.phase}-step{step + 1}.ckpt")


def _optimizer(params: dict, cfg: TrainConfig) -> Adam | None:
    return Adam(params, lr=cfg.lr) if params else None


# -- phases -------------------------------------------------------------------
def train_phase1(cfg: TrainConfig, lm_corpus: Sequence[Sequence[int]], model,
                 checkpoint_dir=None) -> TrainReport:
    """Causal LM training of the concept model on tokenized pivot text."""
    if cfg.phase != 1:
        raise ConfigError(f"train_phase1 got a phase {cfg.phase} config")
    pipeline = model if isinstance(model, ConceptPipeline) else None
    concept = model.concept if pipeline is not None else model
    concept.set_trainable(not cfg.freeze["concept"])
    data = [list(s) for s in lm_corpus]
    report = TrainReport(1, cfg.seed, fingerprint(data), cfg.to_dict())
    start = time.perf_counter()
    opt = _optimizer(concept.trainable_parameters(), cfg)
    batches = _Batches(len(data), cfg.batch_size, np.random.default_rng(cfg.seed)) if cfg.steps else None
    for step in range(cfg.steps):
        idx = batches.next()
        with _diagnose(step, int(idx[0])):
            loss = lm_loss(concept, [data[i] for i in idx])
        _step(opt, loss, cfg, step, int(idx[0]))
        report.losses.append({"total": float(loss.data), "lm": float(loss.data)})
        _maybe_checkpoint(pipeline, cfg, step, checkpoint_dir)
    concept.set_trainable(True)
    if pipeline is not None and cfg.steps and 1 not in pipeline.trained_phases:
        pipeline.trained_phases.append(1)
    return _finish(report, pipeline, start, checkpoint_dir)


def tokenize_parallel(pipeline: ConceptPipeline, corpus: ParallelCorpus, split: str | None):
    items = corpus.items if split is None else corpus.split(split)
    return [{lang: pipeline.tokenize(it.texts[lang]) for lang in corpus.languages} for it in items]


def train_phase2(cfg: TrainConfig, corpus: ParallelCorpus, pipeline: ConceptPipeline,
                 split: str | None = "train", checkpoint_dir=None) -> TrainReport:
    """Codec training: translation between every ordered language pair plus
    alignment of mean-pooled encodings of parallel sentences."""
    if cfg.phase != 2:
        raise ConfigError(f"train_phase2 got a phase {cfg.phase} config")
    langs = list(corpus.languages)
    if len(langs) < 2:
        raise ConfigError(f"phase 2 needs at least two languages, corpus has {langs}")
    lang_idx = [pipeline.lang_index(l) for l in langs]
    data = tokenize_parallel(pipeline, corpus, split)
    report = TrainReport(2, cfg.seed, fingerprint([[d[l] for l in langs] for d in data]), cfg.to_dict())
    start = time.perf_counter()
    _apply_freeze(pipeline, cfg)
    active = cfg.lambda_translate > 0 or cfg.lambda_align > 0
    opt = _optimizer(pipeline.trainable_parameters(), cfg) if active else None
    rng = np.random.default_rng(cfg.seed)
    batches = _Batches(len(data), cfg.batch_size, rng) if cfg.steps else None
    n_lang = len(langs)
    for step in range(cfg.steps):
        idx = batches.next()
        pairs = rng.integers(n_lang, size=(len(idx), 2))
        batch = [
            (data[i][langs[a]], lang_idx[a], data[i][langs[b]], lang_idx[b])
            for i, (a, b) in zip(idx.tolist(), pairs.tolist())
        ]
        with _diagnose(step, int(idx[0])):
            l_tr, enc_src, src_len = translation_loss(pipeline, batch, return_parts=True)
            enc_tgt, tgt_len = pipeline.encode_batch([t for _, _, t, _ in batch],
                                                     [tl for *_, tl in batch])
            l_al = alignment_loss(mean_pool(enc_src, src_len), mean_pool(enc_tgt, tgt_len),
                                  cfg.lambda_contrast, cfg.margin)
        total = l_tr * cfg.lambda_translate + l_al * cfg.lambda_align
        _step(opt, total, cfg, step, int(idx[0]))
        report.losses.append({
            "total": float(total.data),
            "translate": float(l_tr.data),
            "align": float(l_al.data),
        })
        _maybe_checkpoint(pipeline, cfg, step, checkpoint_dir)
    pipeline.set_trainable(True)
    if cfg.steps and 2 not in pipeline.trained_phases:
        pipeline.trained_phases.append(2)
    return _finish(report, pipeline, start, checkpoint_dir)


def qa_pairs(pipeline: ConceptPipeline, items: Sequence[QaItem], langs: Sequence[str]):
    """(question ids, lang index, answer ids, lang index) for every item and language."""
    out = []
    for it in items:
        for lang in langs:
            if lang not in it.question:
                raise ConfigError(f"QA item {it.meaning_key} has no {lang} realization")
            li = pipeline.lang_index(lang)
            answer = it.options[lang][it.answer]
            out.append((pipeline.tokenize(it.question[lang]), li, pipeline.tokenize(answer), li))
    return out


def train_phase3(cfg: TrainConfig, qa_items: Sequence[QaItem], pipeline: ConceptPipeline,
                 langs: Sequence[str] | None = None, checkpoint_dir=None) -> TrainReport:
    """End-to-end fine-tuning on question -> answer pairs in every language."""
    if cfg.phase != 3:
        raise ConfigError(f"train_phase3 got a phase {cfg.phase} config")
    missing = [p for p in (1, 2) if p not in pipeline.trained_phases]
    if missing:
        raise StateError(f"phase 3 needs phases 1 and 2 first; missing {missing}")
    if langs is None:
        langs = list(pipeline.cfg.languages)
    data = qa_pairs(pipeline, qa_items, langs)
    report = TrainReport(3, cfg.seed, fingerprint([[d[0], d[1], d[2]] for d in data]), cfg.to_dict())
    start = time.perf_counter()
    _apply_freeze(pipeline, cfg)
    opt = _optimizer(pipeline.trainable_parameters(), cfg)
    batches = _Batches(len(data), cfg.batch_size, np.random.default_rng(cfg.seed)) if cfg.steps else None
    for step in range(cfg.steps):
        idx = batches.next()
        with _diagnose(step, int(idx[0])):
            loss = translation_loss(pipeline, [data[i] for i in idx])
        _step(opt, loss, cfg, step, int(idx[0]))
        report.losses.append({"total": float(loss.data), "qa": float(loss.data)})
        _maybe_checkpoint(pipeline, cfg, step, checkpoint_dir)
    pipeline.set_trainable(True)
    if cfg.steps and 3 not in pipeline.trained_phases:
        pipeline.trained_phases.append(3)
    return _finish(report, pipeline, start, checkpoint_dir)


def qa_lm_sequences(items: Sequence[QaItem], tokenizer, lang: str) -> list[list[int]]:
    """Question followed by its answer as one LM sequence."""
    return [tokenizer.encode(it.question[lang] + " " + it.options[lang][it.answer]) for it in items]


def parameter_checksum(module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
