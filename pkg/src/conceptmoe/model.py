"""Language encoder -> concept model -> language decoder.

The concept model is a causal MoE transformer.  In LM mode it embeds token
ids, runs its blocks and projects back through the tied embedding.  In the
pipeline it skips the embedding and transforms the encoder's concept vectors
directly, so language-specific work lives entirely in the codec.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, ContextError, StateError
from .moe import ExpertMixtureLayer, expert_param_count
from .nn import (
    Attention,
    Embedding,
    FeedForward,
    LayerNorm,
    Module,
    causal_mask,
    key_padding_mask,
)
from .numerics import Tensor, add, matmul, no_grad, take_rows, transpose
from .tokenizer import BOS, EOS, PAD, TokenizerModel


LANG_EMBED_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    n_experts: int = 4
    top_k: int = 2
    context_window: int = 128
    vocab_size: int = 1024
    enc_layers: int = 2
    dec_layers: int = 2
    enc_heads: int = 4
    dec_heads: int = 4
    moe_every_k_layers: int = 1
    seed: int = 0
    languages: tuple[str, ...] = ("latn", "cyrl", "grek")

    def __post_init__(self):
        object.__setattr__(self, "languages", tuple(self.languages))
        self.validate()

    def validate(self) -> None:
        positive = ("d_model", "n_heads", "ffn_dim", "n_experts", "top_k", "context_window",
                    "vocab_size", "enc_heads", "dec_heads", "moe_every_k_layers")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_layers", "enc_layers", "dec_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for heads in ("n_heads", "enc_heads", "dec_heads"):
            h = getattr(self, heads)
            if self.d_model % h:
                raise ConfigError(f"d_model {self.d_model} not divisible by {heads}={h}")
            if (self.d_model // h) % 2:
                raise ConfigError(f"head width for {heads} must be even for rotary encoding")
        if self.top_k > self.n_experts:
            raise ConfigError(f"top_k {self.top_k} exceeds n_experts {self.n_experts}")
        if not self.languages or len(set(self.languages)) != len(self.languages):
            raise ConfigError("languages must be a nonempty list of distinct ids")

    def is_moe_layer(self, i: int) -> bool:
        return i % self.moe_every_k_layers == self.moe_every_k_layers - 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["languages"] = list(self.languages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def paper_config() -> ModelConfig:
    """Published production sizes; for shape and parameter-count checks only.

    Codec depth, vocabulary and language count are not published and are
    set to 6 layers, 32000 pieces and 50 languages.
    """
    return ModelConfig(
        d_model=1024, n_layers=32, n_heads=32, ffn_dim=14336, n_experts=8, top_k=2,
        context_window=32768, vocab_size=32000, enc_layers=6, dec_layers=6,
        enc_heads=16, dec_heads=16, moe_every_k_layers=1, seed=0,
        languages=tuple(f"lang{i:02d}" for i in range(50)),
    )


# -- blocks -------------------------------------------------------------------
class ConceptBlock(Module):
    def __init__(self, cfg: ModelConfig, i: int, rng, meta: bool):
        scale = (2 * max(cfg.n_layers, 1)) ** -0.5
        d = cfg.d_model
        self.ln1 = LayerNorm(d, meta)
        self.attn = Attention(d, cfg.n_heads, rng, meta, use_rope=True, out_scale=scale)
        self.ln2 = LayerNorm(d, meta)
        if cfg.is_moe_layer(i):
            self.ffn = ExpertMixtureLayer(d, cfg.ffn_dim, cfg.n_experts, cfg.top_k, rng, meta, scale)
        else:
            self.ffn = FeedForward(d, cfg.ffn_dim, rng, meta, scale)

    def __call__(self, x, mask, token_mask=None):
        x = add(x, self.attn(self.ln1(x), mask=mask))
        h = self.ln2(x)
        if isinstance(self.ffn, ExpertMixtureLayer):
            return add(x, self.ffn(h, token_mask))
        return add(x, self.ffn(h))


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, meta: bool):
        scale = (2 * max(cfg.enc_layers, 1)) ** -0.5
        d = cfg.d_model
        self.ln1 = LayerNorm(d, meta)
        self.attn = Attention(d, cfg.enc_heads, rng, meta, use_rope=True, out_scale=scale)
        self.ln2 = LayerNorm(d, meta)
        self.ffn = FeedForward(d, cfg.ffn_dim, rng, meta, scale)

    def __call__(self, x, mask):
        x = add(x, self.attn(self.ln1(x), mask=mask))
        return add(x, self.ffn(self.ln2(x)))


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, meta: bool):
        scale = (3 * max(cfg.dec_layers, 1)) ** -0.5
        d = cfg.d_model
        self.ln1 = LayerNorm(d, meta)
        self.self_attn = Attention(d, cfg.dec_heads, rng, meta, use_rope=True, out_scale=scale)
        self.ln2 = LayerNorm(d, meta)
        self.cross_attn = Attention(d, cfg.dec_heads, rng, meta, use_rope=False, out_scale=scale)
        self.ln3 = LayerNorm(d, meta)
        self.ffn = FeedForward(d, cfg.ffn_dim, rng, meta, scale)

    def __call__(self, x, memory, self_mask, cross_mask):
        x = add(x, self.self_attn(self.ln1(x), mask=self_mask))
        x = add(x, self.cross_attn(self.ln2(x), memory=memory, mask=cross_mask))
        return add(x, self.ffn(self.ln3(x)))


def _tied_logits(h: Tensor, table: Tensor) -> Tensor:
    return matmul(h, transpose(table, (1, 0))) * (table.shape[1] ** -0.5)


def _lengths_mask(lengths, t: int) -> np.ndarray | None:
    if lengths is None:
        return None
    return np.arange(t)[None, :] < np.asarray(lengths)[:, None]


# -- submodels ----------------------------------------------------------------
class ConceptModel(Module):
    def __init__(self, cfg: ModelConfig, rng=None, meta: bool = False):
        self.cfg = cfg
        self.embed = Embedding(cfg.vocab_size, cfg.d_model, rng, meta)
        self.blocks = [ConceptBlock(cfg, i, rng, meta) for i in range(cfg.n_layers)]
        self.norm = LayerNorm(cfg.d_model, meta)

    def transform(self, vectors, lengths=None, final_norm: bool = True) -> Tensor:
        """Causal blocks over a (B, T, d) concept sequence."""
        x = vectors if isinstance(vectors, Tensor) else Tensor(vectors)
        if x.shape[-1] != self.cfg.d_model:
            raise ConfigError(f"concept width {x.shape[-1]} != d_model {self.cfg.d_model}")
        t = x.shape[1]
        if t > self.cfg.context_window:
            raise ContextError(f"sequence of {t} exceeds context window {self.cfg.context_window}")
        mask = causal_mask(t)
        tok = _lengths_mask(lengths, t)
        for blk in self.blocks:
            x = blk(x, mask, tok)
        return self.norm(x) if final_norm else x

    def hidden(self, token_ids, lengths=None) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        _check_ids(ids, self.cfg)
        return self.transform(self.embed(ids), lengths)

    def lm_forward(self, token_ids, lengths=None) -> Tensor:
        """Next-token logits (B, T, V)."""
        return _tied_logits(self.hidden(token_ids, lengths), self.embed.weight)


def _check_ids(ids: np.ndarray, cfg: ModelConfig) -> None:
    if ids.ndim != 2:
        raise ConfigError(f"token ids must be (B, T), got shape {ids.shape}")
    if ids.shape[1] > cfg.context_window:
        raise ContextError(f"sequence of {ids.shape[1]} exceeds context window {cfg.context_window}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id outside [0, {cfg.vocab_size})")


class LanguageEncoder(Module):
    """Bidirectional encoder from token ids to concept vectors."""

    def __init__(self, cfg: ModelConfig, rng=None, meta: bool = False):
        self.cfg = cfg
        self.embed = Embedding(cfg.vocab_size, cfg.d_model, rng, meta)
        # small so that mean-pooled encodings are not dominated by the language
        self.lang_embed = Embedding(len(cfg.languages), cfg.d_model, rng, meta, std=LANG_EMBED_STD)
        self.blocks = [EncoderBlock(cfg, rng, meta) for _ in range(cfg.enc_layers)]
        self.norm = LayerNorm(cfg.d_model, meta)

    def __call__(self, token_ids, lang_ids, lengths=None) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        _check_ids(ids, self.cfg)
        b, t = ids.shape
        lang = np.asarray(lang_ids, dtype=np.int64).reshape(b, 1)
        x = add(self.embed(ids), self.lang_embed(lang))
        mask = None if lengths is None else key_padding_mask(lengths, t)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x)


class LanguageDecoder(Module):
    """Causal decoder with cross-attention onto concept vectors."""

    def __init__(self, cfg: ModelConfig, rng=None, meta: bool = False):
        self.cfg = cfg
        self.embed = Embedding(cfg.vocab_size, cfg.d_model, rng, meta)
        self.lang_embed = Embedding(len(cfg.languages), cfg.d_model, rng, meta, std=LANG_EMBED_STD)
        self.blocks = [DecoderBlock(cfg, rng, meta) for _ in range(cfg.dec_layers)]
        self.norm = LayerNorm(cfg.d_model, meta)

    def __call__(self, token_ids, lang_ids, memory: Tensor, memory_lengths=None) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        _check_ids(ids, self.cfg)
        if memory.shape[1] == 0:
            raise ConfigError("decoder needs a nonempty concept sequence")
        b, t = ids.shape
        lang = np.asarray(lang_ids, dtype=np.int64).reshape(b, 1)
        x = add(self.embed(ids), self.lang_embed(lang))
        self_mask = causal_mask(t)
        cross = None
        if memory_lengths is not None:
            cross = key_padding_mask(memory_lengths, memory.shape[1])
        for blk in self.blocks:
            x = blk(x, memory, self_mask, cross)
        return _tied_logits(self.norm(x), self.embed.weight)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    t = int(lengths.max()) if len(seqs) else 0
    out = np.full((len(seqs), t), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


class ConceptPipeline(Module):
    """Tokenizer + encoder + concept model + decoder sharing one config."""

    def __init__(self, cfg: ModelConfig, tokenizer: TokenizerModel | None = None,
                 meta: bool = False):
        if tokenizer is not None and tokenizer.vocab_size != cfg.vocab_size:
            raise ConfigError(
                f"tokenizer has {tokenizer.vocab_size} ids but config vocab_size is {cfg.vocab_size}"
            )
        self.cfg = cfg
        self.tokenizer = tokenizer
        if meta:
            r_enc = r_con = r_dec = None
        else:
            r_enc, r_con, r_dec = (np.random.default_rng(s)
                                   for s in np.random.SeedSequence(cfg.seed).spawn(3))
        self.encoder = LanguageEncoder(cfg, r_enc, meta)
        self.concept = ConceptModel(cfg, r_con, meta)
        self.decoder = LanguageDecoder(cfg, r_dec, meta)
        self.trained_phases: list[int] = []

    # -- language bookkeeping ---------------------------------------------
    def lang_index(self, lang: str) -> int:
        try:
            return self.cfg.languages.index(lang)
        except ValueError:
            raise ConfigError(f"unknown language {lang!r}; known: {list(self.cfg.languages)}") from None

    def tokenize(self, text: str) -> list[int]:
        if self.tokenizer is None:
            raise StateError("pipeline has no tokenizer")
        return self.tokenizer.encode(text)

    # -- batched paths used by training -----------------------------------
    def encode_batch(self, seqs: Sequence[Sequence[int]], langs: Sequence[int]):
        ids, lengths = pad_batch(seqs)
        return self.encoder(ids, langs, lengths), lengths

    def concepts_batch(self, seqs, langs):
        enc, lengths = self.encode_batch(seqs, langs)
        return enc, self.concept.transform(enc, lengths), lengths

    def decoder_logits(self, concepts: Tensor, concept_lengths, targets: Sequence[Sequence[int]],
                       langs: Sequence[int]):
        """Teacher-forced logits for ``[BOS] + target``; returns (logits, gold, mask)."""
        inputs = [[BOS] + list(t) for t in targets]
        gold = [list(t) + [EOS] for t in targets]
        ids, _ = pad_batch(inputs)
        gold_ids, lengths = pad_batch(gold, pad=-1)
        return self.decoder(ids, langs, concepts, concept_lengths), gold_ids, lengths

    # -- single-sequence inference ----------------------------------------
    def encode_language(self, token_ids: Sequence[int], lang: str) -> Tensor:
        """Concept vectors (T, d) for one sentence."""
        li = self.lang_index(lang)
        ids = np.asarray(token_ids, dtype=np.int64).reshape(1, -1)
        out = self.encoder(ids, [li])
        return out[0]

    def concept_transform(self, vectors, final_norm: bool = True) -> Tensor:
        v = vectors if isinstance(vectors, Tensor) else Tensor(vectors)
        if v.ndim == 2:
            return self.concept.transform(v.reshape(1, *v.shape), final_norm=final_norm)[0]
        return self.concept.transform(v, final_norm=final_norm)

    def decode_language(self, concept_vectors, target_lang: str, prefix_ids: Sequence[int]) -> Tensor:
        """Logits (V,) for the token following ``prefix_ids``."""
        li = self.lang_index(target_lang)
        c = concept_vectors if isinstance(concept_vectors, Tensor) else Tensor(concept_vectors)
        if c.ndim != 2 or c.shape[0] == 0:
            raise ConfigError("decode_language needs a nonempty (T, d) concept sequence")
        if len(prefix_ids) + 1 > self.cfg.context_window:
            raise ContextError("prefix exceeds context window")
        ids = np.asarray([BOS] + list(prefix_ids), dtype=np.int64).reshape(1, -1)
        logits = self.decoder(ids, [li], c.reshape(1, *c.shape))
        return logits[0, -1]

    def generate(self, text: str, source_lang: str, target_lang: str, max_len: int,
                 mode: str = "greedy") -> str:
        if mode != "greedy":
            raise ConfigError(f"unsupported decoding mode {mode!r}")
        if 2 not in self.trained_phases:
            raise StateError("generate needs a pipeline whose codec has been trained (phase 2)")
        if max_len > self.cfg.context_window:
            raise ContextError(f"max_len {max_len} exceeds context window")
        if max_len <= 0:
            return ""
        self.lang_index(target_lang)
        with no_grad():
            concepts = self.concept_transform(self.encode_language(self.tokenize(text), source_lang))
            out: list[int] = []
            for _ in range(max_len):
                nxt = int(np.argmax(self.decode_language(concepts, target_lang, out).data))
                if nxt == EOS:
                    break
                out.append(nxt)
        return self.tokenizer.decode(out)


# -- parameter accounting -----------------------------------------------------
def count_params(cfg: ModelConfig) -> tuple[int, int]:
    """(total, active-per-token) parameters of a full pipeline, by formula."""
    b = param_breakdown(cfg)
    return b["total"], b["active"]


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    d, f, v = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    n_lang = len(cfg.languages)
    ln = 2 * d
    attn = 4 * d * d
    ffn = expert_param_count(d, f)
    n_moe = sum(cfg.is_moe_layer(i) for i in range(cfg.n_layers))
    n_dense = cfg.n_layers - n_moe
    gate = d * cfg.n_experts
    concept_shared = v * d + cfg.n_layers * (2 * ln + attn) + n_dense * ffn + ln
    encoder = v * d + n_lang * d + cfg.enc_layers * (2 * ln + attn + ffn) + ln
    decoder = v * d + n_lang * d + cfg.dec_layers * (3 * ln + 2 * attn + ffn) + ln
    experts_total = n_moe * cfg.n_experts * ffn
    experts_active = n_moe * cfg.top_k * ffn
    gates = n_moe * gate
    shared = concept_shared + encoder + decoder
    return {
        "encoder": encoder,
        "concept_shared": concept_shared,
        "decoder": decoder,
        "gates": gates,
        "experts_total": experts_total,
        "experts_active": experts_active,
        "total": shared + gates + experts_total,
        "active": shared + gates + experts_active,
    }


# -- checkpoints --------------------------------------------------------------
CHECKPOINT_MAGIC = b"CMOECKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(pipeline: ConceptPipeline, path, extra: dict | None = None) -> str:
    """Write the pipeline; returns the payload SHA-256."""
    params = pipeline.parameters()
    entries = []
    chunks = []
    offset = 0
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"refusing to save non-finite parameter {name!r}")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": pipeline.cfg.to_dict(),
        "trained_phases": list(pipeline.trained_phases),
        "tokenizer": pipeline.tokenizer.to_dict() if pipeline.tokenizer is not None else None,
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_sha256": digest,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return digest


def read_checkpoint_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
    return header, len(CHECKPOINT_MAGIC) + 4 + hlen


def load_checkpoint(path, expected: ModelConfig | None = None) -> ConceptPipeline:
    header, start = read_checkpoint_header(path)
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version: expected {CHECKPOINT_VERSION}, found {header.get('format_version')}"
        )
    cfg = ModelConfig.from_dict(header["config"])
    if expected is not None and expected != cfg:
        diffs = [
            f"{k}: expected {getattr(expected, k)!r}, found {getattr(cfg, k)!r}"
            for k in expected.to_dict() if getattr(expected, k) != getattr(cfg, k)
        ]
        raise CheckpointError("config mismatch: " + "; ".join(diffs))
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"payload size: expected {header['payload_bytes']}, found {len(payload)}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch")
    tok = header.get("tokenizer")
    tokenizer = TokenizerModel.from_dict(tok) if tok is not None else None
    pipe = ConceptPipeline(cfg, tokenizer, meta=True)
    params = pipe.parameters()
    names = [e["name"] for e in header["tensors"]]
    if set(names) != set(params):
        raise CheckpointError(
            f"tensor names: expected {len(params)} model tensors, found {len(names)} "
            f"(missing {sorted(set(params) - set(names))[:3]}, extra {sorted(set(names) - set(params))[:3]})"
        )
    for e in header["tensors"]:
        p = params[e["name"]]
        shape = tuple(e["shape"])
        if shape != p.shape:
            raise CheckpointError(f"{e['name']}: expected shape {p.shape}, found {shape}")
        n = int(np.prod(shape)) * 8
        arr = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=e["offset"]).reshape(shape)
        p.data = arr.astype(np.float64, copy=True)
    pipe.trained_phases = list(header.get("trained_phases", []))
    return pipe
