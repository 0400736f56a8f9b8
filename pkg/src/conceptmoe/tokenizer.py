"""Byte-level BPE tokenizer: training, vocabulary merging, fertility.

Ids 0-3 are the special tokens, ids 4-259 the 256 single bytes, and every
later id a learned merge.  Text is split into chunks of leading whitespace
plus a non-space run, so concatenating chunks always restores the input and
merges never cross a word boundary.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError

FORMAT_VERSION = 1
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = range(4)
N_SPECIAL = len(SPECIAL_TOKENS)
N_BYTES = 256

_CHUNK_RE = re.compile(r"\s*\S+|\s+")
_HEX_RUN_RE = re.compile(r"^(?:<0x[0-9A-F]{2}>)+$")


def split_chunks(text: str) -> list[str]:
    return _CHUNK_RE.findall(text)


def piece_to_str(piece: bytes, is_byte: bool = False) -> str:
    """Printable form of a piece; raw bytes use ``<0xNN>`` runs."""
    if not is_byte:
        try:
            s = piece.decode("utf-8")
        except UnicodeDecodeError:
            s = None
        if s is not None and not _HEX_RUN_RE.match(s):
            return s
    return "".join(f"<0x{b:02X}>" for b in piece)


def str_to_piece(s: str) -> bytes:
    if _HEX_RUN_RE.match(s):
        return bytes(int(s[i + 3 : i + 5], 16) for i in range(0, len(s), 6))
    return s.encode("utf-8")


@dataclass
class TokenizerModel:
    """Ordered BPE vocabulary.

    ``pieces[i]`` is the byte string of id ``N_SPECIAL + i``; the first 256
    are the single bytes.  ``merges[j]`` gives the two ids whose
    concatenation produced learned piece ``N_SPECIAL + 256 + j``.
    """

    pieces: list[bytes]
    merges: list[tuple[int, int]]
    byte_fallback: bool = True
    special_tokens: tuple[str, ...] = SPECIAL_TOKENS
    version: int = FORMAT_VERSION
    algorithm: str = "bpe"
    _table: object = field(default=None, init=False, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.pieces) != N_BYTES + len(self.merges):
            raise ConfigError("piece list and merge list lengths disagree")
        if len(set(self.pieces)) != len(self.pieces):
            raise ConfigError("duplicate piece strings")
        first = N_SPECIAL + N_BYTES
        self._table = kernels.MergeTable(
            [a for a, _ in self.merges],
            [b for _, b in self.merges],
            list(range(first, first + len(self.merges))),
        )

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + len(self.pieces)

    def piece(self, token_id: int) -> bytes:
        if token_id < 0 or token_id >= self.vocab_size:
            raise IndexError(f"token id {token_id} outside vocabulary of {self.vocab_size}")
        if token_id < N_SPECIAL:
            return b""
        return self.pieces[token_id - N_SPECIAL]

    def piece_id(self, piece: bytes) -> int | None:
        try:
            return self.pieces.index(piece) + N_SPECIAL
        except ValueError:
            return None

    # -- encode / decode --------------------------------------------------
    def _encode_chunk(self, chunk: str) -> list[int]:
        ids = self._cache.get(chunk)
        if ids is None:
            raw = [b + N_SPECIAL for b in chunk.encode("utf-8")]
            ids = self._table.encode(raw)
            if len(self._cache) < 200_000:
                self._cache[chunk] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for chunk in split_chunks(text):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        buf = bytearray()
        for t in ids:
            buf += self.piece(int(t))
        return buf.decode("utf-8", errors="replace")

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        entries = []
        for i, p in enumerate(self.pieces):
            entry = {"piece": piece_to_str(p, is_byte=i < N_BYTES), "rank": i}
            if i >= N_BYTES:
                entry["merge"] = list(self.merges[i - N_BYTES])
            entries.append(entry)
        return {
            "version": self.version,
            "algorithm": self.algorithm,
            "special_tokens": list(self.special_tokens),
            "byte_fallback": self.byte_fallback,
            "pieces": entries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, indent=None)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TokenizerModel":
        if d.get("version") != FORMAT_VERSION:
            raise ConfigError(
                f"tokenizer format version {d.get('version')!r}, expected {FORMAT_VERSION}"
            )
        if d.get("algorithm") != "bpe":
            raise ConfigError(f"unsupported tokenizer algorithm {d.get('algorithm')!r}")
        entries = sorted(d["pieces"], key=lambda e: e["rank"])
        pieces = [str_to_piece(e["piece"]) for e in entries]
        merges = [tuple(e["merge"]) for e in entries[N_BYTES:]]
        return cls(
            pieces=pieces,
            merges=merges,
            byte_fallback=bool(d["byte_fallback"]),
            special_tokens=tuple(d["special_tokens"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "TokenizerModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def byte_alphabet() -> list[bytes]:
    return [bytes([b]) for b in range(N_BYTES)]


def train(
    corpus: Sequence[str], target_vocab_size: int, algorithm: str = "bpe"
) -> TokenizerModel:
    """Greedy byte-pair merging.

    ``target_vocab_size`` counts the 256 bytes plus learned merges (special
    tokens are extra).  Each round merges the most frequent adjacent pair,
    ties going to the lexicographically smallest ``(left, right)`` byte
    strings; training stops early once no pair occurs twice.
    """
    if algorithm != "bpe":
        raise ConfigError(f"unsupported algorithm {algorithm!r}; only 'bpe' is implemented")
    if not corpus:
        raise ConfigError("tokenizer corpus is empty")
    if target_vocab_size < N_BYTES:
        raise ConfigError(
            f"target vocab size {target_vocab_size} is smaller than the {N_BYTES}-byte alphabet"
        )
    counts: Counter[str] = Counter()
    for doc in corpus:
        counts.update(split_chunks(doc))
    words = sorted(counts.items(), key=lambda kv: kv[0].encode("utf-8"))
    seq_list: list[int] = []
    freq_list: list[int] = []
    for w, c in words:
        raw = w.encode("utf-8")
        seq_list.extend(b + N_SPECIAL for b in raw)
        seq_list.append(kernels.SEP)
        freq_list.extend([c] * (len(raw) + 1))
    seq = np.asarray(seq_list, dtype=np.int64)
    freq = np.asarray(freq_list, dtype=np.int64)
    n = seq.size

    pieces = byte_alphabet()
    merges: list[tuple[int, int]] = []
    while len(pieces) < target_vocab_size:
        left, right, cnt = kernels.count_pairs(seq[:n], freq[:n])
        if cnt.size == 0:
            break
        best = int(cnt.max())
        if best < 2:
            break
        cand = np.nonzero(cnt == best)[0]
        a, b = min(
            ((int(left[i]), int(right[i])) for i in cand),
            key=lambda ab: (pieces[ab[0] - N_SPECIAL], pieces[ab[1] - N_SPECIAL]),
        )
        new_id = N_SPECIAL + len(pieces)
        pieces.append(pieces[a - N_SPECIAL] + pieces[b - N_SPECIAL])
        merges.append((a, b))
        n = kernels.merge_pair(seq[:n], freq[:n], a, b, new_id)
    return TokenizerModel(pieces=pieces, merges=merges)


def merge_vocabs(base: TokenizerModel, extension: TokenizerModel) -> TokenizerModel:
    """Base pieces first, then extension pieces the base lacks.

    Extension merge rules are re-pointed at merged ids; a rule whose output
    already exists in the base is dropped, so base segmentation wins.
    """
    if tuple(base.special_tokens) != tuple(extension.special_tokens):
        raise ConfigError(
            f"special tokens differ: {base.special_tokens} vs {extension.special_tokens}"
        )
    if base.byte_fallback != extension.byte_fallback:
        raise ConfigError("byte_fallback setting differs between tokenizers")
    if base.pieces[:N_BYTES] != extension.pieces[:N_BYTES]:
        raise ConfigError("byte alphabets differ")
    pieces = list(base.pieces)
    merges = list(base.merges)
    index = {p: i + N_SPECIAL for i, p in enumerate(pieces)}
    for j, (a, b) in enumerate(extension.merges):
        p = extension.pieces[N_BYTES + j]
        if p in index:
            continue
        la = index[extension.piece(a)]
        lb = index[extension.piece(b)]
        index[p] = N_SPECIAL + len(pieces)
        pieces.append(p)
        merges.append((la, lb))
    return TokenizerModel(
        pieces=pieces,
        merges=merges,
        byte_fallback=base.byte_fallback,
        special_tokens=base.special_tokens,
    )


@dataclass
class FertilityRow:
    lang: str
    tokens: int
    words: int
    fertility: float | None
    flagged: bool = False
    note: str = ""


@dataclass
class FertilityReport:
    rows: list[FertilityRow]
    reference: str = ""

    def row(self, lang: str) -> FertilityRow:
        for r in self.rows:
            if r.lang == lang:
                return r
        raise KeyError(lang)

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "rows": [r.__dict__.copy() for r in self.rows],
        }

    def to_text(self) -> str:
        lines = [f"{'lang':<8} {'tokens':>8} {'words':>8} {'fertility':>10}"]
        for r in self.rows:
            fert = "FLAGGED" if r.fertility is None else f"{r.fertility:.4f}"
            lines.append(f"{r.lang:<8} {r.tokens:>8d} {r.words:>8d} {fert:>10}")
        return "\n".join(lines)


def fertility(
    model: TokenizerModel,
    texts_by_lang: Mapping[str, str | Sequence[str]],
    reference: str = "",
) -> FertilityReport:
    """Tokens per whitespace-delimited word, per language."""
    rows = []
    for lang in sorted(texts_by_lang):
        texts = texts_by_lang[lang]
        if isinstance(texts, str):
            texts = [texts]
        n_tok = sum(len(model.encode(t)) for t in texts)
        n_words = sum(len(t.split()) for t in texts)
        if n_words == 0:
            rows.append(FertilityRow(lang, n_tok, 0, None, True, "no words in text"))
            continue
        rows.append(FertilityRow(lang, n_tok, n_words, n_tok / n_words))
    return FertilityReport(rows=rows, reference=reference)


def token_ratio(a: FertilityReport, b: FertilityReport) -> dict[str, float]:
    """Per-language token count of ``a`` over ``b``."""
    out = {}
    for ra in a.rows:
        rb = b.row(ra.lang)
        out[ra.lang] = ra.tokens / rb.tokens if rb.tokens else math.nan
    return out
