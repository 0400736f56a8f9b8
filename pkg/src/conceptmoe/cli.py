"""Command-line entry point: ``conceptmoe <command> ...``.

Exit codes: 0 success, 1 validation or runtime failure (one line
``error: <Kind>: <reason>`` on stderr), 2 usage error.  Every command that
produces an artifact writes it under ``--out`` together with a manifest
recording inputs, seeds, effective config and library versions.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import corpus as C
from . import tokenizer as T
from .errors import ConfigError
from .evaluation import (
    LanguageModelPolicy,
    alignment_report,
    alignment_table,
    consistency_eval,
    fertility_eval,
    perplexity,
)
from .kernels import BACKEND_NAME
from .model import ModelConfig, count_params, load_checkpoint, paper_config, param_breakdown, save_checkpoint
from .training import TrainConfig, train_phase1, train_phase2, train_phase3
from .workflow import DESK_RECIPES, lm_sequences, load_world, new_pipeline


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, ensure_ascii=False)
        fh.write("\n")


def write_manifest(path, argv: Sequence[str], inputs: Sequence, config: dict, outputs: Sequence) -> None:
    """Inputs and outputs are recorded by content hash, never by timestamp."""
    manifest = {
        "command": list(argv),
        "inputs": {str(p): _sha256_file(p) for p in inputs if p is not None and Path(p).is_file()},
        "config": config,
        "config_sha256": hashlib.sha256(_canon(config).encode()).hexdigest(),
        "outputs": {Path(p).name: _sha256_file(p) for p in outputs},
        "versions": {
            "conceptmoe": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "kernels": BACKEND_NAME,
        },
    }
    write_json(path, manifest)


def _verbose(args) -> bool:
    return bool(getattr(args, "verbose", False)) or os.environ.get("CONCEPTMOE_VERBOSE") == "1"


def _log(args, msg: str) -> None:
    if _verbose(args):
        print(msg, file=sys.stderr)


def _texts_from_jsonl(path, langs=None, split=None) -> dict[str, list[str]]:
    by_lang: dict[str, list[str]] = {}
    for rec in C.read_jsonl(path):
        if "text" not in rec:
            raise ConfigError(f"{path}: records need a 'text' field")
        lang = rec.get("lang", "text")
        if langs and lang not in langs:
            continue
        if split and rec.get("split") != split:
            continue
        by_lang.setdefault(lang, []).append(rec["text"])
    if not by_lang:
        raise ConfigError(f"{path}: no matching text records")
    return by_lang


def _sibling_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# -- tokenizer ------------------------------------------------------------------
def cmd_tokenizer_train(args) -> int:
    texts = _texts_from_jsonl(args.corpus, args.lang, args.split)
    docs = [t for lang in sorted(texts) for t in texts[lang]]
    model = T.train(docs, args.vocab_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    cfg = {"vocab_size": args.vocab_size, "langs": args.lang, "split": args.split, "algorithm": "bpe"}
    write_manifest(_sibling_manifest(out), args.argv, [args.corpus], cfg, [out])
    print(f"trained {model.vocab_size} pieces ({len(model.merges)} merges) -> {out}")
    return 0


def cmd_tokenizer_merge(args) -> int:
    merged = T.merge_vocabs(T.TokenizerModel.load(args.base), T.TokenizerModel.load(args.ext))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    merged.save(out)
    write_manifest(_sibling_manifest(out), args.argv, [args.base, args.ext], {}, [out])
    print(f"merged vocabulary has {merged.vocab_size} pieces -> {out}")
    return 0


def _load_tokenizer(path) -> T.TokenizerModel:
    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(8)
    if head == b"CMOECKPT":
        tok = load_checkpoint(p).tokenizer
        if tok is None:
            raise ConfigError(f"{p}: checkpoint carries no tokenizer")
        return tok
    return T.TokenizerModel.load(p)


def cmd_tokenizer_fertility(args) -> int:
    texts = _texts_from_jsonl(args.corpus, args.lang, args.split)
    model = _load_tokenizer(args.model)
    compare = _load_tokenizer(args.compare) if args.compare else None
    result = fertility_eval(model, texts, compare, reference=Path(args.corpus).name)
    print(result.to_text())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_json(out, result.to_dict())
        write_manifest(_sibling_manifest(out), args.argv, [args.model, args.compare, args.corpus],
                       {"langs": args.lang, "split": args.split}, [out])
    return 0


# -- corpus ---------------------------------------------------------------------
def cmd_corpus_generate(args) -> int:
    if args.langs < 2:
        raise ConfigError("--langs must be at least 2")
    specs = C.make_languages(args.langs)
    kb = C.generate_kb(args.seed, args.statements)
    parallel = C.build_parallel_corpus(kb, specs, (0.8, 0.1, 0.1), args.seed)
    qa = C.build_qa_corpus(kb, specs, min(args.qa_items, len(kb)), args.seed)
    out = Path(args.out)
    files = C.write_world(out, specs, parallel, qa)
    cfg = {"langs": args.langs, "statements": args.statements, "qa_items": args.qa_items,
           "seed": args.seed, "split_ratios": [0.8, 0.1, 0.1]}
    write_json(out / "config.json", cfg)
    write_manifest(out / "manifest.json", args.argv, [], cfg,
                   [out / f for f in files.values()] + [out / "config.json"])
    print(f"{len(kb)} statements x {args.langs} languages, {len(qa)} QA items -> {out}")
    return 0


# -- training -------------------------------------------------------------------
def _effective_config(args) -> dict:
    cfg: dict = {"model": {}, "train": {}, "data": {"max_lm_tokens": 50000, "lm_source": "statements"}}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        for k in cfg:
            cfg[k].update(loaded.get(k, {}))
    train = {**DESK_RECIPES.get(args.phase, {}), **cfg["train"]}
    for flag in ("steps", "lr", "batch_size", "seed"):
        val = getattr(args, flag)
        if val is not None:
            train[flag] = val
    train["phase"] = args.phase
    cfg["train"] = train
    return cfg


def cmd_train(args) -> int:
    if args.phase not in (1, 2, 3):
        raise ConfigError(f"invalid phase {args.phase}; expected 1, 2 or 3")
    cfg = _effective_config(args)
    tc = TrainConfig.from_dict(cfg["train"])
    world = load_world(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [Path(args.corpus) / "languages.json", Path(args.corpus) / "parallel.jsonl",
              Path(args.corpus) / "qa.jsonl", args.init, args.tokenizer, args.config]
    if args.init:
        pipe = load_checkpoint(args.init)
    elif args.phase == 1:
        if not args.tokenizer:
            raise ConfigError("phase 1 without --init needs --tokenizer")
        pipe = new_pipeline(T.TokenizerModel.load(args.tokenizer), world.languages, **cfg["model"])
    else:
        raise ConfigError(f"phase {args.phase} needs --init <checkpoint from the previous phase>")
    cfg["model"] = pipe.cfg.to_dict()
    _log(args, f"phase {args.phase}: {tc.steps} steps")
    if args.phase == 1:
        data = lm_sequences(world, pipe.tokenizer, cfg["data"]["lm_source"], cfg["data"].get("max_lm_tokens"))
        report = train_phase1(tc, data, pipe, checkpoint_dir=out)
    elif args.phase == 2:
        report = train_phase2(tc, world.parallel, pipe, checkpoint_dir=out)
    else:
        if not world.qa:
            raise ConfigError(f"{args.corpus} has no qa.jsonl")
        report = train_phase3(tc, world.qa, pipe, world.languages, checkpoint_dir=out)
    write_json(out / "config.json", cfg)
    write_json(out / "report.json", report.to_dict())
    (out / "losses.txt").write_text(report.to_text(every=max(1, tc.steps // 50)), encoding="utf-8")
    write_json(out / "timing.json", {"wall_time_seconds": report.wall_time})
    outputs = [out / "config.json", out / "report.json", out / "losses.txt"]
    if report.checkpoint:
        outputs.append(out / report.checkpoint)
    write_manifest(out / "manifest.json", args.argv, inputs, cfg, outputs)
    final = report.losses[-1]["total"] if report.losses else float("nan")
    print(f"phase {args.phase}: {report.steps} steps, final loss {final:.4f} -> {out}")
    return 0


# -- evaluation -----------------------------------------------------------------
def cmd_eval(args) -> int:
    world = load_world(args.corpus)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    inputs = [args.model, Path(args.corpus) / "parallel.jsonl", Path(args.corpus) / "qa.jsonl"]
    params = {"metric": args.metric, "split": args.split, "langs": args.lang}
    langs = args.lang or world.languages
    if args.metric == "fertility":
        tok = _load_tokenizer(args.model)
        compare = _load_tokenizer(args.compare) if args.compare else None
        texts = {l: world.parallel.texts(l, args.split) for l in langs}
        result = fertility_eval(tok, texts, compare, reference=f"{Path(args.corpus).name}:{args.split}")
        report, text = result.to_dict(), result.to_text()
        inputs.append(args.compare)
    else:
        pipe = load_checkpoint(args.model)
        if args.metric == "perplexity":
            lang = langs[0]
            seqs = [pipe.tokenize(t) for t in world.parallel.texts(lang, args.split)]
            ppl = perplexity(pipe, seqs)
            report = {"lang": lang, "split": args.split, "sequences": len(seqs), "perplexity": ppl}
            text = f"perplexity[{lang}, {args.split}] = {ppl:.4f}\n"
        elif args.metric == "alignment":
            scores = alignment_report(pipe, world.parallel, args.split, args.pairs)
            report = {"split": args.split, "scores": [s.to_dict() for s in scores]}
            text = alignment_table(scores)
        else:
            items = world.qa[: args.items] if args.items else world.qa
            if args.baseline:
                policy = LanguageModelPolicy(pipe.concept, pipe.tokenizer)
                rep = consistency_eval(policy, items, langs)
            else:
                rep = consistency_eval(pipe, items, langs)
            report, text = rep.to_dict(), rep.to_text()
            report["policy"] = "language-model" if args.baseline else "pipeline"
    write_json(out, report)
    write_manifest(_sibling_manifest(out), args.argv, inputs, params, [out])
    print(text, end="" if text.endswith("\n") else "\n")
    return 0


def cmd_generate(args) -> int:
    pipe = load_checkpoint(args.model)
    text = pipe.generate(args.text, args.source, args.target, args.max_len)
    print(text)
    return 0


def cmd_params(args) -> int:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            d = json.load(fh)
        cfg = ModelConfig.from_dict(d.get("model", d))
    elif args.preset == "paper":
        cfg = paper_config()
    else:
        cfg = ModelConfig()
    b = param_breakdown(cfg)
    total, active = count_params(cfg)
    lines = [f"{k:<16} {v:>16,d}" for k, v in b.items()]
    if args.enumerate:
        from .model import ConceptPipeline

        pipe = ConceptPipeline(cfg, meta=True)
        enum_total = pipe.num_parameters()
        lines.append(f"{'enumerated':<16} {enum_total:>16,d}")
        b["enumerated_total"] = enum_total
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_json(out, {"config": cfg.to_dict(), "counts": b, "total": total, "active": active})
    return 0


# -- parser -----------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="conceptmoe", description="Desk-scale concept-space MoE language pipeline.")
    p.add_argument("--version", action="version", version=f"conceptmoe {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tok = sub.add_parser("tokenizer", help="train, merge and measure tokenizers")
    tsub = tok.add_subparsers(dest="tok_command", required=True, parser_class=_Parser)
    t = tsub.add_parser("train", help="train a byte-level BPE tokenizer")
    t.add_argument("--corpus", required=True, help="JSONL with a 'text' field per record")
    t.add_argument("--vocab-size", type=int, required=True, help="bytes plus merges (specials extra)")
    t.add_argument("--lang", action="append", help="only records of this language (repeatable)")
    t.add_argument("--split", help="only records of this split")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tokenizer_train)
    m = tsub.add_parser("merge", help="append extension pieces to a base vocabulary")
    m.add_argument("--base", required=True)
    m.add_argument("--ext", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_tokenizer_merge)
    f = tsub.add_parser("fertility", help="tokens per word, per language")
    f.add_argument("--model", required=True, help="tokenizer JSON or checkpoint")
    f.add_argument("--corpus", required=True)
    f.add_argument("--compare", help="second tokenizer; adds token-count ratios")
    f.add_argument("--lang", action="append")
    f.add_argument("--split")
    f.add_argument("--out", help="JSON report path")
    f.set_defaults(func=cmd_tokenizer_fertility)

    cor = sub.add_parser("corpus", help="synthetic multilingual data")
    csub = cor.add_subparsers(dest="corpus_command", required=True, parser_class=_Parser)
    g = csub.add_parser("generate", help="languages, parallel corpus and QA items")
    g.add_argument("--langs", type=int, default=3)
    g.add_argument("--statements", type=int, default=5000)
    g.add_argument("--qa-items", type=int, default=300)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_corpus_generate)

    tr = sub.add_parser("train", help="run one training phase")
    tr.add_argument("--phase", type=int, required=True, help="1 concept LM, 2 codec, 3 end-to-end QA")
    tr.add_argument("--config", help="JSON with optional model/train/data sections")
    tr.add_argument("--corpus", required=True, help="directory written by 'corpus generate'")
    tr.add_argument("--init", help="checkpoint to continue from (required for phases 2 and 3)")
    tr.add_argument("--tokenizer", help="tokenizer JSON (phase 1 without --init)")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("metric", choices=["perplexity", "alignment", "consistency", "fertility"])
    ev.add_argument("--model", required=True, help="checkpoint (or tokenizer JSON for fertility)")
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out", required=True, help="JSON report path")
    ev.add_argument("--split", default="test")
    ev.add_argument("--lang", action="append")
    ev.add_argument("--pairs", type=int, default=200, help="alignment: test pairs per language pair")
    ev.add_argument("--items", type=int, help="consistency: use the first N QA items")
    ev.add_argument("--baseline", action="store_true",
                    help="consistency: answer with the concept LM alone (monolingual baseline)")
    ev.add_argument("--compare", help="fertility: tokenizer to compare against")
    ev.set_defaults(func=cmd_eval)

    ge = sub.add_parser("generate", help="greedy translation or answering")
    ge.add_argument("--model", required=True)
    ge.add_argument("--text", required=True)
    ge.add_argument("--source", required=True)
    ge.add_argument("--target", required=True)
    ge.add_argument("--max-len", type=int, default=16)
    ge.set_defaults(func=cmd_generate)

    pa = sub.add_parser("params", help="total vs active parameter counts")
    pa.add_argument("--preset", choices=["desk", "paper"], default="desk")
    pa.add_argument("--config", help="JSON model config (or a file with a 'model' section)")
    pa.add_argument("--enumerate", action="store_true", help="also count by enumerating tensors")
    pa.add_argument("--out")
    pa.set_defaults(func=cmd_params)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        return args.func(args)
    except (ValueError, KeyError, RuntimeError, OSError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
