"""``nadir`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from . import checkpoint as ckpt_io
from ._io import atomic_write_text
from .metrics import SCHEMA_VERSION, aggregate_report, format_table, gain_row
from .model import ConfigError, ModelConfig, ar_generate, nar_generate
from .synthdata import RuleSet, SynthError, TSVError, gen_corpus, gen_ruleset, load_tsv, split_corpus, write_tsv
from .tokenizer import LengthExceeded
from .training import VARIANTS, DataError, TrainConfig, train

log = logging.getLogger("nadir")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CKPT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _threads() -> None:
    n = os.environ.get("NADIR_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise CliError(EXIT_CONFIG, f"NADIR_THREADS must be an integer, got {n!r}") from None


def _load_ckpt(path) -> ckpt_io.Checkpoint:
    try:
        return ckpt_io.load(path)
    except FileNotFoundError:
        raise CliError(EXIT_CKPT, f"checkpoint not found: {path}") from None
    except ckpt_io.CheckpointError as exc:
        raise CliError(EXIT_CKPT, f"{path}: {exc}") from None


def _read_lines(path) -> List[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_DATA, f"cannot read {path}: {exc}") from None
    text = text.replace("\r\n", "\n")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _load_pairs(path, what: str = "--data"):
    if path is None:
        raise CliError(EXIT_DATA, f"{what} is required")
    try:
        return load_tsv(path)
    except TSVError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None


def _words_from(path) -> List[str]:
    """Source words from a TSV corpus or a plain one-word-per-line file."""
    lines = _read_lines(path)
    if lines and all("\t" in ln for ln in lines):
        return [ln.split("\t", 1)[0] for ln in lines]
    return lines


def _parse_ints(text: str, flag: str) -> List[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"{flag} expects comma-separated integers, got {text!r}") from None
    if not vals:
        raise CliError(EXIT_CONFIG, f"{flag} is empty")
    return vals


# --------------------------------------------------------------------------
# train


def _resolve_train_config(args):
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_CONFIG, f"bad --config: {exc}") from None
    model_d = dict(raw.get("model", {}))
    train_d = dict(raw.get("train", {}))
    variant = args.variant or train_d.get("variant", "diff-moe")
    if variant not in VARIANTS:
        raise CliError(EXIT_CONFIG, f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    train_d["variant"] = variant
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr")):
        val = getattr(args, flag)
        if val is not None:
            train_d[key] = val
    if args.max_len is not None:
        model_d["max_len"] = args.max_len
    try:
        return ModelConfig.from_dict(model_d), TrainConfig.from_dict(train_d)
    except (ConfigError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def cmd_train(args) -> int:
    model_cfg, train_cfg = _resolve_train_config(args)
    log.info("resolved config: %s", json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}))
    pairs = _load_pairs(args.data)
    valid = _load_pairs(args.valid, "--valid") if args.valid else None
    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.jsonl")
    try:
        res = train(pairs, model_cfg, train_cfg, valid_pairs=valid, metrics_path=metrics, checkpoint_path=out)
    except DataError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    if res.skipped:
        log.warning("%d training pair(s) skipped for exceeding max_len", res.skipped)
    last = res.history[-1]
    log.info("wrote %s (best epoch %s); final token_loss %.4f", out, res.best_checkpoint.extra.get("epoch"),
             last["token_loss"])
    return EXIT_OK


# --------------------------------------------------------------------------
# infer / eval


def _generate(ckpt: ckpt_io.Checkpoint, words: Sequence[str], batch_size: int, decoder: str = "nar"):
    model = ckpt.build_model()
    try:
        if decoder == "ar":
            if model.decoder is None:
                raise CliError(EXIT_CONFIG, "checkpoint has no AR decoder (train with --variant ar)")
            return ar_generate(model, list(words), ckpt.src_vocab, ckpt.tgt_vocab, batch_size)
        return nar_generate(model, list(words), ckpt.src_vocab, ckpt.tgt_vocab, batch_size)
    except LengthExceeded as exc:
        raise CliError(EXIT_DATA, f"input too long for this checkpoint: {exc}") from None


def cmd_infer(args) -> int:
    if args.batch_size < 1:
        raise CliError(EXIT_CONFIG, "--batch-size must be >= 1")
    ckpt = _load_ckpt(args.ckpt)
    words = _read_lines(args.input)
    outs = _generate(ckpt, words, args.batch_size, args.decoder) if words else []
    lines = [h if ok else f"{h}\tUNTERMINATED" for h, ok in outs]
    atomic_write_text(args.output, "".join(ln + "\n" for ln in lines))
    log.info("wrote %d hypotheses to %s (%d unterminated)", len(lines), args.output, sum(not ok for _, ok in outs))
    return EXIT_OK


def cmd_eval(args) -> int:
    pairs = _load_pairs(args.data)
    if args.hyp:
        # score precomputed hypotheses; no model is run
        lines = _read_lines(args.hyp)
        if len(lines) != len(pairs):
            raise CliError(EXIT_DATA, f"{len(lines)} hypotheses but {len(pairs)} pairs in {args.data}")
        outs = [(ln.split("\t", 1)[0], "\t" not in ln) for ln in lines]
        elapsed = None
    else:
        if not args.ckpt:
            raise CliError(EXIT_CONFIG, "give --ckpt (or --hyp to score existing hypotheses)")
        ckpt = _load_ckpt(args.ckpt)
        t0 = time.perf_counter()
        outs = _generate(ckpt, [s for s, _ in pairs], args.batch_size, args.decoder)
        elapsed = time.perf_counter() - t0
    report = aggregate_report([h for h, _ in outs], [t for _, t in pairs], unterminated=sum(not ok for _, ok in outs))
    report.inference_sec = elapsed
    if args.report:
        atomic_write_text(args.report, report.to_json())
    if args.hyp_out:
        atomic_write_text(args.hyp_out, "".join(h + "\n" for h, _ in outs))
    inft = "-" if elapsed is None else f"{elapsed:.3f}s"
    print(f"CER {report.cer:.2f}  WAcc {report.wacc:.2f}  InfT {inft}  pairs {report.pairs}")
    print(format_table([("model", report.breakdown.counts())]))
    return EXIT_OK


# --------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    if args.pairs:
        rows = _load_pairs(args.pairs, "--pairs")
        hyps, refs = [h for h, _ in rows], [r for _, r in rows]
    else:
        if not (args.ref and args.hyp):
            raise CliError(EXIT_DATA, "give --ref and --hyp, or --pairs")
        refs, hyps = _read_lines(args.ref), _read_lines(args.hyp)
        hyps = [h.split("\t", 1)[0] for h in hyps]  # drop infer's UNTERMINATED column
    if len(hyps) != len(refs):
        raise CliError(EXIT_DATA, f"{len(hyps)} hypotheses but {len(refs)} references")
    report = aggregate_report(hyps, refs)
    d = report.to_dict()
    name = args.name or "current"
    rows = [(name, d["breakdown"])]
    gains = []
    if args.compare:
        try:
            old = json.loads(Path(args.compare).read_text(encoding="utf-8"))
            old_counts = old["breakdown"]
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(EXIT_DATA, f"bad --compare report: {exc}") from None
        rows.insert(0, ("baseline", old_counts))
        g = gain_row(old_counts, d["breakdown"])
        gains.append(("Gain over baseline", g))
        d["gain_over_baseline"] = g
    table = format_table(rows, gains)
    if args.report:
        atomic_write_text(args.report, json.dumps(d, ensure_ascii=False, indent=2))
        from .plotting import plot_breakdown

        plot_breakdown({n: c for n, c in rows}, Path(args.report).with_suffix(".png"))
        atomic_write_text(Path(args.report).with_suffix(".txt"), table + "\n")
    print(table)
    return EXIT_OK


# --------------------------------------------------------------------------
# bench


def _time_decode(model, ckpt, words, batch_size, decoder, repeats, max_len=None) -> float:
    fn = ar_generate if decoder == "ar" else nar_generate
    kw = {"max_len": max_len} if decoder == "ar" else {}
    fn(model, words[:batch_size], ckpt.src_vocab, ckpt.tgt_vocab, batch_size, **kw)  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(model, words, ckpt.src_vocab, ckpt.tgt_vocab, batch_size, **kw)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_rows(ckpt: ckpt_io.Checkpoint, words: Sequence[str], batch_sizes: Sequence[int], repeats: int = 3,
               decoder: str = "nar", max_len: Optional[int] = None) -> List[dict]:
    model = ckpt.build_model()
    rows = []
    for bs in batch_sizes:
        sec = _time_decode(model, ckpt, list(words), bs, decoder, repeats, max_len)
        rows.append({"batch_size": bs, "total_sec": sec, "words_per_sec": len(words) / sec if sec > 0 else float("inf")})
    return rows


def _csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["batch_size", "total_sec", "words_per_sec"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"batch_size": r["batch_size"], "total_sec": f"{r['total_sec']:.6f}",
                    "words_per_sec": f"{r['words_per_sec']:.3f}"})
    return buf.getvalue()


def monotonicity(rows: Sequence[dict], lo: int = 1, hi: int = 64) -> dict:
    sel = [r for r in rows if lo <= r["batch_size"] <= hi]
    sel.sort(key=lambda r: r["batch_size"])
    wps = [r["words_per_sec"] for r in sel]
    return {
        "batch_range": [lo, hi],
        "batch_sizes": [r["batch_size"] for r in sel],
        "words_per_sec": wps,
        "increasing": len(wps) >= 2 and all(b > a for a, b in zip(wps, wps[1:])),
    }


def cmd_bench(args) -> int:
    batch_sizes = _parse_ints(args.batch_sizes, "--batch-sizes")
    if any(b < 1 for b in batch_sizes):
        raise CliError(EXIT_CONFIG, "batch sizes must be >= 1")
    if args.repeats < 1:
        raise CliError(EXIT_CONFIG, "--repeats must be >= 1")
    ckpt = _load_ckpt(args.ckpt)
    words = _words_from(args.data)
    if not words:
        raise CliError(EXIT_DATA, f"{args.data} holds no words")
    try:
        rows = bench_rows(ckpt, words, batch_sizes, args.repeats, "nar")
    except LengthExceeded as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    out = Path(args.out)
    atomic_write_text(out, _csv(rows))
    series = {"NAR": rows}
    report = {"schema_version": SCHEMA_VERSION, "n_words": len(words), "nar": rows,
              "monotonicity": monotonicity(rows)}
    if ckpt.config.ar_decoder and not args.no_ar:
        ar_rows = bench_rows(ckpt, words, batch_sizes, args.repeats, "ar", args.max_len)
        ar_path = out.with_name(out.stem + ".ar" + out.suffix)
        atomic_write_text(ar_path, _csv(ar_rows))
        series["AR"] = ar_rows
        report["ar"] = ar_rows
        report["speedup"] = {str(a["batch_size"]): a["total_sec"] / n["total_sec"] for n, a in zip(rows, ar_rows)}
    atomic_write_text(out.with_suffix(".json"), json.dumps(report, indent=2))
    from .plotting import plot_batch_sweep

    plot_batch_sweep(series, out.with_suffix(".png"))
    sys.stdout.write(_csv(rows))
    mono = report["monotonicity"]
    print(f"throughput increasing from batch {mono['batch_range'][0]} to {mono['batch_range'][1]}: {mono['increasing']}")
    if "speedup" in report:
        for bs, s in report["speedup"].items():
            print(f"AR/NAR time ratio at batch {bs}: {s:.2f}x")
    return EXIT_OK


# --------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    lo, hi = _parse_ints(args.word_len, "--word-len")
    if args.rules:
        try:
            rules = RuleSet.load(args.rules)
        except (OSError, ValueError, TypeError) as exc:
            raise CliError(EXIT_CONFIG, f"bad --rules: {exc}") from None
    elif args.gen_rules:
        parts = args.gen_rules.split(",")
        try:
            seed, amb = int(parts[0]), float(parts[1])
        except (ValueError, IndexError):
            raise CliError(EXIT_CONFIG, f"--gen-rules expects SEED,AMBIGUITY, got {args.gen_rules!r}") from None
        try:
            rules = gen_ruleset(seed, args.n_source, amb)
        except SynthError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
    else:
        raise CliError(EXIT_CONFIG, "give --rules or --gen-rules")
    try:
        pairs = gen_corpus(rules, args.n, (lo, hi), seed=args.seed)
    except SynthError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    splits = split_corpus(pairs, args.valid_frac, args.test_frac)
    prefix = args.out_prefix
    for name, rows in splits.items():
        write_tsv(rows, f"{prefix}.{name}.tsv")
    rules.save(f"{prefix}.rules.json")
    print(json.dumps({k: len(v) for k, v in splits.items()}))
    return EXIT_OK


# --------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    from .ablation import ablation_corpus, ablation_table, desk_configs, fingerprint, ordering_checks, run_ablation

    word_len = _parse_ints(args.word_len, "--word-len")
    seeds = _parse_ints(args.seeds, "--seeds")
    corpus = {"rules_seed": args.rules_seed, "ambiguity": args.ambiguity, "n_train": args.n_train,
              "n_test": args.n_test, "word_len": word_len}
    mc, tc = desk_configs(args.epochs)
    try:
        mc = ModelConfig.from_dict({**mc.to_dict(), "embed_dim": args.embed_dim, "num_layers": args.layers,
                                    "num_heads": args.heads, "num_experts": args.experts,
                                    "expert_dim": args.expert_dim, "max_len": args.max_len, "head_dim": None})
        tc = TrainConfig.from_dict({**tc.to_dict(), "batch_size": args.batch_size})
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    _, splits = ablation_corpus(args.rules_seed, args.ambiguity, args.n_train, args.n_test, word_len=tuple(word_len))
    meta = {"corpus": corpus, "model": mc.to_dict(), "train": tc.to_dict(), "seeds": seeds,
            "fingerprint": fingerprint(mc, tc, corpus, seeds)}
    summary = run_ablation(mc, tc, splits, seeds=seeds, out_dir=Path(args.out_dir), meta=meta)
    print(ablation_table(summary))
    for name, ok in ordering_checks(summary).items():
        print(f"{name}: {ok}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nadir", description="Non-autoregressive transliteration toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a TSV corpus")
    t.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    t.add_argument("--data", help="training TSV (source<TAB>target)")
    t.add_argument("--valid", help="validation TSV for per-epoch CER/WAcc and checkpoint selection")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="JSON-lines metrics log (default: <out>.metrics.jsonl)")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", help="standard | diff | diff-moe | ar")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--max-len", dest="max_len", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="transliterate one word per line")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    i.add_argument("--decoder", choices=("nar", "ar"), default="nar")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="CER/WAcc/InfT and error breakdown on a TSV corpus")
    e.add_argument("--ckpt")
    e.add_argument("--data")
    e.add_argument("--hyp", help="score these hypotheses (one per line) instead of running a checkpoint")
    e.add_argument("--report", help="JSON report path")
    e.add_argument("--hyp-out", dest="hyp_out")
    e.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    e.add_argument("--decoder", choices=("nar", "ar"), default="nar")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="hallucination error breakdown of hypotheses against references")
    a.add_argument("--ref", help="references, one per line")
    a.add_argument("--hyp", help="hypotheses, one per line")
    a.add_argument("--pairs", help="TSV of hypothesis<TAB>reference")
    a.add_argument("--report", help="JSON report path (a .png and .txt are written alongside)")
    a.add_argument("--compare", help="earlier JSON report to compute gains against")
    a.add_argument("--name", help="row label in the table")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="inference time against batch size")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True, help="TSV corpus or one word per line")
    b.add_argument("--batch-sizes", dest="batch_sizes", default="1,8,64,256")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out", default="bench.csv")
    b.add_argument("--max-len", dest="max_len", type=int, help="AR decoding step limit")
    b.add_argument("--no-ar", dest="no_ar", action="store_true", help="skip the AR baseline")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="generate a synthetic transliteration corpus")
    s.add_argument("--rules", help="RuleSet JSON")
    s.add_argument("--gen-rules", dest="gen_rules", help="SEED,AMBIGUITY")
    s.add_argument("--n-source", dest="n_source", type=int, default=20)
    s.add_argument("--n", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--word-len", dest="word_len", default="4,10")
    s.add_argument("--valid-frac", dest="valid_frac", type=float, default=0.1)
    s.add_argument("--test-frac", dest="test_frac", type=float, default=0.1)
    s.add_argument("--out-prefix", dest="out_prefix", required=True)
    s.set_defaults(func=cmd_synth)

    ab = sub.add_parser("ablate", help="train standard/diff/diff-moe on a synthetic task and compare")
    ab.add_argument("--out-dir", dest="out_dir", required=True)
    ab.add_argument("--seeds", default="0,1,2")
    ab.add_argument("--epochs", type=int, default=40)
    ab.add_argument("--rules-seed", dest="rules_seed", type=int, default=7)
    ab.add_argument("--ambiguity", type=float, default=0.6)
    ab.add_argument("--n-train", dest="n_train", type=int, default=20000)
    ab.add_argument("--n-test", dest="n_test", type=int, default=2000)
    ab.add_argument("--word-len", dest="word_len", default="4,10")
    ab.add_argument("--embed-dim", dest="embed_dim", type=int, default=64)
    ab.add_argument("--layers", type=int, default=2)
    ab.add_argument("--heads", type=int, default=4)
    ab.add_argument("--experts", type=int, default=4)
    ab.add_argument("--expert-dim", dest="expert_dim", type=int, default=128)
    ab.add_argument("--max-len", dest="max_len", type=int, default=24)
    ab.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("nadir %s %s", args.command, json.dumps({k: v for k, v in vars(args).items() if k != "func"}))
    try:
        _threads()
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
