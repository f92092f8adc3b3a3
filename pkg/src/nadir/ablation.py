"""Desk-scale ablation: standard vs differential vs differential+MoE NAR encoders."""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from ._io import atomic_write_text
from .metrics import aggregate_report, format_table, gain_row
from .model import ModelConfig, nar_generate
from .synthdata import gen_corpus, gen_ruleset, split_of
from .training import TrainConfig, train

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("standard", "diff", "diff-moe")
LABELS = {"standard": "Standard NAR", "diff": "Diff NAR", "diff-moe": "Diff MoE NAR"}

# Desk-scale setting used by the acceptance run and `nadir ablate` defaults.
DESK_CORPUS = {"rules_seed": 7, "ambiguity": 0.6, "n_train": 20_000, "n_test": 2_000, "word_len": [4, 10]}
DESK_SEEDS = (0, 1, 2)

# modules whose code can change ablation numbers
_RESULT_MODULES = ("numcore", "tokenizer", "model", "objective", "training", "synthdata", "metrics", "checkpoint",
                   "_io", "ablation")


def desk_configs(epochs: int = 40) -> Tuple[ModelConfig, TrainConfig]:
    mc = ModelConfig(embed_dim=64, num_layers=2, num_heads=4, num_experts=4, expert_dim=128, max_len=24,
                     dropout_p=0.1)
    return mc, TrainConfig(epochs=epochs, batch_size=64)


def fingerprint(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: dict, seeds: Sequence[int]) -> str:
    """Digest of the ablation settings and of the source that produces the numbers.

    A cached ablation summary is only reused when its fingerprint matches.
    """
    h = hashlib.sha256()
    h.update(json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "corpus": corpus,
                         "seeds": list(seeds)}, sort_keys=True).encode())
    here = Path(__file__).parent
    for name in _RESULT_MODULES:
        h.update(name.encode())
        h.update((here / f"{name}.py").read_bytes())
    return h.hexdigest()


def ordering_checks(summary: dict) -> Dict[str, bool]:
    """Directional checks: CER(diff-moe) <= CER(diff) <= CER(standard); reps(diff) <= reps(standard)."""
    v = summary["variants"]
    cer = {k: v[k]["median_cer"] for k in ABLATION_VARIANTS}
    reps = {k: v[k]["median_counts"]["repetitions"] for k in ABLATION_VARIANTS}
    return {
        "cer_diff_moe_le_diff": cer["diff-moe"] <= cer["diff"],
        "cer_diff_le_standard": cer["diff"] <= cer["standard"],
        "reps_diff_le_standard": reps["diff"] <= reps["standard"],
    }


def ablation_corpus(rules_seed: int = 7, ambiguity: float = 0.6, n_train: int = 20_000, n_test: int = 2_000,
                    n_valid: Optional[int] = None, word_len: Tuple[int, int] = (4, 10), n_source: int = 20,
                    corpus_seed: int = 0):
    """Hash-split synthetic corpus with exactly ``n_train``/``n_valid``/``n_test`` pairs."""
    n_valid = n_test if n_valid is None else n_valid
    rules = gen_ruleset(rules_seed, n_source, ambiguity)
    total = n_train + n_valid + n_test
    frac_v, frac_t = n_valid / total, n_test / total
    pairs = gen_corpus(rules, int(total * 1.15) + 50, word_len, seed=corpus_seed)
    splits: Dict[str, list] = {"train": [], "valid": [], "test": []}
    for p in pairs:
        splits[split_of(p[0], frac_v, frac_t)].append(p)
    want = {"train": n_train, "valid": n_valid, "test": n_test}
    for k, n in want.items():
        if len(splits[k]) < n:
            raise ValueError(f"{k} split has {len(splits[k])} pairs, need {n}")
        splits[k] = splits[k][:n]
    return rules, splits


@dataclass
class RunResult:
    variant: str
    seed: int
    cer: float
    wacc: float
    counts: Dict[str, int]
    train_sec: float
    history: List[dict] = field(default_factory=list)


def run_ablation(model_cfg: ModelConfig, train_cfg: TrainConfig, splits, seeds: Sequence[int] = (0, 1, 2),
                 variants: Sequence[str] = ABLATION_VARIANTS, out_dir: Optional[Path] = None,
                 meta: Optional[dict] = None) -> dict:
    runs: List[RunResult] = []
    meta = dict(meta or {})
    t_start = time.perf_counter()
    for seed in seeds:
        for variant in variants:
            cfg = TrainConfig(**{**train_cfg.to_dict(), "variant": variant, "seed": seed})
            t0 = time.perf_counter()
            res = train(splits["train"], model_cfg, cfg, valid_pairs=splits["valid"])
            elapsed = time.perf_counter() - t0
            model = res.best_checkpoint.build_model()
            test = splits["test"]
            outs = nar_generate(model, [s for s, _ in test], res.best_checkpoint.src_vocab,
                                res.best_checkpoint.tgt_vocab, batch_size=512)
            rep = aggregate_report([h for h, _ in outs], [t for _, t in test],
                                   unterminated=sum(not ok for _, ok in outs))
            rr = RunResult(variant, seed, rep.cer, rep.wacc, rep.breakdown.counts(), elapsed, res.history)
            runs.append(rr)
            log.info("ablation %s seed=%d cer=%.2f wacc=%.2f reps=%d (%.0fs)", variant, seed, rr.cer, rr.wacc,
                     rr.counts["repetitions"], elapsed)
            if out_dir is not None:
                _write(out_dir, runs, variants, meta)
    summary = summarize(runs, variants, meta)
    summary["complete"] = True
    summary["wall_sec"] = time.perf_counter() - t_start
    if out_dir is not None:
        _write(out_dir, runs, variants, {**meta, "complete": True, "wall_sec": summary["wall_sec"]})
    return summary


def summarize(runs: Sequence[RunResult], variants: Sequence[str] = ABLATION_VARIANTS,
              meta: Optional[dict] = None) -> dict:
    summary = {}
    for v in variants:
        rs = [r for r in runs if r.variant == v]
        if not rs:
            continue
        summary[v] = {
            "median_cer": statistics.median(r.cer for r in rs),
            "median_wacc": statistics.median(r.wacc for r in rs),
            "median_counts": {k: statistics.median(r.counts[k] for r in rs) for k in rs[0].counts},
            "runs": [{"seed": r.seed, "cer": r.cer, "wacc": r.wacc, "counts": r.counts,
                      "train_sec": r.train_sec} for r in rs],
        }
    return {"schema_version": 1, **(meta or {}), "variants": summary}


def ablation_table(summary: dict) -> str:
    v = summary["variants"]
    rows = [(LABELS.get(k, k), v[k]["median_counts"]) for k in v]
    gains = []
    if "standard" in v:
        for k in ("diff", "diff-moe"):
            if k in v:
                gains.append((f"{LABELS[k]} gain over Standard NAR",
                              gain_row(v["standard"]["median_counts"], v[k]["median_counts"])))
    if "diff" in v and "diff-moe" in v:
        gains.append(("Diff MoE NAR gain over Diff NAR", gain_row(v["diff"]["median_counts"], v["diff-moe"]["median_counts"])))
    cer_lines = [f"{LABELS.get(k, k):<14} median CER {v[k]['median_cer']:6.2f}  median WAcc {v[k]['median_wacc']:6.2f}"
                 for k in v]
    return format_table(rows, gains) + "\n\n" + "\n".join(cer_lines)


def _write(out_dir: Path, runs: Sequence[RunResult], variants: Sequence[str], meta: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(runs, variants, meta)
    atomic_write_text(out_dir / "ablation.json", json.dumps(summary, indent=2))
    atomic_write_text(out_dir / "ablation.txt", ablation_table(summary) + "\n")
    with open(out_dir / "ablation_history.jsonl", "w", encoding="utf-8") as fh:
        for r in runs:
            fh.write(json.dumps({"variant": r.variant, "seed": r.seed, "history": r.history}) + "\n")
    from .plotting import plot_ablation

    plot_ablation(summary, out_dir / "ablation.png")
