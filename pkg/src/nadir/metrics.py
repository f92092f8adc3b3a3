"""CER, word accuracy and the hallucination error breakdown.

Edit operations are named from the hypothesis' point of view:

* ``I`` insertion - a hypothesis character with no counterpart in the reference
* ``O`` omission  - a reference character missing from the hypothesis
* ``S`` substitution, ``M`` match

Repetitions are immediate tandem repeats (``gg`` contiguous) of a 2- to
4-character unit.  Each distinct unit is counted at most once per pair and
categorised as:

* valid repeat      - the unit occurs in the reference, but fewer times in a row
* substitute repeat - absent from the reference; the repeated block covers at
                      least one substitution in the alignment
* insert repeat     - absent from the reference otherwise
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

log = logging.getLogger(__name__)

MATCH, SUB, OMIT, INS = "M", "S", "O", "I"
INSERT_REPEAT = "insert_repeat"
SUBSTITUTE_REPEAT = "substitute_repeat"
VALID_REPEAT = "valid_repeat"
REPEAT_KINDS = (INSERT_REPEAT, SUBSTITUTE_REPEAT, VALID_REPEAT)
NGRAM_SIZES = (2, 3, 4)
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EditOp:
    op: str
    hyp_pos: Optional[int]
    ref_pos: Optional[int]


def levenshtein_table(hyp: str, ref: str) -> List[List[int]]:
    n, m = len(hyp), len(ref)
    prev = list(range(m + 1))
    table = [prev]
    for i in range(1, n + 1):
        h = hyp[i - 1]
        row = [i] + [0] * m
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (h != ref[j - 1]), prev[j] + 1, row[j - 1] + 1)
        table.append(row)
        prev = row
    return table


def edit_distance(hyp: str, ref: str) -> int:
    return levenshtein_table(hyp, ref)[-1][-1]


def levenshtein_align(hyp: str, ref: str) -> Tuple[int, List[EditOp]]:
    """Unit-cost alignment with a fixed backtrace preference M > S > O > I."""
    D = levenshtein_table(hyp, ref)
    i, j = len(hyp), len(ref)
    ops: List[EditOp] = []
    while i or j:
        d = D[i][j]
        if i and j and hyp[i - 1] == ref[j - 1] and D[i - 1][j - 1] == d:
            ops.append(EditOp(MATCH, i - 1, j - 1)); i -= 1; j -= 1
        elif i and j and D[i - 1][j - 1] + 1 == d:
            ops.append(EditOp(SUB, i - 1, j - 1)); i -= 1; j -= 1
        elif j and D[i][j - 1] + 1 == d:
            ops.append(EditOp(OMIT, None, j - 1)); j -= 1
        else:
            ops.append(EditOp(INS, i - 1, None)); i -= 1
    ops.reverse()
    return D[-1][-1], ops


def op_counts(ops: Iterable[EditOp]) -> Dict[str, int]:
    c = {INS: 0, SUB: 0, OMIT: 0, MATCH: 0}
    for o in ops:
        c[o.op] += 1
    return c


def cer(hyp: str, ref: str) -> float:
    if not ref:
        raise ValueError("CER is undefined for an empty reference")
    return edit_distance(hyp, ref) / len(ref)


def corpus_cer(pairs: Sequence[Tuple[str, str]]) -> float:
    """Sum of distances over sum of reference lengths, in percent."""
    dist = chars = 0
    for hyp, ref in pairs:
        if not ref:
            log.warning("skipping pair with empty reference (hyp=%r)", hyp)
            continue
        dist += edit_distance(hyp, ref)
        chars += len(ref)
    return 100.0 * dist / chars if chars else 0.0


def word_accuracy(pairs: Sequence[Tuple[str, str]]) -> float:
    pairs = list(pairs)
    if not pairs:
        return 0.0
    return 100.0 * sum(h == r for h, r in pairs) / len(pairs)


# --------------------------------------------------------------------------
# repetitions


def consecutive_count(s: str, g: str) -> int:
    """Largest k such that g repeated k times occurs contiguously in s."""
    if not g or g not in s:
        return 0
    k = 1
    while g * (k + 1) in s:
        k += 1
    return k


def primitive_root(g: str) -> str:
    n = len(g)
    for p in range(1, n):
        if n % p == 0 and g[:p] * (n // p) == g:
            return g[:p]
    return g


def _unit_allowed(g: str) -> bool:
    root = len(primitive_root(g))
    return root == len(g) or (root == 1 and len(g) == 2)


def tandem_runs(s: str, n: int) -> List[Tuple[int, int]]:
    """Maximal [start, end) runs of period n that hold at least two full copies."""
    runs = []
    j, L = 0, len(s)
    while j + n < L:
        if s[j] != s[j + n]:
            j += 1
            continue
        a = j
        while j + n < L and s[j] == s[j + n]:
            j += 1
        end = j + n
        if end - a >= 2 * n:
            runs.append((a, end))
    return runs


@dataclass
class RepeatRecord:
    span: str
    n: int
    category: str
    hyp_start: int
    hyp_end: int
    hyp_count: int
    ref_count: int


def detect_repetitions(hyp: str, ref: str, ops: Optional[Sequence[EditOp]] = None) -> List[RepeatRecord]:
    if ops is None:
        ops = levenshtein_align(hyp, ref)[1]
    sub_positions = {o.hyp_pos for o in ops if o.op == SUB}
    records: List[RepeatRecord] = []
    covered: List[Tuple[int, int]] = []
    seen = set()
    for n in sorted(NGRAM_SIZES, reverse=True):
        for a, b in tandem_runs(hyp, n):
            if any(ca <= a and b <= cb for ca, cb in covered):
                continue
            candidates = []
            for off in range(n):
                g = hyp[a + off:a + off + n]
                if a + off + 2 * n > b or not _unit_allowed(g):
                    continue
                candidates.append((consecutive_count(ref, g), consecutive_count(hyp, g), a + off, g))
            if not candidates:
                continue
            # prefer a rotation the reference knows, then the longest repeat, then the latest start
            ref_k, hyp_k, start, g = max(candidates)
            if (g, n) in seen:
                continue
            seen.add((g, n))
            covered.append((a, b))
            if ref_k >= hyp_k:
                continue
            if ref_k >= 1:
                cat = VALID_REPEAT
            elif any(p in sub_positions for p in range(a, b)):
                cat = SUBSTITUTE_REPEAT
            else:
                cat = INSERT_REPEAT
            records.append(RepeatRecord(g, n, cat, a, b, hyp_k, ref_k))
    return records


# --------------------------------------------------------------------------
# aggregation


@dataclass
class ErrorBreakdown:
    insertions: int = 0
    substitutions: int = 0
    omissions: int = 0
    insert_repeat: int = 0
    substitute_repeat: int = 0
    valid_repeat: int = 0
    details: List[dict] = field(default_factory=list)

    @property
    def repetitions(self) -> int:
        return self.insert_repeat + self.substitute_repeat + self.valid_repeat

    @property
    def edits(self) -> int:
        return self.insertions + self.substitutions + self.omissions

    def __add__(self, other: "ErrorBreakdown") -> "ErrorBreakdown":
        return ErrorBreakdown(
            self.insertions + other.insertions, self.substitutions + other.substitutions,
            self.omissions + other.omissions, self.insert_repeat + other.insert_repeat,
            self.substitute_repeat + other.substitute_repeat, self.valid_repeat + other.valid_repeat,
            self.details + other.details)

    def counts(self) -> Dict[str, int]:
        return {"insertions": self.insertions, "substitutions": self.substitutions,
                "omissions": self.omissions, "repetitions": self.repetitions,
                "insert_repeat": self.insert_repeat, "substitute_repeat": self.substitute_repeat,
                "valid_repeat": self.valid_repeat}


def pair_breakdown(hyp: str, ref: str, index: int = 0) -> Tuple[int, ErrorBreakdown]:
    dist, ops = levenshtein_align(hyp, ref)
    c = op_counts(ops)
    bd = ErrorBreakdown(insertions=c[INS], substitutions=c[SUB], omissions=c[OMIT])
    for r in detect_repetitions(hyp, ref, ops):
        setattr(bd, r.category, getattr(bd, r.category) + 1)
        bd.details.append({"pair": index, "hyp": hyp, "ref": ref, **asdict(r)})
    return dist, bd


@dataclass
class EvalReport:
    cer: float
    wacc: float
    breakdown: ErrorBreakdown
    pairs: int
    unterminated: int = 0
    ref_chars: int = 0
    distance: int = 0
    exact: int = 0
    inference_sec: Optional[float] = None

    def to_dict(self, details: bool = True) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "cer": self.cer, "wacc": self.wacc, "pairs": self.pairs,
            "unterminated": self.unterminated, "ref_chars": self.ref_chars,
            "distance": self.distance, "exact": self.exact,
            "breakdown": self.breakdown.counts(),
        }
        if self.inference_sec is not None:
            d["inference_sec"] = self.inference_sec
        if details:
            d["details"] = self.breakdown.details
        return d

    def to_json(self, details: bool = True) -> str:
        return json.dumps(self.to_dict(details), ensure_ascii=False, indent=2)


def aggregate_report(hyps: Sequence[str], refs: Sequence[str], unterminated: int = 0) -> EvalReport:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    total = ErrorBreakdown()
    dist = chars = exact = 0
    for idx, (h, r) in enumerate(zip(hyps, refs)):
        d, bd = pair_breakdown(h, r, idx)
        total = total + bd
        exact += h == r
        if not r:
            log.warning("pair %d has an empty reference; excluded from CER", idx)
            continue
        dist += d
        chars += len(r)
    n = len(hyps)
    return EvalReport(
        cer=100.0 * dist / chars if chars else 0.0,
        wacc=100.0 * exact / n if n else 0.0,
        breakdown=total, pairs=n, unterminated=unterminated,
        ref_chars=chars, distance=dist, exact=exact)


def gain(old: float, new: float) -> float:
    """Percentage reduction from old to new."""
    if old == 0:
        return 0.0
    return (old - new) / old * 100.0


TABLE_COLUMNS = (("Insertion", "insertions"), ("Substitution", "substitutions"),
                 ("Omissions", "omissions"), ("Repetition", "repetitions"))


def gain_row(old: Dict[str, int], new: Dict[str, int]) -> Dict[str, float]:
    return {key: gain(old[key], new[key]) for _, key in TABLE_COLUMNS}


def format_table(rows: Sequence[Tuple[str, Dict[str, int]]],
                 gains: Sequence[Tuple[str, Dict[str, float]]] = ()) -> str:
    header = ["Model"] + [c for c, _ in TABLE_COLUMNS]
    body = [[name] + [f"{counts[k]:,}" for _, k in TABLE_COLUMNS] for name, counts in rows]
    body += [[name] + [f"{g[k]:.2f}%" for _, k in TABLE_COLUMNS] for name, g in gains]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(r) for r in body])
