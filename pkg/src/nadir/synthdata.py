"""Synthetic rule-based transliteration tasks and TSV corpus I/O.

A :class:`RuleSet` maps words over a Latin source alphabet to a Devanagari
target alphabet.  Rules are applied left to right; at each position the first
matching rule family wins, in this order: digraph (many-to-one), context
rule, one-to-many, one-to-one.

JSON schema for rule files::

    {"source_alphabet": "abc...", "target_alphabet": "...",
     "one_to_one": {"a": "X", ...},
     "one_to_many": {"k": "XY", ...},
     "many_to_one": {"sh": "Z", ...},
     "context_rules": [{"char": "n", "next": ["d", "t", ""], "replacement": "N"}, ...],
     "seed": 7, "ambiguity": 0.6}

An empty string in ``next`` matches the end of the word.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from ._io import atomic_write_text

SOURCE_POOL = "abcdefghijklmnopqrstuvwxyz"
# Devanagari vowels and consonants
TARGET_POOL = "".join(chr(c) for c in range(0x0905, 0x0915)) + "".join(chr(c) for c in range(0x0915, 0x093A))


class SynthError(ValueError):
    pass


class TSVError(ValueError):
    pass


@dataclass
class ContextRule:
    char: str
    next: List[str]
    replacement: str

    def matches(self, word: str, i: int) -> bool:
        nxt = word[i + 1] if i + 1 < len(word) else ""
        return word[i] == self.char and nxt in self.next


@dataclass
class RuleSet:
    source_alphabet: str
    target_alphabet: str
    one_to_one: Dict[str, str]
    one_to_many: Dict[str, str] = field(default_factory=dict)
    many_to_one: Dict[str, str] = field(default_factory=dict)
    context_rules: List[ContextRule] = field(default_factory=list)
    seed: int = 0
    ambiguity: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RuleSet":
        d = json.loads(text)
        d["context_rules"] = [ContextRule(**r) for r in d.get("context_rules", [])]
        rs = cls(**d)
        missing = [c for c in rs.source_alphabet if c not in rs.one_to_one]
        if missing:
            raise SynthError(f"rules leave characters unmapped: {''.join(missing)}")
        return rs

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "RuleSet":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def gen_ruleset(seed: int, n_source: int = 20, ambiguity: float = 0.5) -> RuleSet:
    """Random rule set whose share of context-dependent characters grows with ``ambiguity``.

    At ambiguity 0 the rules are a plain bijection.  Otherwise a fraction
    ``ambiguity`` of the source characters each receive a context rule or
    start a digraph, and about a quarter of that fraction expand to 2-3
    target characters.  Replacement characters are drawn from the images of
    other characters, so distinct source words can share a target.
    """
    if n_source < 4:
        raise SynthError("source alphabet needs at least 4 characters")
    if n_source > len(SOURCE_POOL):
        raise SynthError(f"source alphabet is limited to {len(SOURCE_POOL)} characters")
    if not 0.0 <= ambiguity <= 1.0:
        raise SynthError("ambiguity must lie in [0, 1]")
    rng = random.Random(seed)
    src = SOURCE_POOL[:n_source]
    n_target = min(len(TARGET_POOL), n_source + max(2, n_source // 4))
    tgt = "".join(rng.sample(TARGET_POOL, n_target))
    images = list(tgt[:n_source])
    rng.shuffle(images)
    one_to_one = dict(zip(src, images))
    spare = tgt[n_source:]

    order = list(src)
    rng.shuffle(order)
    n_amb = round(ambiguity * n_source)
    ambiguous = order[:n_amb]
    context_rules: List[ContextRule] = []
    many_to_one: Dict[str, str] = {}
    for idx, ch in enumerate(ambiguous):
        repl_pool = [c for c in tgt if c != one_to_one[ch]]
        if idx % 2 == 0:
            k = max(1, n_source // 3)
            nexts = sorted(rng.sample([c for c in src if c != ch] + [""], k))
            context_rules.append(ContextRule(ch, nexts, rng.choice(repl_pool)))
        else:
            second = rng.choice([c for c in src if c != ch])
            # half the digraphs collapse onto another character's image
            many_to_one[ch + second] = rng.choice(images) if idx % 4 == 1 else rng.choice(spare or repl_pool)
    one_to_many: Dict[str, str] = {}
    n_expand = round(ambiguity * n_source / 4)
    for ch in order[n_source - n_expand:]:
        width = rng.choice((2, 3))
        one_to_many[ch] = one_to_one[ch] + "".join(rng.choice(tgt) for _ in range(width - 1))
    return RuleSet(src, tgt, one_to_one, one_to_many, many_to_one, context_rules, seed, ambiguity)


def apply_rules(word: str, rules: RuleSet) -> str:
    out = []
    i = 0
    ctx = {}
    for r in rules.context_rules:
        ctx.setdefault(r.char, []).append(r)
    while i < len(word):
        ch = word[i]
        pair = word[i:i + 2]
        if len(pair) == 2 and pair in rules.many_to_one:
            out.append(rules.many_to_one[pair])
            i += 2
            continue
        rule = next((r for r in ctx.get(ch, ()) if r.matches(word, i)), None)
        if rule is not None:
            out.append(rule.replacement)
        elif ch in rules.one_to_many:
            out.append(rules.one_to_many[ch])
        elif ch in rules.one_to_one:
            out.append(rules.one_to_one[ch])
        else:
            raise SynthError(f"character {ch!r} in {word!r} has no rule")
        i += 1
    return "".join(out)


def split_of(word: str, valid_frac: float = 0.1, test_frac: float = 0.1) -> str:
    h = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "big") / 2 ** 64
    if h < test_frac:
        return "test"
    if h < test_frac + valid_frac:
        return "valid"
    return "train"


def gen_corpus(rules: RuleSet, n: int, word_len: Tuple[int, int] = (4, 10), seed: int = 0) -> List[Tuple[str, str]]:
    if n < 1:
        raise SynthError("n must be >= 1")
    lo, hi = word_len
    if not 1 <= lo <= hi:
        raise SynthError(f"bad word length range {word_len}")
    alphabet = rules.source_alphabet
    capacity = sum(len(alphabet) ** k for k in range(lo, hi + 1))
    if capacity < n:
        raise SynthError(f"only {capacity} distinct words exist for lengths {lo}-{hi}; asked for {n}")
    rng = random.Random(seed)
    seen, pairs = set(), []
    attempts = 0
    while len(pairs) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise SynthError("could not draw enough unique words")
        w = "".join(rng.choice(alphabet) for _ in range(rng.randint(lo, hi)))
        if w in seen:
            continue
        seen.add(w)
        pairs.append((w, apply_rules(w, rules)))
    return pairs


def split_corpus(pairs: Sequence[Tuple[str, str]], valid_frac: float = 0.1,
                 test_frac: float = 0.1) -> Dict[str, List[Tuple[str, str]]]:
    out: Dict[str, List[Tuple[str, str]]] = {"train": [], "valid": [], "test": []}
    for p in pairs:
        out[split_of(p[0], valid_frac, test_frac)].append(p)
    return out


def write_tsv(pairs: Sequence[Tuple[str, str]], path) -> None:
    lines = []
    for s, t in pairs:
        if "\t" in s or "\t" in t or "\n" in s or "\n" in t:
            raise TSVError(f"pair {s!r}/{t!r} contains a tab or newline")
        lines.append(f"{s}\t{t}\n")
    atomic_write_text(path, "".join(lines))


def parse_tsv(text: str, name: str = "<tsv>") -> List[Tuple[str, str]]:
    text = text.replace("\r\n", "\n")
    if not text.strip():
        raise TSVError(f"{name}: empty corpus")
    pairs = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if line == "" and lineno == text.count("\n") + 1:
            break
        parts = line.split("\t")
        if len(parts) != 2:
            raise TSVError(f"{name}:{lineno}: expected exactly one tab, found {len(parts) - 1}")
        pairs.append((parts[0], parts[1]))
    return pairs


def load_tsv(path) -> List[Tuple[str, str]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise TSVError(f"cannot read {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TSVError(f"{path}: not valid UTF-8 ({exc})") from exc
    return parse_tsv(text, str(path))
