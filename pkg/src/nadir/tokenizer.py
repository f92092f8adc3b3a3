"""Character-level vocabularies and batch construction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import torch

log = logging.getLogger(__name__)

PAD, UNK, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<unk>", "<eos>")
UNK_GLYPH = "�"


class ConfigError(ValueError):
    pass


class LengthExceeded(ValueError):
    pass


@dataclass
class Vocab:
    char_to_id: Dict[str, int]
    id_to_char: List[str]

    @classmethod
    def from_chars(cls, chars: Iterable[str]) -> "Vocab":
        id_to_char = list(SPECIALS)
        char_to_id: Dict[str, int] = {}
        for ch in chars:
            if ch not in char_to_id:
                char_to_id[ch] = len(id_to_char)
                id_to_char.append(ch)
        return cls(char_to_id, id_to_char)

    def __len__(self) -> int:
        return len(self.id_to_char)

    def to_json(self) -> List[str]:
        return list(self.id_to_char[len(SPECIALS):])

    @classmethod
    def from_json(cls, chars: Sequence[str]) -> "Vocab":
        return cls.from_chars(chars)


def build_vocab(corpus: Iterable[Tuple[str, str]]) -> Tuple[Vocab, Vocab]:
    src_chars: List[str] = []
    tgt_chars: List[str] = []
    n = 0
    for src, tgt in corpus:
        src_chars.extend(src)
        tgt_chars.extend(tgt)
        n += 1
    if n == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    return Vocab.from_chars(src_chars), Vocab.from_chars(tgt_chars)


def encode(word: str, vocab: Vocab, max_len: int, append_eos: bool = True) -> List[int]:
    need = len(word) + int(append_eos)
    if need > max_len:
        raise LengthExceeded(f"{word!r} needs {need} positions, max_len is {max_len}")
    ids = [vocab.char_to_id.get(ch, UNK) for ch in word]
    if append_eos:
        ids.append(EOS)
    ids.extend([PAD] * (max_len - len(ids)))
    return ids


def decode_until_eos(ids: Iterable[int], vocab: Vocab) -> Tuple[str, bool]:
    table = vocab.id_to_char
    n = len(table)
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            return "".join(out), True
        if i == PAD:
            continue
        out.append(UNK_GLYPH if i == UNK or i >= n else table[i])
    return "".join(out), False


@dataclass
class Batch:
    src_ids: torch.Tensor  # [B, T] int64
    tgt_ids: torch.Tensor  # [B, T] int64
    src_pad_mask: torch.Tensor  # [B, T] bool, True at PAD
    tgt_lengths: torch.Tensor  # [B] index of the target EOS

    def __len__(self) -> int:
        return self.src_ids.shape[0]

    def slice(self, start: int, stop: int) -> "Batch":
        return Batch(self.src_ids[start:stop], self.tgt_ids[start:stop],
                     self.src_pad_mask[start:stop], self.tgt_lengths[start:stop])


@dataclass
class EncodedCorpus:
    pairs: List[Tuple[str, str]]
    src: torch.Tensor
    tgt: torch.Tensor
    skipped: int = 0
    skipped_examples: List[Tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def batch(self, index, trim: bool = False) -> Batch:
        """Rows ``index`` as a Batch; ``trim`` drops trailing columns that are PAD in every row."""
        src = self.src[index]
        tgt = self.tgt[index]
        if trim:
            used = ((src != PAD) | (tgt != PAD)).any(0).nonzero()
            width = int(used.max()) + 1 if used.numel() else 1
            src, tgt = src[:, :width], tgt[:, :width]
        return make_batch_from_ids(src, tgt)


def make_batch_from_ids(src: torch.Tensor, tgt: torch.Tensor) -> Batch:
    lengths = (tgt == EOS).int().argmax(dim=1)
    return Batch(src, tgt, src == PAD, lengths)


def encode_sources(words: Sequence[str], vocab: Vocab, max_len: int) -> torch.Tensor:
    return torch.tensor([encode(w, vocab, max_len, append_eos=True) for w in words], dtype=torch.long).reshape(-1, max_len)


def encode_corpus(pairs: Sequence[Tuple[str, str]], src_vocab: Vocab, tgt_vocab: Vocab,
                  max_len: int) -> EncodedCorpus:
    """Encode pairs, skipping (and counting) those that do not fit in max_len."""
    kept, src_rows, tgt_rows, skipped = [], [], [], []
    for s, t in pairs:
        try:
            srow = encode(s, src_vocab, max_len, append_eos=True)
            trow = encode(t, tgt_vocab, max_len, append_eos=True)
        except LengthExceeded:
            skipped.append((s, t))
            continue
        kept.append((s, t))
        src_rows.append(srow)
        tgt_rows.append(trow)
    if skipped:
        log.warning("skipped %d pair(s) longer than max_len=%d", len(skipped), max_len)
    src = torch.tensor(src_rows, dtype=torch.long).reshape(-1, max_len)
    tgt = torch.tensor(tgt_rows, dtype=torch.long).reshape(-1, max_len)
    return EncodedCorpus(kept, src, tgt, len(skipped), skipped[:20])
