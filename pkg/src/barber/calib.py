"""Synthetic calibration corpora and the plain-text token file format.

Token files look like::

    vocab=32
    3 17 0 5 ...
    9 9 2 ...

one sequence per line, space-separated decimal ids.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

MAX_SEQ_LEN = 1 << 16


@dataclass(frozen=True)
class CalibrationSet:
    sequences: tuple[tuple[int, ...], ...]
    vocab_size: int
    provenance: str = ""

    def __post_init__(self):
        if not self.sequences:
            raise InputError("calibration set is empty")
        for i, seq in enumerate(self.sequences):
            if not 1 <= len(seq) <= MAX_SEQ_LEN:
                raise InputError(f"sequence {i} has length {len(seq)}")
            for pos, t in enumerate(seq):
                if not 0 <= t < self.vocab_size:
                    raise InputError(f"sequence {i} position {pos}: token {t} outside vocab {self.vocab_size}")

    def __len__(self):
        return len(self.sequences)

    def head(self, n: int) -> "CalibrationSet":
        return CalibrationSet(self.sequences[:n], self.vocab_size, f"{self.provenance}[:{n}]")


def parse_distribution(text: str) -> tuple[str, float]:
    """``"uniform"`` or ``"zipf"`` / ``"zipf:1.2"`` -> (name, exponent)."""
    name, _, arg = text.partition(":")
    if name == "uniform" and not arg:
        return "uniform", 0.0
    if name == "zipf":
        s = float(arg) if arg else 1.2
        if s <= 0:
            raise InputError("zipf exponent must be positive")
        return "zipf", s
    raise InputError(f"unknown token distribution {text!r}")


def gen_synthetic(seed: int, n_samples: int, length: int, vocab_size: int,
                  distribution: str = "zipf:1.2") -> CalibrationSet:
    """Deterministic random token streams.

    With ``zipf:s`` token id ``r`` (0-based rank) has probability proportional
    to ``(r + 1) ** -s``.
    """
    if min(n_samples, length, vocab_size) < 1:
        raise InputError("n_samples, length and vocab_size must be positive")
    name, s = parse_distribution(distribution)
    rng = np.random.default_rng(seed)
    if name == "uniform":
        ids = rng.integers(0, vocab_size, size=(n_samples, length))
    else:
        p = np.arange(1, vocab_size + 1, dtype=np.float64) ** -s
        ids = rng.choice(vocab_size, size=(n_samples, length), p=p / p.sum())
    seqs = tuple(tuple(int(t) for t in row) for row in ids)
    return CalibrationSet(seqs, vocab_size, f"synthetic:seed={seed}:{distribution}")


def dumps_tokens(calib: CalibrationSet) -> str:
    lines = [f"vocab={calib.vocab_size}"]
    lines += [" ".join(map(str, seq)) for seq in calib.sequences]
    return "\n".join(lines) + "\n"


def loads_tokens(text: str, provenance: str = "") -> CalibrationSet:
    lines = text.splitlines()
    if not lines or not any(line.strip() for line in lines):
        raise InputError("token file is empty")
    head = lines[0].strip()
    if not head.startswith("vocab="):
        raise FormatError("first line must be 'vocab=<v>'", line=1)
    try:
        vocab = int(head[len("vocab="):])
    except ValueError:
        raise FormatError(f"bad vocab header {head!r}", line=1) from None
    if vocab < 1:
        raise FormatError("vocab must be positive", line=1)
    seqs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            ids = [int(tok) for tok in line.split()]
        except ValueError:
            raise FormatError("non-integer token", line=lineno) from None
        for pos, t in enumerate(ids):
            if not 0 <= t < vocab:
                raise FormatError(f"token {t} at position {pos} outside vocab {vocab}", line=lineno)
        if len(ids) > MAX_SEQ_LEN:
            raise FormatError(f"sequence longer than {MAX_SEQ_LEN}", line=lineno)
        seqs.append(tuple(ids))
    if not seqs:
        raise InputError("token file has a header but no sequences")
    return CalibrationSet(tuple(seqs), vocab, provenance)


def save_tokens(calib: CalibrationSet, path) -> None:
    Path(path).write_text(dumps_tokens(calib), encoding="utf-8")


def load_tokens(path) -> CalibrationSet:
    return loads_tokens(Path(path).read_text(encoding="utf-8"), provenance=str(path))
