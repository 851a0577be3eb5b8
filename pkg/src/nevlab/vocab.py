"""Token ids shared by the bridge model, the frozen decoder and the data files.

Captions on disk hold noun ids ``0..M-1``; the models see ``NUM_RESERVED + noun``.
"""

from __future__ import annotations

import numpy as np

PAD = 0
DEC = 1
CLS = 2
EOS = 3
NUM_RESERVED = 4
RESERVED_NAMES = {PAD: "[PAD]", DEC: "[DEC]", CLS: "[CLS]", EOS: "[EOS]"}

PROMPT_TEMPLATE = "a photo of a {noun}"


def noun_name(noun_id: int) -> str:
    return f"obj{noun_id:03d}"


def noun_id(name: str) -> int:
    if not name.startswith("obj"):
        raise KeyError(name)
    return int(name[3:])


def vocab_size(num_nouns: int) -> int:
    return NUM_RESERVED + num_nouns


def to_token(noun: int) -> int:
    return NUM_RESERVED + int(noun)


def to_noun(token: int) -> int:
    return int(token) - NUM_RESERVED


def pad_batch(seqs: list[list[int]], lead: int | None = None, tail: int | None = None):
    """Pad token sequences (already in token ids) to a rectangle.

    ``lead`` is prepended and ``tail`` appended to every sequence. Returns
    ``(tokens, valid)`` int64/bool arrays of shape (B, T).
    """
    rows = [([lead] if lead is not None else []) + list(s) + ([tail] if tail is not None else []) for s in seqs]
    T = max(1, max((len(r) for r in rows), default=1))
    tokens = np.full((len(rows), T), PAD, dtype=np.int64)
    valid = np.zeros((len(rows), T), dtype=bool)
    for i, r in enumerate(rows):
        tokens[i, : len(r)] = r
        valid[i, : len(r)] = True
    return tokens, valid


def caption_tokens(caption: list[int]) -> list[int]:
    return [to_token(n) for n in caption]
