"""Visual concept corpus and top-k concept retrieval."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PairedSample
from .frozen import RetrievalVlmStub
from .vocab import PROMPT_TEMPLATE, noun_id, noun_name

# scores closer than this count as tied and fall back to lexicographic order
TIE_DECIMALS = 12


@dataclass(frozen=True)
class ConceptCorpus:
    nouns: tuple[str, ...]
    counts: tuple[int, ...]
    min_count: int = 5

    def __len__(self) -> int:
        return len(self.nouns)

    def noun_ids(self) -> np.ndarray:
        return np.array([noun_id(n) for n in self.nouns], dtype=np.int64)


@dataclass(frozen=True)
class ConceptRetrieval:
    image_id: int
    concepts: tuple[str, ...]
    scores: tuple[float, ...]

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "concepts": list(self.concepts), "scores": list(self.scores)}

    @classmethod
    def from_json(cls, d: dict) -> "ConceptRetrieval":
        return cls(int(d["image_id"]), tuple(d["concepts"]), tuple(float(s) for s in d["scores"]))


def build_corpus(token_counts: dict[str, int], min_count: int = 5) -> ConceptCorpus:
    if any(c <= 0 for c in token_counts.values()):
        raise ValueError("token counts must be positive")
    kept = sorted(n for n, c in token_counts.items() if c >= min_count)
    if not kept:
        raise ValueError("empty corpus")
    return ConceptCorpus(tuple(kept), tuple(int(token_counts[n]) for n in kept), min_count)


def caption_token_counts(samples: list[PairedSample]) -> Counter:
    counts: Counter = Counter()
    for s in samples:
        counts.update(noun_name(t) for t in s.caption)
    return counts


def write_corpus(corpus: ConceptCorpus, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for n, c in zip(corpus.nouns, corpus.counts):
            fh.write(f"{n}\t{c}\n")


def read_token_counts(path) -> dict[str, int]:
    counts: dict[str, int] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}: line {lineno}: expected noun<TAB>count")
            counts[parts[0]] = counts.get(parts[0], 0) + int(parts[1])
    return counts


def concept_similarity(raw, corpus: ConceptCorpus, stub: RetrievalVlmStub, prompt: str = PROMPT_TEMPLATE) -> np.ndarray:
    """Score every corpus noun against one image (or a batch of images)."""
    v = stub.vp_embed(raw)
    t = stub.tp_embed_many(prompt, corpus.nouns)
    return v @ t.T


def _topk_order(scores: np.ndarray, k: int) -> np.ndarray:
    # corpus nouns are stored sorted, so index order is lexicographic order
    keyed = np.round(scores, TIE_DECIMALS)
    order = np.lexsort((np.arange(len(scores)), -keyed))
    return order[:k]


def retrieve_concepts(
    raw,
    corpus: ConceptCorpus,
    stub: RetrievalVlmStub,
    k: int = 3,
    image_id: int = -1,
    prompt: str = PROMPT_TEMPLATE,
) -> ConceptRetrieval:
    if k < 1:
        raise ValueError("k must be at least 1")
    scores = concept_similarity(raw, corpus, stub, prompt)
    top = _topk_order(scores, min(k, len(corpus)))
    return ConceptRetrieval(image_id, tuple(corpus.nouns[i] for i in top), tuple(float(scores[i]) for i in top))


def retrieve_all(
    samples: list[PairedSample], corpus: ConceptCorpus, stub: RetrievalVlmStub, k: int = 3
) -> list[ConceptRetrieval]:
    raws = np.stack([s.features for s in samples])
    all_scores = concept_similarity(raws, corpus, stub)
    out = []
    kk = min(k, len(corpus))
    for s, scores in zip(samples, all_scores):
        top = _topk_order(scores, kk)
        out.append(ConceptRetrieval(s.id, tuple(corpus.nouns[i] for i in top), tuple(float(scores[i]) for i in top)))
    return out


def concept_ids(retrievals: list[ConceptRetrieval]) -> list[list[int]]:
    return [[noun_id(n) for n in r.concepts] for r in retrievals]


def save_retrievals(retrievals: list[ConceptRetrieval], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in retrievals:
            fh.write(json.dumps(r.to_json()) + "\n")


def load_retrievals(path) -> list[ConceptRetrieval]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(ConceptRetrieval.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: malformed record on line {lineno}: {exc}") from exc
    return out
