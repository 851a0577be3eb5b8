"""Self-attention masks over a (queries | concepts | text) layout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, masked_softmax, matmul, reshape, transpose

UNIMODAL = "unimodal"
MULTIMODAL_CAUSAL = "multimodal_causal"
BIDIRECTIONAL = "bidirectional"
MASK_KINDS = (UNIMODAL, MULTIMODAL_CAUSAL, BIDIRECTIONAL)


@dataclass(frozen=True)
class SegmentLayout:
    num_queries: int
    num_concepts: int
    num_text: int

    def __post_init__(self):
        if min(self.num_queries, self.num_concepts, self.num_text) < 0:
            raise ValueError("segment counts must be non-negative")
        if self.total < 1:
            raise ValueError("layout must contain at least one position")

    @property
    def total(self) -> int:
        return self.num_queries + self.num_concepts + self.num_text

    def slices(self) -> tuple[slice, slice, slice]:
        q, c = self.num_queries, self.num_concepts
        return slice(0, q), slice(q, q + c), slice(q + c, self.total)


@dataclass(frozen=True)
class AttentionMask:
    allow: np.ndarray  # (L, L) bool, row attends to column
    kind: str

    @property
    def size(self) -> int:
        return self.allow.shape[0]


def build_unimodal_mask(layout: SegmentLayout) -> AttentionMask:
    if layout.num_concepts != 0:
        raise ValueError("unimodal mask takes no concepts")
    allow = np.zeros((layout.total, layout.total), dtype=bool)
    qs, _, ts = layout.slices()
    allow[qs, qs] = True
    allow[ts, ts] = True
    return AttentionMask(allow, UNIMODAL)


def build_multimodal_causal_mask(layout: SegmentLayout) -> AttentionMask:
    # concept rows see queries and concepts only; they act as a conditioning prefix
    allow = np.zeros((layout.total, layout.total), dtype=bool)
    qs, cs, ts = layout.slices()
    allow[qs, qs] = True
    allow[cs, : cs.stop] = True
    allow[ts, : ts.start] = True
    n = layout.num_text
    allow[ts, ts] = np.tril(np.ones((n, n), dtype=bool))
    return AttentionMask(allow, MULTIMODAL_CAUSAL)


def build_bidirectional_mask(layout: SegmentLayout) -> AttentionMask:
    return AttentionMask(np.ones((layout.total, layout.total), dtype=bool), BIDIRECTIONAL)


_BUILDERS = {
    UNIMODAL: build_unimodal_mask,
    MULTIMODAL_CAUSAL: build_multimodal_causal_mask,
    BIDIRECTIONAL: build_bidirectional_mask,
}


def build_mask(kind: str, layout: SegmentLayout) -> AttentionMask:
    try:
        return _BUILDERS[kind](layout)
    except KeyError:
        raise ValueError(f"unknown mask kind {kind!r}") from None


def with_key_padding(mask: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Combine an (L, L) layout mask with per-example key validity (B, L) -> (B, L, L).

    Padded columns are blocked; the diagonal stays open so padded rows are never empty.
    """
    allow = mask[None, :, :] & valid[:, None, :]
    idx = np.arange(mask.shape[0])
    allow[:, idx, idx] = True
    return allow


def masked_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask | np.ndarray, heads: int
) -> Tensor:
    """Multi-head scaled dot-product attention under a boolean mask.

    ``q``/``k``/``v`` are (..., L, D); ``mask`` broadcasts against (..., L, L) and
    the same mask is applied to every head. Disallowed columns get exactly zero weight.
    """
    allow = mask.allow if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
    *lead, L, D = q.shape
    Lk = k.shape[-2]
    if D % heads:
        raise ValueError("model width must be divisible by the number of heads")
    if allow.shape[-2:] != (L, Lk):
        raise ValueError("mask does not match sequence length")
    dh = D // heads
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(x: Tensor, n: int) -> Tensor:
        return transpose(reshape(x, (*lead, n, heads, dh)), perm)

    qh, kh, vh = split(q, L), split(k, Lk), split(v, Lk)
    scores = matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    head_mask = allow[..., None, :, :] if allow.ndim > 2 else allow
    weights = masked_softmax(scores, head_mask)
    out = matmul(weights, vh)
    return reshape(transpose(out, perm), (*lead, L, D))
