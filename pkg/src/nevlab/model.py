"""Query-based bridging transformer between the frozen image encoder and text.

The image branch (learnable queries that cross-attend to image patches) and
the text branch (concepts + text tokens) keep separate layer norms and
feed-forward blocks but read one shared self-attention block per layer, so a
joint sequence ``[queries | concepts | text]`` can be processed under any of
the three attention masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .masks import (
    BIDIRECTIONAL,
    MULTIMODAL_CAUSAL,
    UNIMODAL,
    SegmentLayout,
    build_mask,
    with_key_padding,
)
from .tensor import Tensor, concat, getitem, l2_normalize_rows, mean
from .vocab import CLS, pad_batch


@dataclass(frozen=True)
class ModelConfig:
    num_queries: int = 8
    d: int = 32
    layers: int = 2
    heads: int = 4
    d_itc: int = 16
    ffn_hidden: int = 64
    max_text: int = 16
    num_patches: int = 4
    enc_dim: int = 16
    d_llm: int = 32
    max_concepts: int = 3
    pooling: str = "max"  # or "mean"
    seed: int = 0


@dataclass
class ForwardOutput:
    query_states: Tensor | None
    concept_states: Tensor | None = None
    text_states: Tensor | None = None
    itc_image: Tensor | None = None
    itc_text: Tensor | None = None


class BridgeModel:
    def __init__(self, cfg: ModelConfig, vocab_size: int):
        self.cfg = cfg
        self.vocab_size = vocab_size
        d = cfg.d
        s = nn.ParamStore(cfg.seed, 1.0 / np.sqrt(d))
        s.uniform("queries", (cfg.num_queries, d))
        s.uniform("tok", (vocab_size, d))
        s.uniform("pos", (cfg.max_text, d))
        s.uniform("seg", (2, d))  # 0: concept, 1: text
        for i in range(cfg.layers):
            s.attention(f"L{i}.sa", d, d, d)  # shared by both branches
            for br in ("q", "t"):
                s.norm(f"L{i}.{br}.ln1", d)
                s.norm(f"L{i}.{br}.ln2", d)
                s.ffn(f"L{i}.{br}.ffn", d, cfg.ffn_hidden)
            s.norm(f"L{i}.q.ln_ca", d)
            s.attention(f"L{i}.q.ca", d, cfg.enc_dim, d)
        s.norm("q.ln_f", d)
        s.norm("t.ln_f", d)
        s.linear("proj_image", d, cfg.d_itc)
        s.linear("proj_text", d, cfg.d_itc)
        s.linear("itm_head", d, 2)
        s.linear("lm_head", d, vocab_size)
        self.params: dict[str, Tensor] = s.params

    # -- parameters ---------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def shared_attention_names(self) -> list[str]:
        return [n for n in self.params if ".sa." in n]

    def content_hash(self) -> str:
        return nn.content_hash(self.params)

    # -- embeddings ---------------------------------------------------------
    def _embed_text(self, concepts: np.ndarray | None, tokens: np.ndarray | None) -> Tensor | None:
        p = self.params
        parts = []
        if concepts is not None and concepts.shape[1] > 0:
            if concepts.shape[1] > self.cfg.max_concepts:
                raise ValueError(f"concept list longer than max_concepts={self.cfg.max_concepts}")
            parts.append(getitem(p["tok"], concepts) + getitem(p["seg"], 0))
        if tokens is not None and tokens.shape[1] > 0:
            T = tokens.shape[1]
            if T > self.cfg.max_text:
                raise ValueError(f"text of length {T} exceeds max_text={self.cfg.max_text}")
            parts.append(getitem(p["tok"], tokens) + getitem(p["pos"], slice(0, T)) + getitem(p["seg"], 1))
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else concat(parts, axis=1)

    def _check_tokens(self, tokens: np.ndarray) -> None:
        if tokens.size and (tokens.max() >= self.vocab_size or tokens.min() < 0):
            raise ValueError("token id outside vocabulary")

    # -- core stack ---------------------------------------------------------
    def _stack(self, xq: Tensor | None, xt: Tensor | None, allow: np.ndarray, img: Tensor | None):
        p, heads = self.params, self.cfg.heads
        nq = 0 if xq is None else xq.shape[-2]
        for i in range(self.cfg.layers):
            hs = []
            if xq is not None:
                hs.append(nn.norm(p, f"L{i}.q.ln1", xq))
            if xt is not None:
                hs.append(nn.norm(p, f"L{i}.t.ln1", xt))
            h = hs[0] if len(hs) == 1 else concat(hs, axis=-2)
            a = nn.attention(p, f"L{i}.sa", h, h, allow, heads)
            if xq is not None and xt is not None:
                xq = xq + a[:, :nq]
                xt = xt + a[:, nq:]
            elif xq is not None:
                xq = xq + a
            else:
                xt = xt + a
            if xq is not None:
                full = np.ones((nq, img.shape[-2]), dtype=bool)
                xq = xq + nn.attention(p, f"L{i}.q.ca", nn.norm(p, f"L{i}.q.ln_ca", xq), img, full, heads)
                xq = xq + nn.ffn(p, f"L{i}.q.ffn", nn.norm(p, f"L{i}.q.ln2", xq))
            if xt is not None:
                xt = xt + nn.ffn(p, f"L{i}.t.ffn", nn.norm(p, f"L{i}.t.ln2", xt))
        if xq is not None:
            xq = nn.norm(p, "q.ln_f", xq)
        if xt is not None:
            xt = nn.norm(p, "t.ln_f", xt)
        return xq, xt

    def _queries(self, batch: int) -> Tensor:
        q = self.params["queries"]
        return q.reshape(1, *q.shape) + Tensor(np.zeros((batch, 1, 1)))

    def _image_input(self, image_feats) -> Tensor:
        img = Tensor(np.asarray(image_feats, dtype=np.float64))
        if img.shape[-1] != self.cfg.enc_dim:
            raise ValueError(f"image features of width {img.shape[-1]} do not match enc_dim={self.cfg.enc_dim}")
        return img

    # -- public forwards ----------------------------------------------------
    def encode_image(self, image_feats) -> ForwardOutput:
        """(B, P, enc_dim) patches -> query states and per-query unit ITC vectors."""
        img = self._image_input(image_feats)
        B = img.shape[0]
        allow = build_mask(UNIMODAL, SegmentLayout(self.cfg.num_queries, 0, 0)).allow
        xq, _ = self._stack(self._queries(B), None, allow, img)
        z = l2_normalize_rows(nn.linear(self.params, "proj_image", xq))
        return ForwardOutput(query_states=xq, itc_image=z)

    def encode_text(self, tokens: np.ndarray, valid: np.ndarray) -> ForwardOutput:
        """Text-only pass; ``tokens`` must already start with [CLS]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[1] == 0:
            raise ValueError("empty token list")
        self._check_tokens(tokens)
        xt = self._embed_text(None, tokens)
        allow = with_key_padding(build_mask(UNIMODAL, SegmentLayout(0, 0, tokens.shape[1])).allow, valid)
        _, xt = self._stack(None, xt, allow, None)
        z = l2_normalize_rows(nn.linear(self.params, "proj_text", xt[:, 0]))
        return ForwardOutput(query_states=None, text_states=xt, itc_text=z)

    def encode_captions(self, captions_tok: list[list[int]]) -> ForwardOutput:
        tokens, valid = pad_batch(captions_tok, lead=CLS)
        return self.encode_text(tokens, valid)

    def forward_multimodal(
        self,
        image_feats,
        concepts: np.ndarray | None,
        tokens: np.ndarray,
        valid: np.ndarray,
        mask_kind: str,
    ) -> ForwardOutput:
        if mask_kind not in (MULTIMODAL_CAUSAL, BIDIRECTIONAL):
            raise ValueError(f"unknown mask kind for a joint forward: {mask_kind!r}")
        tokens = np.asarray(tokens, dtype=np.int64)
        self._check_tokens(tokens)
        img = self._image_input(image_feats)
        B = img.shape[0]
        nc = 0 if concepts is None else concepts.shape[1]
        if concepts is not None:
            concepts = np.asarray(concepts, dtype=np.int64)
            self._check_tokens(concepts)
        nq, T = self.cfg.num_queries, tokens.shape[1]
        layout = SegmentLayout(nq, nc, T)
        key_valid = np.concatenate([np.ones((B, nq + nc), dtype=bool), valid], axis=1)
        allow = with_key_padding(build_mask(mask_kind, layout).allow, key_valid)
        xt = self._embed_text(concepts, tokens)
        xq, xt = self._stack(self._queries(B), xt, allow, img)
        return ForwardOutput(
            query_states=xq,
            concept_states=xt[:, :nc] if nc else None,
            text_states=xt[:, nc:],
        )

    # -- heads ----------------------------------------------------------------
    def itm_logits(self, query_states: Tensor) -> Tensor:
        """Per-query 2-class logits averaged over queries -> (B, 2)."""
        return mean(nn.linear(self.params, "itm_head", query_states), axis=1)

    def lm_logits(self, text_states: Tensor) -> Tensor:
        return nn.linear(self.params, "lm_head", text_states)
