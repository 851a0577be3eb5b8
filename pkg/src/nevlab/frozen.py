"""Frozen stand-ins: image encoder, decoder LM, and the retrieval VLM used for concepts."""

from __future__ import annotations

import hashlib
import zlib

import numpy as np

from . import nn
from .data import WorldConfig, object_basis
from .masks import with_key_padding
from .tensor import Tensor, getitem, mean
from .vocab import PROMPT_TEMPLATE, noun_id


class FrozenImageEncoder:
    """Fixed seeded linear map from raw features to a patch sequence."""

    def __init__(self, raw_dim: int, num_patches: int = 4, enc_dim: int = 16, seed: int = 7):
        self.raw_dim = raw_dim
        self.num_patches = num_patches
        self.enc_dim = enc_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((raw_dim, num_patches * enc_dim))
        w.setflags(write=False)
        self.projection = w

    def __call__(self, raw: np.ndarray) -> np.ndarray:
        return self.image_encode(raw)

    def image_encode(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != self.raw_dim:
            raise ValueError(f"expected raw features of width {self.raw_dim}, got {raw.shape[-1]}")
        out = raw @ self.projection
        return out.reshape(*raw.shape[:-1], self.num_patches, self.enc_dim)

    def parameters(self) -> dict[str, Tensor]:
        return {"image_encoder.projection": Tensor(self.projection)}

    def content_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.projection, dtype="<f8").tobytes()).hexdigest()


class FrozenDecoderLM:
    """Toy causal transformer LM conditioned additively on the mean prefix embedding."""

    def __init__(
        self,
        vocab_size: int,
        d_llm: int = 32,
        max_len: int = 16,
        heads: int = 2,
        layers: int = 1,
        seed: int = 11,
    ):
        self.vocab_size = vocab_size
        self.d_llm = d_llm
        self.max_len = max_len
        self.heads = heads
        self.layers = layers
        self.frozen = False
        store = nn.ParamStore(seed, 1.0 / np.sqrt(d_llm))
        store.uniform("lm.tok", (vocab_size, d_llm))
        store.uniform("lm.pos", (max_len, d_llm))
        for i in range(layers):
            store.norm(f"lm.{i}.ln1", d_llm)
            store.attention(f"lm.{i}.attn", d_llm, d_llm, d_llm)
            store.norm(f"lm.{i}.ln2", d_llm)
            store.ffn(f"lm.{i}.ffn", d_llm, 2 * d_llm)
        store.norm("lm.ln_f", d_llm)
        store.linear("lm.head", d_llm, vocab_size)
        self.params = store.params

    def freeze(self) -> "FrozenDecoderLM":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def content_hash(self) -> str:
        return nn.content_hash(self.params)

    def decoder_logits(self, prefix: Tensor | None, tokens, valid=None) -> Tensor:
        """Next-token logits for every position of ``tokens``.

        ``tokens`` is (T,) or (B, T); ``prefix`` is (P, d_llm) or (B, P, d_llm) and
        enters as its mean added to every input embedding, so a zero or empty
        prefix leaves the logits untouched.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
            if prefix is not None and prefix.ndim == 2:
                prefix = prefix.reshape(1, *prefix.shape)
        if tokens.size and (tokens.max() >= self.vocab_size or tokens.min() < 0):
            raise ValueError("token id outside decoder vocabulary")
        B, T = tokens.shape
        if T > self.max_len:
            raise ValueError(f"sequence of length {T} exceeds decoder max_len {self.max_len}")
        if valid is None:
            valid = np.ones((B, T), dtype=bool)
        p = self.params
        x = getitem(p["lm.tok"], tokens) + getitem(p["lm.pos"], slice(0, T))
        if prefix is not None and prefix.shape[-2] > 0:
            if prefix.shape[-1] != self.d_llm:
                raise ValueError("prefix width does not match d_llm")
            x = x + mean(prefix, axis=-2, keepdims=True)
        allow = with_key_padding(np.tril(np.ones((T, T), dtype=bool)), valid)
        for i in range(self.layers):
            h = nn.norm(p, f"lm.{i}.ln1", x)
            x = x + nn.attention(p, f"lm.{i}.attn", h, h, allow, self.heads)
            x = x + nn.ffn(p, f"lm.{i}.ffn", nn.norm(p, f"lm.{i}.ln2", x))
        logits = nn.linear(p, "lm.head", nn.norm(p, "lm.ln_f", x))
        return logits[0] if single else logits


class RetrievalVlmStub:
    """Pre-trained retrieval VLM replaced by an exact orthonormal object basis.

    Embeddings live in R^(M+1): one orthonormal direction per noun plus a
    prompt axis. The canonical prompt template adds nothing along that axis;
    any other prompt adds a fixed shared offset, which rescales all scores
    equally and so never changes a ranking.
    """

    def __init__(self, world: WorldConfig, seed: int = 99, presence_threshold: float = 0.5):
        self.world = world
        self.raw_basis = object_basis(world)
        M = world.vocab_size
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((M + 1, M + 1)))
        q = q * np.sign(np.diag(r))
        self.basis = q[:, :M].T.copy()  # (M, M+1)
        self.prompt_axis = q[:, M].copy()
        self.threshold = presence_threshold

    @property
    def num_nouns(self) -> int:
        return self.basis.shape[0]

    def detect(self, raw) -> np.ndarray:
        """Boolean presence vector(s) read off the raw features."""
        coef = np.asarray(raw, dtype=np.float64) @ self.raw_basis
        present = coef > self.threshold
        none = ~present.any(axis=-1)
        if np.any(none):
            # nothing clears the threshold: fall back to the strongest object
            best = np.argmax(coef, axis=-1)
            if present.ndim == 1:
                present[best] = True
            else:
                present[np.flatnonzero(none), best[none]] = True
        return present

    def vp_embed(self, raw) -> np.ndarray:
        present = self.detect(raw).astype(np.float64)
        v = present @ self.basis
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def prompt_offset(self, prompt: str) -> float:
        if prompt == PROMPT_TEMPLATE:
            return 0.0
        return 0.1 + (zlib.crc32(prompt.encode()) % 1000) / 1000.0

    def tp_embed(self, prompt: str, noun) -> np.ndarray:
        idx = noun_id(noun) if isinstance(noun, str) else int(noun)
        if not 0 <= idx < self.num_nouns:
            raise KeyError(f"unknown noun {noun!r}")
        v = self.basis[idx] + self.prompt_offset(prompt) * self.prompt_axis
        return v / np.linalg.norm(v)

    def tp_embed_many(self, prompt: str, nouns) -> np.ndarray:
        return np.stack([self.tp_embed(prompt, n) for n in nouns])

    def caption_embed(self, caption: list[int]) -> np.ndarray:
        """Unit embedding of a caption's noun set (oracle text encoder for evaluation)."""
        if not caption:
            return self.prompt_axis.copy()
        v = self.basis[np.asarray(caption)].sum(axis=0)
        return v / np.linalg.norm(v)
