"""Training objectives: ITC, noise-adaptive ITC, CITG, CITM, and the generative loss."""

from __future__ import annotations

import numpy as np

from .frozen import FrozenDecoderLM
from .masks import BIDIRECTIONAL, MULTIMODAL_CAUSAL
from .model import BridgeModel
from .tensor import (
    Tensor,
    cross_entropy,
    getitem,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    reshape,
    tmax,
)
from .vocab import CLS, DEC, EOS, pad_batch


def similarity_matrix(v: Tensor, t: Tensor, tau: float = 1.0, pooling: str = "max") -> Tensor:
    """s[i, j] = <v_i, t_j> / tau.

    ``v`` may be (B, D) or (B, Q, D) per-query vectors; with queries the pair
    score is the max (or, with ``pooling="mean"``, the mean) over queries.
    """
    for name, x in (("image", v), ("text", t)):
        norms = np.linalg.norm(x.data, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError(f"{name} embeddings are not unit-norm")
    if v.ndim == 2:
        return matmul(v, t.T) * (1.0 / tau)
    B, Q, D = v.shape
    per_query = reshape(matmul(reshape(v, (B * Q, D)), t.T), (B, Q, t.shape[0]))
    if pooling == "max":
        pooled = tmax(per_query, axis=1)
    elif pooling == "mean":
        pooled = mean(per_query, axis=1)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return pooled * (1.0 / tau)


def _ce_rows(s: Tensor) -> Tensor:
    B = s.shape[0]
    lp = log_softmax(s, axis=-1)
    return -getitem(lp, (np.arange(B), np.arange(B)))


def per_sample_itc(s: Tensor) -> Tensor:
    """l_i = (row CE_i + column CE_i) / 2 for the positive on the diagonal."""
    if s.shape[0] < 2:
        raise ValueError("ITC needs a batch of at least 2")
    return (_ce_rows(s) + _ce_rows(s.T)) * 0.5


def itc_loss(s: Tensor) -> Tensor:
    return mean(per_sample_itc(s))


def _nitc_direction(s: Tensor, omega: np.ndarray, strict: bool) -> Tensor:
    B = s.shape[0]
    diag = (np.arange(B), np.arange(B))
    if strict:
        lse = logsumexp(s, axis=-1)
        pos = getitem(s, diag)
        return lse - pos - Tensor(np.log1p(-omega))
    with np.errstate(divide="ignore"):
        logw = np.repeat(np.log(omega / (B - 1))[:, None], B, axis=1)
        logw[diag] = np.log1p(-omega)
    adj = s + Tensor(logw)
    return logsumexp(adj, axis=-1) - getitem(adj, diag)


def nitc_loss(s: Tensor, omega, strict_itc_denominator: bool = False) -> Tensor:
    """Noise-adaptive contrastive loss, averaged over both directions.

    Row i compares the positive weighted by (1 - w_i) against the other
    entries weighted by w_i / (B - 1); column i uses the same weights for the
    text-to-image direction. With ``strict_itc_denominator`` the denominator
    is the plain softmax sum over the row.
    """
    omega = np.asarray(omega, dtype=np.float64).reshape(-1)
    B = s.shape[0]
    if B < 2:
        raise ValueError("NITC needs a batch of at least 2")
    if omega.shape != (B,):
        raise ValueError("omega must have one entry per pair")
    if (omega >= 1.0).any() or (omega < 0.0).any():
        raise ValueError("smoothing rates must lie in [0, 1)")
    lx = _nitc_direction(s, omega, strict_itc_denominator)
    ly = _nitc_direction(s.T, omega, strict_itc_denominator)
    return (lx.sum() + ly.sum()) * (1.0 / (2 * B))


def mine_hard_negatives(s, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample one in-batch negative per image and per text, p ~ softmax(similarity) off the diagonal."""
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    B = s.shape[0]
    if B < 2:
        raise ValueError("hard negative mining needs a batch of at least 2")

    def draw(m: np.ndarray) -> np.ndarray:
        z = np.where(np.eye(B, dtype=bool), -np.inf, m)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        cdf = np.cumsum(p, axis=1)
        u = rng.random(B)
        idx = (cdf <= u[:, None]).sum(axis=1)
        # rounding can leave u above the last cdf value
        last = B - 1 - np.argmax(p[:, ::-1] > 0, axis=1)
        idx = np.minimum(idx, last)
        assert not (idx == np.arange(B)).any()
        return idx

    neg_text = draw(s)
    neg_image = draw(s.T)
    return neg_text, neg_image


def _text_batch(captions_tok: list[list[int]], lead: int):
    return pad_batch(captions_tok, lead=lead)


def citm_loss(
    model: BridgeModel,
    image_feats: np.ndarray,
    concepts: np.ndarray | None,
    captions_tok: list[list[int]],
    neg_text_idx: np.ndarray,
    neg_image_idx: np.ndarray,
    return_logits: bool = False,
):
    """Matched / unmatched classification over positives plus both hard negatives.

    ``concepts`` (B, k) belong to the images and follow them into the negatives.
    """
    B = len(captions_tok)
    ar = np.arange(B)
    img_idx = np.concatenate([ar, ar, np.asarray(neg_image_idx)])
    txt_idx = np.concatenate([ar, np.asarray(neg_text_idx), ar])
    labels = np.concatenate([np.ones(B, dtype=np.int64), np.zeros(2 * B, dtype=np.int64)])
    tokens, valid = _text_batch([captions_tok[j] for j in txt_idx], CLS)
    conc = None if concepts is None else np.asarray(concepts)[img_idx]
    out = model.forward_multimodal(np.asarray(image_feats)[img_idx], conc, tokens, valid, BIDIRECTIONAL)
    logits = model.itm_logits(out.query_states)
    loss = cross_entropy(logits, labels)
    return (loss, logits) if return_logits else loss


def itm_scores(model: BridgeModel, image_feats, concepts, captions_tok) -> np.ndarray:
    """Matching score (positive minus negative logit) for aligned (image, text) rows."""
    tokens, valid = _text_batch(captions_tok, CLS)
    out = model.forward_multimodal(image_feats, concepts, tokens, valid, BIDIRECTIONAL)
    logits = model.itm_logits(out.query_states).data
    return logits[:, 1] - logits[:, 0]


def lm_targets(captions_tok: list[list[int]]):
    """Inputs start with [DEC]; targets are the caption followed by [EOS]."""
    inputs, valid = pad_batch(captions_tok, lead=DEC)
    targets, _ = pad_batch(captions_tok, tail=EOS)
    return inputs, valid, targets


def citg_loss(
    model: BridgeModel,
    image_feats: np.ndarray,
    concepts: np.ndarray | None,
    captions_tok: list[list[int]],
    per_token: bool = False,
):
    """Next-token loss over the text segment under the multimodal causal mask."""
    # an empty caption still predicts [EOS]; only a missing text is rejected
    if any(c is None for c in captions_tok):
        raise ValueError("empty text")
    inputs, valid, targets = lm_targets(captions_tok)
    out = model.forward_multimodal(image_feats, concepts, inputs, valid, MULTIMODAL_CAUSAL)
    logits = model.lm_logits(out.text_states)
    if per_token:
        lp = log_softmax(logits, axis=-1).data
        B, T = targets.shape
        nll = -lp[np.arange(B)[:, None], np.arange(T)[None, :], targets]
        return np.where(valid, nll, 0.0)
    return cross_entropy(logits, targets, weights=valid.astype(np.float64))


def project_prefix(bridge: BridgeModel, fc: dict[str, Tensor], image_feats) -> Tensor:
    q = bridge.encode_image(image_feats).query_states
    w = fc["fc.w"]
    if w.shape[0] != q.shape[-1]:
        raise ValueError("FC input width does not match the bridge width")
    return matmul(q, w) + fc["fc.b"]


def generative_loss(
    bridge: BridgeModel,
    fc: dict[str, Tensor],
    frozen_lm: FrozenDecoderLM,
    image_feats: np.ndarray,
    captions_tok: list[list[int]],
) -> Tensor:
    """LM loss of the frozen decoder conditioned on FC-projected query embeddings."""
    if fc["fc.w"].shape[1] != frozen_lm.d_llm:
        raise ValueError("FC output width does not match d_llm")
    prefix = project_prefix(bridge, fc, image_feats)
    inputs, valid, targets = lm_targets(captions_tok)
    logits = frozen_lm.decoder_logits(prefix, inputs, valid)
    return cross_entropy(logits, targets, weights=valid.astype(np.float64))


def unconditional_lm_loss(frozen_lm: FrozenDecoderLM, captions_tok: list[list[int]]) -> Tensor:
    inputs, valid, targets = lm_targets(captions_tok)
    logits = frozen_lm.decoder_logits(None, inputs, valid)
    return cross_entropy(logits, targets, weights=valid.astype(np.float64))
