"""Two-stage training: representation learning (stage 1) and generative learning (stage 2)."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import checkpoint as ckpt
from .config import TrainConfig
from .data import PairedSample
from .frozen import FrozenDecoderLM
from .masks import MULTIMODAL_CAUSAL
from .model import BridgeModel
from .noise import fit_gmm2, noise_posterior, roc_auc, smoothing_rates
from .objectives import (
    citg_loss,
    citm_loss,
    generative_loss,
    itc_loss,
    itm_scores,
    mine_hard_negatives,
    nitc_loss,
    per_sample_itc,
    similarity_matrix,
)
from .optim import AdamState, adamw_step, cosine_lr, zero_grads
from .tensor import Tensor, backward, no_grad, parameter
from .vocab import DEC, EOS, NUM_RESERVED, caption_tokens, pad_batch, to_noun, to_token

log = logging.getLogger(__name__)

PHASES = ("warmup", "estimate", "nitc", "refresh", "post_refresh", "done")
TRAIN_PHASES = ("warmup", "nitc", "post_refresh")


class FrozenHashMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    curves: list[tuple[int, str, float]] = field(default_factory=list)
    phases: dict[str, dict[str, float]] = field(default_factory=dict)
    noise: dict[str, Any] = field(default_factory=dict)
    retrieval: dict[str, float] = field(default_factory=dict)
    stage2: dict[str, Any] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)

    def to_json(self, include_timing: bool = False) -> dict:
        """Deterministic content; wall-clock only on request."""
        d = {
            "curves": [list(c) for c in self.curves],
            "phases": self.phases,
            "noise": self.noise,
            "retrieval": self.retrieval,
            "stage2": self.stage2,
        }
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        return cls(
            curves=[(int(s), str(c), float(v)) for s, c, v in d.get("curves", [])],
            phases=d.get("phases", {}),
            noise=d.get("noise", {}),
            retrieval=d.get("retrieval", {}),
            stage2=d.get("stage2", {}),
            wall_clock=d.get("wall_clock", {}),
        )

    def curves_csv(self) -> str:
        lines = ["step,component,value"]
        lines += [f"{s},{c},{v!r}" for s, c, v in self.curves]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# batched no-grad helpers
# ---------------------------------------------------------------------------


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def embed_all(model: BridgeModel, image_feats: np.ndarray, captions_tok: list[list[int]], chunk: int = 128):
    """Per-query image ITC vectors (N, Q, D) and text ITC vectors (N, D)."""
    zi, zt = [], []
    with no_grad():
        for sl in _chunks(len(captions_tok), chunk):
            zi.append(model.encode_image(image_feats[sl]).itc_image.data)
            zt.append(model.encode_captions(captions_tok[sl]).itc_text.data)
    return np.concatenate(zi), np.concatenate(zt)


def full_similarity(model: BridgeModel, image_feats, captions_tok, tau: float, pooling: str) -> np.ndarray:
    zi, zt = embed_all(model, image_feats, captions_tok)
    with no_grad():
        return similarity_matrix(Tensor(zi), Tensor(zt), tau, pooling).data


def dataset_itc_losses(model: BridgeModel, image_feats, captions_tok, tau: float, pooling: str) -> np.ndarray:
    """Per-pair ITC loss over the whole dataset as one batch, weights fixed."""
    s = full_similarity(model, image_feats, captions_tok, tau, pooling)
    with no_grad():
        return per_sample_itc(Tensor(s)).data


def concept_tokens(concepts: list[list[int]] | None, idx) -> np.ndarray | None:
    if concepts is None:
        return None
    return np.array([[to_token(c) for c in concepts[i]] for i in idx], dtype=np.int64).reshape(len(idx), -1)


# ---------------------------------------------------------------------------
# caption refresh
# ---------------------------------------------------------------------------


def greedy_decode(
    model: BridgeModel,
    image_feats: np.ndarray,
    concepts: np.ndarray | None,
    num_nouns: int,
    max_len: int = 8,
) -> tuple[list[list[int]], int]:
    """Greedy captions (noun ids) from [DEC]; returns (captions, number truncated)."""
    B = image_feats.shape[0]
    allowed = np.zeros(model.vocab_size, dtype=bool)
    allowed[NUM_RESERVED : NUM_RESERVED + num_nouns] = True
    allowed[EOS] = True
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with no_grad():
        for _ in range(max_len + 1):
            live = np.flatnonzero(~done)
            if live.size == 0:
                break
            tokens, valid = pad_batch([[to_token(t) for t in out[i]] for i in live], lead=DEC)
            conc = None if concepts is None else concepts[live]
            fwd = model.forward_multimodal(image_feats[live], conc, tokens, valid, MULTIMODAL_CAUSAL)
            last = valid.sum(axis=1) - 1
            logits = model.lm_logits(fwd.text_states).data[np.arange(live.size), last]
            logits = np.where(allowed, logits, -np.inf)
            nxt = logits.argmax(axis=1)
            for row, tok in zip(live, nxt):
                if tok == EOS:
                    done[row] = True
                elif len(out[row]) >= max_len:
                    done[row] = True
                else:
                    out[row].append(to_noun(tok))
    truncated = int(sum(len(c) >= max_len for c in out))
    return out, truncated


def refresh_captions(
    model: BridgeModel,
    samples: list[PairedSample],
    image_feats: np.ndarray,
    concepts: list[list[int]] | None,
    epsilon: np.ndarray,
    num_nouns: int,
    threshold: float = 0.5,
    max_len: int = 8,
) -> list[PairedSample]:
    """Replace captions of pairs with noise probability above ``threshold``.

    Replaced samples keep their old caption in ``original_caption``.
    """
    epsilon = np.asarray(epsilon)
    sel = np.flatnonzero(epsilon > threshold)
    revised = [dataclasses.replace(s) for s in samples]
    if sel.size == 0:
        return revised
    new_caps: list[list[int]] = []
    truncated = 0
    for sl in _chunks(sel.size, 128):
        part = sel[sl]
        caps, tr = greedy_decode(model, image_feats[part], concept_tokens(concepts, part), num_nouns, max_len)
        new_caps += caps
        truncated += tr
    if truncated:
        log.warning("event=refresh_truncated count=%d max_len=%d", truncated, max_len)
    for i, cap in zip(sel, new_caps):
        s = revised[i]
        revised[i] = dataclasses.replace(s, caption=cap, original_caption=list(s.caption))
    return revised


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


class Stage1Trainer:
    """Stage-1 pipeline as a resumable state machine.

    warmup (ITC + CITG + CITM) -> estimate (GMM over per-pair ITC losses)
    -> nitc (NITC + CITG + CITM) -> refresh (rewrite likely-noisy captions)
    -> post_refresh (same mix on revised pairs).
    """

    def __init__(
        self,
        cfg: TrainConfig,
        model: BridgeModel,
        samples: list[PairedSample],
        image_feats: np.ndarray,
        concepts: list[list[int]] | None,
        num_nouns: int,
        pooling: str = "max",
        frozen_params: dict[str, Tensor] | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.model = model
        self.samples = list(samples)
        self.image_feats = np.asarray(image_feats)
        self.concepts = concepts if cfg.use_concepts else None
        self.num_nouns = num_nouns
        self.pooling = pooling
        self.frozen_params = frozen_params or {}
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = AdamState()
        self.phase = "warmup"
        self.phase_step = 0
        self.global_step = 0
        self.epsilon: np.ndarray | None = None
        self.omega: np.ndarray | None = None
        self.report = MetricsReport()
        self._captions_tok = [caption_tokens(s.caption) for s in self.samples]

    # -- schedule -------------------------------------------------------------
    def phase_length(self, phase: str) -> int:
        return {
            "warmup": self.cfg.warmup_steps,
            "nitc": self.cfg.nitc_steps,
            "post_refresh": self.cfg.post_refresh_steps,
        }.get(phase, 0)

    @property
    def total_steps(self) -> int:
        return sum(self.phase_length(p) for p in TRAIN_PHASES)

    def _advance(self) -> None:
        self.phase = PHASES[PHASES.index(self.phase) + 1]
        self.phase_step = 0

    # -- one optimisation step ------------------------------------------------
    def _contrastive(self, s: Tensor, idx: np.ndarray) -> tuple[str, Tensor]:
        if self.phase != "warmup" and self.cfg.use_nitc and self.omega is not None:
            return "nitc", nitc_loss(s, self.omega[idx], self.cfg.strict_itc_denominator)
        return "itc", itc_loss(s)

    def losses(self, idx: np.ndarray) -> dict[str, Tensor]:
        cfg = self.cfg
        feats = self.image_feats[idx]
        caps = [self._captions_tok[i] for i in idx]
        conc = concept_tokens(self.concepts, idx)
        m = self.model
        zi = m.encode_image(feats).itc_image
        zt = m.encode_captions(caps).itc_text
        s = similarity_matrix(zi, zt, cfg.tau, self.pooling)
        name, contrastive = self._contrastive(s, idx)
        neg_t, neg_i = mine_hard_negatives(s.data, self.rng)
        out = {name: contrastive}
        out["citm"] = citm_loss(m, feats, conc, caps, neg_t, neg_i)
        out["citg"] = citg_loss(m, feats, conc, caps)
        return out

    def train_step(self) -> dict[str, float]:
        cfg = self.cfg
        n = len(self.samples)
        idx = np.sort(self.rng.choice(n, size=min(cfg.batch_size, n), replace=False))
        parts = self.losses(idx)
        weights = {"itc": cfg.w_contrastive, "nitc": cfg.w_contrastive, "citm": cfg.w_citm, "citg": cfg.w_citg}
        total = None
        for k, v in parts.items():
            term = v * weights[k]
            total = term if total is None else total + term
        backward(total)
        lr = cosine_lr(self.global_step, max(1, self.total_steps), cfg.peak_lr)
        params = self.model.parameters()
        adamw_step(params, self.opt, lr, cfg.betas, cfg.eps, cfg.weight_decay, cfg.max_grad_norm)
        zero_grads(params)
        values = {k: v.item() for k, v in parts.items()}
        values["total"] = total.item()
        for k, v in values.items():
            self.report.curves.append((self.global_step, k, v))
        self.global_step += 1
        self.phase_step += 1
        return values

    # -- non-training phases --------------------------------------------------
    def estimate_noise(self) -> None:
        cfg = self.cfg
        losses = dataset_itc_losses(self.model, self.image_feats, self._captions_tok, cfg.tau, self.pooling)
        gmm = fit_gmm2(losses)
        eps = noise_posterior(gmm, losses)
        self.epsilon = eps
        # without noise adaptation the estimate is diagnostic only
        self.omega = smoothing_rates(eps, cfg.lam, cfg.omega_max) if cfg.use_nitc else None
        labels = np.array([s.is_noisy for s in self.samples])
        info: dict[str, Any] = {
            "gmm_weight": [float(v) for v in gmm.weight],
            "gmm_mean": [float(v) for v in gmm.mean],
            "gmm_var": [float(v) for v in gmm.var],
            "degenerate": gmm.degenerate,
            "em_iterations": len(gmm.log_likelihood_trace) - 1,
            "mean_epsilon": float(eps.mean()),
        }
        if labels.any() and not labels.all():
            info["auc"] = roc_auc(eps, labels)
            info["loss_auc"] = roc_auc(losses, labels)
        self.report.noise = info

    def refresh(self) -> None:
        cfg = self.cfg
        if not cfg.use_nitc or self.epsilon is None:
            self.report.noise["refreshed"] = 0
            return
        revised = refresh_captions(
            self.model,
            self.samples,
            self.image_feats,
            self.concepts,
            self.epsilon,
            self.num_nouns,
            cfg.refresh_threshold,
            cfg.max_decode_len,
        )
        changed = [i for i, s in enumerate(revised) if s.original_caption is not None and self.samples[i].original_caption is None]
        self.samples = revised
        self._captions_tok = [caption_tokens(s.caption) for s in self.samples]
        self.report.noise["refreshed"] = len(changed)
        noisy = [i for i in changed if self.samples[i].is_noisy]
        self.report.noise["refreshed_noisy"] = len(noisy)
        fixed = sum(set(self.samples[i].caption) <= set(self.samples[i].true_objects) for i in changed)
        self.report.noise["refreshed_consistent"] = int(fixed)

    def _summarise_phase(self, phase: str, start: int) -> None:
        rows = [(c, v) for s, c, v in self.report.curves if s >= start]
        summary: dict[str, float] = {}
        for comp in sorted({c for c, _ in rows}):
            vals = [v for c, v in rows if c == comp]
            summary[f"{comp}_first"] = vals[0]
            summary[f"{comp}_last"] = vals[-1]
            summary[f"{comp}_mean"] = float(np.mean(vals))
        self.report.phases[phase] = summary

    # -- driver -----------------------------------------------------------------
    def run(
        self,
        stop_at: tuple[str, int] | None = None,
        on_step: Callable[["Stage1Trainer"], None] | None = None,
    ) -> MetricsReport:
        """Run until ``done`` or until (phase, phase_step) == ``stop_at``."""
        while self.phase != "done":
            if stop_at is not None and (self.phase, self.phase_step) == tuple(stop_at):
                return self.report
            t0 = time.perf_counter()
            if self.phase in TRAIN_PHASES:
                if self.phase_step == 0:
                    self._phase_start = self.global_step
                if self.phase_step >= self.phase_length(self.phase):
                    if self.phase_length(self.phase):
                        self._summarise_phase(self.phase, getattr(self, "_phase_start", self.global_step))
                    self._advance()
                    continue
                if (
                    self.phase == "nitc"
                    and self.cfg.reestimate_every
                    and self.phase_step
                    and self.phase_step % self.cfg.reestimate_every == 0
                ):
                    self.estimate_noise()
                self.train_step()
                if on_step is not None:
                    on_step(self)
            elif self.phase == "estimate":
                self.estimate_noise()
                self._advance()
            elif self.phase == "refresh":
                self.refresh()
                self._advance()
            self.report.wall_clock[self.phase] = self.report.wall_clock.get(self.phase, 0.0) + (
                time.perf_counter() - t0
            )
        return self.report

    # -- checkpointing ----------------------------------------------------------
    def save(self, path) -> None:
        arrays = []
        for name, p in self.model.parameters().items():
            arrays.append((name, "param", p.data, False))
            if name in self.opt.m:
                arrays.append((name, "adam_m", self.opt.m[name], False))
                arrays.append((name, "adam_v", self.opt.v[name], False))
        for name, p in self.frozen_params.items():
            arrays.append((name, "param", p.data, True))
        if self.epsilon is not None:
            arrays.append(("epsilon", "noise", self.epsilon, False))
        if self.omega is not None:
            arrays.append(("omega", "noise", self.omega, False))
        state = {
            "phase": self.phase,
            "phase_step": self.phase_step,
            "global_step": self.global_step,
            "phase_start": getattr(self, "_phase_start", 0),
            "adam_step": self.opt.step,
            "rng": self.rng.bit_generator.state,
            "report": self.report.to_json(),  # timing stays out so identical runs give identical bytes
            "samples": [s.to_json() for s in self.samples],
            "train_config": dataclasses.asdict(self.cfg),
        }
        ckpt.save_checkpoint(path, arrays, state)

    def load(self, path) -> None:
        arrays, state = ckpt.load_checkpoint(path)
        for name, p in self.model.parameters().items():
            p.data = arrays[(name, "param")][0].copy()
        self.opt = AdamState(step=int(state["adam_step"]))
        for (name, kind), (val, _) in arrays.items():
            if kind == "adam_m":
                self.opt.m[name] = val.copy()
            elif kind == "adam_v":
                self.opt.v[name] = val.copy()
        for name, p in self.frozen_params.items():
            if not np.array_equal(arrays[(name, "param")][0], p.data):
                raise FrozenHashMismatch(f"frozen parameter {name} differs from checkpoint")
        self.epsilon = arrays[("epsilon", "noise")][0].copy() if ("epsilon", "noise") in arrays else None
        self.omega = arrays[("omega", "noise")][0].copy() if ("omega", "noise") in arrays else None
        self.phase = state["phase"]
        self.phase_step = int(state["phase_step"])
        self.global_step = int(state["global_step"])
        self._phase_start = int(state["phase_start"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = state["rng"]
        self.report = MetricsReport.from_json(state["report"])
        self.report.curves = [tuple(c) for c in self.report.curves]
        self.samples = [PairedSample.from_json(d) for d in state["samples"]]
        self._captions_tok = [caption_tokens(s.caption) for s in self.samples]


def load_bridge_params(model: BridgeModel, path) -> dict[str, Any]:
    """Copy bridge parameters from a checkpoint into ``model``; returns the checkpoint state."""
    arrays, state = ckpt.load_checkpoint(path)
    for name, p in model.parameters().items():
        p.data = arrays[(name, "param")][0].copy()
    return {"state": state, "arrays": arrays}


# ---------------------------------------------------------------------------
# retrieval evaluation
# ---------------------------------------------------------------------------


def eval_retrieval(
    sim: np.ndarray,
    rerank: Callable[[np.ndarray, np.ndarray], np.ndarray] | None,
    k_candidates: int = 16,
    ks: tuple[int, ...] = (1, 5),
) -> dict[str, float]:
    """Recall@k in both directions; pair i is the match of image i and text i.

    Candidates are the top ``k_candidates`` by ``sim``; ``rerank(img_idx, txt_idx)``
    scores every candidate pair and fixes the final order (higher first).
    """
    sim = np.asarray(sim)
    N = sim.shape[0]
    k = min(k_candidates, N)
    out: dict[str, float] = {}
    for direction in ("i2t", "t2i"):
        scores = sim if direction == "i2t" else sim.T
        cand = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        queries = np.repeat(np.arange(N), k)
        flat = cand.reshape(-1)
        if rerank is not None:
            img, txt = (queries, flat) if direction == "i2t" else (flat, queries)
            r = np.asarray(rerank(img, txt)).reshape(N, k)
            order = np.argsort(-r, axis=1, kind="stable")
            cand = np.take_along_axis(cand, order, axis=1)
        hit = cand == np.arange(N)[:, None]
        rank = np.where(hit.any(axis=1), hit.argmax(axis=1), k)
        for kk in ks:
            out[f"{direction}_r{kk}"] = float(np.mean(rank < kk))
    out["mean_r1"] = 0.5 * (out["i2t_r1"] + out["t2i_r1"])
    return out


def model_reranker(model: BridgeModel, image_feats, concepts_tok: np.ndarray | None, captions_tok, chunk: int = 256):
    def rerank(img_idx: np.ndarray, txt_idx: np.ndarray) -> np.ndarray:
        out = []
        with no_grad():
            for sl in _chunks(len(img_idx), chunk):
                ii, tt = img_idx[sl], txt_idx[sl]
                conc = None if concepts_tok is None else concepts_tok[ii]
                out.append(itm_scores(model, image_feats[ii], conc, [captions_tok[j] for j in tt]))
        return np.concatenate(out)

    return rerank


def evaluate_model(
    model: BridgeModel,
    samples: list[PairedSample],
    image_feats: np.ndarray,
    concepts: list[list[int]] | None,
    tau: float = 1.0,
    pooling: str = "max",
    k_candidates: int = 16,
) -> dict[str, float]:
    samples_clean = [i for i, s in enumerate(samples) if not s.is_noisy]
    feats = image_feats[samples_clean]
    caps = [caption_tokens(samples[i].caption) for i in samples_clean]
    conc = concept_tokens(concepts, samples_clean)
    sim = full_similarity(model, feats, caps, tau, pooling)
    return eval_retrieval(sim, model_reranker(model, feats, conc, caps), k_candidates)


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def make_fc(d: int, d_llm: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed + 7919)
    a = 1.0 / np.sqrt(d)
    return {"fc.w": parameter(rng.uniform(-a, a, (d, d_llm)), "fc.w"), "fc.b": parameter(np.zeros(d_llm), "fc.b")}


def pretrain_decoder(
    lm: FrozenDecoderLM,
    captions: list[list[int]],
    steps: int,
    lr: float,
    batch_size: int = 32,
    seed: int = 0,
) -> list[float]:
    """Plain next-token training of the decoder on clean captions, before it is frozen."""
    from .objectives import unconditional_lm_loss

    if lm.frozen:
        raise RuntimeError("decoder is already frozen")
    rng = np.random.default_rng(seed + 104729)
    opt = AdamState()
    toks = [caption_tokens(c) for c in captions]
    curve = []
    params = lm.parameters()
    for step in range(steps):
        idx = rng.choice(len(toks), size=min(batch_size, len(toks)), replace=False)
        loss = unconditional_lm_loss(lm, [toks[i] for i in idx])
        backward(loss)
        adamw_step(params, opt, cosine_lr(step, max(1, steps), lr), weight_decay=0.0)
        zero_grads(params)
        curve.append(loss.item())
    return curve


def lm_loss_on(bridge, fc, lm, image_feats, captions_tok, chunk: int = 128) -> float:
    total, count = 0.0, 0
    with no_grad():
        for sl in _chunks(len(captions_tok), chunk):
            caps = captions_tok[sl]
            n_tok = sum(len(c) + 1 for c in caps)
            total += generative_loss(bridge, fc, lm, image_feats[sl], caps).item() * n_tok
            count += n_tok
    return total / count


def run_stage2(
    cfg: TrainConfig,
    bridge: BridgeModel,
    frozen_lm: FrozenDecoderLM,
    samples: list[PairedSample],
    image_feats: np.ndarray,
    heldout: tuple[np.ndarray, list[list[int]]] | None = None,
    frozen_hashes: dict[str, Callable[[], str]] | None = None,
) -> tuple[dict[str, Tensor], MetricsReport]:
    """Train bridge + FC through the frozen decoder with the LM loss."""
    if not frozen_lm.frozen:
        raise RuntimeError("stage 2 needs a frozen decoder")
    hashes = {"decoder": frozen_lm.content_hash}
    hashes.update(frozen_hashes or {})
    before = {k: f() for k, f in hashes.items()}
    fc = make_fc(bridge.cfg.d, frozen_lm.d_llm, cfg.seed)
    params = dict(bridge.parameters())
    params.update(fc)
    rng = np.random.default_rng(cfg.seed + 31337)
    opt = AdamState()
    report = MetricsReport()
    toks = [caption_tokens(s.caption) for s in samples]
    t0 = time.perf_counter()
    if heldout is not None:
        report.stage2["heldout_lm_loss_start"] = lm_loss_on(bridge, fc, frozen_lm, heldout[0], heldout[1])
    for step in range(cfg.stage2_steps):
        idx = np.sort(rng.choice(len(toks), size=min(cfg.stage2_batch_size, len(toks)), replace=False))
        loss = generative_loss(bridge, fc, frozen_lm, image_feats[idx], [toks[i] for i in idx])
        backward(loss)
        adamw_step(
            params,
            opt,
            cosine_lr(step, max(1, cfg.stage2_steps), cfg.stage2_lr),
            cfg.betas,
            cfg.eps,
            cfg.weight_decay,
            cfg.max_grad_norm,
        )
        zero_grads(params)
        report.curves.append((step, "lm", loss.item()))
    if heldout is not None:
        report.stage2["heldout_lm_loss_end"] = lm_loss_on(bridge, fc, frozen_lm, heldout[0], heldout[1])
    after = {k: f() for k, f in hashes.items()}
    report.stage2["frozen_hashes"] = after
    if after != before:
        raise FrozenHashMismatch("frozen parameters changed during stage 2")
    report.wall_clock["stage2"] = time.perf_counter() - t0
    return fc, report
