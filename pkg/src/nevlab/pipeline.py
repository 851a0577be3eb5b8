"""End-to-end wiring: world, frozen parts, concepts, both training stages and the ablation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from .concepts import ConceptCorpus, build_corpus, caption_token_counts, concept_ids, retrieve_all
from .config import RunConfig
from .data import PairedSample, WorldConfig, features_matrix, generate_dataset
from .frozen import FrozenDecoderLM, FrozenImageEncoder, RetrievalVlmStub
from .model import BridgeModel
from .train import (
    Stage1Trainer,
    evaluate_model,
    pretrain_decoder,
    run_stage2,
)
from .vocab import caption_tokens, vocab_size

log = logging.getLogger(__name__)


@dataclass
class Components:
    cfg: RunConfig
    encoder: FrozenImageEncoder
    stub: RetrievalVlmStub
    decoder: FrozenDecoderLM | None = None

    @property
    def vocab(self) -> int:
        return vocab_size(self.cfg.world.vocab_size)

    def frozen_hashes(self) -> dict[str, str]:
        out = {"image_encoder": self.encoder.content_hash()}
        if self.decoder is not None:
            out["decoder"] = self.decoder.content_hash()
        return out


def make_components(cfg: RunConfig) -> Components:
    m = cfg.model
    enc = FrozenImageEncoder(cfg.world.feature_dim, m.num_patches, m.enc_dim, cfg.encoder_seed)
    stub = RetrievalVlmStub(cfg.world, cfg.stub_seed)
    return Components(cfg, enc, stub)


def eval_world(cfg: RunConfig, size: int, seed: int) -> WorldConfig:
    """Noise-free split drawn from the same object basis as training."""
    return dataclasses.replace(cfg.world, dataset_size=size, seed=seed, noise_rate=0.0)


def concepts_for(samples: list[PairedSample], corpus: ConceptCorpus, stub: RetrievalVlmStub, k: int) -> list[list[int]]:
    return concept_ids(retrieve_all(samples, corpus, stub, k))


def build_decoder(comp: Components, clean_captions: list[list[int]]) -> tuple[FrozenDecoderLM, list[float]]:
    cfg = comp.cfg
    lm = FrozenDecoderLM(comp.vocab, cfg.model.d_llm, cfg.model.max_text, seed=cfg.decoder_seed)
    curve = pretrain_decoder(
        lm, clean_captions, cfg.train.lm_pretrain_steps, cfg.train.lm_pretrain_lr, seed=cfg.decoder_seed
    )
    lm.freeze()
    comp.decoder = lm
    return lm, curve


def run_stage1(
    cfg: RunConfig,
    samples: list[PairedSample] | None = None,
    comp: Components | None = None,
    evaluate: bool = True,
    concepts: list[list[int]] | None = None,
    resume=None,
    stop_at: tuple[str, int] | None = None,
) -> tuple[Stage1Trainer, Components]:
    """Build every input, train stage 1 and (optionally) evaluate on the clean split.

    ``resume`` names a checkpoint to continue from; ``stop_at`` halts at a
    (phase, step) marker so the caller can checkpoint mid-run.
    """
    comp = comp or make_components(cfg)
    samples = samples if samples is not None else generate_dataset(cfg.world)
    corpus = build_corpus(dict(caption_token_counts(samples)), cfg.min_count)
    feats = comp.encoder(features_matrix(samples))
    if concepts is None:
        concepts = concepts_for(samples, corpus, comp.stub, cfg.train.num_concepts)
    model = BridgeModel(cfg.model, comp.vocab)
    hashes_before = comp.frozen_hashes()
    trainer = Stage1Trainer(
        cfg.train,
        model,
        samples,
        feats,
        concepts,
        cfg.world.vocab_size,
        cfg.model.pooling,
        frozen_params=comp.encoder.parameters(),
    )
    if resume is not None:
        trainer.load(resume)
    trainer.run(stop_at=stop_at)
    if comp.frozen_hashes() != hashes_before:
        raise RuntimeError("frozen parameters changed during stage 1")
    if evaluate and trainer.phase == "done":
        trainer.report.retrieval = evaluate_on_split(trainer.model, cfg, comp, corpus)
    trainer.corpus = corpus
    return trainer, comp


def evaluate_on_split(model: BridgeModel, cfg: RunConfig, comp: Components, corpus: ConceptCorpus) -> dict[str, float]:
    ev = generate_dataset(eval_world(cfg, cfg.eval.eval_size, cfg.eval.eval_seed + cfg.seed))
    feats = comp.encoder(features_matrix(ev))
    conc = concepts_for(ev, corpus, comp.stub, cfg.train.num_concepts) if cfg.train.use_concepts else None
    return evaluate_model(model, ev, feats, conc, cfg.train.tau, cfg.model.pooling, cfg.eval.k_candidates)


def run_full(cfg: RunConfig) -> dict[str, Any]:
    """Stage 1, decoder pre-training, stage 2; returns reports and frozen hashes."""
    comp = make_components(cfg)
    hashes0 = {"image_encoder": comp.encoder.content_hash()}
    trainer, _ = run_stage1(cfg, comp=comp)
    lm_data = generate_dataset(eval_world(cfg, cfg.train.lm_pretrain_size, cfg.eval.heldout_seed + 1 + cfg.seed))
    build_decoder(comp, [s.caption for s in lm_data])
    hashes0["decoder"] = comp.decoder.content_hash()
    held = generate_dataset(eval_world(cfg, cfg.eval.heldout_size, cfg.eval.heldout_seed + cfg.seed))
    held_in = (comp.encoder(features_matrix(held)), [caption_tokens(s.caption) for s in held])
    feats = comp.encoder(features_matrix(trainer.samples))
    fc, rep2 = run_stage2(
        cfg.train,
        trainer.model,
        comp.decoder,
        trainer.samples,
        feats,
        heldout=held_in,
        frozen_hashes={"image_encoder": comp.encoder.content_hash},
    )
    return {
        "stage1": trainer.report,
        "stage2": rep2,
        "hashes_before": hashes0,
        "hashes_after": comp.frozen_hashes(),
        "trainer": trainer,
        "fc": fc,
    }


ABLATION_VARIANTS = ("full", "wo_na", "wo_ce")


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    t = cfg.train
    if variant == "full":
        return cfg
    if variant == "wo_na":
        return dataclasses.replace(cfg, train=dataclasses.replace(t, use_nitc=False))
    if variant == "wo_ce":
        return dataclasses.replace(cfg, train=dataclasses.replace(t, use_concepts=False))
    raise ValueError(f"unknown variant {variant!r}")


def ablate(cfg: RunConfig, seeds: tuple[int, ...] = (0, 1, 2)) -> dict[str, Any]:
    """Full vs w/o NA vs w/o CE with identical data, seeds and step counts."""
    rows: dict[str, list[dict[str, float]]] = {v: [] for v in ABLATION_VARIANTS}
    for seed in seeds:
        base = cfg.with_seed(seed)
        samples = generate_dataset(base.world)
        for v in ABLATION_VARIANTS:
            trainer, _ = run_stage1(variant_config(base, v), samples=samples)
            row = dict(trainer.report.retrieval)
            if "auc" in trainer.report.noise:
                row["auc"] = trainer.report.noise["auc"]
            row["seed"] = seed
            rows[v].append(row)
            log.info("event=ablation_run variant=%s seed=%d mean_r1=%.4f", v, seed, row["mean_r1"])
    summary = {}
    for v, rs in rows.items():
        keys = [k for k in rs[0] if k != "seed"]
        summary[v] = {k: float(np.median([r[k] for r in rs])) for k in keys}
    return {"runs": rows, "median": summary}


def ablation_table(result: dict[str, Any]) -> str:
    med = result["median"]
    cols = ["i2t_r1", "t2i_r1", "i2t_r5", "t2i_r5", "mean_r1", "auc"]
    lines = ["variant," + ",".join(cols)]
    for v in ABLATION_VARIANTS:
        lines.append(v + "," + ",".join(f"{med[v].get(c, float('nan')):.4f}" for c in cols))
    return "\n".join(lines) + "\n"
