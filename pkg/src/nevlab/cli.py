"""Command-line entry point: ``nevlab <subcommand> [--config c.json] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .concepts import (
    build_corpus,
    caption_token_counts,
    concept_ids,
    load_retrievals,
    read_token_counts,
    retrieve_all,
    save_retrievals,
    write_corpus,
)
from .config import RunConfig, defaults_json, load_config, to_dict
from .data import features_matrix, generate_dataset, load_dataset, save_dataset
from .gradcheck import format_table, run_gradcheck
from .model import BridgeModel
from .pipeline import (
    ablate,
    ablation_table,
    build_decoder,
    eval_world,
    evaluate_on_split,
    make_components,
    run_stage1,
)
from .train import (
    FrozenHashMismatch,
    MetricsReport,
    load_bridge_params,
    refresh_captions,
    run_stage2,
)
from .vocab import caption_tokens

log = logging.getLogger("nevlab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="level=%(levelname)s logger=%(name)s %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _limit_threads():
    n = int(os.environ.get("NEVLAB_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=max(1, n))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _resolve(args) -> RunConfig:
    if args.config is not None and not Path(args.config).exists():
        raise UsageError(f"config file {args.config} not found")
    try:
        return load_config(args.config, args.set or [])
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, cfg: RunConfig) -> None:
    (out / "config.resolved.json").write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_report(out: Path, report: MetricsReport, stem: str) -> None:
    _write_json(out / f"{stem}_metrics.json", report.to_json())
    (out / f"{stem}_curves.csv").write_text(report.curves_csv())
    _write_json(out / f"{stem}_timing.json", report.wall_clock)


def _samples(cfg: RunConfig, path):
    return load_dataset(path) if path else generate_dataset(cfg.world)


def _need(path, flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: {p} not found")
    return p


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out(args)
    samples = generate_dataset(cfg.world)
    save_dataset(samples, out / "dataset.jsonl")
    ev = generate_dataset(eval_world(cfg, cfg.eval.eval_size, cfg.eval.eval_seed + cfg.seed))
    save_dataset(ev, out / "eval.jsonl")
    _snapshot(out, cfg)
    log.info("event=gen_data samples=%d noisy=%d eval=%d", len(samples), sum(s.is_noisy for s in samples), len(ev))
    return EXIT_OK


def cmd_build_corpus(args, cfg: RunConfig) -> int:
    out = _out(args)
    samples = load_dataset(_need(args.data, "--data"))
    corpus = build_corpus(dict(caption_token_counts(samples)), cfg.min_count)
    write_corpus(corpus, out / "corpus.tsv")
    _snapshot(out, cfg)
    log.info("event=build_corpus nouns=%d min_count=%d", len(corpus), cfg.min_count)
    return EXIT_OK


def cmd_retrieve(args, cfg: RunConfig) -> int:
    out = _out(args)
    samples = load_dataset(_need(args.data, "--data"))
    counts = read_token_counts(_need(args.corpus, "--corpus"))
    corpus = build_corpus(counts, cfg.min_count)
    stub = make_components(cfg).stub
    rets = retrieve_all(samples, corpus, stub, cfg.train.num_concepts)
    save_retrievals(rets, out / "retrievals.jsonl")
    _snapshot(out, cfg)
    log.info("event=retrieve_concepts images=%d k=%d", len(rets), cfg.train.num_concepts)
    return EXIT_OK


def cmd_train_stage1(args, cfg: RunConfig) -> int:
    out = _out(args)
    samples = _samples(cfg, args.data)
    concepts = concept_ids(load_retrievals(args.retrievals)) if args.retrievals else None
    trainer, comp = run_stage1(cfg, samples=samples, concepts=concepts, resume=args.resume)
    trainer.save(out / "stage1.ckpt")
    save_dataset(trainer.samples, out / "dataset_revised.jsonl")
    if trainer.epsilon is not None:
        omega = trainer.omega if trainer.omega is not None else [0.0] * len(trainer.epsilon)
        _write_json(
            out / "noise.json",
            {str(s.id): {"epsilon": float(e), "omega": float(w)} for s, e, w in zip(trainer.samples, trainer.epsilon, omega)},
        )
    _write_report(out, trainer.report, "stage1")
    _snapshot(out, cfg)
    log.info(
        "event=train_stage1 steps=%d auc=%s mean_r1=%s",
        trainer.global_step,
        trainer.report.noise.get("auc"),
        trainer.report.retrieval.get("mean_r1"),
    )
    return EXIT_OK


def _load_stage1(cfg: RunConfig, path) -> tuple[BridgeModel, dict]:
    model = BridgeModel(cfg.model, make_components(cfg).vocab)
    loaded = load_bridge_params(model, path)
    return model, loaded


def cmd_refresh(args, cfg: RunConfig) -> int:
    out = _out(args)
    model, loaded = _load_stage1(cfg, _need(args.checkpoint, "--checkpoint"))
    arrays = loaded["arrays"]
    if ("epsilon", "noise") not in arrays:
        raise RuntimeError("checkpoint carries no noise estimate")
    eps = arrays[("epsilon", "noise")][0]
    samples = load_dataset(_need(args.data, "--data"))
    comp = make_components(cfg)
    concepts = None
    if cfg.train.use_concepts:
        if args.retrievals:
            concepts = concept_ids(load_retrievals(args.retrievals))
        else:
            corpus = build_corpus(dict(caption_token_counts(samples)), cfg.min_count)
            concepts = concept_ids(retrieve_all(samples, corpus, comp.stub, cfg.train.num_concepts))
    feats = comp.encoder(features_matrix(samples))
    revised = refresh_captions(
        model, samples, feats, concepts, eps, cfg.world.vocab_size, cfg.train.refresh_threshold, cfg.train.max_decode_len
    )
    save_dataset(revised, out / "dataset_revised.jsonl")
    _snapshot(out, cfg)
    log.info("event=refresh_captions replaced=%d", sum(r.original_caption is not None for r in revised))
    return EXIT_OK


def cmd_train_stage2(args, cfg: RunConfig) -> int:
    out = _out(args)
    model, _ = _load_stage1(cfg, _need(args.checkpoint, "--checkpoint"))
    samples = _samples(cfg, args.data)
    comp = make_components(cfg)
    lm_data = generate_dataset(eval_world(cfg, cfg.train.lm_pretrain_size, cfg.eval.heldout_seed + 1 + cfg.seed))
    _, lm_curve = build_decoder(comp, [s.caption for s in lm_data])
    held = generate_dataset(eval_world(cfg, cfg.eval.heldout_size, cfg.eval.heldout_seed + cfg.seed))
    held_in = (comp.encoder(features_matrix(held)), [caption_tokens(s.caption) for s in held])
    fc, report = run_stage2(
        cfg.train,
        model,
        comp.decoder,
        samples,
        comp.encoder(features_matrix(samples)),
        heldout=held_in,
        frozen_hashes={"image_encoder": comp.encoder.content_hash},
    )
    report.stage2["decoder_pretrain_final_loss"] = lm_curve[-1] if lm_curve else None
    arrays = [(n, "param", p.data, False) for n, p in model.parameters().items()]
    arrays += [(n, "param", p.data, False) for n, p in fc.items()]
    arrays += [(n, "param", p.data, True) for n, p in comp.decoder.parameters().items()]
    ckpt.save_checkpoint(out / "stage2.ckpt", arrays, {"stage": 2, "frozen_hashes": comp.frozen_hashes()})
    _write_report(out, report, "stage2")
    _snapshot(out, cfg)
    log.info(
        "event=train_stage2 heldout_start=%.6f heldout_end=%.6f",
        report.stage2["heldout_lm_loss_start"],
        report.stage2["heldout_lm_loss_end"],
    )
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out(args)
    model, _ = _load_stage1(cfg, _need(args.checkpoint, "--checkpoint"))
    samples = _samples(cfg, args.data)
    comp = make_components(cfg)
    corpus = build_corpus(dict(caption_token_counts(samples)), cfg.min_count)
    rec = evaluate_on_split(model, cfg, comp, corpus)
    _write_json(out / "eval.json", rec)
    _snapshot(out, cfg)
    log.info("event=eval " + " ".join(f"{k}={v:.4f}" for k, v in sorted(rec.items())))
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _out(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    result = ablate(cfg, seeds)
    _write_json(out / "ablation.json", result)
    table = ablation_table(result)
    (out / "ablation.csv").write_text(table)
    _snapshot(out, cfg)
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    rows = run_gradcheck(args.instances, cfg.seed)
    print(format_table(rows))
    if args.out:
        out = _out(args)
        _write_json(out / "gradcheck.json", [dataclasses.asdict(r) for r in rows])
        _snapshot(out, cfg)
    return EXIT_OK if all(r.ok for r in rows) else EXIT_CHECK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-corpus": cmd_build_corpus,
    "retrieve-concepts": cmd_retrieve,
    "train-stage1": cmd_train_stage1,
    "refresh-captions": cmd_refresh,
    "train-stage2": cmd_train_stage2,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nevlab", description="Noise-robust vision-language pre-training at desk scale.")
    parser.add_argument("--print-defaults", action="store_true", help="print the default config as JSON and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override, repeatable")
        p.add_argument("--out", default=None if name == "gradcheck" else "runs", help="output directory")
        if name in ("build-corpus", "retrieve-concepts", "train-stage1", "refresh-captions", "train-stage2", "eval"):
            p.add_argument("--data", help="dataset JSONL")
        if name in ("retrieve-concepts",):
            p.add_argument("--corpus", help="noun<TAB>count file")
        if name in ("train-stage1", "refresh-captions"):
            p.add_argument("--retrievals", help="concept retrievals JSONL")
        if name == "train-stage1":
            p.add_argument("--resume", help="checkpoint to resume from")
        if name in ("refresh-captions", "train-stage2", "eval"):
            p.add_argument("--checkpoint", help="stage-1 checkpoint")
        if name == "ablate":
            p.add_argument("--seeds", default="0,1,2")
        if name == "gradcheck":
            p.add_argument("--instances", type=int, default=20)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.print_defaults:
            print(defaults_json())
            return EXIT_OK
        if args.command is None:
            raise UsageError("a subcommand is required")
        _setup_logging(args.verbose)
        cfg = _resolve(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nevlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    limiter = _limit_threads()
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"nevlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FrozenHashMismatch, ckpt.CheckpointError, FloatingPointError, RuntimeError, ValueError, KeyError, OSError) as exc:
        log.error("event=failure kind=%s detail=%s", type(exc).__name__, json.dumps(str(exc)))
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
