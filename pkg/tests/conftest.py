from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from nevlab.config import RunConfig
from nevlab.model import BridgeModel, ModelConfig

SMALL_MODEL = ModelConfig(
    num_queries=3,
    d=8,
    layers=2,
    heads=2,
    d_itc=4,
    ffn_hidden=16,
    max_text=10,
    num_patches=2,
    enc_dim=4,
    d_llm=8,
    max_concepts=3,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return BridgeModel(SMALL_MODEL, vocab_size=4 + 8)


def tiny_run_config(seed: int = 0, **train) -> RunConfig:
    """A run that finishes in a couple of seconds."""
    base = RunConfig().with_seed(seed)
    defaults = dict(
        batch_size=16,
        warmup_steps=4,
        nitc_steps=4,
        post_refresh_steps=3,
        stage2_steps=4,
        stage2_batch_size=8,
        lm_pretrain_steps=5,
        lm_pretrain_size=40,
    )
    defaults.update(train)
    return dataclasses.replace(
        base,
        world=dataclasses.replace(base.world, dataset_size=48, vocab_size=8, objects_per_image=2),
        model=dataclasses.replace(SMALL_MODEL, seed=seed),
        train=dataclasses.replace(base.train, **defaults),
        eval=dataclasses.replace(base.eval, eval_size=20, heldout_size=16, k_candidates=8),
        min_count=1,
    )


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
