"""Finite-difference gradient suite over every training objective."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .frozen import FrozenDecoderLM
from .model import BridgeModel, ModelConfig
from .objectives import citg_loss, citm_loss, generative_loss, itc_loss, nitc_loss, similarity_matrix
from .tensor import Tensor, grad_check, l2_normalize_rows, parameter
from .train import make_fc
from .vocab import NUM_RESERVED, to_token

TOLERANCE = 1e-5
STEP = 1e-6
NUM_NOUNS = 6

TINY = ModelConfig(
    num_queries=2,
    d=8,
    layers=1,
    heads=2,
    d_itc=4,
    ffn_hidden=12,
    max_text=6,
    num_patches=2,
    enc_dim=4,
    d_llm=8,
    max_concepts=2,
)


@dataclass
class GradCheckRow:
    objective: str
    instances: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _captions(rng, B: int) -> list[list[int]]:
    return [[to_token(int(n)) for n in rng.choice(NUM_NOUNS, size=rng.integers(1, 4), replace=False)] for _ in range(B)]


def _param_coords(rng, params: dict[str, Tensor], n_params: int = 3, n_coords: int = 3):
    names = sorted(params)
    picked = rng.choice(len(names), size=min(n_params, len(names)), replace=False)
    for k in picked:
        p = params[names[k]]
        yield p, rng.choice(p.data.size, size=min(n_coords, p.data.size), replace=False)


def _check_params(rng, params, loss_fn: Callable[[], Tensor]) -> float:
    worst = 0.0
    for p, coords in _param_coords(rng, params):
        worst = max(worst, grad_check(lambda _x: loss_fn(), p, STEP, coords))
    return worst


def check_itc(rng) -> float:
    B, Q, D = int(rng.integers(2, 6)), int(rng.integers(1, 4)), 4
    v = parameter(rng.standard_normal((B, Q, D)))
    t = parameter(rng.standard_normal((B, D)))
    tau = float(rng.uniform(0.3, 1.0))

    def f(_x):
        return itc_loss(similarity_matrix(l2_normalize_rows(v), l2_normalize_rows(t), tau))

    return max(grad_check(f, v, STEP), grad_check(f, t, STEP))


def check_nitc(rng) -> float:
    B = int(rng.integers(2, 6))
    s = parameter(rng.standard_normal((B, B)))
    omega = rng.uniform(0.0, 0.9, B)
    omega[rng.random(B) < 0.3] = 0.0
    strict = bool(rng.integers(2))
    return grad_check(lambda x: nitc_loss(x, omega, strict), s, STEP)


def _tiny_model(rng) -> BridgeModel:
    cfg = dataclasses.replace(TINY, seed=int(rng.integers(1 << 30)))
    return BridgeModel(cfg, NUM_RESERVED + NUM_NOUNS)


def _tiny_batch(rng, B: int):
    feats = rng.standard_normal((B, TINY.num_patches, TINY.enc_dim))
    conc = np.array([[to_token(int(c)) for c in rng.choice(NUM_NOUNS, 2, replace=False)] for _ in range(B)])
    return feats, conc, _captions(rng, B)


def check_citg(rng) -> float:
    m = _tiny_model(rng)
    feats, conc, caps = _tiny_batch(rng, int(rng.integers(1, 4)))
    return _check_params(rng, m.parameters(), lambda: citg_loss(m, feats, conc, caps))


def check_citm(rng) -> float:
    m = _tiny_model(rng)
    B = int(rng.integers(2, 4))
    feats, conc, caps = _tiny_batch(rng, B)
    neg_t = (np.arange(B) + rng.integers(1, B, B)) % B
    neg_i = (np.arange(B) + rng.integers(1, B, B)) % B
    return _check_params(rng, m.parameters(), lambda: citm_loss(m, feats, conc, caps, neg_t, neg_i))


def check_generative(rng) -> float:
    m = _tiny_model(rng)
    lm = FrozenDecoderLM(NUM_RESERVED + NUM_NOUNS, TINY.d_llm, TINY.max_text, heads=2, layers=1, seed=int(rng.integers(1 << 30)))
    lm.freeze()
    fc = make_fc(TINY.d, TINY.d_llm, int(rng.integers(1 << 30)))
    feats, _, caps = _tiny_batch(rng, int(rng.integers(1, 4)))
    params = dict(m.parameters())
    params.update(fc)
    return _check_params(rng, params, lambda: generative_loss(m, fc, lm, feats, caps))


CHECKS: dict[str, Callable] = {
    "itc": check_itc,
    "nitc": check_nitc,
    "citg": check_citg,
    "citm": check_citm,
    "generative": check_generative,
}


def run_gradcheck(instances: int = 20, seed: int = 0) -> list[GradCheckRow]:
    rows = []
    for k, (name, fn) in enumerate(CHECKS.items()):
        rng = np.random.default_rng([seed, k])
        worst = max(fn(rng) for _ in range(instances))
        rows.append(GradCheckRow(name, instances, worst))
    return rows


def format_table(rows: list[GradCheckRow]) -> str:
    lines = [f"{'objective':<12}{'instances':>10}{'max_rel_error':>16}  status"]
    for r in rows:
        lines.append(f"{r.objective:<12}{r.instances:>10}{r.max_rel_error:>16.3e}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
