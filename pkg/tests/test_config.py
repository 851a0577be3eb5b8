from __future__ import annotations

import json

import pytest

from nevlab.config import RunConfig, apply_overrides, defaults_json, from_dict, load_config, to_dict


def test_defaults_round_trip():
    cfg = RunConfig()
    assert from_dict(to_dict(cfg)) == cfg
    assert json.loads(defaults_json()) == to_dict(cfg)


def test_documented_defaults():
    t = RunConfig().train
    assert (t.peak_lr, t.weight_decay, t.betas, t.eps) == (1e-4, 0.05, (0.9, 0.999), 1e-8)
    assert (t.warmup_steps, t.nitc_steps, t.post_refresh_steps, t.stage2_steps) == (300, 1500, 500, 800)
    assert (t.batch_size, t.stage2_batch_size, t.lam, t.omega_max, t.tau) == (64, 32, 0.5, 0.9, 1.0)
    assert not t.strict_itc_denominator and t.reestimate_every == 0


def test_dotted_overrides_and_coercion():
    cfg = load_config(None, ["train.tau=0.07", "train.strict_itc_denominator=true", "world.noise_rate=0.5"])
    assert cfg.train.tau == 0.07 and cfg.train.strict_itc_denominator is True
    assert cfg.world.noise_rate == 0.5
    assert load_config(None, ["train.use_nitc=false"]).train.use_nitc is False


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(KeyError, match="unknown config key"):
        load_config(None, ["train.lr=1"])
    with pytest.raises(KeyError):
        load_config(None, ["nonsense=1"])
    with pytest.raises(ValueError):
        apply_overrides({}, ["no_equals_sign"])
    with pytest.raises(ValueError, match="boolean"):
        load_config(None, ["train.use_nitc=maybe"])


def test_seed_override_reseeds_pinned_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(defaults_json())
    cfg = load_config(path, ["seed=7"])
    assert (cfg.seed, cfg.world.seed, cfg.model.seed, cfg.train.seed) == (7, 7, 7, 7)
    cfg = load_config(path, ["seed=7", "world.seed=3"])
    assert cfg.world.seed == 3 and cfg.train.seed == 7


def test_resolved_snapshot_reproduces_config(tmp_path):
    cfg = load_config(None, ["seed=4", "train.nitc_steps=12"])
    path = tmp_path / "snap.json"
    path.write_text(json.dumps(to_dict(cfg)))
    assert load_config(path) == cfg


def test_validate():
    import dataclasses

    for bad in (dict(peak_lr=0.0), dict(warmup_steps=-1), dict(batch_size=1), dict(omega_max=1.0)):
        with pytest.raises(ValueError):
            dataclasses.replace(RunConfig().train, **bad).validate()
