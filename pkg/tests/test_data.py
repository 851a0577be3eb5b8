from __future__ import annotations

import dataclasses
import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nevlab.data import (
    PairedSample,
    WorldConfig,
    features_matrix,
    generate_dataset,
    load_dataset,
    object_basis,
    save_dataset,
)
from nevlab.vocab import CLS, EOS, PAD, caption_tokens, noun_id, noun_name, pad_batch, to_noun, to_token


def test_vocab_round_trips():
    assert noun_name(7) == "obj007" and noun_id("obj007") == 7
    assert to_noun(to_token(5)) == 5
    assert caption_tokens([0, 3]) == [4, 7]
    with pytest.raises(KeyError):
        noun_id("cat")


def test_pad_batch_lead_tail():
    tokens, valid = pad_batch([[5, 6], [7]], lead=CLS, tail=EOS)
    np.testing.assert_array_equal(tokens, [[CLS, 5, 6, EOS], [CLS, 7, EOS, PAD]])
    np.testing.assert_array_equal(valid, [[1, 1, 1, 1], [1, 1, 1, 0]])


def test_clean_world_captions_equal_objects():
    ds = generate_dataset(WorldConfig(noise_rate=0.0, drop_rate=0.0, dataset_size=50))
    assert not any(s.is_noisy for s in ds)
    assert all(s.caption == s.true_objects and not s.dropped for s in ds)


def test_full_noise_changes_every_caption():
    cfg = WorldConfig(noise_rate=1.0, drop_rate=0.0, dataset_size=30, seed=3)
    clean = generate_dataset(dataclasses.replace(cfg, noise_rate=0.0))
    noisy = generate_dataset(cfg)
    assert all(s.is_noisy for s in noisy)
    assert all(n.caption != c.caption for n, c in zip(noisy, clean))


def test_exact_noise_count():
    ds = generate_dataset(WorldConfig(noise_rate=0.3, dataset_size=1000, seed=5))
    assert sum(s.is_noisy for s in ds) == 300


@settings(max_examples=25, deadline=None)
@given(
    st.integers(2, 120),
    st.floats(0.0, 1.0),
    st.floats(0.0, 0.9),
    st.integers(0, 10_000),
)
def test_invariants_hold_for_random_worlds(n, rho, delta, seed):
    cfg = WorldConfig(vocab_size=10, objects_per_image=3, feature_dim=12, noise_rate=rho, drop_rate=delta, dataset_size=n, seed=seed)
    clean = generate_dataset(dataclasses.replace(cfg, noise_rate=0.0))
    ds = generate_dataset(cfg)
    assert sum(s.is_noisy for s in ds) == int(np.floor(rho * n))
    captions = {tuple(s.caption) for s in clean}
    for s, c in zip(ds, clean):
        assert len(set(s.true_objects)) == 3
        if s.is_noisy:
            # swapped in from another sample, and different from its own
            assert s.caption != c.caption and tuple(s.caption) in captions
        else:
            assert set(s.caption) == set(s.true_objects) - set(s.dropped)


def test_noise_assignment_depends_only_on_seed():
    a = generate_dataset(WorldConfig(seed=9))
    b = generate_dataset(WorldConfig(seed=9))
    assert [s.is_noisy for s in a] == [s.is_noisy for s in b]
    np.testing.assert_array_equal(features_matrix(a), features_matrix(b))


def test_drop_rate_weakly_shortens_captions():
    lengths = []
    for delta in (0.0, 0.2, 0.5, 0.8):
        ds = generate_dataset(WorldConfig(noise_rate=0.0, drop_rate=delta, dataset_size=300, seed=2))
        lengths.append(np.mean([len(s.caption) for s in ds]))
    assert all(a >= b for a, b in zip(lengths, lengths[1:]))


def test_features_are_basis_sums_plus_noise():
    cfg = WorldConfig(feature_noise_sigma=0.0, noise_rate=0.0, dataset_size=20)
    basis = object_basis(cfg)
    for s in generate_dataset(cfg):
        np.testing.assert_allclose(s.features, basis[:, s.true_objects].sum(axis=1), atol=1e-14)
    np.testing.assert_allclose(basis.T @ basis, np.eye(cfg.vocab_size), atol=1e-12)


def test_invalid_configs():
    for bad in (
        WorldConfig(objects_per_image=30),
        WorldConfig(noise_rate=1.5),
        WorldConfig(drop_rate=1.0),
        WorldConfig(feature_dim=8),
        WorldConfig(dataset_size=1, noise_rate=1.0),
    ):
        with pytest.raises(ValueError):
            generate_dataset(bad)


def test_jsonl_round_trip_is_bitwise(tmp_path):
    ds = generate_dataset(WorldConfig(dataset_size=40, seed=4))
    ds[3] = dataclasses.replace(ds[3], original_caption=[1, 2])
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert len(back) == len(ds)
    for a, b in zip(ds, back):
        assert a.features.tobytes() == b.features.tobytes()
        assert (a.id, a.caption, a.true_objects, a.is_noisy, a.dropped, a.original_caption) == (
            b.id,
            b.caption,
            b.true_objects,
            b.is_noisy,
            b.dropped,
            b.original_caption,
        )


def test_jsonl_schema_keys(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(generate_dataset(WorldConfig(dataset_size=2)), path)
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"id", "features", "caption", "true_objects", "is_noisy", "dropped"}


def test_truncated_file_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(generate_dataset(WorldConfig(dataset_size=5)), path)
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(ValueError, match="line 5"):
        load_dataset(path)


def test_missing_key_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"id": 0}) + "\n")
    with pytest.raises(ValueError, match="line 1"):
        load_dataset(path)


def test_ten_thousand_round_trip_budget(tmp_path):
    ds = generate_dataset(WorldConfig(dataset_size=10_000, noise_rate=0.3))
    t0 = time.perf_counter()
    save_dataset(ds, tmp_path / "big.jsonl")
    back = load_dataset(tmp_path / "big.jsonl")
    assert time.perf_counter() - t0 < 5.0
    assert len(back) == 10_000


def test_paired_sample_json_helpers():
    s = PairedSample(1, np.array([0.1, 0.2]), [1], [1, 2], False, [2])
    assert PairedSample.from_json(s.to_json()).to_json() == s.to_json()
