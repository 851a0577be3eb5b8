from __future__ import annotations

import itertools

import numpy as np
import pytest

from nevlab.masks import (
    BIDIRECTIONAL,
    MASK_KINDS,
    MULTIMODAL_CAUSAL,
    UNIMODAL,
    SegmentLayout,
    build_bidirectional_mask,
    build_mask,
    build_multimodal_causal_mask,
    build_unimodal_mask,
    masked_attention,
    with_key_padding,
)
from nevlab.tensor import Tensor


def naive_attention(q, k, v, allow, heads):
    """Straightforward per-head, per-row loop; the reference for masked_attention."""
    L, D = q.shape
    dh = D // heads
    out = np.zeros((L, D))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(L):
            scores = []
            for j in range(k.shape[0]):
                if allow[i, j]:
                    scores.append((j, float(np.dot(q[i, cols], k[j, cols])) / np.sqrt(dh)))
            m = max(s for _, s in scores)
            weights = [(j, np.exp(s - m)) for j, s in scores]
            z = sum(w for _, w in weights)
            for j, w in weights:
                out[i, cols] += (w / z) * v[j, cols]
    return out


# ---------------------------------------------------------------------------
# exact matrices
# ---------------------------------------------------------------------------


def test_unimodal_examples():
    m = build_unimodal_mask(SegmentLayout(2, 0, 2)).allow
    np.testing.assert_array_equal(m.astype(int), [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]])
    np.testing.assert_array_equal(build_unimodal_mask(SegmentLayout(1, 0, 0)).allow, [[True]])
    np.testing.assert_array_equal(build_unimodal_mask(SegmentLayout(0, 0, 3)).allow, np.ones((3, 3), bool))


def test_unimodal_rejects_concepts():
    with pytest.raises(ValueError, match="unimodal mask takes no concepts"):
        build_unimodal_mask(SegmentLayout(2, 1, 2))


def test_multimodal_causal_examples():
    m = build_multimodal_causal_mask(SegmentLayout(2, 1, 2)).allow
    expected = [
        [1, 1, 0, 0, 0],
        [1, 1, 0, 0, 0],
        [1, 1, 1, 0, 0],
        [1, 1, 1, 1, 0],
        [1, 1, 1, 1, 1],
    ]
    np.testing.assert_array_equal(m.astype(int), expected)
    np.testing.assert_array_equal(build_multimodal_causal_mask(SegmentLayout(0, 0, 3)).allow, np.tril(np.ones((3, 3), bool)))
    np.testing.assert_array_equal(build_multimodal_causal_mask(SegmentLayout(2, 0, 0)).allow, np.ones((2, 2), bool))


def test_bidirectional_examples():
    np.testing.assert_array_equal(build_bidirectional_mask(SegmentLayout(2, 1, 2)).allow, np.ones((5, 5), bool))
    np.testing.assert_array_equal(build_bidirectional_mask(SegmentLayout(1, 0, 0)).allow, [[True]])


def test_unknown_kind_and_bad_layout():
    with pytest.raises(ValueError):
        build_mask("prefix", SegmentLayout(1, 0, 1))
    with pytest.raises(ValueError):
        SegmentLayout(0, 0, 0)
    with pytest.raises(ValueError):
        SegmentLayout(-1, 0, 2)


LAYOUTS = [SegmentLayout(q, c, t) for q, c, t in itertools.product(range(3), range(3), range(4)) if q + c + t > 0]


@pytest.mark.parametrize("layout", LAYOUTS, ids=lambda l: f"{l.num_queries}-{l.num_concepts}-{l.num_text}")
def test_structural_properties(layout):
    qs, cs, ts = layout.slices()
    for kind in MASK_KINDS:
        if kind == UNIMODAL and layout.num_concepts:
            continue
        m = build_mask(kind, layout)
        assert m.kind == kind
        assert np.diag(m.allow).all()
        if kind == UNIMODAL:
            assert not m.allow[qs, ts].any() and not m.allow[ts, qs].any()
        elif kind == MULTIMODAL_CAUSAL:
            assert not m.allow[qs, cs].any() and not m.allow[qs, ts].any()
            assert not m.allow[cs, ts].any()
            assert not np.triu(m.allow[ts, ts], 1).any()
            assert m.allow[ts, : ts.start].all()
        else:
            assert m.allow.all() and (m.allow == m.allow.T).all()


def test_key_padding_blocks_columns_keeps_diagonal():
    base = build_multimodal_causal_mask(SegmentLayout(1, 0, 3)).allow
    valid = np.array([[True, True, True, False], [True, True, False, False]])
    m = with_key_padding(base, valid)
    assert m.shape == (2, 4, 4)
    assert not m[0, :3, 3].any() and m[0, 3, 3]
    assert not m[1, :, 2][:2].any() and m[1, 2, 2]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def test_uniform_attention_gives_mean(rng):
    L, D = 4, 6
    q = Tensor(rng.standard_normal((L, D)))
    k = Tensor(np.tile(rng.standard_normal((1, D)), (L, 1)))
    v = Tensor(rng.standard_normal((L, D)))
    out = masked_attention(q, k, v, np.ones((L, L), bool), heads=2).data
    np.testing.assert_allclose(out, np.tile(v.data.mean(axis=0), (L, 1)), atol=1e-14)


def test_diagonal_mask_returns_values(rng):
    q, k, v = (Tensor(rng.standard_normal((5, 4))) for _ in range(3))
    out = masked_attention(q, k, v, np.eye(5, dtype=bool), heads=2).data
    np.testing.assert_allclose(out, v.data, atol=1e-15)


@pytest.mark.parametrize("kind", [UNIMODAL, MULTIMODAL_CAUSAL, BIDIRECTIONAL])
def test_attention_matches_naive_oracle(kind):
    rng = np.random.default_rng(42)
    layout = SegmentLayout(2, 0 if kind == UNIMODAL else 2, 3)
    L, D = layout.total, 8
    q, k, v = (rng.standard_normal((L, D)) for _ in range(3))
    allow = build_mask(kind, layout).allow
    out = masked_attention(Tensor(q), Tensor(k), Tensor(v), allow, heads=4).data
    assert np.abs(out - naive_attention(q, k, v, allow, 4)).max() <= 1e-12


def test_batched_attention_with_padding_matches_oracle(rng):
    layout = SegmentLayout(2, 1, 4)
    L, D = layout.total, 6
    q, k, v = (rng.standard_normal((3, L, D)) for _ in range(3))
    valid = np.ones((3, L), bool)
    valid[1, -2:] = False
    valid[2, -1] = False
    allow = with_key_padding(build_mask(MULTIMODAL_CAUSAL, layout).allow, valid)
    out = masked_attention(Tensor(q), Tensor(k), Tensor(v), allow, heads=3).data
    for b in range(3):
        assert np.abs(out[b] - naive_attention(q[b], k[b], v[b], allow[b], 3)).max() <= 1e-12


def test_masked_positions_have_zero_influence(rng):
    layout = SegmentLayout(2, 1, 3)
    L, D = layout.total, 4
    allow = build_mask(MULTIMODAL_CAUSAL, layout).allow
    q, k, v = (rng.standard_normal((L, D)) for _ in range(3))
    base = masked_attention(Tensor(q), Tensor(k), Tensor(v), allow, heads=2).data
    for j in range(L):
        v2, k2 = v.copy(), k.copy()
        v2[j] += 1e6
        k2[j] -= 1e3
        out = masked_attention(Tensor(q), Tensor(k2), Tensor(v2), allow, heads=2).data
        blocked = ~allow[:, j]
        assert np.abs(out[blocked] - base[blocked]).max(initial=0.0) <= 1e-12


def test_attention_shape_errors(rng):
    x = Tensor(rng.standard_normal((3, 5)))
    with pytest.raises(ValueError, match="divisible"):
        masked_attention(x, x, x, np.ones((3, 3), bool), heads=2)
    with pytest.raises(ValueError, match="mask"):
        masked_attention(x, x, x, np.ones((2, 2), bool), heads=1)
