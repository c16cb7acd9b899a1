"""Sampler invariants and wrapped-op semantics."""

import numpy as np
import pytest

from sbprop.autograd import FULL, Tape, checkpoint_region
from sbprop.errors import ConfigError, StateError
from sbprop.models import TransformerBlock
from sbprop.sbp import (
    SampleMask,
    SbpConfig,
    SquareUnit,
    mask_size,
    sample_checkerboard3d,
    sample_diverse_feature,
    sample_diverse_grad,
    sample_uniform,
    sbp_wrap,
    wrap_on_tape,
)
from sbprop.tensor import Rng

ALL_RATIOS = (0.1, 0.125, 0.25, 0.3, 0.5, 0.75, 1.0)


# ---------------------------------------------------------------------------
# masks and samplers


def test_mask_size_round_half_up_and_clamp():
    assert mask_size(8, 0.25) == 2
    assert mask_size(10, 0.25) == 3  # 2.5 rounds up
    assert mask_size(3, 0.1) == 1  # clamped to >= 1
    assert mask_size(5, 1.0) == 5
    with pytest.raises(ConfigError):
        mask_size(8, 0.0)


def test_sample_mask_validation():
    with pytest.raises(ConfigError):
        SampleMask((1, 1), 4)
    with pytest.raises(IndexError):
        SampleMask((5,), 4)


def test_uniform_chunk_structure():
    rng = Rng(0)
    for _ in range(50):
        m = sample_uniform(8, 0.25, rng)
        assert len(m) == 2
        assert 0 <= m.kept[0] < 4 and 4 <= m.kept[1] < 8


def test_uniform_full_ratio_is_identity():
    m = sample_uniform(8, 1.0, Rng(0))
    assert m.kept == tuple(range(8))


def test_uniform_deterministic_under_seed():
    a = sample_uniform(8, 0.25, Rng(42))
    b = sample_uniform(8, 0.25, Rng(42))
    assert a.kept == b.kept


def test_sampler_cardinality_invariant_random_pairs():
    rng = Rng(9)
    meta = np.random.default_rng(7)
    for _ in range(100):
        n = int(meta.integers(1, 300))
        r = float(meta.uniform(0.01, 1.0))
        want = max(1, min(n, int(np.floor(r * n + 0.5))))
        assert len(sample_uniform(n, r, rng)) == want
        feats = rng.normal((n, 3))
        assert len(sample_diverse_feature(feats, r, rng)) == want
        mags = np.abs(rng.normal((n,)))
        assert len(sample_diverse_grad(mags, r, rng)) == want


def test_diverse_feature_hand_sorted_chunks():
    # norms [1, 10, 2, 9] sorted -> [0, 2, 3, 1]; r=0.5 chunks {0,2} and {3,1}
    feats = np.array([[1.0], [10.0], [2.0], [9.0]])
    rng = Rng(3)
    for _ in range(25):
        m = sample_diverse_feature(feats, 0.5, rng)
        low, high = m.kept[0], m.kept[1]
        assert set(m.kept) <= {0, 1, 2, 3}
        assert len(set(m.kept) & {0, 2}) == 1
        assert len(set(m.kept) & {1, 3}) == 1


def test_diverse_grad_hand_sorted_chunks():
    mags = np.array([0.0, 0.0, 5.0, 5.0])
    rng = Rng(4)
    for _ in range(25):
        m = sample_diverse_grad(mags, 0.5, rng)
        assert len(set(m.kept) & {0, 1}) == 1
        assert len(set(m.kept) & {2, 3}) == 1


def test_diverse_ties_fall_back_to_index_order():
    # all-equal magnitudes: stable sort = identity permutation, so the chunk
    # structure matches the uniform sampler's exactly
    mags = np.zeros(8)
    rng = Rng(5)
    for _ in range(25):
        m = sample_diverse_grad(mags, 0.25, rng)
        assert 0 <= m.kept[0] < 4 and 4 <= m.kept[1] < 8


def test_checkerboard_half_keeps_even_parity():
    m = sample_checkerboard3d((2, 2, 2), 0.5)
    assert len(m) == 4
    t, h, w = np.unravel_index(list(m.kept), (2, 2, 2))
    assert np.all((t + h + w) % 2 == 0)


def test_checkerboard_quarter():
    m = sample_checkerboard3d((2, 2, 2), 0.25)
    assert len(m) == 2
    t, h, w = np.unravel_index(list(m.kept), (2, 2, 2))
    assert np.all((t + h + w) % 2 == 0) and np.all(t % 2 == 0)


def test_checkerboard_single_cell_clamps():
    for r in (0.5, 0.25, 0.125):
        assert sample_checkerboard3d((1, 1, 1), r).kept == (0,)


def test_checkerboard_rejects_unsupported_ratio():
    with pytest.raises(ConfigError) as exc:
        sample_checkerboard3d((2, 2, 2), 0.3)
    assert "0.5" in str(exc.value)


def test_checkerboard_cardinality_on_even_grids():
    meta = np.random.default_rng(11)
    for _ in range(100):
        dims = tuple(int(d) for d in meta.choice([2, 4, 6, 8], size=3))
        r = float(meta.choice([0.5, 0.25, 0.125]))
        n = int(np.prod(dims))
        m = sample_checkerboard3d(dims, r)
        assert len(m) == max(1, min(n, int(np.floor(r * n + 0.5))))
        assert m.axis_kind == "spatiotemporal"


def test_checkerboard_deterministic():
    a = sample_checkerboard3d((4, 2, 2), 0.25)
    b = sample_checkerboard3d((4, 2, 2), 0.25)
    assert a.kept == b.kept


def test_sbp_config_validation():
    with pytest.raises(ConfigError):
        SbpConfig(keep_ratio=0.0).validate()
    with pytest.raises(ConfigError):
        SbpConfig(sampler="nope").validate()
    SbpConfig(keep_ratio=0.25).validate()


# ---------------------------------------------------------------------------
# wrapped ops


def test_square_unit_hand_example():
    wrapped = sbp_wrap(SquareUnit(), SampleMask((0, 2), 4))
    y = wrapped.forward(np.array([1.0, 2.0, 3.0, 4.0]))
    assert np.allclose(y, [1.0, 4.0, 9.0, 16.0])  # forward exact on all nodes
    dx, _ = wrapped.backward(np.ones(4))
    assert np.allclose(dx, [2.0, 0.0, 6.0, 0.0])


def test_wrap_backward_before_forward_is_state_error():
    wrapped = sbp_wrap(SquareUnit(), SampleMask((0,), 4))
    with pytest.raises(StateError):
        wrapped.backward(np.ones(4))


def test_wrap_mask_axis_mismatch_is_index_error():
    wrapped = sbp_wrap(SquareUnit(), SampleMask((0,), 5))
    with pytest.raises(IndexError):
        wrapped.forward(np.ones(4))


def test_wrap_side_input_flag_cannot_contradict_unit():
    with pytest.raises(ConfigError):
        sbp_wrap(SquareUnit(), SampleMask((0,), 4), cache_side_inputs_full=True)


def test_full_mask_equals_plain_backward():
    rng = Rng(6)
    x = rng.normal((6,))
    wrapped = sbp_wrap(SquareUnit(), SampleMask.all(6))
    y = wrapped.forward(x)
    dx, _ = wrapped.backward(np.ones(6))
    assert np.abs(dx - 2.0 * x).max() < 1e-12


def test_wrap_charge_is_cached_input_and_matches_checkpoint_at_full_mask():
    rng = Rng(7)
    x = rng.normal((8,))
    wrapped = sbp_wrap(SquareUnit(), SampleMask.all(8))
    wrapped.forward(x)
    wrap_charge = wrapped.memory.subtotal("wrap")

    t = Tape()
    xn = t.leaf(x, requires_grad=True, kind="data")

    def fn(sub, leaves):
        return sub.record("mul", [leaves[0], leaves[0]], cache=FULL)

    checkpoint_region(t, fn, [xn])
    assert wrap_charge == t.memory.cached_elements_total == 8


def test_wrap_charge_monotone_in_keep_ratio():
    rng = Rng(8)
    x = rng.normal((16, 5))
    charges = []
    for r in (0.125, 0.25, 0.5, 1.0):
        unit = SquareUnit()
        m = sample_uniform(16, r, rng.derive(int(r * 1000)))
        w = sbp_wrap(unit, m)
        w.forward(x)
        charges.append(w.memory.cached_elements_total)
    assert charges == sorted(charges)


def test_attention_unit_wrap_matches_masked_oracle():
    # single-head attention over 3 tokens, mask {0}: gradients equal the
    # dense oracle run with dy rows {1, 2} zeroed
    rng = Rng(12)
    heads, d, n = 1, 4, 3
    blk = TransformerBlock(heads, d, rng=rng.derive(1))
    unit = blk.attn_unit
    x = rng.normal((1, n, heads * d))
    params = [blk.params["attn.gamma"], blk.params["attn.beta"],
              blk.params["attn.wq"], blk.params["attn.wk"], blk.params["attn.wv"]]
    mask = SampleMask((0,), n)

    wrapped = sbp_wrap(unit, mask)
    y = wrapped.forward(x, params)
    dy = rng.normal((1, n, heads * d))
    dx, dparams = wrapped.backward(dy)

    # dense run seeded with dy, gradients zeroed at the unit's boundaries
    from sbprop.autograd import backward_from

    t2 = Tape()
    xn2 = t2.leaf(x, requires_grad=True, kind="data")
    pn2 = [t2.leaf(p, requires_grad=True, kind="param") for p in params]
    out2 = unit.run(t2, xn2, pn2, mask=None)
    masked = {out2.idx: (mask.kept, 1), xn2.idx: (mask.kept, 1)}
    ref = backward_from(t2, out2, dy, masked=masked)

    assert np.abs(dx - ref[xn2]).max() / max(np.abs(ref[xn2]).max(), 1e-12) < 1e-9
    for got, node in zip(dparams, pn2):
        want = ref.get(node, np.zeros(node.shape))
        denom = max(np.abs(want).max(), 1e-12)
        assert np.abs(got - want).max() / denom < 1e-9


def test_forward_exactness_random_units_and_masks():
    rng = Rng(13)
    # elementwise unit
    for i in range(10):
        n = int(rng.integers(2, 12))
        x = rng.normal((n,))
        k = int(rng.integers(1, n + 1))
        mask = SampleMask(tuple(rng.choice_sorted(n, k)), n)
        w = sbp_wrap(SquareUnit(), mask)
        assert np.abs(w.forward(x) - x * x).max() < 1e-12
    # attention unit
    for i in range(5):
        heads, d, n = 2, 3, int(rng.integers(2, 8))
        blk = TransformerBlock(heads, d, rng=rng.derive(40 + i))
        x = rng.normal((1, n, heads * d))
        params = [blk.params[k] for k in ("attn.gamma", "attn.beta", "attn.wq",
                                          "attn.wk", "attn.wv")]
        k = int(rng.integers(1, n + 1))
        mask = SampleMask(tuple(rng.choice_sorted(n, k)), n)
        wrapped = sbp_wrap(blk.attn_unit, mask)
        got = wrapped.forward(x, params)
        t = Tape(counting=False, charging=False)
        xn = t.leaf(x, kind="data")
        pn = [t.leaf(p, kind="param") for p in params]
        want = blk.attn_unit.run(t, xn, pn, mask=None).value
        assert np.abs(got - want).max() < 1e-12


def test_wrapped_causal_attention_rejected():
    rng = Rng(14)
    blk = TransformerBlock(1, 4, causal=True, rng=rng)
    x = rng.normal((1, 4, 4))
    params = [blk.params[k] for k in ("attn.gamma", "attn.beta", "attn.wq",
                                      "attn.wk", "attn.wv")]
    wrapped = sbp_wrap(blk.attn_unit, SampleMask((0, 2), 4))
    with pytest.raises(ConfigError):
        wrapped.forward(x, params)
