import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eegfm.masking import (
    MaskPlan,
    TaskKind,
    build_channel_masks,
    build_decoder_masks,
    build_temporal_mask,
    decoder_cross_keys,
    describe,
    mask_count,
    render_grid,
    sample_mask,
)

GPT, TP, CH = TaskKind.GPT, TaskKind.MAE_TP, TaskKind.MAE_CH


def grid(rows):
    return np.array([[ch == "#" for ch in row] for row in rows])


# -- sampling -----------------------------------------------------------------

@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10**6))
def test_gpt_masks_nothing(T, C, seed):
    plan = sample_mask(T, C, GPT, seed)
    assert plan.masked_steps == () and plan.masked_channels == ()


def test_default_ratios():
    assert len(sample_mask(10, 3, TP, 0).masked_steps) == 4
    assert len(sample_mask(3, 4, CH, 0).masked_channels) == 2


@pytest.mark.parametrize("n,ratio,expected", [
    (10, 0.4, 4), (5, 0.4, 2), (2, 0.4, 1), (3, 0.5, 2), (8, 0.5, 4), (2, 0.5, 1), (4, 0.4, 2),
])
def test_mask_count_rounding(n, ratio, expected):
    assert mask_count(n, ratio) == expected


@given(st.integers(2, 20), st.integers(2, 20), st.integers(0, 10**6))
def test_cardinalities_and_ranges(T, C, seed):
    tp = sample_mask(T, C, TP, seed)
    assert len(tp.masked_steps) == mask_count(T, 0.4)
    assert 1 <= len(tp.masked_steps) <= T - 1
    assert len(set(tp.masked_steps)) == len(tp.masked_steps)
    valid = max(2, C - 1)
    ch = sample_mask(T, C, CH, seed, valid_channels=valid)
    assert len(ch.masked_channels) == mask_count(valid, 0.5)
    assert all(c < valid for c in ch.masked_channels)


def test_sampling_is_seeded():
    assert sample_mask(10, 4, TP, 3) == sample_mask(10, 4, TP, 3)


def test_sampling_errors():
    with pytest.raises(ValueError):
        sample_mask(1, 4, TP, 0)
    with pytest.raises(ValueError):
        sample_mask(4, 1, CH, 0)
    with pytest.raises(ValueError):
        TaskKind.parse("bert")
    with pytest.raises(ValueError):
        MaskPlan(GPT, 3, 3, masked_steps=(1,))


def test_taskkind_parse():
    assert TaskKind.parse("MAE_TP") is TP
    assert TaskKind.parse(CH) is CH


# -- channel encoder masks ----------------------------------------------------

def test_channel_masks_mae_ch_example():
    plan = MaskPlan(CH, 1, 2, masked_channels=(0,))
    self_mask, cross = build_channel_masks(plan)
    assert self_mask[0].tolist() == [[False, True], [False, True]]
    assert cross[0].tolist() == [[False, True]]


def test_channel_masks_gpt_all_enabled():
    self_mask, cross = build_channel_masks(MaskPlan(GPT, 3, 4))
    assert self_mask.all() and cross.all()
    assert self_mask.shape == (3, 4, 4) and cross.shape == (3, 1, 4)


def test_channel_masks_mae_tp_blocks_whole_step():
    self_mask, cross = build_channel_masks(MaskPlan(TP, 3, 2, masked_steps=(1,)))
    assert not cross[1].any()
    assert cross[0].all() and cross[2].all()


def test_channel_masks_padding_blocked_both_ways():
    self_mask, cross = build_channel_masks(MaskPlan(GPT, 1, 3, valid_channels=2))
    assert self_mask[0].tolist() == [[True, True, False], [True, True, False], [False, False, False]]
    assert cross[0].tolist() == [[True, True, False]]


# -- temporal masks -----------------------------------------------------------

def test_temporal_gpt_causal():
    m = build_temporal_mask(MaskPlan(GPT, 3, 1))
    assert np.array_equal(m, np.tril(np.ones((4, 4), dtype=bool)))


def test_temporal_mae_tp_example():
    m = build_temporal_mask(MaskPlan(TP, 3, 1, masked_steps=(1,)))
    for row in (0, 1, 3):
        assert not m[row, 2]
    assert m[2].tolist() == [True, True, True, True]
    assert m[:, [0, 1, 3]].all()


def test_temporal_mae_ch_all_enabled():
    assert build_temporal_mask(MaskPlan(CH, 2, 2, masked_channels=(0,))).all()


# -- decoder masks ------------------------------------------------------------

def test_decoder_mae_tp_example():
    cross, self_mask = build_decoder_masks(MaskPlan(TP, 2, 1, masked_steps=(1,)))
    assert cross.tolist() == [[True, False], [True, False]]
    assert self_mask.tolist() == [[True, False], [True, True]]


def test_decoder_gpt_block_causal():
    _, self_mask = build_decoder_masks(MaskPlan(GPT, 2, 2))
    assert np.array_equal(self_mask, grid(["##..", "##..", "####", "####"]))


def test_decoder_mae_ch_example():
    cross, self_mask = build_decoder_masks(MaskPlan(CH, 1, 2, masked_channels=(0,)))
    assert cross.all()
    assert self_mask.tolist() == [[True, True], [False, True]]


def test_decoder_cross_keys_prepend_token():
    keys = decoder_cross_keys(MaskPlan(TP, 2, 2, masked_steps=(0,)))
    assert keys.shape == (4, 3)
    assert keys[:, 0].all()
    assert not keys[:, 1].any()


def test_decoder_gpt_cross_is_causal():
    cross, _ = build_decoder_masks(MaskPlan(GPT, 3, 2))
    assert np.array_equal(cross, np.repeat(np.tril(np.ones((3, 3), dtype=bool)), 2, axis=0))


@given(st.integers(1, 6), st.integers(1, 5), st.sampled_from([GPT, TP, CH]), st.integers(0, 10**6))
def test_no_query_reads_masked_or_padded_content(T, C, kind, seed):
    rng = np.random.default_rng(seed)
    valid = int(rng.integers(1, C + 1))
    if (kind is TP and T < 2) or (kind is CH and valid < 2):
        kind = GPT
    plan = sample_mask(T, C, kind, seed, valid_channels=valid)
    hidden = plan.patch_masked() | ~plan.channel_valid()[None, :]
    self_mask, cross = build_channel_masks(plan)
    # masked and padded patches are never keys in the channel encoder
    assert not self_mask[np.broadcast_to(hidden[:, None, :], self_mask.shape)].any()
    assert not cross[np.broadcast_to(hidden[:, None, :], cross.shape)].any()
    # decoder cross-attention never reads a masked step; padded slots are isolated
    dec_cross, dec_self = build_decoder_masks(plan)
    for t in plan.masked_steps:
        assert not dec_cross[:, t].any()
    pad = np.tile(~plan.channel_valid(), T)
    assert not dec_self[:, pad].any() and not dec_self[pad, :].any()


def test_render_and_describe():
    assert render_grid(np.array([[True, False]])) == "#."
    text = describe(MaskPlan(TP, 2, 2, masked_steps=(1,)))
    assert text.splitlines()[0] == "task=mae-tp T=2 C=2 masked_steps=[1] masked_channels=[]"
    assert "[decoder self]" in text
