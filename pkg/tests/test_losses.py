import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from eegfm.losses import (
    LossWeights,
    class_weights,
    loss_dt,
    loss_finetune,
    loss_gpt,
    loss_mae,
    patch_rmse,
    pretrain_total,
    recon_error,
    weighted_cross_entropy,
)

D64 = torch.float64


def test_default_weights():
    w = LossWeights()
    assert (w.gpt, w.mae_tp, w.mae_ch, w.task, w.alpha) == (0.4, 0.275, 0.275, 0.05, 0.9)
    with pytest.raises(ValueError):
        LossWeights(gpt=-0.1)
    with pytest.raises(ValueError):
        LossWeights(alpha=1.5)


# -- patch RMSE ---------------------------------------------------------------

def test_patch_rmse_examples():
    t = torch.randn(3, 7, dtype=D64)
    assert torch.equal(patch_rmse(t, t), torch.zeros(3, dtype=D64))
    assert torch.allclose(patch_rmse(t + 2.5, t), torch.full((3,), 2.5, dtype=D64))
    assert patch_rmse(torch.tensor([1.0, 2.0]), torch.tensor([0.0, 0.0])).item() == pytest.approx(1.58114, abs=1e-5)


def test_patch_rmse_errors():
    with pytest.raises(ValueError):
        patch_rmse(torch.zeros(2, 0), torch.zeros(2, 0))
    with pytest.raises(ValueError):
        patch_rmse(torch.zeros(3), torch.zeros(4))


def test_recon_error_averages_time_and_frequency_parts():
    target = torch.zeros(385, dtype=D64)
    pred = torch.cat([torch.full((256,), 2.0), torch.full((129,), 4.0)]).double()
    assert recon_error(pred, target).item() == pytest.approx(3.0)


# -- GPT ----------------------------------------------------------------------

def test_gpt_examples():
    ref = torch.randn(1, 2, 1, 385, dtype=D64)
    pred = torch.zeros_like(ref)
    pred[:, 0] = ref[:, 1]
    assert loss_gpt(pred, ref).item() == 0.0
    pred[:, 0] = ref[:, 1] + 2.0
    assert loss_gpt(pred, ref).item() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        loss_gpt(ref[:, :1], ref[:, :1])


def test_gpt_is_mean_over_batch():
    ref = torch.randn(2, 3, 2, 385, dtype=D64)
    pred = torch.randn_like(ref)
    doubled = loss_gpt(torch.cat([pred, pred]), torch.cat([ref, ref]))
    assert doubled.item() == pytest.approx(loss_gpt(pred, ref).item(), rel=1e-12)


def test_gpt_ignores_padded_channels():
    ref = torch.randn(1, 3, 2, 385, dtype=D64)
    pred = torch.randn_like(ref)
    valid = torch.tensor([[True, False]])
    base = loss_gpt(pred, ref, valid)
    pred[:, :, 1] += 100.0
    assert loss_gpt(pred, ref, valid).item() == base.item()


# -- MAE ----------------------------------------------------------------------

def test_mae_examples():
    ref = torch.zeros(1, 2, 1, 385, dtype=D64)
    pred = torch.zeros_like(ref)
    pred[0, 0, 0] = 1.0
    pred[0, 1, 0] = 3.0
    pos = torch.ones(1, 2, 1, dtype=torch.bool)
    assert loss_mae(pred, ref, pos).item() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        loss_mae(pred, ref, torch.zeros_like(pos))


def test_mae_perfect_on_masked_positions_is_zero():
    ref = torch.randn(2, 3, 2, 385, dtype=D64)
    pos = torch.zeros(2, 3, 2, dtype=torch.bool)
    pos[:, 1] = True
    pred = ref + 5.0
    pred[pos] = ref[pos]
    assert loss_mae(pred, ref, pos).item() == 0.0


@given(st.integers(0, 10**6))
def test_mae_ignores_visible_positions(seed):
    gen = torch.Generator().manual_seed(seed)
    ref = torch.randn(2, 3, 2, 385, dtype=D64, generator=gen)
    pred = torch.randn(2, 3, 2, 385, dtype=D64, generator=gen)
    pos = torch.rand(2, 3, 2, generator=gen) > 0.5
    pos[0, 0, 0] = True
    base = loss_mae(pred, ref, pos)
    pred[~pos] += torch.randn_like(pred[~pos])
    assert loss_mae(pred, ref, pos).item() == base.item()


# -- task token ---------------------------------------------------------------

def test_dt_uniform_is_log10():
    assert abs(loss_dt(torch.zeros(5, 10, dtype=D64), [0, 3, 9, 2, 2]).item() - math.log(10)) < 1e-9


def test_dt_saturation_and_permutation():
    logits = torch.zeros(2, 10, dtype=D64)
    logits[0, 4] = logits[1, 7] = 20.0
    # closed form with 9 wrong classes: ln(1 + 9 e^-20)
    assert loss_dt(logits, [4, 7]).item() == pytest.approx(math.log1p(9 * math.exp(-20)), rel=1e-9)
    logits[0, 4] = logits[1, 7] = 23.0
    assert loss_dt(logits, [4, 7]).item() < 1e-8
    z = torch.randn(6, 10, dtype=D64)
    y = torch.tensor([0, 1, 2, 3, 4, 5])
    perm = torch.tensor([5, 3, 1, 0, 2, 4])
    assert loss_dt(z[perm], y[perm]).item() == pytest.approx(loss_dt(z, y).item(), rel=1e-12)


def test_dt_rejects_bad_label():
    with pytest.raises(ValueError):
        loss_dt(torch.zeros(1, 10), [10])
    with pytest.raises(ValueError):
        loss_dt(torch.zeros(1, 10), [-1])


# -- totals ---------------------------------------------------------------------

def test_pretrain_total():
    assert pretrain_total(1.0, 1.0, 1.0, 1.0) == pytest.approx(1.0)
    assert pretrain_total(3.0, 2.0, 5.0, 7.0, LossWeights(0, 0, 0, 0)) == 0.0
    w = LossWeights()
    assert pretrain_total(2.0, 0, 0, 0) == pytest.approx(2 * w.gpt)
    assert pretrain_total(0, 0, 0, 3.0) == pytest.approx(3 * w.task)


def test_class_weights_examples():
    assert np.allclose(class_weights([9, 1]), [0.5, 1.5])
    assert np.allclose(class_weights([4, 4, 4]), 1.0)
    f = np.array([3.0, 7.0, 11.0])
    assert np.allclose(class_weights(4 * f), class_weights(f))
    with pytest.raises(ValueError):
        class_weights([3, 0])


def test_weighted_cross_entropy():
    logits = torch.randn(5, 3, dtype=D64)
    y = torch.tensor([0, 1, 2, 2, 0])
    plain = torch.nn.functional.cross_entropy(logits, y)
    assert weighted_cross_entropy(logits, y).item() == pytest.approx(plain.item(), rel=1e-12)
    w = torch.tensor([2.0, 1.0, 0.0], dtype=D64)
    nll = -torch.log_softmax(logits, -1)[torch.arange(5), y]
    assert weighted_cross_entropy(logits, y, w).item() == pytest.approx((nll * w[y]).mean().item(), rel=1e-12)
    with pytest.raises(ValueError):
        weighted_cross_entropy(logits, torch.tensor([3, 0, 0, 0, 0]))


def test_loss_finetune_examples():
    assert loss_finetune([1.7], 5.0, alpha=1.0) == pytest.approx(1.7)
    assert loss_finetune([1.0], 2.0, alpha=0.9) == pytest.approx(1.1)
    assert loss_finetune([1.0, 1.0], 2.0, alpha=0.9) == pytest.approx(2.2)
    assert loss_finetune([1.0, 2.0], [0.0, 1.0], alpha=0.5) == pytest.approx(0.5 + 1.0 + 0.5)
    with pytest.raises(ValueError):
        loss_finetune([], 1.0)
    with pytest.raises(ValueError):
        loss_finetune([1.0, 1.0], [1.0])


# -- gradients ----------------------------------------------------------------

def _fd_check(loss, x, eps=1e-6):
    x = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(loss(x), x)
    flat = x.detach().clone().view(-1)
    num = torch.zeros_like(flat)
    for i in range(flat.numel()):
        hi, lo = flat.clone(), flat.clone()
        hi[i] += eps
        lo[i] -= eps
        num[i] = (loss(hi.view_as(x)) - loss(lo.view_as(x))).item() / (2 * eps)
    rel = (g.view(-1) - num).abs() / torch.clamp(torch.maximum(g.view(-1).abs(), num.abs()), min=1e-6)
    return rel.max().item()


def test_loss_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(0)
    ref = torch.randn(1, 3, 2, 260, dtype=D64, generator=gen)
    pos = torch.tensor([[[True, False], [False, False], [True, True]]])
    assert _fd_check(lambda p: loss_gpt(p, ref), torch.randn(1, 3, 2, 260, dtype=D64, generator=gen)) < 1e-4
    assert _fd_check(lambda p: loss_mae(p, ref, pos), torch.randn(1, 3, 2, 260, dtype=D64, generator=gen)) < 1e-4
    y = torch.tensor([1, 8, 3])
    assert _fd_check(lambda z: loss_dt(z, y), torch.randn(3, 10, dtype=D64, generator=gen)) < 1e-4
    w = torch.tensor([0.5, 1.5, 1.0], dtype=D64)
    y3 = torch.tensor([0, 2, 1])
    assert _fd_check(lambda z: weighted_cross_entropy(z, y3, w), torch.randn(3, 3, dtype=D64, generator=gen)) < 1e-4


@given(st.integers(0, 10**6))
def test_losses_non_negative(seed):
    gen = torch.Generator().manual_seed(seed)
    ref = torch.randn(2, 3, 2, 385, dtype=D64, generator=gen)
    pred = torch.randn(2, 3, 2, 385, dtype=D64, generator=gen)
    assert loss_gpt(pred, ref) >= 0
    assert loss_mae(pred, ref, torch.ones(2, 3, 2, dtype=torch.bool)) >= 0
    assert loss_dt(torch.randn(4, 10, dtype=D64, generator=gen), [0, 1, 2, 3]) >= 0
