"""Partial-modality masking and the missing-modality regularizer."""

import logging

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from data_structures import COMPLETE, RGB_D, RGB_IR, RGB_ONLY, MaskEvent, MaskKind
from flexdata import synth_dataset, zero_fill
from mmr import (
    apply_mask, apply_masks, combine_losses, mask_frequencies, mmr_loss, mmr_values, sample_mask, sample_masks,
    total_loss,
)
from validation import ConfigurationError


class FixedDraw:
    """Generator stand-in returning a fixed uniform."""

    def __init__(self, u):
        self.u = u

    def random(self, size=None):
        return self.u if size is None else np.full(size, self.u)


@pytest.mark.parametrize("u,kind", [
    (0.0, MaskKind.MASK_D), (0.149, MaskKind.MASK_D), (0.15, MaskKind.MASK_IR), (0.29, MaskKind.MASK_IR),
    (0.31, MaskKind.MASK_D_IR), (0.5, MaskKind.NONE), (0.99, MaskKind.NONE),
])
def test_mask_bands_on_complete_sample(u, kind):
    event = sample_mask(COMPLETE, 0.15, FixedDraw(u))
    assert event == MaskEvent(kind, applicable=True)


@pytest.mark.parametrize("avail,u", [(RGB_D, 0.2), (RGB_IR, 0.1), (RGB_D, 0.35), (RGB_ONLY, 0.05)])
def test_inapplicable_masks_degrade_to_none(avail, u):
    assert sample_mask(avail, 0.15, FixedDraw(u)) == MaskEvent(MaskKind.NONE, applicable=False)


def test_applicable_partial_masks():
    assert sample_mask(RGB_D, 0.15, FixedDraw(0.1)).kind is MaskKind.MASK_D
    assert sample_mask(RGB_IR, 0.15, FixedDraw(0.2)).kind is MaskKind.MASK_IR


def test_gamma_zero_never_masks():
    rng = np.random.Generator(np.random.PCG64(0))
    events = sample_masks([COMPLETE] * 100, 0.0, rng)
    assert all(e.kind is MaskKind.NONE for e in events)


def test_mask_ratio_validated():
    with pytest.raises(ConfigurationError):
        sample_mask(COMPLETE, 0.4, FixedDraw(0.1))


def test_mask_frequencies_match_gamma():
    freqs = mask_frequencies(0.15, 400_000, seed=1)
    for kind in ("MASK_D", "MASK_IR", "MASK_D_IR"):
        assert freqs[kind] == pytest.approx(0.15, abs=0.005)
    assert freqs["NONE"] == pytest.approx(0.55, abs=0.005)


def test_sample_masks_is_seeded():
    avails = [COMPLETE] * 20
    a = sample_masks(avails, 0.15, np.random.Generator(np.random.PCG64(3)))
    b = sample_masks(avails, 0.15, np.random.Generator(np.random.PCG64(3)))
    assert a == b


def test_apply_mask_on_dense_input():
    dense = zero_fill(synth_dataset(2, 8, seed=0)[0], COMPLETE)
    masked = apply_mask(dense, MaskEvent(MaskKind.MASK_D_IR))
    assert not masked.depth.any() and not masked.ir.any()
    assert np.array_equal(masked.rgb, dense.rgb)
    assert apply_mask(dense, MaskEvent(MaskKind.NONE)) is dense


def test_apply_masks_on_batch():
    batch = torch.ones(3, 3, 3, 4, 4)
    events = [MaskEvent(MaskKind.MASK_D), MaskEvent(MaskKind.NONE, applicable=False), MaskEvent(MaskKind.MASK_IR)]
    masked, fired = apply_masks(batch, events)
    assert fired.tolist() == [True, False, True]
    assert not masked[0, 1].any() and masked[0, 2].all()
    assert masked[1].all()
    assert masked[2, 1].all() and not masked[2, 2].any()
    assert masked[:, 0].all()
    assert batch.all()
    with pytest.raises(ConfigurationError):
        apply_masks(batch, events[:2])


def test_mmr_values_extremes():
    a = torch.tensor([[1.0, 0.0], [1.0, 0.0], [2.0, 2.0]])
    b = torch.tensor([[3.0, 0.0], [-1.0, 0.0], [-1.0, 1.0]])
    values = mmr_values(a, b)
    assert values.tolist() == pytest.approx([-1.0, 1.0, 0.0], abs=1e-6)


def test_mmr_skips_degenerate_rows(caplog):
    a = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
    b = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
    with caplog.at_level(logging.WARNING, logger="mmr"):
        values = mmr_values(a, b)
    assert values.shape == (1,)
    assert values[0].item() == pytest.approx(-1.0, abs=1e-6)
    assert "near-zero" in caplog.text
    assert mmr_loss(torch.zeros(2), torch.ones(2)) is None


def test_mmr_shape_mismatch():
    with pytest.raises(ConfigurationError):
        mmr_values(torch.ones(2, 3), torch.ones(2, 4))


@pytest.mark.parametrize("stop_gradient", [True, False])
def test_mmr_stop_gradient(stop_gradient):
    masked = torch.randn(4, 8, requires_grad=True)
    complete = torch.randn(4, 8, requires_grad=True)
    mmr_values(masked, complete, stop_gradient=stop_gradient).mean().backward()
    assert masked.grad is not None
    assert (complete.grad is None) == stop_gradient


def test_mmr_bounded():
    generator = torch.Generator().manual_seed(0)
    values = mmr_values(torch.randn(64, 16, generator=generator), torch.randn(64, 16, generator=generator))
    assert values.min() >= -1.0 - 1e-6 and values.max() <= 1.0 + 1e-6


def test_combine_losses():
    bce = torch.tensor(0.7)
    assert combine_losses(bce, None, 1.0).total is bce
    assert combine_losses(bce, torch.tensor([]), 1.0).mmr is None
    loss = combine_losses(bce, torch.tensor([-1.0, 0.0]), 2.0)
    assert loss.total.item() == pytest.approx(0.7 - 1.0)
    assert loss.mmr.item() == pytest.approx(-0.5)
    assert combine_losses(bce, torch.tensor([-1.0]), 0.0).total.item() == pytest.approx(0.7)
    with pytest.raises(ConfigurationError):
        combine_losses(bce, None, -1.0)


def test_total_loss_uses_two_way_cross_entropy():
    logits = torch.tensor([[2.0, -1.0], [0.0, 3.0]])
    labels = torch.tensor([0, 1])
    loss = total_loss(logits, labels, torch.tensor([-0.5]), weight=1.0)
    assert loss.bce.item() == pytest.approx(F.cross_entropy(logits, labels).item())
    assert loss.total.item() == pytest.approx(loss.bce.item() - 0.5)
