import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import grad_rel_err, rand_image
from cyclespectral.dualcycle import CycleOutputs
from cyclespectral.errors import ConfigError, ContractViolation
from cyclespectral.features import FeatureExtractor, StructureBank
from cyclespectral.losses import (LossWeights, bidirectional_loss, cycle_loss, feature_loss, huber,
                                  regularization_loss, smoothing_loss, sobel_magnitude, total_loss)
from cyclespectral.warp import ImageTensor, bilinear_warp

D = torch.float64


def const(u, v, h=8, w=8):
    f = torch.zeros(1, 2, h, w, dtype=D)
    f[:, 0], f[:, 1] = u, v
    return f


def interior(h=8, w=8, b=2):
    m = torch.zeros(1, 1, h, w, dtype=D)
    m[..., b:-b, b:-b] = 1
    return m


# --- cycle loss -------------------------------------------------------------

def test_cycle_zero_and_constant():
    a = rand_image(8, 8)
    assert cycle_loss(a, a).item() == 0.0
    zero = ImageTensor(torch.zeros(1, 3, 8, 8, dtype=D), "rgb")
    half = ImageTensor(torch.full((1, 3, 8, 8), 0.5, dtype=D), "rgb")
    assert cycle_loss(half, zero, torch.ones(1, 1, 8, 8, dtype=D)).item() == pytest.approx(0.25, abs=1e-15)


def test_cycle_masked_mean_brute_force():
    a, b = rand_image(8, 8, seed=1), rand_image(8, 8, seed=2)
    mask = torch.zeros(1, 1, 8, 8, dtype=D)
    mask[..., :, :4] = 1
    got = cycle_loss(a, b, mask).item()
    x, y = a.data.numpy()[0], b.data.numpy()[0]
    vals = [np.mean((x[:, i, j] - y[:, i, j]) ** 2) for i in range(8) for j in range(4)]
    assert abs(got - np.mean(vals)) < 1e-12


def test_cycle_spectrum_mismatch():
    with pytest.raises(ContractViolation):
        cycle_loss(rand_image(8, 8, "rgb"), rand_image(8, 8, "fir"))


# --- bidirectional loss -----------------------------------------------------

def test_bidirectional_cases():
    m = interior()
    assert bidirectional_loss(const(1.5, -0.5), const(-1.5, 0.5), m).item() == pytest.approx(0.0, abs=1e-15)
    assert bidirectional_loss(const(0, 0), const(0, 0), m).item() == 0.0
    assert bidirectional_loss(const(1, 0), const(1, 0), m).item() == pytest.approx(2.0, abs=1e-15)


def test_bidirectional_shape_mismatch():
    with pytest.raises(ContractViolation):
        bidirectional_loss(const(0, 0), const(0, 0, 8, 9))


# --- regularisation and Huber -------------------------------------------------

def test_regularization_values():
    m = 2.0
    assert regularization_loss(const(1.2, 1.5), m).item() == 0.0  # |f| = 1.92 <= m
    # Along a diagonal so that the L2 magnitude, not a component, is what counts.
    for excess, want in ((0.5, 0.125), (3.0, 2.5)):
        r = (m + excess) / math.sqrt(2)
        assert regularization_loss(const(r, r), m).item() == pytest.approx(want, abs=1e-12)


def test_huber_continuity_at_one():
    x = torch.tensor([1.0 - 1e-9, 1.0, 1.0 + 1e-9], dtype=D, requires_grad=True)
    y = huber(x)
    assert y[0].item() == pytest.approx(0.5, abs=1e-8)
    assert y[1].item() == pytest.approx(0.5, abs=1e-12)
    assert y[2].item() == pytest.approx(0.5, abs=1e-8)
    (g,) = torch.autograd.grad(y.sum(), x)
    assert torch.allclose(g, torch.ones(3, dtype=D), atol=1e-8)


def test_regularization_rejects_nonpositive_cap():
    with pytest.raises(ContractViolation):
        regularization_loss(const(0, 0), 0.0)


# --- Sobel and smoothing -----------------------------------------------------

def test_sobel_constant_is_zero():
    assert torch.count_nonzero(sobel_magnitude(torch.full((1, 2, 8, 8), 0.3, dtype=D))) == 0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(1, 3))
def test_sobel_max_is_one(seed, c):
    x = torch.rand(1, c, 9, 7, generator=torch.Generator().manual_seed(seed), dtype=D)
    s = sobel_magnitude(x)
    assert s.max().item() == pytest.approx(1.0, abs=1e-12)
    assert s.min().item() >= 0


def test_sobel_step_edge_stencil_oracle():
    x = torch.zeros(1, 1, 8, 8, dtype=D)
    x[..., 4:] = 1.0
    s = sobel_magnitude(x)[0, 0].numpy()
    # Replicate-padded 3x3 stencil by hand.
    pad = np.pad(x[0, 0].numpy(), 1, mode="edge")
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
    mag = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            win = pad[i:i + 3, j:j + 3]
            mag[i, j] = math.hypot((win * kx).sum(), (win * kx.T).sum())
    assert np.abs(s - mag / mag.max()).max() < 1e-12
    assert set(np.argwhere(s == s.max())[:, 1]) == {3, 4}


def test_smoothing_cases():
    guide = rand_image(8, 8)
    assert smoothing_loss(const(2.0, -1.0), guide).item() == 0.0
    flow = const(0, 0)
    flow[..., 4:] = 1.0
    edge = torch.zeros(1, 1, 8, 8, dtype=D)
    edge[..., 4:] = 1.0
    flat = ImageTensor(torch.full((1, 1, 8, 8), 0.5, dtype=D), "rgb")
    assert smoothing_loss(flow, flat).item() > 0
    aligned = smoothing_loss(flow, ImageTensor(edge, "rgb")).item()
    assert aligned == pytest.approx(0.0, abs=1e-12)


# --- feature loss --------------------------------------------------------------

@pytest.fixture(scope="module")
def phi64():
    return FeatureExtractor("relu3_3", backbone="structure").double()


def test_feature_zero_when_equal(phi64):
    a = rand_image(32, 32)
    assert feature_loss(a, a, phi64).item() == 0.0


def test_feature_normalisation_by_chw():
    class Dup(torch.nn.Module):
        def __init__(self, k):
            super().__init__()
            self.k = k

        def forward(self, x):
            # Same summed squared difference spread over k times the positions.
            out = torch.zeros(x.shape[0], x.shape[1], x.shape[2] * self.k, x.shape[3], dtype=x.dtype)
            out[:, :, :x.shape[2]] = x
            return out
    a, b = rand_image(8, 8, seed=1), rand_image(8, 8, seed=2)
    assert feature_loss(a, b, Dup(2)).item() == pytest.approx(feature_loss(a, b, Dup(1)).item() / 2, rel=1e-12)


def test_feature_monotone_under_translation(phi64):
    from cyclespectral.synthdata import FlowSpec, SpectralTransform, synthetic_pair
    s = synthetic_pair(64, 64, FlowSpec("translation", (3, 0)), SpectralTransform("gray_invert_blur"), seed=3)
    a = ImageTensor(s.img_a.data.double(), "rgb")
    b = ImageTensor(s.img_b.data.double(), "fir")
    warped = bilinear_warp(a, s.gt_flow.double())
    # Same region for both: the aligned warp leaves a zero-filled border.
    aligned = feature_loss(warped, b, phi64, warped.valid).item()
    misaligned = feature_loss(a, b, phi64, warped.valid).item()
    assert misaligned > aligned


def test_extractor_frozen_and_single_channel(phi64):
    before = [b.clone() for b in phi64.buffers()]
    x = torch.rand(1, 1, 32, 32, dtype=D)
    y = torch.rand(1, 3, 32, 32, dtype=D)
    feature_loss(ImageTensor(x, "fir"), ImageTensor(y, "rgb"), phi64)
    phi64.train()
    assert not phi64.training
    assert all(torch.equal(a, b) for a, b in zip(before, phi64.buffers()))
    assert not any(p.requires_grad for p in phi64.parameters())


def test_unknown_tap_is_config_error():
    with pytest.raises(ConfigError):
        StructureBank("relu9_9")


# --- finite-difference gradient suite (8x8, float64) ------------------------------

def _flow(seed, amp=1.5):
    g = torch.Generator().manual_seed(seed)
    f = (torch.rand(1, 2, 8, 8, generator=g, dtype=D) * 2 - 1) * amp
    frac = f - torch.floor(f)
    return torch.where((frac < 0.1) | (frac > 0.9), f + 0.35, f)


def test_grad_cycle():
    b = rand_image(8, 8, seed=2)
    mask = (torch.rand(1, 1, 8, 8, dtype=D) > 0.3).double()
    assert grad_rel_err(lambda d: cycle_loss(ImageTensor(d, "rgb"), b, mask), torch.rand(1, 3, 8, 8, dtype=D)) < 1e-3


def test_grad_bidirectional_both_args():
    f_bwd, f_fwd = _flow(1), _flow(2)
    # |f| < 2 on a 2-pixel interior keeps every sample point in frame.
    mask = interior(b=2)
    assert grad_rel_err(lambda f: bidirectional_loss(f, f_bwd, mask), f_fwd, eps=1e-6) < 1e-3
    assert grad_rel_err(lambda f: bidirectional_loss(f_fwd, f, mask), f_bwd, eps=1e-6) < 1e-3


def test_grad_feature(phi64):
    b = rand_image(8, 8, "fir", 1, seed=4)
    assert grad_rel_err(lambda d: feature_loss(ImageTensor(d, "rgb"), b, phi64), torch.rand(1, 3, 8, 8, dtype=D)) < 1e-3


def test_grad_feature_through_warp(phi64):
    a, b = rand_image(8, 8, seed=5), rand_image(8, 8, "fir", 1, seed=6)
    assert grad_rel_err(lambda f: feature_loss(bilinear_warp(a, f), b, phi64), _flow(7)) < 1e-3


def test_grad_regularization():
    g = torch.Generator().manual_seed(8)
    m = 2.0
    mag = torch.rand(1, 8, 8, generator=g, dtype=D) * 5
    # Keep magnitudes off the kinks at m and m + 1.
    for kink in (m, m + 1):
        mag = torch.where((mag - kink).abs() < 0.1, mag + 0.25, mag)
    theta = torch.rand(1, 8, 8, generator=g, dtype=D) * 2 * torch.pi
    f = torch.stack([mag * torch.cos(theta), mag * torch.sin(theta)], dim=1)
    assert ((mag - m).abs() > 0.05).all() and ((mag - m - 1).abs() > 0.05).all()
    assert grad_rel_err(lambda x: regularization_loss(x, m), f) < 1e-3


def test_grad_smoothing():
    guide = rand_image(8, 8, seed=9)
    mask = interior(b=1)
    assert grad_rel_err(lambda f: smoothing_loss(f, guide, mask), _flow(10)) < 1e-3


def test_grad_cycle_through_warps():
    a = rand_image(8, 8, seed=11)
    f2 = _flow(12, amp=0.8)

    def fn(f1):
        w = bilinear_warp(a, f1)
        return cycle_loss(bilinear_warp(w, f2), a, interior(b=2))
    assert grad_rel_err(fn, _flow(13, amp=0.8)) < 1e-3


# --- total loss ---------------------------------------------------------------

def _zero_outputs(I_A, I_B):
    n, _, h, w = I_A.data.shape
    z = torch.zeros(n, 2, h, w, dtype=I_A.data.dtype)
    w_AB, w_BA = bilinear_warp(I_A, z), bilinear_warp(I_B, z)
    return CycleOutputs(z, z.clone(), z.clone(), z.clone(), w_AB, w_BA, bilinear_warp(w_AB, z), bilinear_warp(w_BA, z))


def test_weights_defaults_and_combination(phi64):
    w = LossWeights()
    assert (w.alpha, w.beta, w.gamma, w.delta, w.epsilon) == (3.4e-1, 3.6e-4, 6.7e-1, 6.9e-2, 2.7e-1)
    assert w.cap_for(200) == pytest.approx(20.0)
    I_A, I_B = rand_image(16, 16, seed=1), rand_image(16, 16, "fir", 1, seed=2)
    g = torch.Generator().manual_seed(3)
    flows = [(torch.rand(1, 2, 16, 16, generator=g, dtype=D) - 0.5) * 6 for _ in range(4)]
    w_AB, w_BA = bilinear_warp(I_A, flows[0]), bilinear_warp(I_B, flows[1])
    out = CycleOutputs(*flows, w_AB, w_BA, bilinear_warp(w_AB, flows[2]), bilinear_warp(w_BA, flows[3]))
    lb = total_loss(out, I_A, I_B, LossWeights(m=1.0), phi64)
    hand = 0.34 * lb.L_C + 3.6e-4 * lb.L_B + 0.67 * lb.L_F + 0.069 * lb.L_R + 0.27 * lb.L_S
    assert lb.total.item() == pytest.approx(hand.item(), rel=1e-12)
    assert all(v.item() >= 0 for v in lb.components.values())
    assert lb.L_C.item() == pytest.approx((lb.components["L_C1"] + lb.components["L_C2"]).item())
    zero = total_loss(out, I_A, I_B, LossWeights(0, 0, 0, 0, 0), phi64)
    assert zero.total.item() == 0.0


def test_anti_collapse(phi64):
    from cyclespectral.synthdata import FlowSpec, SpectralTransform, synthetic_pair
    s = synthetic_pair(64, 64, FlowSpec("translation", (4, 2)), SpectralTransform("gray_invert_blur"), seed=2)
    I_A = ImageTensor(s.img_a.data.double(), "rgb")
    I_B = ImageTensor(s.img_b.data.double(), "fir")
    lb = total_loss(_zero_outputs(I_A, I_B), I_A, I_B, LossWeights(), phi64)
    assert lb.L_C.item() == lb.L_B.item() == lb.L_R.item() == lb.L_S.item() == 0.0
    assert lb.L_F.item() > 0


def test_invalid_weights():
    with pytest.raises(ConfigError):
        LossWeights(alpha=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(m=0.0)


def test_masked_pixels_contribute_nothing():
    g = torch.Generator().manual_seed(0)
    mask = (torch.rand(1, 1, 12, 12, generator=g) > 0.3).double()
    hide = ~mask.bool()
    a, b = rand_image(12, 12, seed=1), rand_image(12, 12, seed=2)
    f1 = torch.randn(1, 2, 12, 12, generator=g, dtype=D)
    f2 = torch.randn(1, 2, 12, 12, generator=g, dtype=D)

    def scramble(x):
        return torch.where(hide.expand_as(x), torch.rand_like(x) * 7, x)

    assert cycle_loss(ImageTensor(scramble(a.data), "rgb"), ImageTensor(scramble(b.data), "rgb"), mask).item() \
        == cycle_loss(a, b, mask).item()
    assert bidirectional_loss(scramble(f1), f2, mask).item() == bidirectional_loss(f1, f2, mask).item()
    assert smoothing_loss(scramble(f1), ImageTensor(scramble(a.data), "rgb"), mask).item() \
        == smoothing_loss(f1, a, mask).item()
