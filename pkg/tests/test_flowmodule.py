import math
import numpy as np
import pytest
import torch

from conftest import COMPACT_ENCODER, COMPACT_ESTIMATOR, compact_model, rand_image
from cyclespectral.errors import ConfigError, ContractViolation
from cyclespectral.flowmodule import (FlowUpsampler, NUM_LEVELS, SigmaModel, correlate, encode, level_dims,
                                      sigma_forward)
from cyclespectral.warp import ImageTensor


def test_pyramid_dims_power_of_two(model):
    pyr = encode(rand_image(128, 128, dtype=torch.float32), model.select_encoder("rgb"))
    assert len(pyr) == NUM_LEVELS == 6
    assert [tuple(p.shape[-2:]) for p in pyr] == [(64, 64), (32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]
    assert [p.shape[1] for p in pyr] == list(COMPACT_ENCODER)


def test_pyramid_dims_ceil_padding(model):
    pyr = encode(rand_image(100, 75, dtype=torch.float32), model.select_encoder("rgb"))
    expected = [(50, 38), (25, 19), (13, 10), (7, 5), (4, 3), (2, 2)]
    assert [tuple(p.shape[-2:]) for p in pyr] == expected
    # Independent oracle: repeated ceil division.
    h, w, dims = 100, 75, []
    for _ in range(6):
        h, w = -(-h // 2), -(-w // 2)
        dims.append((h, w))
    assert dims == expected == level_dims(100, 75)


def test_encoders_differ_on_same_image(model):
    x = torch.rand(1, 1, 64, 64)
    a = model.select_encoder("fir")(x)
    other = compact_model(seed=1).select_encoder("fir")(x)
    assert any(not torch.equal(p, q) for p, q in zip(a, other))


def test_encoder_channel_mismatch(model):
    with pytest.raises(ContractViolation):
        model.select_encoder("fir")(torch.rand(1, 3, 64, 64))


def brute_correlate(ref, warped, r, normalize=True, eps=1e-6):
    c, h, w = ref.shape
    out = np.zeros(((2 * r + 1) ** 2, h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            k = (dy + r) * (2 * r + 1) + (dx + r)
            for y in range(h):
                for x in range(w):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        a, b = ref[:, y, x], warped[:, yy, xx]
                        if normalize:
                            a = a / math.sqrt(sum(v * v for v in a) / c + eps)
                            b = b / math.sqrt(sum(v * v for v in b) / c + eps)
                        out[k, y, x] = sum(a[i] * b[i] for i in range(c)) / c
    return out


def test_correlate_matches_brute_force():
    g = torch.Generator().manual_seed(0)
    ref = torch.rand(1, 3, 6, 7, generator=g, dtype=torch.float64)
    wrp = torch.rand(1, 3, 6, 7, generator=g, dtype=torch.float64)
    for normalize in (True, False):
        got = correlate(ref, wrp, 2, normalize=normalize)[0].numpy()
        want = brute_correlate(ref[0].numpy(), wrp[0].numpy(), 2, normalize=normalize)
        assert np.abs(got - want).max() < 1e-12


def test_normalized_cost_is_bounded_cosine():
    g = torch.Generator().manual_seed(3)
    ref = torch.randn(1, 8, 9, 9, generator=g, dtype=torch.float64) * 50
    cost = correlate(ref, ref * 1e-3 + 0, 2)
    assert cost.abs().max() <= 1 + 1e-9
    centre = cost[0, 12, 2:-2, 2:-2]
    assert torch.allclose(centre, torch.ones_like(centre), atol=1e-3)


def test_correlate_self_peak_and_shift_peak():
    g = torch.Generator().manual_seed(1)
    ref = torch.randn(1, 16, 12, 12, generator=g, dtype=torch.float64)
    # Unit-norm features: by Cauchy-Schwarz the match is the unique maximum.
    ref = ref / ref.norm(dim=1, keepdim=True)
    r = 3
    cost = correlate(ref, ref, r)
    centre = (0 + r) * (2 * r + 1) + (0 + r)
    interior = cost[0, :, r:-r, r:-r]
    assert torch.all(interior.argmax(dim=0) == centre)
    # warped(p + (1, 0)) == ref(p): content moved one column right.
    shifted = torch.zeros_like(ref)
    shifted[..., 1:] = ref[..., :-1]
    cost = correlate(ref, shifted, r)
    k = (0 + r) * (2 * r + 1) + (1 + r)
    assert torch.all(cost[0, :, r:-r, r:-r].argmax(dim=0) == k)


def test_correlate_channel_count_and_errors():
    x = torch.rand(1, 4, 5, 5)
    assert correlate(x, x, 4).shape[1] == 81
    with pytest.raises(ContractViolation):
        correlate(x, torch.rand(1, 4, 5, 6), 4)
    with pytest.raises(ContractViolation):
        correlate(x, x, 0)


def test_untrained_forward_is_finite_full_resolution(model):
    a = rand_image(64, 96, "rgb", 3, n=2, dtype=torch.float32)
    b = rand_image(64, 96, "fir", 1, n=2, dtype=torch.float32)
    f = sigma_forward(a, b, model)
    assert f.shape == (2, 2, 64, 96)
    assert torch.isfinite(f).all()


def test_arbitrary_dims_exact_output(model):
    a = rand_image(100, 75, "rgb", 3, dtype=torch.float32)
    b = rand_image(100, 75, "fir", 1, dtype=torch.float32)
    assert sigma_forward(a, b, model).shape == (1, 2, 100, 75)


def test_unknown_spectrum_is_config_error(model):
    a = rand_image(64, 64, "nir", 3, dtype=torch.float32)
    b = rand_image(64, 64, "fir", 1, dtype=torch.float32)
    with pytest.raises(ConfigError):
        sigma_forward(a, b, model)


def test_parameter_partition(model):
    groups = model.parameter_groups()
    assert set(groups) == {"encoder.rgb", "encoder.fir", "decoder"}
    ids = [id(p) for ps in groups.values() for p in ps]
    assert len(ids) == len(set(ids))
    assert set(ids) == {id(p) for p in model.parameters()}


def test_state_dict_namespaces(model):
    for key in model.state_dict():
        assert key.startswith(("encoder.rgb.", "encoder.fir.", "decoder.level"))


def test_upsampler_is_learned_and_affects_output(model):
    a = rand_image(64, 64, "rgb", 3, dtype=torch.float32, seed=1)
    b = rand_image(64, 64, "fir", 1, dtype=torch.float32, seed=2)
    # Make the coarse estimates non-trivial so upsampling has something to carry.
    with torch.no_grad():
        for lvl in range(6, 1, -1):
            model.decoder.level(lvl)["estimator"].head.bias.fill_(0.3)
    before = sigma_forward(a, b, model)
    for lvl in range(1, 7):
        upsampler = model.decoder.level(lvl)["upsample"]
        assert isinstance(upsampler, FlowUpsampler)
        assert isinstance(upsampler.deconv, torch.nn.ConvTranspose2d)
        assert all(p.requires_grad for p in upsampler.parameters())
    with torch.no_grad():
        model.decoder.level(1)["upsample"].deconv.weight.mul_(1.1)
    after = sigma_forward(a, b, model)
    assert not torch.equal(before, after)


def test_upsampler_bilinear_init_reproduces_constant_flow():
    up = FlowUpsampler().double()
    flow = torch.ones(1, 2, 5, 7, dtype=torch.float64) * torch.tensor([1.5, -0.5], dtype=torch.float64).view(1, 2, 1, 1)
    out = up(flow, (10, 13))
    assert out.shape == (1, 2, 10, 13)
    assert torch.allclose(out, 2 * flow[..., :1, :1].expand(1, 2, 10, 13), atol=1e-12)


def test_forward_deterministic(model):
    a = rand_image(64, 64, "rgb", 3, dtype=torch.float32)
    b = rand_image(64, 64, "fir", 1, dtype=torch.float32)
    assert torch.equal(sigma_forward(a, b, model), sigma_forward(a, b, model))


def test_manifest_round_trip(model):
    clone = SigmaModel.from_manifest(model.manifest())
    assert clone.manifest() == model.manifest()
    assert model.manifest()["estimator_widths"] == list(COMPACT_ESTIMATOR)


def test_requires_two_spectra():
    with pytest.raises(ConfigError):
        SigmaModel({"rgb": 3})
