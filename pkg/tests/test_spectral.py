import json
import math

import numpy as np
import pytest
import torch

from rmfnet.diffcore import DTYPE
from rmfnet.errors import EnumerationBudgetError
from rmfnet.model import RMFN, ModelConfig, eval_on_grid, grid_coordinates
from rmfnet.spectral import (
    band_energy_inside,
    band_energy_outside,
    dft_magnitude,
    enumerate_spectrum,
    evaluate_terms,
    psnr,
    save_spectrum_json,
    save_spectrum_png,
    spectrum_mad,
)


def tone(n, freq):
    x = (np.arange(n) + 0.5) / n - 0.5
    return np.sin(2 * np.pi * freq * x + 0.3)


@pytest.mark.parametrize('seed', range(20))
def test_enumeration_reproduces_hidden_units(seed):
    rng = np.random.default_rng(seed)
    d_in = 1 + seed % 2
    d_h = 1 + seed % 4
    layers = 1 + seed % 3
    model = RMFN(ModelConfig(d_in=d_in, d_h=d_h, layers=layers, b_max=20.0, bias_free=True,
                             quantize=bool(seed % 2)), rng)
    x = rng.uniform(-0.5, 0.5, (1000, d_in))
    hidden = model.forward_hidden(torch.as_tensor(x, dtype=DTYPE))
    for layer in range(layers + 1):
        for unit in range(d_h):
            terms = enumerate_spectrum(model, unit, layer)
            assert len(terms) == d_h ** layer * 2 ** layer
            np.testing.assert_allclose(evaluate_terms(terms, x), hidden[layer][:, unit].detach().numpy(),
                                       rtol=0, atol=1e-9)


def test_enumeration_needs_bias_free_model(image_model):
    with pytest.raises(ValueError, match='bias-free'):
        enumerate_spectrum(image_model, 0, 1)


def test_enumeration_checks_ranges_and_budget(rng):
    model = RMFN(ModelConfig(d_in=2, d_h=4, layers=3, b_max=20.0, bias_free=True), rng)
    with pytest.raises(ValueError):
        enumerate_spectrum(model, 4, 1)
    with pytest.raises(ValueError):
        enumerate_spectrum(model, 0, 4)
    with pytest.raises(EnumerationBudgetError) as info:
        enumerate_spectrum(model, 0, 3, budget=100)
    assert info.value.required == 4 ** 3 * 2 ** 3
    assert info.value.budget == 100


def test_enumerated_terms_respect_band_limits(rng):
    model = RMFN(ModelConfig(d_in=2, d_h=3, layers=3, b_max=27.0, bias_free=True), rng)
    for layer in range(4):
        terms = enumerate_spectrum(model, 1, layer)
        assert max(np.abs(t.freq).max() for t in terms) <= model.band_limits[layer] + 1e-9


@pytest.mark.parametrize('seed', range(20))
def test_outputs_are_band_limited(seed):
    rng = np.random.default_rng(seed)
    model = RMFN(ModelConfig(d_in=2, d_h=8, layers=3, b_max=27.0), rng)
    with torch.no_grad():
        for linear in model.linears:
            linear.bias.uniform_(-1.0, 1.0)
    for k in range(1, 4):
        spectrum = dft_magnitude(eval_on_grid(model, k, (64, 64)), spatial_dims=2)
        assert band_energy_outside(spectrum, model.scale_band(k)) <= 1e-8


@pytest.mark.parametrize('seed', range(5))
def test_head_deltas_leave_coarser_bands_empty(seed):
    rng = np.random.default_rng(seed)
    model = RMFN(ModelConfig(d_in=2, d_h=8, layers=3, b_max=27.0, lambda1=0.0, lambda2=2.0), rng)
    x = torch.as_tensor(grid_coordinates((64, 64)), dtype=DTYPE)
    for k in range(2, 4):
        with torch.no_grad():
            delta = model.head_delta(x, k).numpy().reshape(64, 64)
        spectrum = dft_magnitude(delta)
        assert band_energy_inside(spectrum, model.scale_band(k - 1), exclude_dc=True) <= 1e-8
        assert band_energy_outside(spectrum, model.scale_band(k)) <= 1e-8


def test_dft_magnitude_is_unitary(rng):
    signal = rng.standard_normal((16, 12))
    spectrum = dft_magnitude(signal)
    assert spectrum.grid_shape == (16, 12)
    assert np.sum(spectrum.bins ** 2) == pytest.approx(np.sum(signal ** 2))


def test_dft_magnitude_centres_dc():
    spectrum = dft_magnitude(np.ones((8, 8)))
    assert spectrum.bins[4, 4] == pytest.approx(8.0)
    assert spectrum.frequencies(0)[4] == 0.0
    assert spectrum.nyquist() == 4.0


def test_dft_magnitude_averages_channels(rng):
    signal = rng.standard_normal((8, 8, 3))
    spectrum = dft_magnitude(signal, spatial_dims=2)
    per_channel = [dft_magnitude(signal[..., c]).bins for c in range(3)]
    np.testing.assert_allclose(spectrum.bins, np.mean(per_channel, axis=0))


def test_band_energy_of_a_tone():
    spectrum = dft_magnitude(tone(32, 3))
    assert band_energy_outside(spectrum, 4.0) < 1e-20
    assert band_energy_outside(spectrum, 2.0) == pytest.approx(1.0)
    assert band_energy_inside(spectrum, 4.0) == pytest.approx(1.0)
    assert band_energy_inside(spectrum, 3.0) < 1e-20
    with pytest.raises(ValueError):
        band_energy_outside(spectrum, 20.0)


def test_band_energy_inside_dc_handling():
    spectrum = dft_magnitude(np.ones(16))
    assert band_energy_inside(spectrum, 2.0, exclude_dc=True) < 1e-20
    assert band_energy_inside(spectrum, 2.0, exclude_dc=False) == pytest.approx(1.0)


def test_spectrum_mad(rng):
    a = dft_magnitude(rng.standard_normal((8, 8)))
    b = dft_magnitude(rng.standard_normal((8, 8)))
    assert spectrum_mad(a, a) == 0.0
    assert spectrum_mad(a, b) == pytest.approx(np.mean(np.abs(a.bins - b.bins)))
    with pytest.raises(ValueError):
        spectrum_mad(a, dft_magnitude(np.zeros((4, 4))))


def test_psnr():
    target = np.full((4, 4), 0.5)
    assert psnr(target, target) == math.inf
    assert psnr(target + 0.1, target) == pytest.approx(20.0)
    assert psnr(target + 0.1, target, peak=10.0) == pytest.approx(60.0)
    with pytest.raises(ValueError):
        psnr(target, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        psnr(target, target, peak=0.0)


def test_psnr_of_constant_gray_images():
    gray = np.full((64, 64, 1), 0.5)
    assert psnr(gray, gray) == math.inf
    assert psnr(gray + 0.1, gray) == pytest.approx(20.0)
    assert psnr(gray - 0.1, gray) == pytest.approx(20.0)


def test_spectrum_writers(tmp_path, rng):
    spectrum = dft_magnitude(rng.standard_normal((8, 8)))
    save_spectrum_png(spectrum, tmp_path / 'spec.png', 'test')
    save_spectrum_json(spectrum, tmp_path / 'spec.json')
    assert (tmp_path / 'spec.png').stat().st_size > 0
    data = json.loads((tmp_path / 'spec.json').read_text())
    assert data['grid_shape'] == [8, 8]
    np.testing.assert_allclose(data['bins'], spectrum.bins)
