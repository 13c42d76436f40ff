"""
Spectrum analysis.

Exact enumeration of the sine terms of a bias-free network layer, unitary DFT
magnitudes on the unit domain, and the evaluation metrics used for staged
training: spectrum mean absolute difference, band energy ratios and PSNR.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from rmfnet.errors import EnumerationBudgetError
from rmfnet.model import RMFN


logger = logging.getLogger(__name__)

ENUMERATION_BUDGET = 10 ** 7


@dataclass(frozen=True)
class SpectrumTerm:
    """One ``amplitude * sin(2*pi*freq.x + phase)`` term of a hidden unit."""

    amplitude: float
    freq: np.ndarray
    phase: float
    indices: Tuple[int, ...]
    signs: Tuple[int, ...]


@dataclass(frozen=True)
class MagnitudeSpectrum:
    """
    Centred magnitudes of the unitary DFT of a real signal.

    ``bins`` has the signal's spatial shape with DC at index n // 2 along
    every axis; :meth:`frequencies` gives the integer cycles per unit of each
    axis.
    """

    bins: np.ndarray
    grid_shape: Tuple[int, ...]
    domain_size: float = 1.0

    def frequencies(self, axis: int) -> np.ndarray:
        n = self.grid_shape[axis]
        return np.fft.fftshift(np.fft.fftfreq(n, d=self.domain_size / n))

    def inf_norm_radius(self) -> np.ndarray:
        """Per-bin infinity norm of the frequency vector."""
        grids = np.meshgrid(*[np.abs(self.frequencies(a)) for a in range(len(self.grid_shape))],
                            indexing='ij')
        return np.max(np.stack(grids), axis=0)

    def nyquist(self) -> float:
        return min(n // 2 for n in self.grid_shape) / self.domain_size

    def to_dict(self) -> Dict[str, Any]:
        return {
            'grid_shape': list(self.grid_shape),
            'domain_size': self.domain_size,
            'bins': self.bins.tolist(),
        }


def _layer_terms(model: RMFN, unit: int, layer: int) -> Tuple[np.ndarray, ...]:
    omegas = [f.omega.detach().numpy() for f in model.filters]
    phis = [f.phi.detach().numpy() for f in model.filters]
    d_h = model.config.d_h

    amp = np.ones(d_h)
    freq = omegas[0].copy()
    phase = phis[0].copy()
    idx = np.arange(d_h).reshape(-1, 1)
    signs = np.zeros((d_h, 0), dtype=np.int64)

    for l in range(1, layer + 1):
        weight = model.linears[l - 1].weight.detach().numpy()
        units = np.array([unit]) if l == layer else np.arange(d_h)
        n_prev = idx[:, -1]
        count = len(amp)
        # every (previous term, new unit, sign) combination
        term = np.repeat(np.arange(count), len(units) * 2)
        new_unit = np.tile(np.repeat(units, 2), count)
        sign = np.tile(np.array([1, -1]), count * len(units))

        amp = amp[term] * weight[new_unit, n_prev[term]] / 2.0
        freq = freq[term] + sign[:, None] * omegas[l][new_unit]
        phase = phase[term] + sign * (phis[l][new_unit] - math.pi / 2.0)
        idx = np.concatenate([idx[term], new_unit[:, None]], axis=1)
        signs = np.concatenate([signs[term], sign[:, None]], axis=1)

    if layer == 0:
        keep = idx[:, 0] == unit
        return amp[keep], freq[keep], phase[keep], idx[keep], signs[keep]
    return amp, freq, phase, idx, signs


def enumerate_spectrum(model: RMFN, unit: int, layer: int, budget: int = ENUMERATION_BUDGET) -> List[SpectrumTerm]:
    """
    Every sine term of hidden unit ``unit`` at layer ``layer``.

    The terms run over all index tuples (n_0..n_layer) with n_layer = unit and
    all sign tuples (s_1..s_layer), so z^(layer)_unit(x) equals
    ``sum(a * sin(2*pi*w.x + p))`` over the returned terms.

    Args:
        model: Bias-free network.
        unit: Hidden unit index n_layer.
        layer: Layer index in [0, L].
        budget: Largest number of terms to build.

    Returns:
        List of spectrum terms.

    Raises:
        ValueError: If the model has biases or indices are out of range.
        EnumerationBudgetError: If d_h^layer * 2^layer exceeds the budget.
    """
    if not model.config.bias_free:
        raise ValueError("exact enumeration requires bias-free linears")
    d_h = model.config.d_h
    if not 0 <= layer <= model.layers:
        raise ValueError(f"layer must be in [0, {model.layers}], got {layer}")
    if not 0 <= unit < d_h:
        raise ValueError(f"unit must be in [0, {d_h}), got {unit}")
    required = d_h ** layer * 2 ** layer
    if required > budget:
        raise EnumerationBudgetError(required, budget)

    amp, freq, phase, idx, signs = _layer_terms(model, unit, layer)
    return [
        SpectrumTerm(float(a), f.copy(), float(p), tuple(int(i) for i in n), tuple(int(s) for s in sg))
        for a, f, p, n, sg in zip(amp, freq, phase, idx, signs)
    ]


def evaluate_terms(terms: List[SpectrumTerm], x: np.ndarray) -> np.ndarray:
    """Sum the sine terms at coordinates ``x`` of shape (N, d_in)."""
    if not terms:
        return np.zeros(len(x))
    amp = np.array([t.amplitude for t in terms])
    freq = np.stack([t.freq for t in terms])
    phase = np.array([t.phase for t in terms])
    return np.sin(2.0 * np.pi * x @ freq.T + phase) @ amp


def dft_magnitude(signal: np.ndarray, spatial_dims: Optional[int] = None) -> MagnitudeSpectrum:
    """
    Centred magnitude of the unitary DFT.

    Args:
        signal: Real samples on a regular grid over the unit domain. Axes
            beyond ``spatial_dims`` are channels; their magnitudes are averaged.
        spatial_dims: Number of leading spatial axes; defaults to all axes.

    Returns:
        Magnitude spectrum.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if spatial_dims is None:
        spatial_dims = signal.ndim
    axes = tuple(range(spatial_dims))
    mags = np.abs(np.fft.fftshift(np.fft.fftn(signal, axes=axes, norm='ortho'), axes=axes))
    if signal.ndim > spatial_dims:
        mags = mags.reshape(mags.shape[:spatial_dims] + (-1,)).mean(axis=-1)
    return MagnitudeSpectrum(mags, tuple(signal.shape[:spatial_dims]))


def spectrum_mad(a: MagnitudeSpectrum, b: MagnitudeSpectrum) -> float:
    """
    Mean absolute difference of two magnitude spectra.

    Raises:
        ValueError: If the grids differ.
    """
    if a.bins.shape != b.bins.shape:
        raise ValueError(f"Spectrum shapes differ: {a.bins.shape} vs {b.bins.shape}")
    return float(np.mean(np.abs(a.bins - b.bins)))


def band_energy_outside(spectrum: MagnitudeSpectrum, band: float) -> float:
    """
    Fraction of squared magnitude outside the cube [-band, band]^d.

    Raises:
        ValueError: If the grid's Nyquist frequency is below ``band``.
    """
    if spectrum.nyquist() < band:
        raise ValueError(f"Grid Nyquist {spectrum.nyquist()} is below band {band}")
    energy = spectrum.bins ** 2
    total = energy.sum()
    if total == 0:
        return 0.0
    outside = spectrum.inf_norm_radius() > band + 1e-9
    return float(energy[outside].sum() / total)


def band_energy_inside(spectrum: MagnitudeSpectrum, band: float, exclude_dc: bool = True) -> float:
    """Fraction of squared magnitude inside the open cube (-band, band)^d."""
    energy = spectrum.bins ** 2
    total = energy.sum()
    if total == 0:
        return 0.0
    radius = spectrum.inf_norm_radius()
    inside = radius < band - 1e-9
    if exclude_dc:
        inside &= radius > 0
    return float(energy[inside].sum() / total)


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """
    Peak signal-to-noise ratio in dB; ``inf`` for identical inputs.

    Raises:
        ValueError: If shapes differ or peak is not positive.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"Shapes differ: {pred.shape} vs {target.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def save_spectrum_png(spectrum: MagnitudeSpectrum, path: Union[str, Path], title: str = '') -> None:
    """Write a log-magnitude heat map of a 1D or 2D spectrum."""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    log_mag = np.log10(spectrum.bins + 1e-12)
    if log_mag.ndim == 1:
        ax.plot(spectrum.frequencies(0), log_mag)
        ax.set_xlabel('cycles / unit')
    else:
        if log_mag.ndim > 2:
            # central slice of a volume
            log_mag = log_mag[tuple([slice(None), slice(None)] + [n // 2 for n in log_mag.shape[2:]])]
        extent = [spectrum.frequencies(1)[0], spectrum.frequencies(1)[-1],
                  spectrum.frequencies(0)[-1], spectrum.frequencies(0)[0]]
        ax.imshow(log_mag, cmap='magma', extent=extent)
    ax.set_title(title)
    fig.savefig(str(path), dpi=100, bbox_inches='tight', metadata={'Software': None})
    plt.close(fig)


def save_spectrum_json(spectrum: MagnitudeSpectrum, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(spectrum.to_dict()))
