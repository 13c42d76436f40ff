"""
Frequency initialization with explicit control of spectral growth.

Layer i >= 2 clones the previous layer's band [-B, B] along a small set of
lattice directions, shifted by lambda2 * B and perturbed by at most
lambda1 * B, so the band grows by (1 + lambda1 + lambda2) per layer and, for
lambda2 = 2 + lambda1, never overlaps the previous band. Quantized filters use
whole cycles per unit on an integer band ladder ending at floor(b_max).
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np


logger = logging.getLogger(__name__)

MIN_BAND = 0.5

INIT_SCHEMES = ('shifted', 'bacon')


@dataclass(frozen=True)
class BandSchedule:
    """Per-scale band limits in cycles per unit domain, coarsest first."""

    bands: Tuple[float, ...]
    growth: float

    def __len__(self) -> int:
        return len(self.bands)

    def __getitem__(self, index: int) -> float:
        return self.bands[index]


def direction_set(d_in: int) -> np.ndarray:
    """
    Lattice directions used to shift frequency clones.

    One representative per sign class of the nonzero vectors of {-1, 0, 1}^d:
    1 vector in 1D, 4 in 2D and 13 in 3D.

    Args:
        d_in: Input dimension (1, 2 or 3).

    Returns:
        Integer array of shape (k, d_in).

    Raises:
        ValueError: If d_in is unsupported.
    """
    if d_in not in (1, 2, 3):
        raise ValueError(f"Unsupported input dimension {d_in}; expected 1, 2 or 3")
    directions = []
    for vec in itertools.product((-1, 0, 1), repeat=d_in):
        nonzero = [c for c in vec if c != 0]
        # first nonzero entry positive picks one vector per sign class
        if nonzero and nonzero[0] > 0:
            directions.append(vec)
    return np.array(directions, dtype=np.int64)


def compute_band_schedule(b_max: float, layers: int, lambda1: float, lambda2: float) -> BandSchedule:
    """
    Band limits for each output scale.

    Scale k (1-based) gets ``b_max / g**(L-k)`` with growth
    ``g = 1 + lambda1 + lambda2``, so the finest scale reaches ``b_max``.

    Args:
        b_max: Band limit of the finest scale.
        layers: Number of layers L (= number of scales).
        lambda1: Perturbation coefficient.
        lambda2: Shift coefficient.

    Returns:
        Band schedule with L entries.

    Raises:
        ValueError: If arguments are out of range or the coarsest band is
            below 0.5 cycles per unit.
    """
    if b_max <= 0:
        raise ValueError(f"b_max must be positive, got {b_max}")
    if layers < 1:
        raise ValueError(f"layers must be at least 1, got {layers}")
    if lambda1 < 0 or lambda2 <= 0:
        raise ValueError(f"Need lambda1 >= 0 and lambda2 > 0, got {lambda1}, {lambda2}")

    growth = 1.0 + lambda1 + lambda2
    bands = tuple(b_max / growth ** (layers - 1 - k) for k in range(layers))
    if bands[0] < MIN_BAND:
        raise ValueError(
            f"band limit too small to represent DC+fundamental: "
            f"coarsest band {bands[0]:.4g} < {MIN_BAND}"
        )
    return BandSchedule(bands, growth)


def lattice_band_limits(band_limits: Tuple[float, ...]) -> Tuple[float, ...]:
    """
    Whole-cycle band ladder for quantized filters.

    Every entry is an integer, the ladder is strictly increasing, the base
    half-band is at least 1 and the last entry is ``floor(b_max)``, so
    integer filters can reach the top of the band.

    Args:
        band_limits: Real band limits of z^(0)..z^(L).

    Returns:
        Integer band limits (as floats) of z^(0)..z^(L).

    Raises:
        ValueError: If b_max is too small to give every layer at least one cycle.
    """
    top = math.floor(band_limits[-1] + 1e-9)
    half = max(1, math.floor(band_limits[0] + 1e-9))
    ladder = [half, half + max(1, math.floor(band_limits[1] + 1e-9) - half)]
    for band in band_limits[2:]:
        ladder.append(max(math.floor(band + 1e-9), ladder[-1] + 1))
    if ladder[-1] > top:
        raise ValueError(
            f"b_max {band_limits[-1]:.4g} is too small for whole-cycle frequencies over "
            f"{len(band_limits) - 1} layers; need at least {ladder[-1]}"
        )
    return tuple(float(b) for b in ladder)


def lattice_split(increment: float, lambda1: float, lambda2: float) -> Tuple[int, int]:
    """
    Integer (shift, perturbation) with shift + perturbation = increment.

    The perturbation keeps the ratio lambda1 / (lambda1 + lambda2) of the
    real-valued clone geometry.
    """
    increment = int(round(increment))
    perturbation = int(round(increment * lambda1 / (lambda1 + lambda2)))
    return increment - perturbation, perturbation


def band_limits_for(b_max: float, layers: int, lambda1: float, lambda2: float,
                    quantize: bool) -> Tuple[float, ...]:
    """
    Band limits of z^(0)..z^(L): B_0/2 followed by the per-scale schedule,
    moved onto the integer ladder when ``quantize`` is set.

    Raises:
        ValueError: If the schedule or the integer ladder is invalid.
    """
    schedule = compute_band_schedule(b_max, layers, lambda1, lambda2)
    band_limits = (schedule[0] / 2.0,) + schedule.bands
    return lattice_band_limits(band_limits) if quantize else band_limits


def _phases(d_h: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-np.pi, np.pi, size=d_h)


def _uniform(bound: float, size: Tuple[int, ...], rng: np.random.Generator, integer: bool) -> np.ndarray:
    if integer:
        bound = int(round(bound))
        return rng.integers(-bound, bound + 1, size=size).astype(np.float64)
    return rng.uniform(-bound, bound, size=size)


def sample_base_frequencies(
    d_in: int,
    d_h: int,
    band: float,
    rng: np.random.Generator,
    quantize: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Frequencies uniform in [-band, band]^d_in and phases uniform in [-pi, pi].

    Args:
        d_in: Input dimension.
        d_h: Hidden width.
        band: Half-width of the sampling cube in cycles per unit.
        rng: Random generator owned by the caller.
        quantize: Draw whole cycles per unit from [-max(1, floor(band)), max(1, floor(band))].

    Returns:
        Tuple of (omega with shape (d_h, d_in), phi with shape (d_h,)).
    """
    if quantize:
        band = max(1, math.floor(band + 1e-9))
    omega = _uniform(band, (d_h, d_in), rng, quantize)
    phi = _phases(d_h, rng)
    return omega, phi


def _shifted_clones(
    d_in: int,
    d_h: int,
    shift: float,
    perturbation: float,
    rng: np.random.Generator,
    directions: Optional[np.ndarray],
    integer: bool,
) -> Tuple[np.ndarray, np.ndarray]:
    if directions is None:
        directions = direction_set(d_in)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, d_in)
    if len(directions) == 0:
        raise ValueError("Direction set is empty")

    choice = rng.integers(0, len(directions), size=d_h)
    v = _uniform(perturbation, (d_h, d_in), rng, integer)
    omega = shift * directions[choice] + v
    phi = _phases(d_h, rng)
    return omega, phi


def sample_layer_frequencies(
    d_in: int,
    d_h: int,
    b_prev: float,
    lambda1: float,
    lambda2: float,
    rng: np.random.Generator,
    directions: Optional[np.ndarray] = None,
    quantize: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Shifted-clone frequencies ``omega_j = lambda2 * b_prev * r_j + v_j``.

    ``r_j`` is drawn uniformly from the direction set and used unnormalized;
    ``v_j`` is uniform in [-lambda1 * b_prev, lambda1 * b_prev]^d_in. With
    ``quantize`` the band increment ``(lambda1 + lambda2) * b_prev`` is rounded
    to whole cycles and split by :func:`lattice_split`, and ``v_j`` is drawn
    from the integers.

    Args:
        d_in: Input dimension.
        d_h: Hidden width.
        b_prev: Band limit of the previous layer.
        lambda1: Perturbation coefficient.
        lambda2: Shift coefficient.
        rng: Random generator owned by the caller.
        directions: Direction set override; defaults to :func:`direction_set`.
        quantize: Whole cycles per unit.

    Returns:
        Tuple of (omega with shape (d_h, d_in), phi with shape (d_h,)).

    Raises:
        ValueError: If the direction set is empty.
    """
    if quantize:
        shift, perturbation = lattice_split((lambda1 + lambda2) * b_prev, lambda1, lambda2)
    else:
        shift, perturbation = lambda2 * b_prev, lambda1 * b_prev
    return _shifted_clones(d_in, d_h, shift, perturbation, rng, directions, quantize)


def filter_bounds(
    init: str,
    layer: int,
    band_limits: Tuple[float, ...],
    lambda1: float,
    lambda2: float,
    quantize: bool = False,
) -> Tuple[float, float]:
    """
    Range of the largest ``|component|`` of layer-``layer`` filter frequencies.

    Returns:
        Tuple (low, high) such that every row's infinity norm lies in it.
    """
    if layer == 0:
        return 0.0, band_limits[0]
    increment = band_limits[layer] - band_limits[layer - 1]
    if layer == 1 or init == 'bacon':
        return 0.0, increment
    if quantize:
        _, perturbation = lattice_split(increment, lambda1, lambda2)
    else:
        perturbation = increment * lambda1 / (lambda1 + lambda2)
    return max(0.0, increment - 2.0 * perturbation), increment


def init_filters(
    d_in: int,
    d_h: int,
    layers: int,
    b_max: float,
    lambda1: float,
    lambda2: float,
    rng: np.random.Generator,
    init: str = 'shifted',
    quantize: bool = True,
) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], Tuple[float, ...]]:
    """
    Sample all L+1 filter banks and the band limit of every hidden layer.

    Filters 0 and 1 split the coarsest scale's band between them, so the
    scale-1 output covers it without a hole around DC. Layers i >= 2 use
    shifted clones (``init='shifted'``) or in-band frequencies of the band
    increment (``init='bacon'``); both reach the same schedule. With
    ``quantize`` every band limit sits on the integer ladder of
    :func:`lattice_band_limits` and the filters add up to ``floor(b_max)``.

    Args:
        d_in: Input dimension.
        d_h: Hidden width.
        layers: Number of layers L.
        b_max: Finest band limit.
        lambda1: Perturbation coefficient.
        lambda2: Shift coefficient.
        rng: Random generator owned by the caller.
        init: ``'shifted'`` or ``'bacon'``.
        quantize: Whole cycles per unit, so grids over the unit domain are periodic.

    Returns:
        Tuple of (list of (omega, phi) for filters 0..L, band limits of
        z^(0)..z^(L)).

    Raises:
        ValueError: If init is unknown or the schedule is invalid.
    """
    if init not in INIT_SCHEMES:
        raise ValueError(f"Unknown init scheme '{init}'; expected one of {INIT_SCHEMES}")
    band_limits = band_limits_for(b_max, layers, lambda1, lambda2, quantize)

    filters = [
        sample_base_frequencies(d_in, d_h, band_limits[0], rng, quantize),
        sample_base_frequencies(d_in, d_h, band_limits[1] - band_limits[0], rng, quantize),
    ]
    for i in range(2, layers + 1):
        b_prev = band_limits[i - 1]
        increment = band_limits[i] - b_prev
        if init == 'bacon':
            filters.append(sample_base_frequencies(d_in, d_h, increment, rng, quantize))
        elif quantize:
            shift, perturbation = lattice_split(increment, lambda1, lambda2)
            filters.append(_shifted_clones(d_in, d_h, shift, perturbation, rng, None, True))
        else:
            filters.append(sample_layer_frequencies(d_in, d_h, b_prev, lambda1, lambda2, rng))

    logger.debug(f"Initialized {layers + 1} filter banks ({init}), bands={band_limits}")
    return filters, band_limits
