"""
Optimization for staged coarse-to-fine fitting.

Adam steps over named parameters, Gaussian low-pass target construction, the
staged schedule that supervises one output scale per round, and the
comparison trainers used for the drift ablation.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import ndimage
from torch import Tensor, nn

from rmfnet.config import dataclass_kwargs
from rmfnet.diffcore import DTYPE
from rmfnet.errors import NonFiniteError
from rmfnet.model import RMFN, grid_coordinates
from rmfnet.spectral import MagnitudeSpectrum, dft_magnitude, spectrum_mad


logger = logging.getLogger(__name__)

TRAIN_MODES = ('staged', 'unfair', 'fair')


@dataclass
class StageSchedule:
    """Iteration budget per output scale, coarsest first."""

    budgets: Tuple[int, ...] = (500, 1000, 4000)
    freeze_below_stage: bool = False
    lowpass_targets: bool = True

    def validate(self, layers: Optional[int] = None) -> None:
        """
        Raises:
            ValueError: If a budget is not positive or the stage count differs
                from the number of layers.
        """
        if not self.budgets or any(int(b) <= 0 for b in self.budgets):
            raise ValueError(f"Stage budgets must be positive, got {self.budgets}")
        if layers is not None and len(self.budgets) != layers:
            raise ValueError(f"Schedule has {len(self.budgets)} stages but the model has {layers} scales")

    @property
    def total(self) -> int:
        return int(sum(self.budgets))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StageSchedule":
        kwargs = dataclass_kwargs(cls, data)
        if 'budgets' in kwargs:
            kwargs['budgets'] = tuple(int(b) for b in kwargs['budgets'])
        schedule = cls(**kwargs)
        schedule.validate()
        return schedule

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class AdamState:
    """
    Adam moments and step count for a set of named parameters.

    Wraps ``torch.optim.Adam``; parameters whose gradient is ``None`` at a
    step are left untouched.
    """

    def __init__(
        self,
        params: Union[Mapping[str, nn.Parameter], Iterable[Tuple[str, nn.Parameter]]],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params: Dict[str, nn.Parameter] = dict(params)
        if not self.params:
            raise ValueError("AdamState needs at least one parameter")
        self.optimizer = torch.optim.Adam(list(self.params.values()), lr=lr, betas=betas, eps=eps)
        self.step_count = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]['lr']

    def moments(self, name: str) -> Tuple[Tensor, Tensor]:
        """First and second moment accumulators of one leaf."""
        state = self.optimizer.state.get(self.params[name], {})
        zeros = torch.zeros_like(self.params[name])
        return state.get('exp_avg', zeros), state.get('exp_avg_sq', zeros)

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)


def adam_step(state: AdamState, grads: Optional[Mapping[str, Tensor]] = None) -> None:
    """
    One bias-corrected Adam update.

    Args:
        state: Optimizer state; its parameters are updated in place.
        grads: Gradients keyed by leaf name. When omitted the parameters'
            ``.grad`` fields (from ``backward``) are used.

    Raises:
        NonFiniteError: If any gradient holds NaN or Inf, naming the leaf.
    """
    if grads is not None:
        for name, grad in grads.items():
            state.params[name].grad = grad.detach().clone()
    for name, param in state.params.items():
        if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
            raise NonFiniteError(f"Non-finite gradient in leaf '{name}'")
    state.optimizer.step()
    state.step_count += 1


def mse(pred: Tensor, target: Tensor) -> Tensor:
    return torch.mean((pred - target) ** 2)


def gaussian_lowpass(signal: np.ndarray, band: float, axes: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Gaussian low-pass in the Fourier domain with sigma_f = band / 2.

    The transfer function is ``exp(-|f|^2 / (2 sigma_f^2))`` with f in cycles
    per unit domain, so DC passes unchanged and a tone at ``band`` keeps a
    fraction e^-2 of its amplitude.

    Args:
        signal: Real samples over the unit domain.
        band: Target band limit in cycles per unit.
        axes: Spatial axes to filter; defaults to all axes.

    Returns:
        Filtered signal with the input's shape.

    Raises:
        ValueError: If band is not positive.
    """
    if band <= 0:
        raise ValueError(f"band must be positive, got {band}")
    signal = np.asarray(signal, dtype=np.float64)
    if axes is None:
        axes = tuple(range(signal.ndim))
    axes = tuple(a % signal.ndim for a in axes)
    sigma_f = band / 2.0
    # spatial sigma in samples for ndimage's transfer function exp(-2 pi^2 s^2 (k/n)^2)
    sigma = [signal.shape[a] / (2.0 * np.pi * sigma_f) if a in axes else 0.0 for a in range(signal.ndim)]
    spectrum = np.fft.fftn(signal, axes=axes)
    filtered = ndimage.fourier_gaussian(spectrum, sigma=sigma)
    return np.fft.ifftn(filtered, axes=axes).real


def make_targets(image: np.ndarray, bands: Sequence[float], lowpass: bool = True) -> List[np.ndarray]:
    """
    Supervision target for every scale; the finest scale sees the full image.

    Args:
        image: Samples of shape grid + (channels,).
        bands: Band limit per scale, coarsest first.
        lowpass: Low-pass the coarse targets; otherwise every scale sees the
            full image.
    """
    spatial = tuple(range(image.ndim - 1))
    targets = []
    for k, band in enumerate(bands):
        if lowpass and k < len(bands) - 1:
            targets.append(gaussian_lowpass(image, band, axes=spatial))
        else:
            targets.append(np.asarray(image, dtype=np.float64))
    return targets


class TrainingLog:
    """JSON-lines training history; optionally mirrored to a file."""

    def __init__(self, path: Optional[Union[str, Path]] = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, Any]] = []
        self._handle = None

    def __enter__(self) -> "TrainingLog":
        if self.path is not None:
            self._handle = self.path.open('w')
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None
        if exc is not None:
            logger.error(f"Training aborted: {exc}", exc_info=(exc_type, exc, tb))

    def write(self, **record: Any) -> None:
        self.records.append(record)
        if self._handle is not None:
            self._handle.write(json.dumps(record, sort_keys=True) + '\n')


@dataclass
class FitResult:
    """Trained model plus per-stage spectrum snapshots."""

    model: RMFN
    snapshots: Dict[int, Dict[int, MagnitudeSpectrum]]
    snapshot_iterations: List[int]
    final_spectra: Dict[int, MagnitudeSpectrum]
    history: List[Dict[str, Any]] = field(default_factory=list)
    stage_scales: Dict[int, List[int]] = field(default_factory=dict)

    def drift(self) -> Dict[int, float]:
        """Spectrum MAD between the snapshot taken after stage k and the end, per scale k."""
        return {
            k: spectrum_mad(self.snapshots[k][k], self.final_spectra[k])
            for k in sorted(self.snapshots) if k in self.final_spectra
        }


def _grid_outputs(model: RMFN, coords: Tensor, grid_shape: Tuple[int, ...], max_scale: int) -> List[np.ndarray]:
    with torch.no_grad():
        outputs = model.forward_outputs(coords, max_scale)
    return [y.numpy().reshape(grid_shape + (model.config.d_out,)) for y in outputs]


def _spectra(model: RMFN, coords: Tensor, grid_shape: Tuple[int, ...], max_scale: int) -> Dict[int, MagnitudeSpectrum]:
    outputs = _grid_outputs(model, coords, grid_shape, max_scale)
    return {k: dft_magnitude(y, spatial_dims=len(grid_shape)) for k, y in enumerate(outputs, start=1)}


def _fair_outputs(model: RMFN, coords: Tensor, stage: int) -> List[Tensor]:
    """All scale outputs; only the current stage reaches the hidden layers."""
    hidden = model.forward_hidden(coords)
    outputs: List[Tensor] = []
    for i in range(1, model.layers + 1):
        z = hidden[i] if i == stage else hidden[i].detach()
        delta = model.heads[i - 1](z)
        if model.config.residual and outputs:
            outputs.append(outputs[-1] + delta)
        else:
            outputs.append(delta)
    return outputs


def _set_stage_trainable(model: RMFN, stage: int, freeze_below: bool) -> None:
    for layer in range(1, model.layers + 1):
        trainable = not (freeze_below and layer < stage)
        for param in model.trainable_groups(layer):
            param.requires_grad_(trainable)


def staged_fit(
    model: RMFN,
    targets: Sequence[np.ndarray],
    schedule: StageSchedule,
    lr: float = 1e-3,
    mode: str = 'staged',
    log: Optional[TrainingLog] = None,
    log_every: int = 100,
) -> FitResult:
    """
    Coarse-to-fine fitting: stage k optimizes the scale-k output.

    In ``'staged'`` mode only the scale-k MSE is evaluated during stage k, and
    outputs above scale k are not computed at all. ``'fair'`` mode keeps every
    scale's loss but lets non-current scales update only their output heads.
    After stage k the magnitude spectrum of every scale <= k is recorded.

    Args:
        model: Network to train in place.
        targets: One target per scale, each of shape grid + (d_out,).
        schedule: Iteration budget per stage.
        lr: Adam learning rate.
        mode: ``'staged'``, ``'unfair'`` (staged on a non-residual model) or ``'fair'``.
        log: Optional training log receiving loss records.
        log_every: Iterations between loss records.

    Returns:
        Fit result with snapshots and final spectra.

    Raises:
        ValueError: If the schedule, targets and model disagree.
        NonFiniteError: If a loss becomes non-finite.
    """
    if mode not in TRAIN_MODES:
        raise ValueError(f"mode must be one of {TRAIN_MODES}, got '{mode}'")
    schedule.validate(model.layers)
    if len(targets) != model.layers:
        raise ValueError(f"Got {len(targets)} targets for {model.layers} scales")

    d_in, d_out = model.config.d_in, model.config.d_out
    grid_shape = tuple(targets[0].shape[:d_in])
    coords = torch.as_tensor(grid_coordinates(grid_shape), dtype=DTYPE)
    flat_targets = [torch.as_tensor(np.asarray(t).reshape(-1, d_out), dtype=DTYPE) for t in targets]

    state = AdamState(model.named_parameters(), lr=lr)
    log = log if log is not None else TrainingLog()
    snapshots: Dict[int, Dict[int, MagnitudeSpectrum]] = {}
    snapshot_iterations: List[int] = []
    stage_scales: Dict[int, List[int]] = {}
    iteration = 0

    for stage, budget in enumerate(schedule.budgets, start=1):
        _set_stage_trainable(model, stage, schedule.freeze_below_stage)
        scales = [stage] if mode != 'fair' else list(range(1, model.layers + 1))
        stage_scales[stage] = scales
        logger.info(f"Stage {stage}/{model.layers}: {budget} iterations, "
                    f"band {model.scale_band(stage):.4g}, mode={mode}")
        for _ in range(budget):
            state.zero_grad()
            if mode != 'fair':
                loss = mse(model.forward_outputs(coords, stage)[-1], flat_targets[stage - 1])
            else:
                outputs = _fair_outputs(model, coords, stage)
                loss = sum(mse(outputs[s - 1], flat_targets[s - 1]) for s in scales)
            if not bool(torch.isfinite(loss)):
                raise NonFiniteError(f"Non-finite loss at stage {stage}, iteration {iteration}")
            loss.backward()
            adam_step(state)
            iteration += 1
            if iteration % log_every == 0 or iteration == 1:
                log.write(iteration=iteration, stage=stage, loss=float(loss.item()))
                logger.debug(f"iter {iteration} stage {stage} loss {loss.item():.6e}")

        snapshots[stage] = _spectra(model, coords, grid_shape, stage)
        snapshot_iterations.append(iteration)
        log.write(iteration=iteration, stage=stage, snapshot=f"stage{stage}")

    _set_stage_trainable(model, 1, False)
    final = _spectra(model, coords, grid_shape, model.layers)
    return FitResult(model, snapshots, snapshot_iterations, final, log.records, stage_scales)


def fit_full_scale(
    model: RMFN,
    target: np.ndarray,
    iterations: int,
    lr: float = 1e-3,
    log: Optional[TrainingLog] = None,
    log_every: int = 100,
) -> RMFN:
    """
    Non-staged baseline: supervise only the finest output for the whole budget.

    Raises:
        ValueError: If iterations is not positive.
        NonFiniteError: If the loss becomes non-finite.
    """
    if iterations <= 0:
        raise ValueError(f"iterations must be positive, got {iterations}")
    d_in, d_out = model.config.d_in, model.config.d_out
    grid_shape = tuple(target.shape[:d_in])
    coords = torch.as_tensor(grid_coordinates(grid_shape), dtype=DTYPE)
    flat_target = torch.as_tensor(np.asarray(target).reshape(-1, d_out), dtype=DTYPE)
    state = AdamState(model.named_parameters(), lr=lr)
    log = log if log is not None else TrainingLog()

    for iteration in range(1, iterations + 1):
        state.zero_grad()
        loss = mse(model.forward_outputs(coords)[-1], flat_target)
        if not bool(torch.isfinite(loss)):
            raise NonFiniteError(f"Non-finite loss at iteration {iteration}")
        loss.backward()
        adam_step(state)
        if iteration % log_every == 0 or iteration == 1:
            log.write(iteration=iteration, stage=model.layers, loss=float(loss.item()))
    return model
