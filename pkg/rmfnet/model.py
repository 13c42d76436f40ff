"""
Residual multiplicative filter network.

Sinusoidal filters g^(i)(x) = sin(2*pi*Omega^(i) x + phi^(i)) with frozen
frequencies, Hadamard-product layers z^(i) = g^(i) * (W^(i) z^(i-1) + b^(i)),
and one output head per layer whose contributions accumulate residually:
y^(i) = y^(i-1) + W_out^(i) z^(i) + b_out^(i).
"""

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn

from rmfnet.config import dataclass_kwargs
from rmfnet.diffcore import DTYPE
from rmfnet.specinit import INIT_SCHEMES, band_limits_for, filter_bounds, init_filters


logger = logging.getLogger(__name__)

DOMAIN_HALF_WIDTH = 0.5

EVAL_CHUNK = 65536


@dataclass
class ModelConfig:
    """Architecture and spectrum-shaping hyperparameters."""

    d_in: int = 2
    d_h: int = 64
    d_out: int = 1
    layers: int = 3
    b_max: float = 32.0
    lambda1: float = 0.3
    lambda2: float = 2.0
    bias_free: bool = False
    residual: bool = True
    init: str = 'shifted'
    quantize: bool = True

    def validate(self) -> None:
        """
        Raises:
            ValueError: If any field is out of range.
        """
        if self.d_in not in (1, 2, 3):
            raise ValueError(f"d_in must be 1, 2 or 3, got {self.d_in}")
        if self.d_h < 1 or self.d_out < 1:
            raise ValueError(f"d_h and d_out must be positive, got {self.d_h}, {self.d_out}")
        if self.layers < 1:
            raise ValueError(f"layers must be at least 1, got {self.layers}")
        if self.b_max <= 0:
            raise ValueError(f"b_max must be positive, got {self.b_max}")
        if self.lambda1 < 0 or self.lambda2 <= 0:
            raise ValueError(f"Need lambda1 >= 0 and lambda2 > 0, got {self.lambda1}, {self.lambda2}")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}, got '{self.init}'")
        band_limits_for(self.b_max, self.layers, self.lambda1, self.lambda2, self.quantize)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        config = cls(**dataclass_kwargs(cls, data))
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class FilterLayer(nn.Module):
    """Sinusoidal filter with frozen frequencies (cycles/unit) and phases."""

    def __init__(self, omega: np.ndarray, phi: np.ndarray) -> None:
        super().__init__()
        self.register_buffer('omega', torch.as_tensor(omega, dtype=DTYPE))
        self.register_buffer('phi', torch.as_tensor(phi, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return torch.sin(2.0 * math.pi * (x @ self.omega.T) + self.phi)


class RMFN(nn.Module):
    """
    Residual multiplicative filter network over [-0.5, 0.5]^d_in.

    Trainable parameters are the linear layers and output heads; filter
    frequencies and phases are buffers and never change after construction.
    ``band_limits[i]`` bounds the spectrum of z^(i) (and of the scale-i
    output for i >= 1) in the infinity norm.
    """

    def __init__(self, config: ModelConfig, rng: Union[np.random.Generator, int, None] = None) -> None:
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(rng)

        filters, band_limits = init_filters(
            config.d_in, config.d_h, config.layers, config.b_max,
            config.lambda1, config.lambda2, rng, config.init, config.quantize,
        )
        self.band_limits: Tuple[float, ...] = band_limits
        self.filters = nn.ModuleList(FilterLayer(omega, phi) for omega, phi in filters)

        d_h, d_out = config.d_h, config.d_out
        w_bound = math.sqrt(6.0 / d_h) * 0.5
        head_bound = math.sqrt(1.0 / d_h)
        self.linears = nn.ModuleList()
        self.heads = nn.ModuleList()
        for _ in range(config.layers):
            linear = nn.Linear(d_h, d_h, bias=not config.bias_free, dtype=DTYPE)
            head = nn.Linear(d_h, d_out, dtype=DTYPE)
            with torch.no_grad():
                linear.weight.copy_(torch.as_tensor(rng.uniform(-w_bound, w_bound, (d_h, d_h))))
                if linear.bias is not None:
                    linear.bias.zero_()
                head.weight.copy_(torch.as_tensor(rng.uniform(-head_bound, head_bound, (d_out, d_h))))
                head.bias.zero_()
            self.linears.append(linear)
            self.heads.append(head)

    @property
    def layers(self) -> int:
        return self.config.layers

    def scale_band(self, scale: int) -> float:
        """Band limit of the scale-``scale`` output (1-based)."""
        self._check_scale(scale)
        return self.band_limits[scale]

    def _check_scale(self, scale: int) -> None:
        if not 1 <= scale <= self.layers:
            raise ValueError(f"scale must be in [1, {self.layers}], got {scale}")

    def forward_hidden(self, x: Tensor, max_layer: Optional[int] = None) -> List[Tensor]:
        """
        Hidden activations z^(0)..z^(max_layer).

        Args:
            x: Coordinates of shape (N, d_in) in [-0.5, 0.5]^d_in.
            max_layer: Last layer to compute; defaults to L.

        Returns:
            List of (N, d_h) tensors.
        """
        if max_layer is None:
            max_layer = self.layers
        if x.numel() and bool((x.abs() > DOMAIN_HALF_WIDTH + 1e-9).any()):
            warnings.warn("Coordinates outside [-0.5, 0.5]; the network extrapolates there",
                          RuntimeWarning, stacklevel=2)

        z = self.filters[0](x)
        hidden = [z]
        for i in range(1, max_layer + 1):
            z = self.filters[i](x) * self.linears[i - 1](z)
            hidden.append(z)
        return hidden

    def forward_outputs(self, x: Tensor, max_scale: Optional[int] = None) -> List[Tensor]:
        """
        Outputs y^(1)..y^(max_scale) from one pass.

        With ``residual`` each output adds its head's contribution to the
        previous output; without it every head stands alone.

        Args:
            x: Coordinates of shape (N, d_in).
            max_scale: Last scale to compute; defaults to L.

        Returns:
            List of (N, d_out) tensors.
        """
        if max_scale is None:
            max_scale = self.layers
        self._check_scale(max_scale)
        hidden = self.forward_hidden(x, max_scale)
        outputs: List[Tensor] = []
        for i in range(1, max_scale + 1):
            delta = self.heads[i - 1](hidden[i])
            if self.config.residual and outputs:
                outputs.append(outputs[-1] + delta)
            else:
                outputs.append(delta)
        return outputs

    def forward(self, x: Tensor) -> List[Tensor]:
        return self.forward_outputs(x)

    def head_delta(self, x: Tensor, scale: int) -> Tensor:
        """Contribution of head ``scale`` alone: W_out z + b_out."""
        self._check_scale(scale)
        return self.heads[scale - 1](self.forward_hidden(x, scale)[scale])

    def trainable_groups(self, layer: int) -> List[nn.Parameter]:
        """Parameters owned by layer ``layer`` (its linear and its head)."""
        return list(self.linears[layer - 1].parameters()) + list(self.heads[layer - 1].parameters())

    def check_invariants(self) -> Tuple[bool, Optional[str]]:
        """
        Validate band limits and filter frequency ranges.

        Returns:
            Tuple of (is_valid, error_message).
        """
        bands = self.band_limits
        if any(b <= a for a, b in zip(bands, bands[1:])):
            return False, f"Band limits not strictly increasing: {bands}"
        if bands[-1] > self.config.b_max * (1 + 1e-9):
            return False, f"Finest band {bands[-1]} exceeds b_max {self.config.b_max}"
        for i, layer in enumerate(self.filters):
            low, high = filter_bounds(self.config.init, i, bands, self.config.lambda1, self.config.lambda2,
                                      self.config.quantize)
            norms = layer.omega.abs().amax(dim=1)
            if bool((norms > high + 1e-9).any()) or bool((norms < low - 1e-9).any()):
                return False, f"Filter {i} frequencies outside [{low}, {high}]"
        return True, None


def grid_coordinates(grid_shape: Sequence[int]) -> np.ndarray:
    """
    Pixel/voxel centres of a regular grid over [-0.5, 0.5]^d.

    Returns:
        Array of shape (prod(grid_shape), d), axis order matching grid_shape.
    """
    axes = [(np.arange(n) + 0.5) / n - 0.5 for n in grid_shape]
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def eval_on_grid(model: RMFN, scale: int, grid_shape: Sequence[int], chunk: int = EVAL_CHUNK) -> np.ndarray:
    """
    Sample y^(scale) on the regular grid of pixel/voxel centres.

    Args:
        model: Network to evaluate.
        scale: Output scale in [1, L].
        grid_shape: One extent per input dimension.
        chunk: Points per forward pass.

    Returns:
        Array of shape grid_shape + (d_out,).

    Raises:
        ValueError: If the scale is out of range or grid_shape has the wrong rank.
    """
    model._check_scale(scale)
    if len(grid_shape) != model.config.d_in:
        raise ValueError(f"grid_shape {tuple(grid_shape)} must have {model.config.d_in} extents")

    coords = torch.as_tensor(grid_coordinates(grid_shape), dtype=DTYPE)
    pieces = []
    with torch.no_grad():
        for start in range(0, len(coords), chunk):
            pieces.append(model.forward_outputs(coords[start:start + chunk], scale)[-1])
    values = torch.cat(pieces).numpy()
    return values.reshape(tuple(grid_shape) + (model.config.d_out,))


def save_checkpoint(model: RMFN, path: Union[str, Path]) -> None:
    """Write config, band limits and all named float64 arrays to one file."""
    torch.save({
        'config': model.config.to_dict(),
        'band_limits': list(model.band_limits),
        'state': model.state_dict(),
    }, str(path))
    logger.info(f"Checkpoint written to {path}")


def load_checkpoint(path: Union[str, Path]) -> RMFN:
    """
    Restore a model written by :func:`save_checkpoint` bit-exactly.

    Raises:
        ValueError: If the stored band limits disagree with the config.
    """
    payload = torch.load(str(path), weights_only=True)
    config = ModelConfig.from_dict(payload['config'])
    model = RMFN(config, rng=0)
    model.load_state_dict(payload['state'])
    stored = tuple(float(b) for b in payload['band_limits'])
    if not np.allclose(stored, model.band_limits, rtol=1e-12, atol=0.0):
        raise ValueError(f"Checkpoint band limits {stored} do not match config")
    model.band_limits = stored
    return model
