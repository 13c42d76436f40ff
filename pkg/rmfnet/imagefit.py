"""
2D image fitting experiments.

An image is fitted at half its resolution with the staged schedule, then the
network is queried on the original grid to measure generalization. The same
seed and budget can drive comparison arms: BACON-style fair staging and a
non-staged fit of the finest scale.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from rmfnet.config import dataclass_kwargs
from rmfnet.model import RMFN, ModelConfig, eval_on_grid, save_checkpoint
from rmfnet.spectral import dft_magnitude, psnr, save_spectrum_json, save_spectrum_png
from rmfnet.trainer import (
    StageSchedule,
    TrainingLog,
    fit_full_scale,
    gaussian_lowpass,
    make_targets,
    staged_fit,
)


logger = logging.getLogger(__name__)


def _default_image_model() -> ModelConfig:
    return ModelConfig(d_in=2, d_h=64, d_out=1, layers=3, b_max=32.0)


@dataclass
class ImageExperimentConfig:
    """Settings of one image fitting experiment."""

    image: Optional[str] = None
    fit_resolution: int = 128
    eval_resolution: int = 256
    model: ModelConfig = field(default_factory=_default_image_model)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    lr: float = 1e-3
    mode: str = 'staged'
    baselines: bool = False
    synthetic_components: int = 5
    seed: int = 0

    def validate(self) -> None:
        """
        Raises:
            ValueError: If resolutions, model or schedule are inconsistent.
        """
        if self.eval_resolution != 2 * self.fit_resolution:
            raise ValueError(f"eval_resolution must be 2 x fit_resolution, "
                             f"got {self.eval_resolution} and {self.fit_resolution}")
        if self.fit_resolution < 2:
            raise ValueError(f"fit_resolution must be at least 2, got {self.fit_resolution}")
        self.model.validate()
        if self.model.d_in != 2:
            raise ValueError(f"Image fitting needs d_in=2, got {self.model.d_in}")
        self.schedule.validate(self.model.layers)
        if self.model.b_max > self.fit_resolution / 2:
            raise ValueError(f"b_max {self.model.b_max} exceeds the fit grid's Nyquist {self.fit_resolution / 2}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ImageExperimentConfig":
        kwargs = dataclass_kwargs(cls, data)
        if 'model' in kwargs:
            kwargs['model'] = ModelConfig.from_dict(kwargs['model'])
        if 'schedule' in kwargs:
            kwargs['schedule'] = StageSchedule.from_dict(kwargs['schedule'])
        config = cls(**kwargs)
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def load_image(path: Union[str, Path], size: Optional[int] = None) -> np.ndarray:
    """
    Read an 8-bit image as floats in [0, 1] with shape (H, W, C).

    Non-square images are centre-cropped with a warning; ``size`` resizes the
    result to size x size.
    """
    with Image.open(path) as img:
        img = img.convert('L' if img.mode in ('1', 'L', 'I', 'I;16', 'F') else 'RGB')
        width, height = img.size
        if width != height:
            side = min(width, height)
            left, top = (width - side) // 2, (height - side) // 2
            logger.warning(f"Image {path} is {width}x{height}; centre-cropping to {side}x{side}")
            img = img.crop((left, top, left + side, top + side))
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.LANCZOS)
        data = np.asarray(img, dtype=np.float64) / 255.0
    if data.ndim == 2:
        data = data[..., None]
    return data


def save_image(image: np.ndarray, path: Union[str, Path]) -> None:
    """Write a [0, 1] image with shape (H, W, C) as an 8-bit PNG."""
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 3 and data.shape[-1] == 1:
        data = data[..., 0]
    Image.fromarray(data).save(str(path))


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """
    Anti-aliased stride subsampling of the leading two axes.

    The image is Gaussian low-passed at the new Nyquist frequency and shifted
    by (factor - 1) / 2 samples so the kept samples sit at the coarse grid's
    pixel centres.

    Raises:
        ValueError: If the factor is not positive or does not divide the extents.
    """
    image = np.asarray(image, dtype=np.float64)
    if factor < 1:
        raise ValueError(f"factor must be positive, got {factor}")
    if image.shape[0] % factor or image.shape[1] % factor:
        raise ValueError(f"factor {factor} does not divide image extents {image.shape[:2]}")
    if factor == 1:
        return image.copy()

    nyquist = image.shape[0] / factor / 2.0
    spatial = (0, 1)
    filtered = gaussian_lowpass(image, nyquist, axes=spatial)
    shift = [-(factor - 1) / 2.0 if a in spatial else 0.0 for a in range(image.ndim)]
    spectrum = np.fft.fftn(filtered, axes=spatial)
    aligned = np.fft.ifftn(ndimage.fourier_shift(spectrum, shift), axes=spatial).real
    return aligned[::factor, ::factor]


def synthetic_tones(
    band: float,
    rng: np.random.Generator,
    components: int = 5,
    channels: int = 1,
) -> List[np.ndarray]:
    """
    Random integer-frequency tones inside the open cube (-band, band)^2.

    The infinity norm of each frequency is log-uniform over [1, ceil(band) - 1],
    so coarse scales receive content as well as fine ones.

    Returns:
        One array per channel with rows (fx, fy, amplitude, phase).

    Raises:
        ValueError: If the band holds no non-zero integer frequency.
    """
    limit = int(np.ceil(band)) - 1
    if limit < 1:
        raise ValueError(f"band {band} leaves no non-zero integer frequency")
    tones = []
    for _ in range(channels):
        radius = np.clip(np.floor(np.exp(rng.uniform(0.0, np.log(limit + 1), size=components))), 1, limit)
        radius = radius.astype(np.int64)
        other = rng.integers(-radius, radius + 1)
        axis = rng.integers(0, 2, size=components)
        freqs = np.where(axis[:, None] == 0, np.stack([radius, other], axis=1), np.stack([other, radius], axis=1))
        amps = rng.uniform(0.5, 1.0, size=components)
        phases = rng.uniform(-np.pi, np.pi, size=components)
        tones.append(np.column_stack([freqs.astype(np.float64), amps, phases]))
    return tones


def render_tones(tones: List[np.ndarray], size: int) -> np.ndarray:
    """Sample tones at the pixel centres of a size x size grid, scaled to [0, 1]."""
    axis = (np.arange(size) + 0.5) / size - 0.5
    x, y = np.meshgrid(axis, axis, indexing='ij')
    out = np.empty((size, size, len(tones)))
    for c, rows in enumerate(tones):
        signal = sum(a * np.sin(2.0 * np.pi * (fx * x + fy * y) + p) for fx, fy, a, p in rows)
        out[..., c] = 0.5 + 0.5 * signal / rows[:, 2].sum()
    return out


def synthetic_band_limited_image(
    size: int,
    band: float,
    rng: np.random.Generator,
    components: int = 5,
    channels: int = 1,
) -> np.ndarray:
    """
    Sum of sinusoids at integer frequencies inside (-band, band)^2, scaled to [0, 1].

    Returns:
        Array of shape (size, size, channels).
    """
    return render_tones(synthetic_tones(band, rng, components, channels), size)


def _prepare_images(cfg: ImageExperimentConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Evaluation target and fit image."""
    if cfg.image is not None:
        image = load_image(cfg.image, cfg.eval_resolution)
        return image, downsample(image, cfg.eval_resolution // cfg.fit_resolution)
    logger.info(f"No image given; using a synthetic image with {cfg.synthetic_components} in-band tones")
    # band-limited tones are sampled exactly on both grids; no anti-alias filter
    tones = synthetic_tones(cfg.model.b_max, rng, cfg.synthetic_components)
    return render_tones(tones, cfg.eval_resolution), render_tones(tones, cfg.fit_resolution)


def _run_arm(
    name: str,
    model_cfg: ModelConfig,
    fit_image: np.ndarray,
    target: np.ndarray,
    cfg: ImageExperimentConfig,
    mode: Optional[str],
    log: TrainingLog,
) -> Dict[str, Any]:
    model = RMFN(model_cfg, np.random.default_rng(cfg.seed))
    grid = (cfg.eval_resolution, cfg.eval_resolution)
    arm: Dict[str, Any] = {'name': name, 'model': model}
    logger.info(f"Training arm '{name}'")

    if mode is None:
        fit_full_scale(model, fit_image, cfg.schedule.total, cfg.lr, log)
        arm['drift'] = {}
    else:
        bands = [model.scale_band(k) for k in range(1, model.layers + 1)]
        targets = make_targets(fit_image, bands, cfg.schedule.lowpass_targets)
        result = staged_fit(model, targets, cfg.schedule, cfg.lr, mode, log)
        arm['drift'] = result.drift()
        arm['snapshot_iterations'] = result.snapshot_iterations

    arm['reconstructions'] = {k: eval_on_grid(model, k, grid) for k in range(1, model.layers + 1)}
    arm['psnr'] = psnr(arm['reconstructions'][model.layers], target)
    fit_pred = eval_on_grid(model, model.layers, fit_image.shape[:2])
    arm['fit_psnr'] = psnr(fit_pred, fit_image)
    return arm


def run_image_experiment(cfg: ImageExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Fit at ``fit_resolution`` and evaluate at ``eval_resolution``.

    Args:
        cfg: Experiment settings.
        out_dir: Directory for reconstructions, spectra, logs and the report;
            nothing is written when omitted.

    Returns:
        Report with PSNR and per-scale spectrum drift of every arm.

    Raises:
        ValueError: If the configuration is invalid or the image cannot be used.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    image, fit_image = _prepare_images(cfg, rng)
    model_cfg = replace(cfg.model, d_out=image.shape[-1])

    arms = [('proposed', model_cfg, cfg.mode)]
    if cfg.baselines:
        arms.append(('fair', replace(model_cfg, residual=False, init='bacon'), 'fair'))
        arms.append(('full_scale', model_cfg, None))

    out = Path(out_dir) if out_dir is not None else None
    results = {}
    for name, arm_cfg, mode in arms:
        log_path = out / f"train_{name}.jsonl" if out is not None else None
        with TrainingLog(log_path) as log:
            results[name] = _run_arm(name, arm_cfg, fit_image, image, cfg, mode, log)

    report = {
        'seed': cfg.seed,
        'fit_resolution': cfg.fit_resolution,
        'eval_resolution': cfg.eval_resolution,
        'band_limits': list(results['proposed']['model'].band_limits),
        'psnr': {name: arm['psnr'] for name, arm in results.items()},
        'fit_psnr': {name: arm['fit_psnr'] for name, arm in results.items()},
        'drift': {name: {str(k): v for k, v in arm['drift'].items()} for name, arm in results.items()},
        'snapshot_iterations': results['proposed'].get('snapshot_iterations', []),
    }
    if out is not None:
        _write_outputs(out, image, fit_image, results, report)
    logger.info(f"Image experiment done: PSNR {report['psnr']}")
    return report


def _write_outputs(out: Path, image: np.ndarray, fit_image: np.ndarray,
                   results: Dict[str, Dict[str, Any]], report: Dict[str, Any]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_image(image, out / 'target.png')
    save_image(fit_image, out / 'target_fit.png')
    for name, arm in results.items():
        for k, recon in arm['reconstructions'].items():
            save_image(recon, out / f"{name}_scale{k}.png")
            spectrum = dft_magnitude(recon, spatial_dims=2)
            save_spectrum_png(spectrum, out / f"{name}_scale{k}_spectrum.png", f"{name} scale {k}")
            save_spectrum_json(spectrum, out / f"{name}_scale{k}_spectrum.json")
        save_checkpoint(arm['model'], out / f"{name}_model.pt")
    (out / 'report.json').write_text(json.dumps(report, indent=2, sort_keys=True))
    logger.info(f"Image experiment outputs written to {out}")
