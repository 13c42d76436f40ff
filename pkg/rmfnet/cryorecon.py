"""
Ab initio 3D reconstruction with frequency marching.

A 3D network stands in for the density map inside the image formation
model. Structure and per-image poses are optimized in alternation on
mini-batches, one output scale per stage, with targets low-passed at the
stage's band limit. Evaluation tools (FSC, pose error statistics, volume
baking) live here too.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import ndimage
from scipy.integrate import trapezoid
from torch import Tensor, nn

from rmfnet.config import dataclass_kwargs
from rmfnet.cryosim import ParticleStack, PSFParams, VolumeGrid
from rmfnet.diffcore import DTYPE, conv2d
from rmfnet.errors import NonFiniteError
from rmfnet.model import RMFN, ModelConfig, eval_on_grid
from rmfnet.so3 import (
    geodesic_distance,
    perturb_poses,
    project_constraints,
    random_unit_vectors,
    rodrigues,
    sample_uniform_rotation,
)
from rmfnet.trainer import AdamState, TrainingLog, adam_step, gaussian_lowpass


logger = logging.getLogger(__name__)

EPOCH_PRESETS = {
    '15-15-70': (15, 15, 70),
    '25-25-50': (25, 25, 50),
}

DELTA_THETA_INIT = 1e-3

POSE_BIN_WIDTH_DEG = 4.0

POSE_TOLERANCE_DEG = 5.0


def _default_recon_model() -> ModelConfig:
    return ModelConfig(d_in=3, d_h=64, d_out=1, layers=3, b_max=12.0, quantize=False)


@dataclass
class ReconConfig:
    """Hyperparameters of a frequency-marching reconstruction."""

    model: ModelConfig = field(default_factory=_default_recon_model)
    epochs: Tuple[int, ...] = EPOCH_PRESETS['15-15-70']
    batch_size: int = 10
    lr_net: float = 1e-3
    lr_pose: float = 1e-2
    struct_iters: int = 5
    pose_iters: int = 20
    depth_samples: Optional[int] = None
    mask_radius: Optional[float] = 0.5
    single_scale: bool = False
    known_poses: bool = False
    init_perturb_deg: Tuple[float, float] = (45.0, 90.0)
    seed: int = 0

    def validate(self) -> None:
        """
        Raises:
            ValueError: If any field is out of range.
        """
        self.model.validate()
        if self.model.d_in != 3:
            raise ValueError(f"Reconstruction needs a 3D model, got d_in={self.model.d_in}")
        if len(self.epochs) != self.model.layers:
            raise ValueError(f"{len(self.epochs)} epoch budgets for {self.model.layers} stages")
        if any(e < 1 for e in self.epochs):
            raise ValueError(f"Epoch budgets must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr_net <= 0 or self.lr_pose <= 0:
            raise ValueError(f"Learning rates must be positive, got {self.lr_net}, {self.lr_pose}")
        if self.struct_iters < 0 or self.pose_iters < 0 or self.struct_iters + self.pose_iters == 0:
            raise ValueError(f"Need non-negative iteration counts with a positive total, "
                             f"got {self.struct_iters}, {self.pose_iters}")
        if self.depth_samples is not None and self.depth_samples < 1:
            raise ValueError(f"depth_samples must be positive, got {self.depth_samples}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ReconConfig":
        data = dict(data)
        preset = data.pop('preset', None)
        if preset is not None:
            if preset not in EPOCH_PRESETS:
                raise ValueError(f"Unknown epoch preset '{preset}'; expected one of {sorted(EPOCH_PRESETS)}")
            data['epochs'] = EPOCH_PRESETS[preset]
        kwargs = dataclass_kwargs(cls, data)
        if 'model' in kwargs:
            model = dict(kwargs['model'])
            model.setdefault('d_in', 3)
            model.setdefault('quantize', False)
            kwargs['model'] = ModelConfig.from_dict(model)
        for key in ('epochs', 'init_perturb_deg'):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        config = cls(**kwargs)
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class PoseEstimate:
    """Base rotation and raw tangent-space delta of one image."""

    base: np.ndarray
    theta: float
    u: np.ndarray

    def effective(self) -> np.ndarray:
        theta, u = project_constraints(torch.as_tensor(self.theta, dtype=DTYPE),
                                       torch.as_tensor(self.u, dtype=DTYPE))
        return (rodrigues(theta, u) @ torch.as_tensor(self.base, dtype=DTYPE)).numpy()


class PoseBook:
    """Pose estimates for a whole stack, stored as arrays."""

    def __init__(self, base: np.ndarray, rng: np.random.Generator, theta_init: float = DELTA_THETA_INIT) -> None:
        self.base = np.array(base, dtype=np.float64).reshape(-1, 3, 3)
        self.theta = np.full(len(self.base), theta_init)
        self.u = random_unit_vectors(rng, len(self.base))

    def __len__(self) -> int:
        return len(self.base)

    def __getitem__(self, index: int) -> PoseEstimate:
        return PoseEstimate(self.base[index], float(self.theta[index]), self.u[index])

    def effective(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Effective rotations rodrigues(delta) @ base."""
        idx = np.arange(len(self)) if indices is None else np.asarray(indices)
        with torch.no_grad():
            return compose_pose(
                torch.as_tensor(self.theta[idx], dtype=DTYPE),
                torch.as_tensor(self.u[idx], dtype=DTYPE),
                torch.as_tensor(self.base[idx], dtype=DTYPE),
            ).numpy()

    def fold(self, indices: Sequence[int], theta: np.ndarray, u: np.ndarray, rng: np.random.Generator) -> None:
        """Fold deltas into the base rotations and reset them."""
        idx = np.asarray(indices)
        self.theta[idx] = theta
        self.u[idx] = u
        self.base[idx] = self.effective(idx)
        self.theta[idx] = DELTA_THETA_INIT
        self.u[idx] = random_unit_vectors(rng, len(idx))


def compose_pose(theta: Tensor, u: Tensor, base: Tensor) -> Tensor:
    """rodrigues(project_constraints(theta, u)) @ base, differentiable in theta and u."""
    theta, u = project_constraints(theta, u)
    return rodrigues(theta, u) @ base


class RayGrid:
    """
    Sample points of all rays through an N x N detector.

    Points inside the ball of radius ``mask_radius`` are kept (all points when
    it is None); since rotations preserve norms the selection is pose
    independent.
    """

    def __init__(self, size: int, depth_samples: Optional[int] = None, mask_radius: Optional[float] = 0.5) -> None:
        self.size = size
        self.depth = depth_samples or size
        xy = (np.arange(size) + 0.5) / size - 0.5
        z = (np.arange(self.depth) + 0.5) / self.depth - 0.5
        gx, gy, gz = np.meshgrid(xy, xy, z, indexing='ij')
        points = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)
        pixel = np.repeat(np.arange(size * size), self.depth)
        if mask_radius is not None:
            keep = np.linalg.norm(points, axis=1) <= mask_radius
            points, pixel = points[keep], pixel[keep]
        self.points = torch.as_tensor(points, dtype=DTYPE)
        self.pixel = torch.as_tensor(pixel, dtype=torch.long)


def render_batch(
    model: RMFN,
    poses: Tensor,
    scale: int,
    rays: RayGrid,
    voxel_size: float = 1.0,
    psf_kernel: Optional[Tensor] = None,
    points: Optional[Tensor] = None,
) -> Tensor:
    """
    Projections of y^(scale) under each pose.

    Each ray point p is mapped to R^T p, the network is evaluated there and
    the values are summed along z with step voxel_size * N / depth, then
    convolved with the PSF.

    Args:
        model: 3D network.
        poses: Rotations of shape (B, 3, 3).
        scale: Output scale.
        rays: Ray sample points.
        voxel_size: Angstrom per voxel.
        psf_kernel: Optional odd-sized 2D kernel.
        points: Ray points replacing ``rays.points`` (same layout).

    Returns:
        Images of shape (B, N, N).
    """
    batch = poses.shape[0]
    n = rays.size
    # row vectors: (R^T p)^T = p^T R
    points = rays.points if points is None else points
    coords = points.unsqueeze(0) @ poses
    values = model.forward_outputs(coords.reshape(-1, 3), scale)[-1].reshape(batch, -1)
    dz = voxel_size * n / rays.depth
    images = torch.zeros(batch, n * n, dtype=values.dtype).index_add(1, rays.pixel, values) * dz
    images = images.reshape(batch, n, n)
    if psf_kernel is not None:
        images = conv2d(images, psf_kernel, mode='zero')
    return images


def psf_tensor(psf: PSFParams, pixel_size: float) -> Optional[Tensor]:
    kernel = psf.kernel(pixel_size)
    return None if kernel is None else torch.as_tensor(kernel, dtype=DTYPE)


def render_model_projection(
    model: RMFN,
    pose: np.ndarray,
    psf: PSFParams,
    size: int,
    scale: int,
    voxel_size: float = 1.0,
    depth_samples: Optional[int] = None,
    mask_radius: Optional[float] = 0.5,
) -> Tensor:
    """
    Render one projection of the network's scale-``scale`` output.

    Args:
        model: 3D network.
        pose: 3x3 rotation (array or tensor; tensors keep their graph).
        psf: Point-spread function applied after integration.
        size: Detector extent N.
        scale: Output scale in [1, L].
        voxel_size: Angstrom per voxel.
        depth_samples: Samples per ray; defaults to N.
        mask_radius: Radius of the sampled ball; None samples the whole cube.

    Returns:
        Tensor of shape (N, N).

    Raises:
        ValueError: If the model is not 3D or the scale is out of range.
    """
    if model.config.d_in != 3:
        raise ValueError(f"Rendering needs a 3D model, got d_in={model.config.d_in}")
    model._check_scale(scale)
    rays = RayGrid(size, depth_samples, mask_radius)
    pose_t = pose if isinstance(pose, Tensor) else torch.as_tensor(pose, dtype=DTYPE)
    return render_batch(model, pose_t.reshape(1, 3, 3), scale, rays, voxel_size,
                        psf_tensor(psf, voxel_size))[0]


def batch_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over images of the per-image sum of squared residuals."""
    return ((pred - target) ** 2).sum(dim=(-2, -1)).mean()


@dataclass
class RenderContext:
    """Fixed rendering inputs shared by every batch of a run."""

    rays: RayGrid
    voxel_size: float
    psf_kernel: Optional[Tensor]


class ProjectionRenderer(nn.Module):
    """
    Network plus trainable pose deltas of a batch, rendered as projections.

    ``theta`` and ``u`` are parameters so the module works with optimizers
    and with :func:`rmfnet.diffcore.module_program`; the base rotations are a
    buffer.
    """

    def __init__(
        self,
        model: RMFN,
        base: np.ndarray,
        theta: np.ndarray,
        u: np.ndarray,
        scale: int,
        context: RenderContext,
    ) -> None:
        super().__init__()
        self.field = model
        self.theta = nn.Parameter(torch.as_tensor(np.asarray(theta), dtype=DTYPE).clone())
        self.u = nn.Parameter(torch.as_tensor(np.asarray(u), dtype=DTYPE).clone())
        self.register_buffer('base', torch.as_tensor(np.asarray(base), dtype=DTYPE).clone())
        self.scale = scale
        self.context = context

    def rotations(self) -> Tensor:
        return compose_pose(self.theta, self.u, self.base)

    def forward(self, points: Optional[Tensor] = None) -> Tensor:
        ctx = self.context
        return render_batch(self.field, self.rotations(), self.scale, ctx.rays,
                            ctx.voxel_size, ctx.psf_kernel, points)

    def project_(self) -> None:
        """Re-establish the axis-angle constraints in place."""
        with torch.no_grad():
            theta, u = project_constraints(self.theta, self.u)
            self.theta.copy_(theta)
            self.u.copy_(u)


def _check_loss(loss: Tensor, phase: str) -> None:
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError(f"Non-finite loss during {phase} optimization")


def alternate_batch_step(
    model: RMFN,
    poses: PoseBook,
    indices: Sequence[int],
    targets: Tensor,
    scale: int,
    cfg: ReconConfig,
    net_state: AdamState,
    context: RenderContext,
    rng: np.random.Generator,
) -> Dict[str, float]:
    """
    One structure block then one pose block on a mini-batch.

    The structure block takes ``struct_iters`` Adam steps on the network with
    poses fixed. The pose block takes ``pose_iters`` steps on the batch's
    deltas with a fresh Adam state and the network frozen, re-projecting the
    constraints after every step, then folds the deltas into the bases.

    Args:
        model: Network trained in place.
        poses: Pose book updated in place.
        indices: Stack indices of the batch.
        targets: Low-passed images of the batch, shape (B, N, N).
        scale: Output scale supervised in this stage.
        cfg: Reconstruction settings.
        net_state: Network optimizer state persisting across batches.
        context: Ray grid, voxel size and PSF kernel.
        rng: Generator for delta resets.

    Returns:
        Dictionary with the last structure and pose losses.

    Raises:
        NonFiniteError: If a loss becomes non-finite.
    """
    result: Dict[str, float] = {}
    idx = np.asarray(indices)

    if cfg.struct_iters > 0:
        fixed = torch.as_tensor(poses.effective(idx), dtype=DTYPE)
        for _ in range(cfg.struct_iters):
            net_state.zero_grad()
            loss = batch_loss(render_batch(model, fixed, scale, context.rays,
                                           context.voxel_size, context.psf_kernel), targets)
            _check_loss(loss, 'structure')
            loss.backward()
            adam_step(net_state)
        result['struct_loss'] = float(loss.item())

    if cfg.pose_iters > 0 and not cfg.known_poses:
        params = list(model.parameters())
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad_(False)
        try:
            renderer = ProjectionRenderer(model, poses.base[idx], poses.theta[idx], poses.u[idx], scale, context)
            pose_state = AdamState({'theta': renderer.theta, 'u': renderer.u}, lr=cfg.lr_pose)
            for _ in range(cfg.pose_iters):
                pose_state.zero_grad()
                loss = batch_loss(renderer(), targets)
                _check_loss(loss, 'pose')
                loss.backward()
                adam_step(pose_state)
                renderer.project_()
            result['pose_loss'] = float(loss.item())
            poses.fold(idx, renderer.theta.detach().numpy(), renderer.u.detach().numpy(), rng)
        finally:
            for p, flag in zip(params, flags):
                p.requires_grad_(flag)

    return result


@dataclass
class ReconResult:
    """Trained network, final poses and per-epoch history."""

    model: RMFN
    poses: PoseBook
    history: List[Dict[str, Any]]


def initial_poses(stack: ParticleStack, cfg: ReconConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Starting poses: ground truth for the known-pose ablation, otherwise
    ground truth perturbed by ``init_perturb_deg``, or Haar-uniform when the
    stack has no poses.
    """
    if stack.poses is None:
        if cfg.known_poses:
            raise ValueError("known_poses requires a stack with ground-truth poses")
        return sample_uniform_rotation(rng, len(stack))
    if cfg.known_poses:
        return np.array(stack.poses)
    return perturb_poses(stack.poses, cfg.init_perturb_deg[0], cfg.init_perturb_deg[1], rng)


def stage_plan(cfg: ReconConfig) -> List[Tuple[int, int]]:
    """(scale, epochs) per stage; single-scale runs spend the whole budget on scale L."""
    if cfg.single_scale:
        return [(cfg.model.layers, int(sum(cfg.epochs)))]
    return [(k, int(e)) for k, e in enumerate(cfg.epochs, start=1)]


def frequency_marching_reconstruct(
    stack: ParticleStack,
    cfg: ReconConfig,
    init_poses: Optional[np.ndarray] = None,
    log: Optional[TrainingLog] = None,
) -> ReconResult:
    """
    Reconstruct a network density and poses from a particle stack.

    Stage k supervises scale k on images low-passed at the scale's band limit
    (raw images at the final scale) and visits every image once per epoch in
    shuffled mini-batches.

    Args:
        stack: Particle stack; ground-truth poses, when present, are only
            used for initialization and error statistics.
        cfg: Reconstruction settings.
        init_poses: Starting poses; derived from the stack when omitted.
        log: Optional training log receiving one record per epoch.

    Returns:
        Reconstruction result.

    Raises:
        ValueError: If the configuration or poses are invalid.
        NonFiniteError: If a loss becomes non-finite.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    model = RMFN(cfg.model, rng)
    if init_poses is None:
        init_poses = initial_poses(stack, cfg, rng)
    poses = PoseBook(init_poses, rng, 0.0 if cfg.known_poses else DELTA_THETA_INIT)
    if len(poses) != len(stack):
        raise ValueError(f"{len(poses)} initial poses for {len(stack)} images")

    context = RenderContext(
        RayGrid(stack.size, cfg.depth_samples, cfg.mask_radius),
        stack.pixel_size,
        psf_tensor(stack.psf, stack.pixel_size),
    )
    net_state = AdamState(model.named_parameters(), lr=cfg.lr_net)
    log = log if log is not None else TrainingLog()
    history: List[Dict[str, Any]] = []
    plan = stage_plan(cfg)

    for stage_index, (scale, epochs) in enumerate(plan, start=1):
        final = stage_index == len(plan)
        images = stack.images if final else gaussian_lowpass(stack.images, model.scale_band(scale), axes=(1, 2))
        targets = torch.as_tensor(images, dtype=DTYPE)
        logger.info(f"Stage {stage_index}/{len(plan)}: scale {scale}, band {model.scale_band(scale):.4g}, "
                    f"{epochs} epochs")
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(stack))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                step = alternate_batch_step(model, poses, batch, targets[torch.as_tensor(batch)], scale,
                                            cfg, net_state, context, rng)
                losses.append(step.get('struct_loss', step.get('pose_loss', math.nan)))
            record: Dict[str, Any] = {'stage': stage_index, 'scale': scale, 'epoch': epoch,
                                      'loss': float(np.mean(losses))}
            if stack.poses is not None:
                stats = pose_error_stats(poses.effective(), stack.poses)
                record['median_pose_error_deg'] = stats['median_deg']
                record['fraction_within_5deg'] = stats['fraction_within_5deg']
            history.append(record)
            log.write(**record)
            logger.info(f"stage {stage_index} epoch {epoch}: loss {record['loss']:.6e}")

    return ReconResult(model, poses, history)


@dataclass(frozen=True)
class FSCCurve:
    """Fourier shell correlation per integer radius shell."""

    radii: np.ndarray
    correlations: np.ndarray
    counts: np.ndarray
    size: int
    voxel_size: float

    def frequencies(self) -> np.ndarray:
        """Shell radii in 1/Angstrom."""
        return self.radii / (self.size * self.voxel_size)

    def resolution_at(self, threshold: float = 0.5) -> float:
        """
        Resolution in Angstrom at the first shell where the curve drops below
        ``threshold``, interpolated linearly between shells.

        Returns Nyquist resolution when the curve never drops below the
        threshold and ``inf`` when shell 0 is already below it.
        """
        c = self.correlations
        below = np.nonzero(c < threshold)[0]
        if len(below) == 0:
            r_star = float(self.radii[-1])
        elif below[0] == 0:
            return math.inf
        else:
            i = below[0]
            frac = (c[i - 1] - threshold) / (c[i - 1] - c[i])
            r_star = float(self.radii[i - 1] + frac * (self.radii[i] - self.radii[i - 1]))
        return self.voxel_size * self.size / r_star

    def auc(self) -> float:
        """Area under the curve over radii normalized to [0, 1]."""
        return float(trapezoid(self.correlations, self.radii / self.radii[-1]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'radii': self.radii.tolist(),
            'frequencies': self.frequencies().tolist(),
            'correlations': self.correlations.tolist(),
            'counts': self.counts.tolist(),
            'size': self.size,
            'voxel_size': self.voxel_size,
            'resolution_0.5': self.resolution_at(0.5),
            'auc': self.auc(),
        }


def fsc_curve(
    a: Union[VolumeGrid, np.ndarray],
    b: Union[VolumeGrid, np.ndarray],
    voxel_size: Optional[float] = None,
) -> FSCCurve:
    """
    Fourier shell correlation up to the Nyquist shell.

    Args:
        a: First volume.
        b: Second volume.
        voxel_size: Overrides the voxel size of VolumeGrid inputs (1.0 for arrays).

    Returns:
        FSC curve.

    Raises:
        ValueError: If sizes or voxel sizes differ.
    """
    if isinstance(a, VolumeGrid) and isinstance(b, VolumeGrid) and voxel_size is None:
        if not math.isclose(a.voxel_size, b.voxel_size):
            raise ValueError(f"Voxel sizes differ: {a.voxel_size} vs {b.voxel_size}")
    if voxel_size is None:
        voxel_size = a.voxel_size if isinstance(a, VolumeGrid) else 1.0
    va = a.values if isinstance(a, VolumeGrid) else np.asarray(a, dtype=np.float64)
    vb = b.values if isinstance(b, VolumeGrid) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape or va.ndim != 3:
        raise ValueError(f"Volume shapes differ or are not 3D: {va.shape} vs {vb.shape}")

    n = va.shape[0]
    k = np.fft.fftfreq(n) * n
    kx, ky, kz = np.meshgrid(k, k, k, indexing='ij')
    labels = np.rint(np.sqrt(kx ** 2 + ky ** 2 + kz ** 2)).astype(np.int64)
    index = np.arange(0, n // 2 + 1)

    fa = np.fft.fftn(va)
    fb = np.fft.fftn(vb)
    numerator = np.asarray(ndimage.sum(np.real(fa * np.conj(fb)), labels=labels, index=index))
    power_a = np.asarray(ndimage.sum(np.abs(fa) ** 2, labels=labels, index=index))
    power_b = np.asarray(ndimage.sum(np.abs(fb) ** 2, labels=labels, index=index))
    counts = np.asarray(ndimage.sum(np.ones_like(va), labels=labels, index=index)).astype(np.int64)
    denominator = np.sqrt(power_a * power_b)
    correlations = np.divide(numerator, denominator, out=np.zeros_like(numerator), where=denominator > 0)
    return FSCCurve(index.astype(np.float64), correlations, counts, n, float(voxel_size))


def pose_error_stats(estimated: np.ndarray, ground_truth: np.ndarray) -> Dict[str, Any]:
    """
    Geodesic pose errors in degrees with a 4-degree histogram over [0, 180].

    Raises:
        ValueError: If the pose counts differ.
    """
    estimated = np.asarray(estimated).reshape(-1, 3, 3)
    ground_truth = np.asarray(ground_truth).reshape(-1, 3, 3)
    if len(estimated) != len(ground_truth):
        raise ValueError(f"{len(estimated)} estimates for {len(ground_truth)} ground-truth poses")
    errors = np.degrees(np.atleast_1d(geodesic_distance(estimated, ground_truth)))
    edges = np.arange(0.0, 180.0 + POSE_BIN_WIDTH_DEG, POSE_BIN_WIDTH_DEG)
    counts, _ = np.histogram(errors, bins=edges)
    return {
        'errors_deg': errors.tolist(),
        'bin_edges_deg': edges.tolist(),
        'histogram': counts.tolist(),
        'median_deg': float(np.median(errors)),
        'fraction_within_5deg': float(np.mean(errors <= POSE_TOLERANCE_DEG)),
    }


def bake_volume(model: RMFN, scale: int, size: int, voxel_size: float = 1.0, clamp: bool = True) -> VolumeGrid:
    """
    Sample the scale-``scale`` output on an N^3 voxel grid.

    Args:
        model: 3D network.
        scale: Output scale.
        size: Grid extent N (even).
        voxel_size: Angstrom per voxel.
        clamp: Clamp negative densities to zero.

    Raises:
        ValueError: If the model is not 3D.
    """
    if model.config.d_in != 3:
        raise ValueError(f"Baking needs a 3D model, got d_in={model.config.d_in}")
    values = eval_on_grid(model, scale, (size, size, size))[..., 0]
    if clamp:
        values = np.maximum(values, 0.0)
    return VolumeGrid(values, voxel_size)


def save_fsc(curve: FSCCurve, path: Union[str, Path]) -> None:
    """Write the curve as JSON and as CSV next to it."""
    path = Path(path)
    path.write_text(json.dumps(curve.to_dict(), indent=2))
    with path.with_suffix('.csv').open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['shell', 'frequency_inv_angstrom', 'fsc', 'count'])
        for r, f, c, n in zip(curve.radii, curve.frequencies(), curve.correlations, curve.counts):
            writer.writerow([int(r), repr(float(f)), repr(float(c)), int(n)])


def save_fsc_plot(curves: Dict[str, FSCCurve], path: Union[str, Path]) -> None:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        ax.plot(curve.frequencies(), curve.correlations, label=label)
    ax.axhline(0.5, color='gray', linestyle='--', linewidth=0.8)
    ax.set_xlabel('spatial frequency (1/A)')
    ax.set_ylabel('FSC')
    ax.set_ylim(-0.1, 1.05)
    ax.legend()
    fig.savefig(str(path), dpi=100, bbox_inches='tight', metadata={'Software': None})
    plt.close(fig)


def save_pose_histogram_plot(stats: Dict[str, Any], path: Union[str, Path]) -> None:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    edges = np.asarray(stats['bin_edges_deg'])
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(edges[:-1], stats['histogram'], width=np.diff(edges), align='edge')
    ax.set_xlabel('geodesic error (deg)')
    ax.set_ylabel('images')
    fig.savefig(str(path), dpi=100, bbox_inches='tight', metadata={'Software': None})
    plt.close(fig)
