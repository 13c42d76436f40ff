"""
Synthetic single-particle cryo-EM data.

Image formation: rotate the density map, resample it trilinearly on the
original grid, integrate along z, convolve with the point-spread function and
add white Gaussian noise at a target SNR. Volumes index as values[x, y, z]
and images as image[x, y], matching the network's coordinate grid.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import mrcfile
import numpy as np
from joblib import Parallel, delayed
from scipy import ndimage, signal

from rmfnet import __version__
from rmfnet.config import dataclass_kwargs
from rmfnet.so3 import matrix_to_quaternion, quaternion_to_matrix, sample_uniform_rotation


logger = logging.getLogger(__name__)

PSF_KINDS = ('none', 'gaussian')

MRC_FLOAT_MODE = 2

PSF_MODEL_NOTE = 'gaussian stand-in for a known microscope PSF'


@dataclass
class VolumeGrid:
    """Cubic density map with voxel size in Angstrom."""

    values: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        shape = self.values.shape
        if len(shape) != 3 or len(set(shape)) != 1:
            raise ValueError(f"Volume must be cubic, got shape {shape}")
        if shape[0] % 2:
            raise ValueError(f"Volume extent must be even, got {shape[0]}")
        if self.voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def validate_density(self) -> Tuple[bool, Optional[str]]:
        """
        Returns:
            Tuple of (is_valid, error_message) for finiteness and non-negativity.
        """
        if not np.isfinite(self.values).all():
            return False, "Volume holds non-finite values"
        if (self.values < 0).any():
            return False, f"Volume has negative density (min {self.values.min():.4g})"
        return True, None


@dataclass
class PSFParams:
    """Point-spread function; ``sigma`` in Angstrom for the Gaussian kind."""

    kind: str = 'gaussian'
    sigma: float = 1.0

    def validate(self) -> None:
        """
        Raises:
            ValueError: If the kind is unknown or a Gaussian sigma is not positive.
        """
        if self.kind not in PSF_KINDS:
            raise ValueError(f"PSF kind must be one of {PSF_KINDS}, got '{self.kind}'")
        if self.kind == 'gaussian' and self.sigma <= 0:
            raise ValueError(f"Gaussian PSF sigma must be positive, got {self.sigma}")

    def kernel(self, pixel_size: float) -> Optional[np.ndarray]:
        """
        Normalized sampled kernel of radius ceil(3 sigma) pixels, or None for no PSF.
        """
        self.validate()
        if self.kind == 'none':
            return None
        sigma_px = self.sigma / pixel_size
        radius = max(1, int(math.ceil(3.0 * sigma_px)))
        r = np.arange(-radius, radius + 1, dtype=np.float64)
        g = np.exp(-r ** 2 / (2.0 * sigma_px ** 2))
        k = np.outer(g, g)
        return k / k.sum()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PSFParams":
        psf = cls(**dataclass_kwargs(cls, data))
        psf.validate()
        return psf

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ParticleStack:
    """Noisy projections with their acquisition metadata."""

    images: np.ndarray
    psf: PSFParams
    pixel_size: float
    noise_sigma: float
    seed: Optional[int] = None
    snr: Optional[float] = None
    poses: Optional[np.ndarray] = None
    clean: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3 or len(self.images) < 1:
            raise ValueError(f"Stack must have shape (n, N, N) with n >= 1, got {self.images.shape}")
        if self.images.shape[1] != self.images.shape[2]:
            raise ValueError(f"Images must be square, got {self.images.shape[1:]}")
        if self.poses is not None and len(self.poses) != len(self.images):
            raise ValueError(f"{len(self.poses)} poses for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> int:
        return self.images.shape[1]

    def metadata(self) -> Dict[str, Any]:
        return {
            'count': len(self),
            'image_size': self.size,
            'pixel_size': self.pixel_size,
            'noise_sigma': self.noise_sigma,
            'snr': self.snr,
            'seed': self.seed,
            'psf': self.psf.to_dict(),
            'psf_model': PSF_MODEL_NOTE if self.psf.kind == 'gaussian' else 'none',
            'poses': None if self.poses is None else matrix_to_quaternion(self.poses).tolist(),
            'version': __version__,
        }


def rotate_and_project(vol: VolumeGrid, rotation: np.ndarray) -> np.ndarray:
    """
    Projection of V(R^T x) along z.

    The rotated map is resampled trilinearly on the original grid with zero
    fill outside the cube, then summed along z and scaled by the voxel size.

    Args:
        vol: Density map.
        rotation: 3x3 rotation matrix.

    Returns:
        Image of shape (N, N).
    """
    n = vol.size
    rt = np.asarray(rotation, dtype=np.float64).T
    centre = np.full(3, (n - 1) / 2.0)
    rotated = ndimage.affine_transform(
        vol.values, rt, offset=centre - rt @ centre, order=1, mode='constant', cval=0.0,
    )
    return rotated.sum(axis=2) * vol.voxel_size


def apply_psf(images: np.ndarray, psf: PSFParams, pixel_size: float = 1.0) -> np.ndarray:
    """
    Zero-padded same-size convolution with the PSF kernel.

    Args:
        images: One (N, N) image or a (n, N, N) stack.
        psf: Point-spread function.
        pixel_size: Angstrom per pixel.

    Returns:
        Convolved images with the input's shape.

    Raises:
        ValueError: If the kernel is larger than the image.
    """
    images = np.asarray(images, dtype=np.float64)
    kernel = psf.kernel(pixel_size)
    if kernel is None:
        return images.copy()
    if kernel.shape[0] > images.shape[-1] or kernel.shape[1] > images.shape[-2]:
        raise ValueError(f"PSF kernel {kernel.shape} larger than image {images.shape[-2:]}")
    kernel = kernel.reshape((1,) * (images.ndim - 2) + kernel.shape)
    return signal.fftconvolve(images, kernel, mode='same', axes=(-2, -1))


def add_noise_for_snr(images: np.ndarray, snr: float, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """
    Add white Gaussian noise with variance var(clean stack) / snr.

    Each image draws from its own stream seeded by (base, index), so the
    result does not depend on evaluation order.

    Returns:
        Tuple of (noisy images, noise sigma).

    Raises:
        ValueError: If snr is not positive or the clean stack has zero variance.
    """
    if snr <= 0:
        raise ValueError(f"snr must be positive, got {snr}")
    images = np.asarray(images, dtype=np.float64)
    variance = float(np.var(images))
    if variance == 0.0:
        raise ValueError("Clean stack has zero variance; SNR is undefined")
    sigma = math.sqrt(variance / snr)
    base = int(rng.integers(0, 2 ** 63 - 1))
    noisy = np.empty_like(images)
    for i in range(len(images)):
        stream = np.random.default_rng([base, i])
        noisy[i] = images[i] + stream.normal(0.0, sigma, size=images[i].shape)
    return noisy, sigma


def project_all(vol: VolumeGrid, poses: np.ndarray, workers: int = 1) -> np.ndarray:
    """Clean projections for every pose, optionally on a thread pool."""
    if workers > 1:
        images = Parallel(n_jobs=workers, prefer='threads')(
            delayed(rotate_and_project)(vol, r) for r in poses
        )
    else:
        images = [rotate_and_project(vol, r) for r in poses]
    return np.stack(images)


def generate_dataset(
    vol: VolumeGrid,
    n: int,
    psf: PSFParams,
    snr: float,
    seed: int,
    poses: Optional[np.ndarray] = None,
    workers: int = 1,
) -> ParticleStack:
    """
    Simulate a particle stack.

    Args:
        vol: Ground-truth density.
        n: Number of images.
        psf: Point-spread function shared by the stack.
        snr: Signal-to-noise ratio of the whole stack.
        seed: Seed for poses and noise.
        poses: Optional fixed poses of shape (n, 3, 3); Haar-uniform otherwise.
        workers: Threads used for projection.

    Returns:
        Particle stack with ground-truth poses and the clean images.

    Raises:
        ValueError: If n < 1, the density is invalid or poses disagree with n.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    is_valid, error_msg = vol.validate_density()
    if not is_valid:
        raise ValueError(error_msg)
    psf.validate()

    rng = np.random.default_rng(seed)
    if poses is None:
        poses = sample_uniform_rotation(rng, n)
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 3, 3)
    if len(poses) != n:
        raise ValueError(f"Got {len(poses)} poses for {n} images")

    logger.info(f"Projecting {n} images of a {vol.size}^3 volume")
    clean = apply_psf(project_all(vol, poses, workers), psf, vol.voxel_size)
    noisy, sigma = add_noise_for_snr(clean, snr, rng)
    logger.info(f"Noise sigma {sigma:.4g} for SNR {snr}")
    return ParticleStack(noisy, psf, vol.voxel_size, sigma, seed, snr, poses, clean)


def _ball_radius_grid(n: int) -> np.ndarray:
    axis = (np.arange(n) + 0.5) / n - 0.5
    x, y, z = np.meshgrid(axis, axis, axis, indexing='ij')
    return np.sqrt(x ** 2 + y ** 2 + z ** 2)


def make_sphere_phantom(n: int, radius: float = 0.25, edge: float = 0.05, voxel_size: float = 1.0) -> VolumeGrid:
    """Soft-edged ball of unit density centred in the box (radii in unit-domain lengths)."""
    r = _ball_radius_grid(n)
    values = 1.0 / (1.0 + np.exp((r - radius) / edge))
    return VolumeGrid(values, voxel_size)


def make_blob_phantom(
    n: int,
    rng: np.random.Generator,
    blobs: int = 12,
    voxel_size: float = 1.0,
    spread: float = 0.25,
    width: Tuple[float, float] = (0.03, 0.08),
) -> VolumeGrid:
    """
    Sum of random isotropic Gaussian blobs inside the inscribed ball.

    Blob centres are uniform in the ball of radius ``spread``; density is
    zero outside radius 0.5.
    """
    axis = (np.arange(n) + 0.5) / n - 0.5
    x, y, z = np.meshgrid(axis, axis, axis, indexing='ij')
    values = np.zeros((n, n, n))
    for _ in range(blobs):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        centre = direction * spread * rng.uniform() ** (1.0 / 3.0)
        s = rng.uniform(*width)
        weight = rng.uniform(0.5, 1.0)
        d2 = (x - centre[0]) ** 2 + (y - centre[1]) ** 2 + (z - centre[2]) ** 2
        values += weight * np.exp(-d2 / (2.0 * s ** 2))
    values[_ball_radius_grid(n) > 0.5] = 0.0
    return VolumeGrid(values, voxel_size)


def _check_mode(mrc: Any, path: Union[str, Path]) -> None:
    mode = int(mrc.header.mode)
    if mode != MRC_FLOAT_MODE:
        raise ValueError(f"Unsupported MRC mode {mode} in {path}; only mode 2 (float32) is supported")


def write_volume(path: Union[str, Path], vol: VolumeGrid) -> None:
    """Write a volume as a mode-2 MRC map with its voxel size in the header."""
    with mrcfile.new(str(path), overwrite=True) as mrc:
        mrc.set_data(np.ascontiguousarray(vol.values.transpose(2, 1, 0), dtype=np.float32))
        mrc.voxel_size = vol.voxel_size
    logger.info(f"Volume written to {path}")


def read_volume(path: Union[str, Path]) -> VolumeGrid:
    """
    Read a mode-2 MRC map.

    Raises:
        ValueError: If the mode is not 2 or the map is not a cubic volume.
    """
    with mrcfile.open(str(path), mode='r') as mrc:
        _check_mode(mrc, path)
        data = np.asarray(mrc.data, dtype=np.float64)
        voxel_size = float(mrc.voxel_size.x)
    if data.ndim != 3:
        raise ValueError(f"{path} holds a {data.ndim}D array, expected a volume")
    return VolumeGrid(data.transpose(2, 1, 0), voxel_size if voxel_size > 0 else 1.0)


def write_stack(path: Union[str, Path], images: np.ndarray, pixel_size: float) -> None:
    """Write an (n, N, N) image stack as a mode-2 MRC stack."""
    with mrcfile.new(str(path), overwrite=True) as mrc:
        mrc.set_data(np.ascontiguousarray(np.asarray(images).transpose(0, 2, 1), dtype=np.float32))
        mrc.set_image_stack()
        mrc.voxel_size = pixel_size


def read_stack(path: Union[str, Path]) -> Tuple[np.ndarray, float]:
    """
    Read an MRC image stack.

    Returns:
        Tuple of (images of shape (n, N, N), pixel size).

    Raises:
        ValueError: If the mode is not 2.
    """
    with mrcfile.open(str(path), mode='r') as mrc:
        _check_mode(mrc, path)
        data = np.asarray(mrc.data, dtype=np.float64)
        pixel_size = float(mrc.voxel_size.x)
    if data.ndim == 2:
        data = data[None]
    return data.transpose(0, 2, 1), pixel_size if pixel_size > 0 else 1.0


def metadata_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix('.json')


def save_stack(stack: ParticleStack, path: Union[str, Path]) -> None:
    """Write the stack's images as MRC and its metadata as a sidecar JSON."""
    write_stack(path, stack.images, stack.pixel_size)
    metadata_path(path).write_text(json.dumps(stack.metadata(), indent=2, sort_keys=True))
    logger.info(f"Stack of {len(stack)} images written to {path}")


def load_stack(path: Union[str, Path]) -> ParticleStack:
    """
    Read a stack written by :func:`save_stack`; metadata is optional.

    Raises:
        ValueError: If the MRC mode is unsupported or metadata disagrees.
    """
    images, pixel_size = read_stack(path)
    meta_file = metadata_path(path)
    meta: Dict[str, Any] = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    poses = meta.get('poses')
    return ParticleStack(
        images,
        PSFParams.from_dict(meta['psf']) if 'psf' in meta else PSFParams(kind='none'),
        meta.get('pixel_size', pixel_size),
        meta.get('noise_sigma', 0.0),
        meta.get('seed'),
        meta.get('snr'),
        None if poses is None else quaternion_to_matrix(np.asarray(poses)),
    )
