"""
Rotation algebra for pose estimation.

Rotations are 3x3 matrices acting on column vectors. Pose perturbations live
in the tangent space as an angle theta in [0, pi] and a unit axis u, mapped
back to SO(3) with the Rodrigues formula. The torch functions are
differentiable in (theta, u); the numpy functions are used for sampling and
evaluation.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import torch
from scipy.spatial.transform import Rotation as ScipyRotation
from torch import Tensor

from rmfnet.diffcore import DTYPE


logger = logging.getLogger(__name__)

AXIS_FALLBACK = (0.0, 0.0, 1.0)

AXIS_EPS = 1e-12

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class AxisAngle:
    """Tangent-space rotation: angle ``theta`` (radians) about unit axis ``u``."""

    theta: float
    u: np.ndarray

    def validate(self) -> None:
        """
        Raises:
            ValueError: If theta is outside [0, pi] or u is not unit length.
        """
        if not 0.0 <= self.theta <= math.pi:
            raise ValueError(f"theta must be in [0, pi], got {self.theta}")
        if abs(np.linalg.norm(self.u) - 1.0) > ORTHO_TOL:
            raise ValueError(f"u must be a unit vector, got norm {np.linalg.norm(self.u)}")

    def to_matrix(self) -> np.ndarray:
        theta = torch.as_tensor(self.theta, dtype=DTYPE)
        u = torch.as_tensor(self.u, dtype=DTYPE)
        return rodrigues(theta, u).numpy()


def hat(u: Tensor) -> Tensor:
    """Skew-symmetric cross-product matrix [u]_x of (..., 3) vectors."""
    zero = torch.zeros_like(u[..., 0])
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    return torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)


def rodrigues(theta: Tensor, u: Tensor) -> Tensor:
    """
    Rotation matrix ``I + sin(theta) [u]_x + (1 - cos(theta)) [u]_x^2``.

    Args:
        theta: Angles of shape (...).
        u: Unit axes of shape (..., 3).

    Returns:
        Tensor of shape (..., 3, 3), differentiable in theta and u.
    """
    k = hat(u)
    eye = torch.eye(3, dtype=k.dtype).expand_as(k)
    s = torch.sin(theta)[..., None, None]
    c = torch.cos(theta)[..., None, None]
    return eye + s * k + (1.0 - c) * (k @ k)


def project_constraints(theta: Tensor, u: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Clamp theta to [0, pi] and normalize u.

    Axes shorter than 1e-12 are replaced by (0, 0, 1). Both operations are
    differentiable away from the clamp boundaries.

    Args:
        theta: Raw angles of shape (...).
        u: Raw axes of shape (..., 3).

    Returns:
        Tuple of (theta, u) satisfying the axis-angle constraints.
    """
    theta = torch.clamp(theta, 0.0, math.pi)
    norm = torch.linalg.vector_norm(u, dim=-1, keepdim=True)
    fallback = torch.as_tensor(AXIS_FALLBACK, dtype=u.dtype).expand_as(u)
    short = norm < AXIS_EPS
    u = torch.where(short, fallback, u / torch.where(short, torch.ones_like(norm), norm))
    return theta, u


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> Union[float, np.ndarray]:
    """
    Rotation angle of a^T b in radians, in [0, pi].

    Evaluated with atan2 of the sine and cosine parts, which matches the
    clamped arccos of (trace - 1) / 2 and stays accurate near 0 and pi.

    Args:
        a: Rotation(s) of shape (..., 3, 3).
        b: Rotation(s) broadcastable against ``a``.

    Returns:
        Angle(s); a float for single rotations.
    """
    m = np.swapaxes(np.asarray(a, dtype=np.float64), -1, -2) @ np.asarray(b, dtype=np.float64)
    cos = (np.trace(m, axis1=-2, axis2=-1) - 1.0) / 2.0
    vee = np.stack([
        m[..., 2, 1] - m[..., 1, 2],
        m[..., 0, 2] - m[..., 2, 0],
        m[..., 1, 0] - m[..., 0, 1],
    ], axis=-1)
    sin = np.linalg.norm(vee, axis=-1) / 2.0
    angle = np.arctan2(sin, cos)
    return float(angle) if np.ndim(angle) == 0 else angle


def sample_uniform_rotation(rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    """
    Haar-uniform rotation(s) from normalized Gaussian quaternions.

    Returns:
        Array of shape (3, 3), or (n, 3, 3) when ``n`` is given.
    """
    return ScipyRotation.random(n, random_state=rng).as_matrix()


def random_unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform directions on the sphere, shape (n, 3)."""
    v = rng.standard_normal((n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    # a zero draw has probability zero but would divide by zero
    norms[norms < AXIS_EPS] = 1.0
    return v / norms


def _check_degrees(min_deg: float, max_deg: float) -> None:
    if not 0.0 <= min_deg <= max_deg <= 180.0:
        raise ValueError(f"Need 0 <= min_deg <= max_deg <= 180, got {min_deg}, {max_deg}")


def perturb_poses(gt: np.ndarray, min_deg: float, max_deg: float, rng: np.random.Generator) -> np.ndarray:
    """
    Rotate each pose by a random angle in [min_deg, max_deg] about a random axis.

    Args:
        gt: Ground-truth rotations of shape (n, 3, 3).
        min_deg: Smallest perturbation angle in degrees.
        max_deg: Largest perturbation angle in degrees.
        rng: Random generator.

    Returns:
        Rotations ``rodrigues(theta, u) @ gt`` of shape (n, 3, 3).

    Raises:
        ValueError: If the angle range is invalid.
    """
    _check_degrees(min_deg, max_deg)
    gt = np.asarray(gt, dtype=np.float64)
    n = len(gt)
    theta = np.radians(rng.uniform(min_deg, max_deg, size=n))
    u = random_unit_vectors(rng, n)
    delta = rodrigues(torch.as_tensor(theta, dtype=DTYPE), torch.as_tensor(u, dtype=DTYPE)).numpy()
    return delta @ gt


def perturb_pose(gt: np.ndarray, min_deg: float, max_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Single-pose form of :func:`perturb_poses`."""
    return perturb_poses(np.asarray(gt)[None], min_deg, max_deg, rng)[0]


def is_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    """Check R^T R = I and det R = +1 within ``tol`` for one or many matrices."""
    r = np.asarray(r, dtype=np.float64)
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(r, -1, -2) @ r - eye).max() <= tol
    det = np.abs(np.linalg.det(r) - 1.0).max() <= tol
    return bool(ortho and det)


def matrix_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) with w >= 0."""
    q = ScipyRotation.from_matrix(r).as_quat()
    q = np.concatenate([q[..., 3:], q[..., :3]], axis=-1)
    return np.where(q[..., :1] < 0, -q, q)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from (w, x, y, z) quaternion(s)."""
    q = np.asarray(q, dtype=np.float64)
    return ScipyRotation.from_quat(np.concatenate([q[..., 1:], q[..., :1]], axis=-1)).as_matrix()
