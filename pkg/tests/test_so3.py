import math

import numpy as np
import pytest
import torch
from scipy import stats

from rmfnet.diffcore import DTYPE, ParamSet, grad_check
from rmfnet.so3 import (
    AxisAngle,
    geodesic_distance,
    hat,
    is_rotation,
    matrix_to_quaternion,
    perturb_pose,
    perturb_poses,
    project_constraints,
    quaternion_to_matrix,
    rodrigues,
    sample_uniform_rotation,
)


def t(value):
    return torch.as_tensor(value, dtype=DTYPE)


def quaternion_matrix(theta, u):
    w = math.cos(theta / 2)
    x, y, z = math.sin(theta / 2) * np.asarray(u)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def test_rodrigues_zero_angle_is_identity():
    assert torch.equal(rodrigues(t(0.0), t([0.0, 0.0, 1.0])), torch.eye(3, dtype=DTYPE))


def test_rodrigues_quarter_turn_about_z():
    r = rodrigues(t(math.pi / 2), t([0.0, 0.0, 1.0])).numpy()
    np.testing.assert_allclose(r, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_rodrigues_matches_quaternion_formula(rng):
    for _ in range(50):
        theta = rng.uniform(0, math.pi)
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        np.testing.assert_allclose(rodrigues(t(theta), t(u)).numpy(), quaternion_matrix(theta, u), atol=1e-12)


def test_rodrigues_batches(rng):
    theta = rng.uniform(0, math.pi, 6)
    u = rng.standard_normal((6, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    batch = rodrigues(t(theta), t(u)).numpy()
    assert batch.shape == (6, 3, 3)
    assert is_rotation(batch)


def test_hat_is_cross_product(rng):
    u, v = rng.standard_normal(3), rng.standard_normal(3)
    np.testing.assert_allclose((hat(t(u)) @ t(v)).numpy(), np.cross(u, v), atol=1e-14)


def test_project_constraints():
    theta, u = project_constraints(t([4.0, -0.5]), t([[0.0, 0.0, 2.0], [0.0, 0.0, 0.0]]))
    assert theta.tolist() == [math.pi, 0.0]
    assert u.tolist() == [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]
    _, u = project_constraints(t(1.0), t([3.0, 4.0, 0.0]))
    np.testing.assert_allclose(u.numpy(), [0.6, 0.8, 0.0])


def test_geodesic_distance_known_angles(rz90):
    eye = np.eye(3)
    assert geodesic_distance(eye, eye) == 0.0
    assert geodesic_distance(eye, rz90) == pytest.approx(math.pi / 2)
    near_pi = rodrigues(t(math.pi - 1e-9), t([1.0, 0.0, 0.0])).numpy()
    assert geodesic_distance(eye, near_pi) == pytest.approx(math.pi - 1e-9, abs=1e-7)


def test_geodesic_distance_recovers_rodrigues_angle(rng):
    theta = np.concatenate([[0.0, math.pi], rng.uniform(0, math.pi, 200)])
    u = rng.standard_normal((len(theta), 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    rotations = rodrigues(t(theta), t(u)).numpy()
    np.testing.assert_allclose(geodesic_distance(rotations, np.eye(3)), theta, atol=1e-10)


def test_geodesic_distance_is_symmetric_and_batched(rng):
    a = sample_uniform_rotation(rng, 10)
    b = sample_uniform_rotation(rng, 10)
    ab = geodesic_distance(a, b)
    assert ab.shape == (10,)
    np.testing.assert_allclose(ab, geodesic_distance(b, a), atol=1e-12)
    assert np.all((ab >= 0) & (ab <= math.pi))


def test_geodesic_triangle_inequality(rng):
    a, b, c = (sample_uniform_rotation(rng, 1000) for _ in range(3))
    assert np.all(geodesic_distance(a, c) <= geodesic_distance(a, b) + geodesic_distance(b, c) + 1e-9)


def test_uniform_sampler_shape_and_determinism():
    one = sample_uniform_rotation(np.random.default_rng(0))
    many = sample_uniform_rotation(np.random.default_rng(0), 4)
    assert one.shape == (3, 3)
    assert many.shape == (4, 3, 3)
    assert is_rotation(many)
    np.testing.assert_array_equal(many, sample_uniform_rotation(np.random.default_rng(0), 4))


def test_uniform_sampler_angle_distribution_is_haar():
    samples = sample_uniform_rotation(np.random.default_rng(42), 100_000)
    angles = geodesic_distance(np.eye(3), samples)
    edges = np.linspace(0, math.pi, 21)
    observed, _ = np.histogram(angles, bins=edges)
    cdf = (edges - np.sin(edges)) / math.pi
    expected = np.diff(cdf) * len(angles)
    assert stats.chisquare(observed, expected).pvalue > 0.01
    assert np.abs(samples.mean(axis=0)).max() < 0.01


def test_perturb_fixed_angles(rng):
    gt = sample_uniform_rotation(rng, 20)
    np.testing.assert_allclose(perturb_poses(gt, 0.0, 0.0, rng), gt, atol=1e-15)
    np.testing.assert_allclose(geodesic_distance(gt, perturb_poses(gt, 90.0, 90.0, rng)), math.pi / 2, atol=1e-12)


def test_perturb_range(rng):
    gt = sample_uniform_rotation(rng, 10_000)
    degrees = np.degrees(geodesic_distance(gt, perturb_poses(gt, 45.0, 90.0, rng)))
    assert degrees.min() >= 45.0 - 1e-9
    assert degrees.max() <= 90.0 + 1e-9
    assert stats.kstest(degrees, 'uniform', args=(45.0, 45.0)).pvalue > 0.01
    assert perturb_pose(gt[0], 10.0, 10.0, rng).shape == (3, 3)


@pytest.mark.parametrize('low, high', [(-1.0, 10.0), (20.0, 10.0), (0.0, 181.0)])
def test_perturb_rejects_bad_ranges(rng, low, high):
    with pytest.raises(ValueError):
        perturb_poses(np.eye(3)[None], low, high, rng)


def test_quaternion_round_trip(rng):
    rotations = sample_uniform_rotation(rng, 25)
    q = matrix_to_quaternion(rotations)
    assert np.all(q[:, 0] >= 0)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0)
    np.testing.assert_allclose(quaternion_to_matrix(q), rotations, atol=1e-12)


def test_axis_angle_validation():
    AxisAngle(1.0, np.array([0.0, 1.0, 0.0])).validate()
    with pytest.raises(ValueError):
        AxisAngle(4.0, np.array([0.0, 1.0, 0.0])).validate()
    with pytest.raises(ValueError):
        AxisAngle(1.0, np.array([0.0, 2.0, 0.0])).validate()
    np.testing.assert_allclose(AxisAngle(math.pi / 2, np.array([0.0, 0.0, 1.0])).to_matrix(),
                               [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_rodrigues_gradients_match_finite_differences(rng):
    params = ParamSet({'theta': 0.7, 'u': [0.3, -0.5, 0.81]})
    v = t(rng.standard_normal((3, 4)))
    report = grad_check(lambda leaves, x: (rodrigues(leaves['theta'], leaves['u']) @ x).pow(2).sum(),
                        params, v, rel_tol=1e-5)
    assert report.passed, report.per_leaf
