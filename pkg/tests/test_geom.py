import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from objslam.geom import (DegenerateInputError, DomainError, Pose, compose, fit_rigid, inverse,
                          se3_exp, se3_log, transform_point)


def hat(xi):
    rho, phi = xi[:3], xi[3:]
    m = np.zeros((4, 4))
    m[:3, :3] = [[0, -phi[2], phi[1]], [phi[2], 0, -phi[0]], [-phi[1], phi[0], 0]]
    m[:3, 3] = rho
    return m


def rodrigues(axis, angle):
    k = np.asarray(axis, float) / np.linalg.norm(axis)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * kx @ kx


vec3 = st.lists(st.floats(-2, 2), min_size=3, max_size=3).map(np.array)


@st.composite
def twists(draw, max_angle=3.0, min_angle=1e-6):
    rho = draw(vec3)
    axis = draw(vec3)
    n = np.linalg.norm(axis)
    if n < 1e-3:
        axis, n = np.array([0.0, 0.0, 1.0]), 1.0
    angle = draw(st.floats(min_angle, max_angle))
    return np.concatenate([rho, axis / n * angle])


@st.composite
def poses(draw):
    return se3_exp(draw(twists()))


def close(a: Pose, b: Pose, tol=1e-9):
    qa, qb = a.q, b.q
    if np.dot(qa, qb) < 0:
        qb = -qb
    return np.allclose(qa, qb, atol=tol) and np.allclose(a.t, b.t, atol=tol)


def test_zero_twist_is_identity():
    assert close(se3_exp(np.zeros(6)), Pose.identity())


def test_pure_translation():
    p = se3_exp([1, 0, 0, 0, 0, 0])
    assert np.allclose(p.t, [1, 0, 0]) and np.allclose(p.q, [1, 0, 0, 0])


def test_quarter_turn_about_z():
    p = se3_exp([0, 0, 0, 0, 0, math.pi / 2])
    assert np.allclose(transform_point(p, [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_identity_log_is_zero():
    assert np.allclose(se3_log(Pose.identity()), 0)


@settings(max_examples=200, deadline=None)
@given(twists())
def test_exp_matches_matrix_exponential(xi):
    assert np.allclose(se3_exp(xi).matrix, scipy.linalg.expm(hat(xi)), atol=1e-10)


@settings(max_examples=300, deadline=None)
@given(twists())
def test_log_exp_round_trip(xi):
    assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(twists(max_angle=1e-7, min_angle=0.0))
def test_round_trip_small_angles(xi):
    assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-12)


def test_near_pi_round_trip_against_axis_angle():
    angle = math.pi - 1e-5
    axis = np.array([1.0, -2.0, 0.5])
    r = rodrigues(axis, angle)
    p = Pose.from_rotation_matrix(r, [0.3, -0.1, 0.2])
    xi = se3_log(p)
    assert abs(np.linalg.norm(xi[3:]) - angle) < 1e-6
    assert np.allclose(se3_exp(xi).matrix, p.matrix, atol=1e-6)


def test_log_at_pi_is_a_domain_error():
    p = Pose.from_rotation_matrix(rodrigues([0, 0, 1], math.pi))
    with pytest.raises(DomainError):
        se3_log(p)


@settings(max_examples=100, deadline=None)
@given(poses(), poses(), poses())
def test_associativity(a, b, c):
    assert close(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-9)


@settings(max_examples=100, deadline=None)
@given(poses())
def test_inverse_axioms(a):
    assert close(compose(a, inverse(a)), Pose.identity())
    assert close(inverse(inverse(a)), a)
    assert close(compose(Pose.identity(), a), a)
    assert abs(np.linalg.norm(a.q) - 1) < 1e-9


def test_transform_point_by_hand():
    # 90 deg about x then translate: (x, y, z) -> (x, -z, y) + t
    p = Pose.from_rotation_matrix([[1, 0, 0], [0, 0, -1], [0, 1, 0]], [1, 2, 3])
    assert np.allclose(transform_point(p, [1, 2, 3]), [2, -1, 5])
    pts = np.array([[0, 0, 1], [0, 1, 0]])
    assert np.allclose(transform_point(p, pts), [[1, 1, 3], [1, 2, 4]])


def test_pose_list_round_trip():
    p = se3_exp([0.1, 0.2, 0.3, 0.4, -0.2, 0.1])
    assert close(Pose.from_list(p.to_list()), p, 0)
    with pytest.raises(ValueError):
        Pose.from_list([1, 0, 0])


def test_fit_rigid_identity():
    src = np.random.default_rng(0).normal(size=(10, 3))
    assert close(fit_rigid(src, src), Pose.identity(), 1e-12)


@settings(max_examples=100, deadline=None)
@given(poses(), st.integers(0, 2**31))
def test_fit_rigid_recovers_motion(p, seed):
    src = np.random.default_rng(seed).normal(size=(8, 3))
    dst = transform_point(p, src)
    est = fit_rigid(src, dst)
    assert close(est, p, 1e-8)
    rms = np.sqrt(np.mean(np.sum((transform_point(est, src) - dst) ** 2, axis=1)))
    assert rms < 1e-9


@settings(max_examples=100, deadline=None)
@given(poses(), poses(), st.integers(0, 2**31))
def test_fit_rigid_left_invariant(q, p, seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(8, 3))
    dst = transform_point(p, src) + rng.normal(0, 0.01, (8, 3))
    assert close(fit_rigid(src, transform_point(q, dst)), compose(q, fit_rigid(src, dst)), 1e-8)


def test_fit_rigid_degenerate_inputs():
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateInputError):
        fit_rigid(line, line)
    with pytest.raises(DegenerateInputError):
        fit_rigid(np.eye(3)[:2], np.eye(3)[:2])
