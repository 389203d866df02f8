import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinodyn import se3
from kinodyn.se3 import BodyVelocity, InertialParams, Pose, VehicleState

from oracles import q_from_zyx, qmat, quaternion_integrate

GUARD = math.pi / 2 - se3.GIMBAL_EPS


def random_angles(rng, n):
    return np.stack([
        rng.uniform(-np.pi, np.pi, n),
        rng.uniform(-GUARD * 0.999, GUARD * 0.999, n),
        rng.uniform(-np.pi, np.pi, n),
    ], axis=-1)


def test_rotation_identity_and_yaw():
    np.testing.assert_array_equal(se3.rotation_body_to_world([0, 0, 0]), np.eye(3))
    R = se3.rotation_body_to_world([np.pi / 2, 0, 0])
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_rotation_matches_quaternion_composition():
    R = se3.rotation_body_to_world([0.3, 0.2, 0.1])
    np.testing.assert_allclose(R, qmat(q_from_zyx(0.3, 0.2, 0.1)), atol=1e-12)


def test_rotation_orthonormal_batch():
    e = random_angles(np.random.default_rng(0), 10_000)
    R = se3.rotation_body_to_world(e)
    RtR = np.einsum("nji,njk->nik", R, R)
    assert np.max(np.abs(RtR - np.eye(3))) < 1e-12
    assert np.max(np.abs(np.linalg.det(R) - 1)) < 1e-12


def test_displacement_examples():
    np.testing.assert_allclose(se3.displacement_world([0, 0, 0], [1, 0, 0], 0.1), [0.1, 0, 0])
    np.testing.assert_allclose(se3.displacement_world([np.pi / 2, 0, 0], [1, 0, 0], 0.1),
                               [0, 0.1, 0], atol=1e-15)
    rng = np.random.default_rng(1)
    e, v = random_angles(rng, 100), rng.normal(size=(100, 3))
    d = se3.displacement_world(e, v, 0.1)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), np.linalg.norm(v, axis=1) * 0.1, rtol=1e-13)
    with pytest.raises(ValueError):
        se3.displacement_world(e, v, 0.0)


def test_euler_rate_matrices_at_zero():
    a, b, c = 0.3, -0.7, 1.1
    np.testing.assert_allclose(se3.euler_rates_to_body_omega([0, 0, 0], [a, b, c]), [c, b, a])
    np.testing.assert_allclose(se3.body_omega_to_euler_rates([0, 0, 0], [a, b, c]), [c, b, a])


def test_euler_rates_finite_difference_oracle():
    """Body rate from R^T dR/dt along a pure yaw rate."""
    e = np.array([0.0, 0.4, 0.3])
    h = 1e-6
    Rp = se3.rotation_body_to_world(e + [h, 0, 0])
    Rm = se3.rotation_body_to_world(e - [h, 0, 0])
    R = se3.rotation_body_to_world(e)
    W = R.T @ (Rp - Rm) / (2 * h)
    w_fd = np.array([W[2, 1], W[0, 2], W[1, 0]])
    np.testing.assert_allclose(se3.euler_rates_to_body_omega(e, [1, 0, 0]), w_fd, atol=1e-8)


def test_inverse_pair_identity():
    e = random_angles(np.random.default_rng(2), 10_000)
    P = se3.body_omega_inverse_matrix(e) @ se3.euler_rates_matrix(e)
    assert np.max(np.abs(P - np.eye(3))) < 1e-12


def test_gimbal_guard():
    with pytest.raises(se3.GimbalLock):
        se3.body_omega_to_euler_rates([0, np.pi / 2 - 1e-4, 0], [0, 0, 1])
    se3.body_omega_to_euler_rates([0, np.pi / 2 - 2e-3, 0], [0, 0, 1])


@settings(max_examples=200, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-GUARD * 0.99, GUARD * 0.99), st.floats(-np.pi, np.pi),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_round_trip_rates(psi, theta, phi, edot):
    e = [psi, theta, phi]
    w = se3.euler_rates_to_body_omega(e, edot)
    back = se3.body_omega_to_euler_rates(e, w)
    np.testing.assert_allclose(back, edot, atol=1e-12 * max(1.0, 1 / math.cos(theta) ** 2) * 10)


def test_integrate_kinematics_trivial():
    x = VehicleState(BodyVelocity([1, 2, 3], [0.1, 0.2, 0.3]), Pose([1, 2, 3], [0.1, 0.2, 0.3]))
    p = se3.integrate_kinematics(x, BodyVelocity([0, 0, 0], [0, 0, 0]), 0.1)
    np.testing.assert_array_equal(p.p, x.kin.p)
    np.testing.assert_allclose(p.e, x.kin.e, atol=1e-15)
    x0 = VehicleState(BodyVelocity([0] * 3, [0] * 3), Pose([1, 1, 1], [0, 0, 0]))
    p = se3.integrate_kinematics(x0, BodyVelocity([1, 0, 0], [0, 0, 0]), 0.1)
    np.testing.assert_allclose(p.p, [1.1, 1, 1])
    np.testing.assert_allclose(p.e, [0, 0, 0])


def test_yaw_and_roll_wrapping():
    x0 = VehicleState(BodyVelocity([0] * 3, [0] * 3), Pose([0, 0, 0], [3.1, 0, 0]))
    p = se3.integrate_kinematics(x0, BodyVelocity([0, 0, 0], [0, 0, 1.0]), 0.1)
    np.testing.assert_allclose(p.e[0], 3.2 - 2 * np.pi)
    x0 = VehicleState(BodyVelocity([0] * 3, [0] * 3), Pose([0, 0, 0], [0, 0, -3.1]))
    p = se3.integrate_kinematics(x0, BodyVelocity([0, 0, 0], [-1.0, 0, 0]), 0.1)
    np.testing.assert_allclose(p.e[2], 2 * np.pi - 3.2)
    np.testing.assert_allclose(se3.wrap_angle([np.pi, -np.pi, 3 * np.pi]), [np.pi] * 3)


def _integrate(e0, v, w, dt, duration, attitude="midpoint"):
    p, e = np.zeros(3), np.array(e0, dtype=float)
    for _ in range(int(round(duration / dt))):
        p, e = se3.integrate_pose(p, e, v, w, dt, attitude=attitude)
    return p, e


def test_integration_against_quaternion_oracle():
    v, w = (2.0, 0.0, 0.0), (0.0, 0.0, 0.5)
    p_ref, e_ref = quaternion_integrate((0, 0, 0), (0, 0, 0), v, w, 1.0)
    p, e = _integrate([0, 0, 0], v, w, 0.01, 1.0)
    assert np.max(np.abs(p - p_ref)) < 1e-3
    assert np.max(np.abs(e - e_ref)) < 1e-3


def test_start_attitude_rule_is_first_order():
    v, w = (2.0, 0.0, 0.0), (0.0, 0.0, 0.5)
    p_ref, _ = quaternion_integrate((0, 0, 0), (0, 0, 0), v, w, 1.0)
    err = [np.linalg.norm(_integrate([0, 0, 0], v, w, dt, 1.0, "start")[0] - p_ref)
           for dt in (0.02, 0.01, 0.005)]
    # heading lag leaves an O(dt) position error of ~ v*dt/2*|dir(T)-dir(0)|
    assert 4e-3 < err[1] < 6e-3
    assert err[0] / err[1] > 1.9 and err[1] / err[2] > 1.9


def test_integration_convergence_general_attitude():
    e0 = (0.2, 0.15, -0.1)
    v, w = (3.0, 0.4, -0.2), (0.1, -0.2, 0.4)
    p_ref, e_ref = quaternion_integrate((0, 0, 0), e0, v, w, 1.0)
    errs = []
    for dt in (0.04, 0.02, 0.01):
        p, e = _integrate(e0, v, w, dt, 1.0)
        errs.append(np.linalg.norm(p - p_ref) + np.linalg.norm(e - e_ref))
    assert errs[0] / errs[1] >= 2.0 * 0.95 and errs[1] / errs[2] >= 2.0 * 0.95


def test_wrench_steady_and_centripetal():
    prm = InertialParams()
    z = BodyVelocity([4, 0, 0], [0, 0, 0])
    wr = se3.wrench_from_motion(z, z, prm, 0.1)
    np.testing.assert_array_equal(wr.f, 0)
    np.testing.assert_array_equal(wr.m, 0)
    u, r = 5.0, 0.3
    s = BodyVelocity([u, 0, 0], [0, 0, r])
    wr = se3.wrench_from_motion(s, s, prm, 0.1)
    np.testing.assert_allclose(wr.f, [0, prm.mass * u * r, 0])
    Iw = prm.inertia @ s.w
    np.testing.assert_allclose(wr.m, np.cross(s.w, Iw))


def test_wrench_properties():
    rng = np.random.default_rng(3)
    prm, prm2 = InertialParams(mass=1000.0), InertialParams(mass=2000.0)
    a = BodyVelocity(rng.normal(size=3), rng.normal(size=3))
    b = BodyVelocity(rng.normal(size=3), rng.normal(size=3))
    f1 = se3.wrench_from_motion(a, b, prm, 0.1).f
    f2 = se3.wrench_from_motion(a, b, prm2, 0.1).f
    np.testing.assert_allclose(f2, 2 * f1)
    a0 = BodyVelocity(a.v, [0, 0, 0])
    c = rng.normal(size=3)
    f_base = se3.wrench_from_motion(a0, b, prm, 0.1).f
    f_shift = se3.wrench_from_motion(BodyVelocity(a.v + c, [0, 0, 0]), BodyVelocity(b.v + c, b.w),
                                     prm, 0.1).f
    np.testing.assert_allclose(f_shift, f_base, rtol=1e-10, atol=1e-9)


def test_inertial_params_validation():
    with pytest.raises(ValueError):
        InertialParams(mass=-1)
    with pytest.raises(ValueError):
        InertialParams(inertia=np.array([[1, 2, 0], [0, 1, 0], [0, 0, 1]]))
