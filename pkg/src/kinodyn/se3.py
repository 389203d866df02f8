"""Rigid-body kinematics on ZYX Euler angles.

Conventions used throughout the package:

* Euler angles are ordered ``(yaw, pitch, roll)`` = ``(psi, theta, phi)`` and
  compose as ``R = Rz(psi) @ Ry(theta) @ Rx(phi)`` (body -> world).
* Body linear velocity ``v = (vx, vy, vz)``, body angular velocity
  ``w = (wx, wy, wz)``.
* A 12-vector state is ``[vx, vy, vz, wx, wy, wz, x, y, z, psi, theta, phi]``.

Every function accepts arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GIMBAL_EPS = 1e-3
STATE_DIM = 12
DYN = slice(0, 6)
KIN = slice(6, 12)


class GimbalLock(ValueError):
    """Pitch is too close to +-pi/2 for the Euler-rate mapping."""


@dataclass(frozen=True)
class BodyVelocity:
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(3))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])

    @classmethod
    def from_array(cls, a) -> "BodyVelocity":
        a = np.asarray(a, dtype=float)
        return cls(a[:3], a[3:6])


@dataclass(frozen=True)
class Pose:
    p: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(3))
        object.__setattr__(self, "e", np.asarray(self.e, dtype=float).reshape(3))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.p, self.e])

    @classmethod
    def from_array(cls, a) -> "Pose":
        a = np.asarray(a, dtype=float)
        return cls(a[:3], a[3:6])


@dataclass(frozen=True)
class VehicleState:
    dyn: BodyVelocity
    kin: Pose

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.dyn.as_array(), self.kin.as_array()])

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        a = np.asarray(a, dtype=float)
        return cls(BodyVelocity.from_array(a[DYN]), Pose.from_array(a[KIN]))


@dataclass(frozen=True)
class Wrench:
    f: np.ndarray
    m: np.ndarray


@dataclass(frozen=True)
class InertialParams:
    """Mass properties used by the wrench recovery and the force cost.

    ``d_x`` is the lateral and ``d_y`` the longitudinal distance from the CoM
    to the front-left wheel.
    """

    mass: float = 1500.0
    inertia: np.ndarray = field(
        default_factory=lambda: np.diag([550.0, 2100.0, 2300.0]))
    d_x: float = 0.8
    d_y: float = 1.4
    g: float = 9.81

    def __post_init__(self):
        I = np.asarray(self.inertia, dtype=float).reshape(3, 3)
        object.__setattr__(self, "inertia", I)
        if self.mass <= 0 or self.d_x <= 0 or self.d_y <= 0 or self.g <= 0:
            raise ValueError("mass, d_x, d_y and g must be positive")
        if not np.allclose(I, I.T) or np.any(np.linalg.eigvalsh(I) <= 0):
            raise ValueError("inertia must be symmetric positive-definite")


def wrap_angle(a):
    """Wrap into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    z = np.zeros_like(w[..., 0])
    return np.stack([
        np.stack([z, -w[..., 2], w[..., 1]], axis=-1),
        np.stack([w[..., 2], z, -w[..., 0]], axis=-1),
        np.stack([-w[..., 1], w[..., 0], z], axis=-1),
    ], axis=-2)


def rotation_body_to_world(e) -> np.ndarray:
    """``Rz(psi) Ry(theta) Rx(phi)`` for Euler angles ``e = (psi, theta, phi)``."""
    e = np.asarray(e, dtype=float)
    cps, sps = np.cos(e[..., 0]), np.sin(e[..., 0])
    cth, sth = np.cos(e[..., 1]), np.sin(e[..., 1])
    cph, sph = np.cos(e[..., 2]), np.sin(e[..., 2])
    return np.stack([
        np.stack([cps * cth, cps * sth * sph - sps * cph, cps * sth * cph + sps * sph], axis=-1),
        np.stack([sps * cth, sps * sth * sph + cps * cph, sps * sth * cph - cps * sph], axis=-1),
        np.stack([-sth, cth * sph, cth * cph], axis=-1),
    ], axis=-2)


def displacement_world(e, v, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    R = rotation_body_to_world(e)
    return np.einsum("...ij,...j->...i", R, np.asarray(v, dtype=float)) * dt


def euler_rates_matrix(e) -> np.ndarray:
    """Maps ``(psi_dot, theta_dot, phi_dot)`` to body angular velocity."""
    e = np.asarray(e, dtype=float)
    cth, sth = np.cos(e[..., 1]), np.sin(e[..., 1])
    cph, sph = np.cos(e[..., 2]), np.sin(e[..., 2])
    z, o = np.zeros_like(cth), np.ones_like(cth)
    return np.stack([
        np.stack([-sth, z, o], axis=-1),
        np.stack([cth * sph, cph, z], axis=-1),
        np.stack([cth * cph, -sph, z], axis=-1),
    ], axis=-2)


def euler_rates_to_body_omega(e, edot) -> np.ndarray:
    return np.einsum("...ij,...j->...i", euler_rates_matrix(e), np.asarray(edot, dtype=float))


def _check_gimbal(theta, eps: float = GIMBAL_EPS):
    if np.any(np.abs(theta) >= np.pi / 2 - eps) or not np.all(np.isfinite(theta)):
        raise GimbalLock(f"pitch within {eps} rad of +-pi/2")


def body_omega_inverse_matrix(e) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    cth, sth = np.cos(e[..., 1]), np.sin(e[..., 1])
    cph, sph = np.cos(e[..., 2]), np.sin(e[..., 2])
    z, o = np.zeros_like(cth), np.ones_like(cth)
    return np.stack([
        np.stack([z, sph / cth, cph / cth], axis=-1),
        np.stack([z, cph, -sph], axis=-1),
        np.stack([o, sth * sph / cth, sth * cph / cth], axis=-1),
    ], axis=-2)


def body_omega_to_euler_rates(e, w, eps: float = GIMBAL_EPS) -> np.ndarray:
    """Inverse of :func:`euler_rates_to_body_omega`.

    Raises GimbalLock when ``|theta| >= pi/2 - eps``.
    """
    e = np.asarray(e, dtype=float)
    _check_gimbal(e[..., 1], eps)
    return np.einsum("...ij,...j->...i", body_omega_inverse_matrix(e), np.asarray(w, dtype=float))


def integrate_pose(p, e, v_next, w_next, dt: float, eps: float = GIMBAL_EPS,
                   attitude: str = "midpoint"):
    """First-order pose update from next-step body velocities, array form.

    The Euler-angle increment is the explicit product of the inverse rate
    matrix at the current attitude. The position increment rotates the body
    displacement by either the current attitude (``attitude="start"``) or the
    attitude half-way through the angle increment (``"midpoint"``); the
    latter removes the O(dt) heading-lag drift on turning trajectories.
    Yaw and roll are wrapped into (-pi, pi]. Returns ``(p', e')``.
    """
    p = np.asarray(p, dtype=float)
    e = np.asarray(e, dtype=float)
    de = body_omega_to_euler_rates(e, w_next, eps) * dt
    if attitude == "midpoint":
        e_rot = e + 0.5 * de
    elif attitude == "start":
        e_rot = e
    else:
        raise ValueError(f"unknown attitude rule {attitude!r}")
    p_new = p + displacement_world(e_rot, v_next, dt)
    e_new = e + de
    e_new[..., 0] = wrap_angle(e_new[..., 0])
    e_new[..., 2] = wrap_angle(e_new[..., 2])
    return p_new, e_new


def integrate_kinematics(x: VehicleState, v_next: BodyVelocity, dt: float,
                         attitude: str = "midpoint") -> Pose:
    p, e = integrate_pose(x.kin.p, x.kin.e, v_next.v, v_next.w, dt, attitude=attitude)
    return Pose(p, e)


def wrench_arrays(v_t, w_t, v_next, w_next, params: InertialParams, dt: float):
    """Newton-Euler wrench from two consecutive body velocities (arrays)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v_t, w_t = np.asarray(v_t, dtype=float), np.asarray(w_t, dtype=float)
    v_next, w_next = np.asarray(v_next, dtype=float), np.asarray(w_next, dtype=float)
    I = params.inertia
    f = params.mass * ((v_next - v_t) / dt + np.cross(w_t, v_t))
    Iw = w_t @ I.T
    m = (w_next - w_t) / dt @ I.T + np.cross(w_t, Iw)
    return f, m


def wrench_from_motion(v_t: BodyVelocity, v_next: BodyVelocity,
                       params: InertialParams, dt: float) -> Wrench:
    f, m = wrench_arrays(v_t.v, v_t.w, v_next.v, v_next.w, params, dt)
    return Wrench(f, m)
