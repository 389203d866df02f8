"""Ground-truth 6-DoF vehicle-on-heightmap simulator.

Rigid body with four spring-damper wheel contacts on a bilinear heightmap,
linear slip-angle lateral tires with a friction cap, and a PI loop turning
the desired-speed action into a longitudinal drive force. Integration is
semi-implicit Euler (velocities first, then pose) at ``dt_inner``.

The packed simulator state is a float64 vector::

    [vx vy vz wx wy wz | x y z psi theta phi | pi_integral | c0 c1 c2 c3]
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .se3 import InertialParams
from .terrain import ElevationGrid, bilinear, bilinear_grad

DT_CONTROL = 0.1
DT_INNER = 1e-3
ROLLOVER_ANGLE = math.radians(60.0)

SIM_DIM = 17
PI_IDX = 12
COMP = slice(13, 17)
# ledger: net force, net moment, suspension force, tire force, gravity (body frame)
LEDGER_DIM = 15


class NumericalDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1500.0
    inertia: tuple = (550.0, 2100.0, 2300.0)
    g: float = 9.81
    wheelbase: float = 2.8
    track_width: float = 1.6
    cg_height: float = 0.55           # static ride height of the CoM above ground
    k_s: float = 35000.0              # N/m per wheel
    c_s: float = 4000.0               # N s/m per wheel
    travel: float = 0.25              # m, beyond which the bump stop engages
    bump_stop_factor: float = 1000.0  # near-rigid stop: keeps penetration within travel + 1 cm
    tire_force_limit: float = 6000.0  # N, total drive/brake force
    c_alpha: float = 60000.0          # N/rad per wheel
    mu: float = 0.9
    rolling_resistance: float = 0.015
    slip_v_eps: float = 1.0           # m/s floor in the slip-angle denominator
    delta_max: float = 0.5
    v_max: float = 10.0
    k_p: float = 2000.0
    k_i: float = 200.0

    @property
    def static_sag(self) -> float:
        return self.mass * self.g / (4 * self.k_s)

    def wheel_positions(self) -> np.ndarray:
        """Free-length contact points in the body frame: FL, FR, RL, RR."""
        a, b = self.wheelbase / 2, self.track_width / 2
        z = -(self.cg_height + self.static_sag)
        return np.array([[a, b, z], [a, -b, z], [-a, b, z], [-a, -b, z]])

    @property
    def r_vehicle(self) -> float:
        return float(np.max(np.linalg.norm(self.wheel_positions(), axis=1)))

    def inertial(self) -> InertialParams:
        return InertialParams(mass=self.mass, inertia=np.diag(self.inertia),
                              d_x=self.track_width / 2, d_y=self.wheelbase / 2, g=self.g)

    def packed(self) -> np.ndarray:
        I = np.asarray(self.inertia, float)
        return np.concatenate([
            [self.mass, self.g, self.k_s, self.c_s, self.travel, self.bump_stop_factor,
             self.tire_force_limit, self.c_alpha, self.mu, self.rolling_resistance,
             self.slip_v_eps, self.k_p, self.k_i],
            I, self.wheel_positions().ravel(),
        ])

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# numba kernels

@numba.njit(cache=True)
def _rot(psi, th, ph):
    cps, sps = math.cos(psi), math.sin(psi)
    cth, sth = math.cos(th), math.sin(th)
    cph, sph = math.cos(ph), math.sin(ph)
    R = np.empty((3, 3))
    R[0, 0] = cps * cth
    R[0, 1] = cps * sth * sph - sps * cph
    R[0, 2] = cps * sth * cph + sps * sph
    R[1, 0] = sps * cth
    R[1, 1] = sps * sth * sph + cps * cph
    R[1, 2] = sps * sth * cph - cps * sph
    R[2, 0] = -sth
    R[2, 1] = cth * sph
    R[2, 2] = cth * cph
    return R


@numba.njit(cache=True)
def _wrap(a):
    return math.pi - ((math.pi - a) % (2.0 * math.pi))


@numba.njit(cache=True)
def _inner_step(s, prm, h, ox, oy, res, delta, v_des, dt, ledger):
    """Advance the packed state ``s`` in place by one step; fills ``ledger``."""
    m, g, k_s, c_s = prm[0], prm[1], prm[2], prm[3]
    travel, bsf, f_lim, c_al = prm[4], prm[5], prm[6], prm[7]
    mu, c_rr, v_eps, k_p, k_i = prm[8], prm[9], prm[10], prm[11], prm[12]
    Ixx, Iyy, Izz = prm[13], prm[14], prm[15]

    vx, vy, vz = s[0], s[1], s[2]
    wx, wy, wz = s[3], s[4], s[5]
    R = _rot(s[9], s[10], s[11])

    # PI speed tracker; the integral only runs while the output is unsaturated
    # (conditional integration) and is clamped to the force limit
    err = v_des - vx
    integ = s[12]
    f_cmd = k_p * err + k_i * integ
    if abs(f_cmd) < f_lim:
        integ += err * dt
        ilim = f_lim / k_i if k_i > 0 else 0.0
        if integ > ilim:
            integ = ilim
        elif integ < -ilim:
            integ = -ilim
        s[12] = integ
    if f_cmd > f_lim:
        f_cmd = f_lim
    elif f_cmd < -f_lim:
        f_cmd = -f_lim

    Fs = np.zeros(3)  # world-frame totals
    Ft = np.zeros(3)
    Ms = np.zeros(3)  # body-frame moments
    Mt = np.zeros(3)
    cd, sd = math.cos(delta), math.sin(delta)
    for i in range(4):
        rx, ry, rz = prm[16 + 3 * i], prm[17 + 3 * i], prm[18 + 3 * i]
        # contact point velocity in body then world frame
        bvx = vx + wy * rz - wz * ry
        bvy = vy + wz * rx - wx * rz
        bvz = vz + wx * ry - wy * rx
        Px = s[6] + R[0, 0] * rx + R[0, 1] * ry + R[0, 2] * rz
        Py = s[7] + R[1, 0] * rx + R[1, 1] * ry + R[1, 2] * rz
        Pz = s[8] + R[2, 0] * rx + R[2, 1] * ry + R[2, 2] * rz
        Vx = R[0, 0] * bvx + R[0, 1] * bvy + R[0, 2] * bvz
        Vy = R[1, 0] * bvx + R[1, 1] * bvy + R[1, 2] * bvz
        Vz = R[2, 0] * bvx + R[2, 1] * bvy + R[2, 2] * bvz
        th, hx, hy = bilinear_grad(h, ox, oy, res, Px, Py)
        if th != th:
            th, hx, hy = -1e9, 0.0, 0.0
        comp = th - Pz
        s[13 + i] = min(max(comp, 0.0), travel)
        if comp <= 0.0:
            continue
        comp_rate = hx * Vx + hy * Vy - Vz
        N = k_s * comp + c_s * comp_rate
        if comp > travel:
            N += bsf * k_s * (comp - travel)
        if N <= 0.0:
            continue
        nn = math.sqrt(hx * hx + hy * hy + 1.0)
        nx, ny, nz = -hx / nn, -hy / nn, 1.0 / nn
        # wheel heading (front wheels steered) projected onto the contact plane
        if rx > 0:
            hbx, hby = cd, sd
        else:
            hbx, hby = 1.0, 0.0
        hwx = R[0, 0] * hbx + R[0, 1] * hby
        hwy = R[1, 0] * hbx + R[1, 1] * hby
        hwz = R[2, 0] * hbx + R[2, 1] * hby
        dn = hwx * nx + hwy * ny + hwz * nz
        lx, ly, lz = hwx - dn * nx, hwy - dn * ny, hwz - dn * nz
        ln = math.sqrt(lx * lx + ly * ly + lz * lz)
        lx, ly, lz = lx / ln, ly / ln, lz / ln
        tx = ny * lz - nz * ly
        ty = nz * lx - nx * lz
        tz = nx * ly - ny * lx
        v_long = Vx * lx + Vy * ly + Vz * lz
        v_lat = Vx * tx + Vy * ty + Vz * tz
        alpha = math.atan(v_lat / max(abs(v_long), v_eps))
        f_lat = -c_al * alpha
        roll_sign = math.tanh(v_long / 0.3)
        if f_cmd >= 0.0:
            f_long = 0.25 * f_cmd
        else:
            f_long = 0.25 * f_cmd * roll_sign
        f_long -= c_rr * N * roll_sign
        fmag = math.sqrt(f_long * f_long + f_lat * f_lat)
        cap = mu * N
        if fmag > cap:
            f_long *= cap / fmag
            f_lat *= cap / fmag
        Fw_s = (N * nx, N * ny, N * nz)
        Fw_t = (f_long * lx + f_lat * tx, f_long * ly + f_lat * ty, f_long * lz + f_lat * tz)
        for k in range(3):
            Fs[k] += Fw_s[k]
            Ft[k] += Fw_t[k]
        # body-frame force of this wheel and its moment about the CoM
        for part in range(2):
            if part == 0:
                wxf, wyf, wzf = Fw_s
            else:
                wxf, wyf, wzf = Fw_t
            fbx = R[0, 0] * wxf + R[1, 0] * wyf + R[2, 0] * wzf
            fby = R[0, 1] * wxf + R[1, 1] * wyf + R[2, 1] * wzf
            fbz = R[0, 2] * wxf + R[1, 2] * wyf + R[2, 2] * wzf
            mx = ry * fbz - rz * fby
            my = rz * fbx - rx * fbz
            mz = rx * fby - ry * fbx
            if part == 0:
                Ms[0] += mx
                Ms[1] += my
                Ms[2] += mz
            else:
                Mt[0] += mx
                Mt[1] += my
                Mt[2] += mz

    # world totals -> body frame
    for k in range(3):
        ledger[6 + k] = R[0, k] * Fs[0] + R[1, k] * Fs[1] + R[2, k] * Fs[2]
        ledger[9 + k] = R[0, k] * Ft[0] + R[1, k] * Ft[1] + R[2, k] * Ft[2]
        ledger[12 + k] = -m * g * R[2, k]
        ledger[k] = ledger[6 + k] + ledger[9 + k] + ledger[12 + k]
        ledger[3 + k] = Ms[k] + Mt[k]

    # Newton-Euler in the body frame, velocities first
    ax = ledger[0] / m - (wy * vz - wz * vy)
    ay = ledger[1] / m - (wz * vx - wx * vz)
    az = ledger[2] / m - (wx * vy - wy * vx)
    Lx, Ly, Lz = Ixx * wx, Iyy * wy, Izz * wz
    alx = (ledger[3] - (wy * Lz - wz * Ly)) / Ixx
    aly = (ledger[4] - (wz * Lx - wx * Lz)) / Iyy
    alz = (ledger[5] - (wx * Ly - wy * Lx)) / Izz
    s[0] = vx + dt * ax
    s[1] = vy + dt * ay
    s[2] = vz + dt * az
    s[3] = wx + dt * alx
    s[4] = wy + dt * aly
    s[5] = wz + dt * alz

    # pose update with the new velocities
    for k in range(3):
        s[6 + k] += dt * (R[k, 0] * s[0] + R[k, 1] * s[1] + R[k, 2] * s[2])
    th, ph = s[10], s[11]
    cth, sth = math.cos(th), math.sin(th)
    cph, sph = math.cos(ph), math.sin(ph)
    nwx, nwy, nwz = s[3], s[4], s[5]
    psid = (sph * nwy + cph * nwz) / cth
    thd = cph * nwy - sph * nwz
    phd = nwx + sth * (sph * nwy + cph * nwz) / cth
    s[9] = _wrap(s[9] + dt * psid)
    s[10] = th + dt * thd
    s[11] = _wrap(ph + dt * phd)


@numba.njit(cache=True)
def _run_inner(s, prm, h, ox, oy, res, delta, v_des, dt, n, ledger_sum, ledger):
    """``n`` inner steps under a held action; accumulates the ledger sum."""
    for k in range(LEDGER_DIM):
        ledger_sum[k] = 0.0
    for _ in range(n):
        _inner_step(s, prm, h, ox, oy, res, delta, v_des, dt, ledger)
        for k in range(LEDGER_DIM):
            ledger_sum[k] += ledger[k]
        for k in range(12):
            if not np.isfinite(s[k]):
                return False
    return True


# ---------------------------------------------------------------------------
# python surface

@dataclass
class SimState:
    """Packed simulator state plus the ledger of the most recent step(s).

    ``ledger`` holds the body-frame wrench of the last inner step;
    ``ledger_mean`` averages it over the last :func:`control_step`.
    """

    s: np.ndarray
    t: float = 0.0
    ledger: np.ndarray = field(default_factory=lambda: np.zeros(LEDGER_DIM))
    ledger_mean: np.ndarray = field(default_factory=lambda: np.zeros(LEDGER_DIM))

    @property
    def x(self) -> np.ndarray:
        """The 12-D vehicle state (body velocities then pose)."""
        return self.s[:12].copy()

    @property
    def compressions(self) -> np.ndarray:
        return self.s[COMP].copy()

    def copy(self) -> "SimState":
        return SimState(self.s.copy(), self.t, self.ledger.copy(), self.ledger_mean.copy())

    def rolled_over(self) -> bool:
        return bool(abs(self.s[10]) > ROLLOVER_ANGLE or abs(self.s[11]) > ROLLOVER_ANGLE)


class Simulator:
    """Binds vehicle parameters to a terrain; stateless between calls."""

    def __init__(self, grid: ElevationGrid, params: VehicleParams | None = None,
                 dt_inner: float = DT_INNER, dt_control: float = DT_CONTROL):
        if dt_inner > 1e-3 + 1e-15:
            raise ValueError("dt_inner must be <= 1 ms")
        self.grid = grid
        self.params = params or VehicleParams()
        self.dt_inner = dt_inner
        self.dt_control = dt_control
        self.n_inner = int(round(dt_control / dt_inner))
        self._prm = self.params.packed()
        self._h = grid.heights
        self._o = grid.origin

    def _check_action(self, u):
        delta, v_des = float(u[0]), float(u[1])
        p = self.params
        if abs(delta) > p.delta_max + 1e-12 or v_des < -1e-12 or v_des > p.v_max + 1e-12:
            raise ValueError(f"action {u} outside bounds")
        return delta, v_des

    def initial_state(self, x: float, y: float, psi: float = 0.0, speed: float = 0.0) -> SimState:
        """Vehicle resting on the terrain plane under its wheels.

        On flat ground this is the exact suspension equilibrium.
        """
        p = self.params
        r = p.wheel_positions()
        c, sn = math.cos(psi), math.sin(psi)
        wx = x + c * r[:, 0] - sn * r[:, 1]
        wy = y + sn * r[:, 0] + c * r[:, 1]
        hs = np.array([bilinear(self._h, self._o[0], self._o[1], self.grid.resolution, a, b)
                       for a, b in zip(wx, wy)])
        if np.any(np.isnan(hs)):
            raise ValueError("spawn pose outside terrain")
        # plane fit through the four contact heights
        front, rear = hs[:2].mean(), hs[2:].mean()
        left, right = hs[[0, 2]].mean(), hs[[1, 3]].mean()
        theta = -math.atan2(front - rear, p.wheelbase)
        phi = math.atan2(left - right, p.track_width)
        hc = hs.mean()
        s = np.zeros(SIM_DIM)
        s[0] = speed
        s[6:9] = x, y, hc + p.cg_height / (math.cos(theta) * math.cos(phi))
        s[9:12] = psi, theta, phi
        s[COMP] = p.static_sag
        return SimState(s)

    def step(self, sim: SimState, u, dt_inner: float | None = None) -> SimState:
        """One inner integration step; returns a new state."""
        dt = self.dt_inner if dt_inner is None else dt_inner
        if dt > 1e-3 + 1e-15:
            raise ValueError("dt_inner must be <= 1 ms")
        delta, v_des = self._check_action(u)
        out = sim.copy()
        total = np.zeros(LEDGER_DIM)
        ok = _run_inner(out.s, self._prm, self._h, self._o[0], self._o[1], self.grid.resolution,
                        delta, v_des, dt, 1, total, out.ledger)
        if not ok:
            raise NumericalDivergence(f"non-finite state at t={sim.t + dt:.4f}")
        out.t = sim.t + dt
        out.ledger_mean = total
        return out

    def control_step(self, sim: SimState, u) -> SimState:
        """Hold ``u`` for one control period (``n_inner`` inner steps)."""
        delta, v_des = self._check_action(u)
        out = sim.copy()
        total = np.zeros(LEDGER_DIM)
        ok = _run_inner(out.s, self._prm, self._h, self._o[0], self._o[1], self.grid.resolution,
                        delta, v_des, self.dt_inner, self.n_inner, total, out.ledger)
        if not ok:
            raise NumericalDivergence(f"non-finite state near t={sim.t:.2f}")
        out.t = sim.t + self.n_inner * self.dt_inner
        out.ledger_mean = total / self.n_inner
        return out
