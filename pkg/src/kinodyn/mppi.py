"""Smooth MPPI over the learned dynamics with the off-road cost suite."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .se3 import InertialParams, wrench_arrays
from .track import Costmap2D

COST_TERMS = ("track", "speed", "slip", "rollover", "force", "uc")
BETA_VX_FLOOR = 1e-6


class AllInfeasible(RuntimeError):
    pass


@dataclass
class CostWeights:
    w: tuple = (1.0, 0.5, 1.0, 1.0, 1.0, 0.3)
    beta_th: float = 0.35
    theta_th: float = 0.45
    phi_th: float = 0.45
    zeta_th: tuple = (1.5, 1.0, 1.0)
    W_inf: float = 1e6
    v_ref: float = 7.0
    lam: float = 1.0
    mode: str = "full"          # "full" or "2d" (track, speed and slip only)
    gravity_in_zeta1: bool = True
    w_smooth: float = 0.0       # optional quadratic action-difference penalty
    w_progress: float = 0.0     # optional reward per metre of centreline progress

    def __post_init__(self):
        if len(self.w) != 6 or any(v < 0 for v in self.w):
            raise ValueError("need six nonnegative weights")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.mode not in ("full", "2d"):
            raise ValueError(f"unknown cost mode {self.mode!r}")
        if min(self.beta_th, self.theta_th, self.phi_th, *self.zeta_th, self.W_inf,
               self.w_smooth, self.w_progress) < 0:
            raise ValueError("thresholds must be nonnegative")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("w", "zeta_th"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def scaled(self, factor: float) -> "CostWeights":
        return CostWeights(**dict(asdict(self), w=tuple(factor * v for v in self.w)))


def side_slip(vx, vy):
    return -np.arctan(vy / np.maximum(np.abs(vx), BETA_VX_FLOOR))


def zetas(states, f, m, inertial: InertialParams, gravity: bool = True):
    """(zeta_1, zeta_2, zeta_3) from the body wrench; gravity reaction optionally added to F_z."""
    mg = inertial.mass * inertial.g
    fz = f[..., 2]
    if gravity:
        th, ph = states[..., 10], states[..., 11]
        fz = fz + mg * np.cos(th) * np.cos(ph)
    return np.stack([fz / mg - 1.0, m[..., 0] / (mg * inertial.d_x),
                     m[..., 1] / (mg * inertial.d_y)], axis=-1)


def state_cost(states, f, m, uc, cw: CostWeights, cmap: Costmap2D,
               inertial: InertialParams | None = None, breakdown: bool = False):
    """Running cost of predicted states (..., 12) with their wrench and UC.

    In ``"2d"`` mode only the track, speed and slip terms are active.
    """
    inertial = inertial or InertialParams()
    states = np.asarray(states, float)
    vx, vy = states[..., 0], states[..., 1]
    W = cw.W_inf
    terms = {}
    terms["track"] = W * cmap.lookup(states[..., 6], states[..., 7]).astype(float)
    terms["speed"] = (vx - cw.v_ref) ** 2
    beta = side_slip(vx, vy)
    terms["slip"] = beta ** 2 + W * (np.abs(beta) > cw.beta_th)
    if cw.mode == "full":
        th, ph = states[..., 10], states[..., 11]
        terms["rollover"] = th ** 2 + ph ** 2 + W * ((np.abs(th) > cw.theta_th).astype(float)
                                                     + (np.abs(ph) > cw.phi_th))
        z = zetas(states, np.asarray(f, float), np.asarray(m, float), inertial,
                  cw.gravity_in_zeta1)
        terms["force"] = np.sum(z ** 2 + W * (np.abs(z) > np.asarray(cw.zeta_th)), axis=-1)
        terms["uc"] = np.asarray(uc, float) * np.ones_like(vx)
    else:
        for k in ("rollover", "force", "uc"):
            terms[k] = np.zeros_like(vx)
    total = sum(wi * terms[k] for wi, k in zip(cw.w, COST_TERMS))
    return (total, terms) if breakdown else total


def rollout_wrench(x0, states, inertial: InertialParams, dt: float):
    """Wrench of every predicted transition from consecutive velocities; shapes (K, T, 3)."""
    x0 = np.asarray(x0, float)
    K = states.shape[0]
    prev = np.concatenate([np.broadcast_to(x0[..., :6], (K, 6))[:, None], states[:, :-1, :6]], axis=1)
    return wrench_arrays(prev[..., :3], prev[..., 3:6], states[..., :3], states[..., 3:6],
                         inertial, dt)


def track_progress(track, x0, states):
    """Centreline distance covered by each predicted trajectory, (K,)."""
    K, T = states.shape[:2]
    xs = np.concatenate([np.broadcast_to(np.asarray(x0, float)[..., 6], (K,))[:, None],
                         states[..., 6]], axis=1)
    ys = np.concatenate([np.broadcast_to(np.asarray(x0, float)[..., 7], (K,))[:, None],
                         states[..., 7]], axis=1)
    s, _ = track.project(xs.ravel(), ys.ravel())
    ds = np.diff(s.reshape(K, T + 1), axis=1)
    L = track.length
    return np.sum(ds - L * np.round(ds / L), axis=1)


def evaluate_batch(model, x0, hist, grid, cmap, U, cw: CostWeights,
                   inertial: InertialParams | None = None, dt: float = 0.1, u_prev=None,
                   track=None):
    """Total cost per control sequence; invalid rollouts cost +inf.

    Returns ``(costs (K,), rollout result)``. The optional smoothing and
    progress terms apply only when their weights are positive (progress also
    needs ``track``).
    """
    inertial = inertial or InertialParams()
    U = np.asarray(U, float)
    r = model.rollout_batch(x0, hist, grid, U, dt)
    f, m = rollout_wrench(x0, r.states, inertial, dt)
    c = state_cost(r.states, f, m, r.uc, cw, cmap, inertial)
    costs = c.sum(axis=1)
    if cw.w_smooth > 0:
        prev = U[:, :1] if u_prev is None else np.broadcast_to(np.asarray(u_prev, float), U[:, :1].shape)
        du = np.diff(np.concatenate([prev, U], axis=1), axis=1)
        costs = costs + cw.w_smooth * np.sum(du * du, axis=(1, 2))
    if cw.w_progress > 0 and track is not None:
        costs = costs - cw.w_progress * track_progress(track, x0, r.states)
    costs = np.where(r.valid & np.isfinite(costs), costs, np.inf)
    return costs, r


def softmax_weights(costs, lam: float):
    """Normalized exp(-(c - min c) / lam); zero weight on infinite costs."""
    costs = np.asarray(costs, float)
    fin = np.isfinite(costs)
    if not fin.any():
        raise AllInfeasible("every sampled trajectory has infinite cost")
    w = np.zeros_like(costs)
    w[fin] = np.exp(-(costs[fin] - costs[fin].min()) / lam)
    return w / w.sum()


def effective_sample_size(w) -> float:
    return float(1.0 / np.sum(np.square(w)))


def sample_perturbations(K: int, T: int, sigma, rng, nominal_rate=None, u_prev=None,
                         bounds=((-0.5, 0.5), (0.0, 10.0))):
    """Derivative-space noise and the integrated, clamped action sequences.

    ``nominal_rate`` (T, 2) is the nominal per-step action increment and
    ``u_prev`` the last applied action; returns ``(eps (K, T, 2), U (K, T, 2))``.
    """
    sigma = np.asarray(sigma, float)
    if not hasattr(rng, "standard_normal"):
        rng = np.random.default_rng(rng)
    eps = rng.standard_normal((K, T, 2)) * sigma
    D = np.zeros((T, 2)) if nominal_rate is None else np.asarray(nominal_rate, float)
    u0 = np.zeros(2) if u_prev is None else np.asarray(u_prev, float)
    U = u0 + np.cumsum(D[None] + eps, axis=1)
    return eps, clamp_actions(U, bounds)


def clamp_actions(U, bounds):
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return np.clip(U, lo, hi)


def update_solution(nominal, costs, eps, lam: float):
    """Weighted perturbation average added to the nominal; returns ``(new nominal, weights)``."""
    w = softmax_weights(costs, lam)
    return np.asarray(nominal, float) + np.tensordot(w, eps, axes=1), w


@dataclass
class ControllerConfig:
    K: int = 1024
    T: int = 30
    sigma: tuple = (0.15, 1.0)
    seed: int = 0
    sampling: str = "smooth"   # "smooth" (derivative space) or "direct" (action space)
    delta_max: float = 0.5
    v_max: float = 10.0
    dt: float = 0.1
    costs: CostWeights = field(default_factory=CostWeights)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "costs" in d and isinstance(d["costs"], dict):
            d["costs"] = CostWeights.from_dict(d["costs"])
        if "sigma" in d:
            d["sigma"] = tuple(d["sigma"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self):
        return asdict(self)

    @property
    def bounds(self):
        return ((-self.delta_max, self.delta_max), (0.0, self.v_max))


class Controller:
    """Receding-horizon SMPPI; one :meth:`control_tick` per control period."""

    def __init__(self, model, cfg: ControllerConfig, cmap: Costmap2D,
                 inertial: InertialParams | None = None, track=None):
        if cfg.sampling not in ("smooth", "direct"):
            raise ValueError(f"unknown sampling mode {cfg.sampling!r}")
        self.model, self.cfg, self.cmap, self.track = model, cfg, cmap, track
        self.inertial = inertial or InertialParams()
        self.reset()

    def reset(self, u0=(0.0, 0.0)):
        T = self.cfg.T
        self.tick = 0
        self.u_prev = np.asarray(u0, float)
        self.rate = np.zeros((T, 2))                       # smooth mode nominal
        self.U = np.tile(self.u_prev, (T, 1))              # direct mode nominal

    def _direct_sigma(self):
        # action-space std matched to the mean variance of the integrated walk
        return np.asarray(self.cfg.sigma) * math.sqrt((self.cfg.T + 1) / 2.0)

    def control_tick(self, x, hist, grid):
        """Sample, evaluate, update; returns ``(u, diagnostics)``."""
        cfg = self.cfg
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, self.tick])
        if cfg.sampling == "smooth":
            eps, U = sample_perturbations(cfg.K, cfg.T, cfg.sigma, rng, self.rate, self.u_prev,
                                          cfg.bounds)
        else:
            eps = rng.standard_normal((cfg.K, cfg.T, 2)) * self._direct_sigma()
            U = clamp_actions(self.U[None] + eps, cfg.bounds)
        costs, r = evaluate_batch(self.model, x, hist, grid, self.cmap, U, cfg.costs,
                                  self.inertial, cfg.dt, self.u_prev, self.track)
        diag = {"tick": self.tick, "n_infeasible": int(np.sum(~np.isfinite(costs)))}
        try:
            if cfg.sampling == "smooth":
                rate, w = update_solution(self.rate, costs, eps, cfg.costs.lam)
                U_star = clamp_actions(self.u_prev + np.cumsum(rate, axis=0), cfg.bounds)
                # anti-windup: keep the nominal rate consistent with the clamped actions
                rate = np.diff(np.concatenate([self.u_prev[None], U_star]), axis=0)
            else:
                U_star, w = update_solution(self.U, costs, eps, cfg.costs.lam)
                U_star = clamp_actions(U_star, cfg.bounds)
            u = U_star[0].copy()
            fin = np.isfinite(costs)
            diag.update(min_cost=float(costs[fin].min()), mean_cost=float(costs[fin].mean()),
                        ess=effective_sample_size(w), fallback=False)
            # receding horizon: drop the applied step, hold the last one
            if cfg.sampling == "smooth":
                self.rate = np.concatenate([rate[1:], np.zeros((1, 2))])
            else:
                self.U = np.concatenate([U_star[1:], U_star[-1:]])
        except AllInfeasible:
            u = np.zeros(2)
            w = np.zeros(cfg.K)
            diag.update(min_cost=None, mean_cost=None, ess=None, fallback=True)
            self.rate = np.zeros((cfg.T, 2))
            self.U = np.zeros((cfg.T, 2))
        counts = np.bincount(r.member.ravel(), minlength=getattr(self.model.cfg, "B", 1))
        diag["member_hist"] = counts.tolist()
        diag["compute_ms"] = 1e3 * (time.perf_counter() - t0)
        self.last_weights, self.last_rollout, self.last_U = w, r, U
        self.u_prev = u
        self.tick += 1
        return u, diag
