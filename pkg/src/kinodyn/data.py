"""Training-data collection on the simulator and the dataset container."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import io as kio
from .se3 import GIMBAL_EPS
from .simulator import DT_CONTROL, NumericalDivergence, SimState, Simulator
from .terrain import DEFAULT_L, ElevationGrid, crop_batch
from .track import StadiumTrack

POLICIES = ("random-walk", "sinusoidal", "scripted-laps")


@dataclass
class Dataset:
    """Sequential ``(x_t, u_t, M_t, x_{t+1})`` tuples.

    Episodes are stored contiguously; ``t`` is the step index inside the
    episode. Local maps are either stored (``maps``) or cropped on demand from
    ``grid`` with optional per-sample observation noise. Data joined from
    several terrains keeps them in ``grids`` with a per-row ``grid_index``.
    """

    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    t: np.ndarray
    maps: np.ndarray | None = None
    grid: ElevationGrid | None = None
    L: int = DEFAULT_L
    resolution: float = 0.1
    dt: float = DT_CONTROL
    seed: int = 0
    map_noise: float = 0.0
    meta: dict = field(default_factory=dict)
    grids: list | None = None
    grid_index: np.ndarray | None = None

    def __len__(self):
        return self.x.shape[0]

    @property
    def episode_start(self) -> np.ndarray:
        return np.arange(len(self)) - self.t

    def subset(self, idx) -> "Dataset":
        """Rows ``idx``; must keep whole episodes (history lookups stay valid)."""
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.u[idx], self.x_next[idx], self.t[idx],
                       None if self.maps is None else self.maps[idx], self.grid, self.L,
                       self.resolution, self.dt, self.seed, self.map_noise, dict(self.meta),
                       self.grids, None if self.grid_index is None else self.grid_index[idx])

    def episode_ids(self) -> np.ndarray:
        return np.cumsum(self.t == 0) - 1

    def local_maps(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        if self.maps is not None:
            return self.maps[idx]
        poses = self.x[idx][:, [6, 7, 8, 9]]
        if self.grid_index is None:
            m, valid = crop_batch(self.grid, poses, self.L)
        else:
            m = np.empty((idx.size, self.L, self.L), np.float32)
            valid = np.ones(idx.size, bool)
            gi = self.grid_index[idx]
            for g in np.unique(gi):
                sel = gi == g
                m[sel], valid[sel] = crop_batch(self.grids[g], poses[sel], self.L)
        if not np.all(valid):
            raise ValueError("dataset pose outside terrain")
        if self.map_noise > 0:
            for r, k in enumerate(idx):
                rng = np.random.default_rng([self.seed, int(k)])
                m[r] += rng.normal(0.0, self.map_noise, m[r].shape).astype(m.dtype)
        return m

    def history(self, idx, H: int):
        """``(xd (n, H, 6), u (n, H, 2))`` oldest -> newest, padded at episode start."""
        idx = np.asarray(idx)
        lag = np.arange(H - 1, -1, -1)
        rows = np.maximum(idx[:, None] - lag[None, :], (idx - self.t[idx])[:, None])
        return self.x[rows, :6], self.u[rows]

    def validate(self, v_max: float = 10.0) -> None:
        """Every tuple finite, attitude guarded, pose change bounded by one step of motion."""
        for name in ("x", "u", "x_next"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite {name}")
        for a in (self.x, self.x_next):
            if np.any(np.abs(a[:, 10]) >= math.pi / 2 - GIMBAL_EPS):
                raise ValueError("pitch outside gimbal guard")
        step = np.linalg.norm(self.x_next[:, 6:9] - self.x[:, 6:9], axis=1)
        if np.any(step > 3 * v_max * self.dt):
            raise ValueError("position jump larger than physically reachable")
        if np.any(self.t < 0) or (len(self) and self.t[0] != 0):
            raise ValueError("bad episode indexing")

    def delta_dyn(self) -> np.ndarray:
        return self.x_next[:, :6] - self.x[:, :6]


def concat(datasets) -> Dataset:
    """Join datasets; maps are materialized only if some part already stores them."""
    ds = list(datasets)
    maps, grids, gidx = None, None, None
    first = ds[0]
    if any(d.maps is not None for d in ds):
        maps = np.concatenate([d.local_maps(np.arange(len(d))) for d in ds])
    elif len({id(d.grid) for d in ds}) > 1 or any(d.grid_index is not None for d in ds):
        grids, parts = [], []
        for d in ds:
            own = d.grids if d.grid_index is not None else [d.grid]
            local = d.grid_index if d.grid_index is not None else np.zeros(len(d), np.int64)
            ids = []
            for g in own:
                hit = [k for k, h in enumerate(grids) if h is g]
                if not hit:
                    grids.append(g)
                ids.append(hit[0] if hit else len(grids) - 1)
            parts.append(np.asarray(ids, np.int64)[local])
        gidx = np.concatenate(parts)
    return Dataset(np.concatenate([d.x for d in ds]), np.concatenate([d.u for d in ds]),
                   np.concatenate([d.x_next for d in ds]), np.concatenate([d.t for d in ds]),
                   maps, first.grid if maps is None and grids is None else None, first.L,
                   first.resolution, first.dt, first.seed,
                   0.0 if maps is not None else first.map_noise,
                   {"parts": [d.meta for d in ds]}, grids, gidx)


# ---------------------------------------------------------------------------
# excitation policies

class _RandomWalk:
    def __init__(self, rng, p, sd=0.08, sv=0.6):
        self.rng, self.p, self.sd, self.sv = rng, p, sd, sv

    def reset(self, v0):
        self.d = self.rng.uniform(-0.3, 0.3) * self.p.delta_max
        self.v = v0

    def __call__(self, st):
        r, p = self.rng, self.p
        if r.uniform() < 0.03:
            self.v = r.uniform(0, p.v_max)
        self.d = float(np.clip(self.d + r.normal(0, self.sd), -p.delta_max, p.delta_max))
        self.v = float(np.clip(self.v + r.normal(0, self.sv), 0.0, p.v_max))
        return self.d, self.v


class _Sinusoid:
    def __init__(self, rng, p):
        self.rng, self.p = rng, p

    def reset(self, v0):
        r = self.rng
        self.k = 0
        self.per = r.uniform(1.5, 8.0)
        self.amp = r.uniform(0.1, 1.0) * self.p.delta_max
        self.ph = r.uniform(0, 2 * np.pi)
        self.v0 = r.uniform(1.0, self.p.v_max)
        self.vper = r.uniform(4.0, 15.0)

    def __call__(self, st):
        t = self.k * DT_CONTROL
        self.k += 1
        d = self.amp * math.sin(2 * np.pi * t / self.per + self.ph)
        v = self.v0 * (0.75 + 0.25 * math.sin(2 * np.pi * t / self.vper))
        return float(d), float(np.clip(v, 0, self.p.v_max))


class _ScriptedLaps:
    """Pure pursuit on a weaving offset of the track centreline."""

    def __init__(self, rng, p, track: StadiumTrack):
        self.rng, self.p, self.track = rng, p, track

    def reset(self, v0):
        r = self.rng
        self.v = r.uniform(3.0, 0.95 * self.p.v_max)
        self.off_amp = r.uniform(0.0, 0.4) * self.track.width
        self.off_per = r.uniform(15.0, 60.0)
        self.off0 = r.uniform(0, 2 * np.pi)

    def __call__(self, st: SimState):
        x = st.x
        s, _ = self.track.project(x[6], x[7])
        look = s[0] + max(4.0, 0.8 * abs(x[0]))
        px, py, ph = self.track.point(np.array([look]))
        off = self.off_amp * math.sin(2 * np.pi * look / self.off_per + self.off0)
        tx, ty = px[0] - off * math.sin(ph[0]), py[0] + off * math.cos(ph[0])
        dx, dy = tx - x[6], ty - x[7]
        alpha = math.atan2(dy, dx) - x[9]
        alpha = math.atan2(math.sin(alpha), math.cos(alpha))
        ld = math.hypot(dx, dy)
        d = math.atan2(2 * self.p.wheelbase * math.sin(alpha), ld)
        if self.rng.uniform() < 0.05:
            self.v = float(np.clip(self.v + self.rng.normal(0, 1.0), 2.0, self.p.v_max))
        return float(np.clip(d, -self.p.delta_max, self.p.delta_max)), self.v


def _spawn(rng, grid, sim, policy, track, margin):
    if policy == "scripted-laps":
        s = rng.uniform(0, track.length)
        off = rng.uniform(-0.3, 0.3) * track.width
        px, py, ph = track.point(np.array([s]))
        x = px[0] - off * math.sin(ph[0])
        y = py[0] + off * math.cos(ph[0])
        return x, y, ph[0] + rng.normal(0, 0.1)
    xmin, xmax, ymin, ymax = grid.extent
    return (rng.uniform(xmin + margin, xmax - margin), rng.uniform(ymin + margin, ymax - margin),
            rng.uniform(-np.pi, np.pi))


def collect_dataset(grid: ElevationGrid, policy: str, n_steps: int, seed: int = 0,
                    sim: Simulator | None = None, L: int = DEFAULT_L,
                    max_episode: int = 200, settle_steps: int = 5,
                    track: StadiumTrack | None = None, map_noise: float = 0.0,
                    store_maps: bool = False) -> Dataset:
    """Drive the simulator with an excitation policy and log transitions.

    Episodes end after a rollover (that transition is kept), when the next
    crop would leave the map, or after ``max_episode`` steps. Deterministic for a fixed seed.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    sim = sim or Simulator(grid)
    p = sim.params
    if policy == "scripted-laps":
        if track is None:
            track = StadiumTrack.from_recipe(grid.recipe)
        pol = _ScriptedLaps(None, p, track)
    elif policy == "sinusoidal":
        pol = _Sinusoid(None, p)
    else:
        pol = _RandomWalk(None, p)
    rng = np.random.default_rng(seed)
    pol.rng = rng
    margin = L * grid.resolution / math.sqrt(2) + 1.0
    xs, us, xn, ts = [], [], [], []
    st, t_ep = None, 0
    while len(xs) < n_steps:
        if st is None:
            for _ in range(100):
                x0, y0, psi0 = _spawn(rng, grid, sim, policy, track, margin)
                v0 = rng.uniform(0.0, 0.7 * p.v_max)
                try:
                    st = sim.initial_state(x0, y0, psi0, v0)
                    for _ in range(settle_steps):
                        st = sim.control_step(st, (0.0, v0))
                except (ValueError, NumericalDivergence):
                    st = None
                    continue
                if not st.rolled_over() and grid.contains(st.x[6], st.x[7], margin):
                    break
                st = None
            if st is None:
                raise RuntimeError("could not find a valid spawn pose")
            pol.reset(v0)
            t_ep = 0
        u = pol(st)
        try:
            nxt = sim.control_step(st, u)
        except NumericalDivergence:
            st = None
            continue
        if (not grid.contains(nxt.x[6], nxt.x[7], margin)
                or abs(nxt.x[10]) >= math.pi / 2 - GIMBAL_EPS):
            st = None
            continue
        xs.append(st.x)
        us.append(u)
        xn.append(nxt.x)
        ts.append(t_ep)
        t_ep += 1
        # the transition into a rollover is kept as the episode's last sample
        st = None if t_ep >= max_episode or nxt.rolled_over() else nxt
    ds = Dataset(np.array(xs, float).reshape(-1, 12), np.array(us, float).reshape(-1, 2),
                 np.array(xn, float).reshape(-1, 12), np.array(ts, np.int64), None, grid, L,
                 grid.resolution, sim.dt_control, seed, map_noise,
                 {"policy": policy, "params_hash": p.hash(), "recipe": grid.recipe,
                  "terrain_seed": grid.seed})
    if store_maps:
        ds.maps = ds.local_maps(np.arange(len(ds)))
        ds.map_noise = 0.0
    return ds


# ---------------------------------------------------------------------------
# JSON-lines dataset files

def save_dataset_jsonl(path, ds: Dataset, terrain_hash: str | None = None, chunk: int = 512):
    header = {"kind": "dataset", "dt": ds.dt, "L": ds.L, "resolution": ds.resolution,
              "params_hash": ds.meta.get("params_hash"), "seed": ds.seed,
              "policy": ds.meta.get("policy"), "terrain_sha256": terrain_hash,
              "n": len(ds)}
    with kio.JsonlWriter(path, header) as w:
        for start in range(0, len(ds), chunk):
            idx = np.arange(start, min(start + chunk, len(ds)))
            maps = ds.local_maps(idx)
            for r, k in enumerate(idx):
                w.write({"t": int(ds.t[k]), "x": ds.x[k].tolist(), "u": ds.u[k].tolist(),
                         "M": [float(v) for v in maps[r].ravel()],
                         "x_next": ds.x_next[k].tolist()})
    return header


def load_dataset_jsonl(path) -> Dataset:
    recs = kio.read_jsonl(path)
    if not recs or recs[0].get("kind") != "dataset":
        raise ValueError(f"{path}: missing dataset header")
    hdr, rows = recs[0], recs[1:]
    L = int(hdr["L"])
    maps = np.array([r["M"] for r in rows], np.float32).reshape(-1, L, L)
    return Dataset(np.array([r["x"] for r in rows], float).reshape(-1, 12),
                   np.array([r["u"] for r in rows], float).reshape(-1, 2),
                   np.array([r["x_next"] for r in rows], float).reshape(-1, 12),
                   np.array([r["t"] for r in rows], np.int64), maps, None, L,
                   float(hdr["resolution"]), float(hdr["dt"]), int(hdr.get("seed", 0)), 0.0,
                   {"header": hdr, "sha256": kio.sha256_file(path)})


def dataset_hash(ds: Dataset) -> str:
    """Content hash of the numeric tuples (maps excluded when cropped on demand)."""
    import hashlib
    h = hashlib.sha256()
    for a in (ds.x, ds.u, ds.x_next, ds.t):
        h.update(np.ascontiguousarray(a).tobytes())
    if ds.maps is not None:
        h.update(np.ascontiguousarray(ds.maps).tobytes())
    h.update(json.dumps(ds.meta.get("recipe", {}), sort_keys=True, default=str).encode())
    return h.hexdigest()
