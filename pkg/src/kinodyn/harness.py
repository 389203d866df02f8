"""Closed-loop episodes, experiment configs and paired-seed reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io as kio
from .model import HistoryBuffer, KinoDynModel
from .mppi import Controller, ControllerConfig, side_slip, zetas
from .se3 import wrench_arrays
from .simulator import NumericalDivergence, Simulator, VehicleParams
from .terrain import ElevationGrid, generate_terrain
from .track import Costmap2D, StadiumTrack, make_costmap

BREACH_TERMS = ("beta", "theta", "phi", "zeta1", "zeta2", "zeta3")
END_REASONS = ("lap", "rollover", "boundary_exit", "step_limit")


@dataclass
class ExperimentConfig:
    """Everything one closed-loop experiment needs; paths are relative to the config file."""

    name: str = "experiment"
    terrain: str | None = None
    costmap: str | None = None
    checkpoint: str | None = None
    hashes: dict = field(default_factory=dict)   # expected artifact hashes by role
    vehicle: dict = field(default_factory=dict)
    controller: dict = field(default_factory=dict)
    track: dict | None = None                    # stadium geometry; else the terrain recipe's
    max_steps: int = 600
    n_seeds: int = 10
    laps: float = 1.0
    start_offset: float = 1.0     # m, spawn lateral offset drawn in [-a, a] per seed
    start_speed: float = 0.0
    exit_margin: float = 2.0      # m beyond the track edge that ends the episode
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        known.setdefault("base_dir", str(base_dir))
        return cls(**known)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def path(self, rel):
        return None if rel is None else Path(self.base_dir) / rel

    def controller_config(self, seed: int) -> ControllerConfig:
        c = ControllerConfig.from_dict(self.controller)
        c.seed = int(seed)
        return c


@dataclass
class Resources:
    grid: ElevationGrid
    cmap: Costmap2D
    track: StadiumTrack
    model: object
    params: VehicleParams
    hashes: dict


def load_resources(cfg: ExperimentConfig, model=None) -> Resources:
    """Load and hash-check every referenced artifact.

    ``model`` overrides the checkpoint (test doubles need only ``rollout_batch``
    and ``cfg.H``). Raises :class:`kio.ManifestMismatch` on any hash mismatch.
    """
    hashes = {}
    for role in ("terrain", "costmap", "checkpoint"):
        p = cfg.path(getattr(cfg, role))
        if p is None:
            continue
        if not p.exists():
            raise FileNotFoundError(f"{role} artifact {p} does not exist")
        hashes[role] = kio.artifact_hash(p)
        want = cfg.hashes.get(role)
        if want is not None and want != hashes[role]:
            raise kio.ManifestMismatch(f"{role} {p}: hash {hashes[role][:12]} != expected {want[:12]}")
    if cfg.terrain is None:
        raise ValueError("experiment config needs a terrain")
    grid = kio.load_terrain(cfg.path(cfg.terrain))
    track_recipe = cfg.track or (grid.recipe if grid.recipe.get("name") == "rally-track" else None)
    if track_recipe is None:
        raise ValueError("no track geometry: give 'track' or use a rally-track terrain")
    track = StadiumTrack.from_recipe(track_recipe)
    if cfg.costmap is not None:
        cmap = kio.load_costmap(cfg.path(cfg.costmap))
        hdr = json.loads(cfg.path(cfg.costmap).read_text())
        if hdr.get("terrain_sha256") not in (None, hashes["terrain"]):
            raise kio.ManifestMismatch("costmap was built for a different terrain")
    else:
        cmap = make_costmap(grid, track)
    if model is None:
        if cfg.checkpoint is None:
            raise ValueError("experiment config needs a checkpoint")
        model = KinoDynModel.load(cfg.path(cfg.checkpoint))
    return Resources(grid, cmap, track, model, VehicleParams(**cfg.vehicle), hashes)


@dataclass
class EpisodeMetrics:
    seed: int
    reason: str
    lap_completed: bool
    steps: int
    progress: float                 # m along the centreline
    mean_speed: float
    max_speed: float
    boundary_violations: int        # entries into off-track cells
    rollovers: int
    breaches: dict                  # ticks over each cost-term threshold
    zeta_integrals: list            # integral of |zeta_j| dt
    fallbacks: int
    compute_ms_mean: float = 0.0
    compute_ms_max: float = 0.0

    TIMING = ("compute_ms_mean", "compute_ms_max")

    def deterministic_dict(self) -> dict:
        d = asdict(self)
        for k in self.TIMING:
            d.pop(k)
        return d

    def flat(self) -> dict:
        d = self.deterministic_dict()
        for k in BREACH_TERMS:
            d[f"breach_{k}"] = d["breaches"][k]
        for j, v in enumerate(d.pop("zeta_integrals")):
            d[f"zeta{j + 1}_integral"] = v
        d.pop("breaches")
        return d


def _f(a):
    return [float(v) for v in np.ravel(a)]


def run_episode(cfg: ExperimentConfig, seed: int, res: Resources | None = None,
                log_path=None, policy=None):
    """Closed loop: one controller tick, then one simulator control step, until a stop condition.

    ``policy(x, hist) -> u`` replaces the MPPI controller when given. Returns
    ``(EpisodeMetrics, records)``; with ``log_path`` the records are also
    streamed to a JSON-lines trajectory log (no wall-clock fields, so logs are
    byte-identical across repeats).
    """
    res = res or load_resources(cfg)
    ccfg = cfg.controller_config(seed)
    sim = Simulator(res.grid, res.params, dt_control=ccfg.dt)
    inertial = res.params.inertial()
    ctrl = None if policy is not None else Controller(res.model, ccfg, res.cmap, inertial, res.track)
    cw = ccfg.costs
    rng = np.random.default_rng([int(seed), 7])
    (x0, y0), psi0 = res.track.start_pose()
    off = float(rng.uniform(-cfg.start_offset, cfg.start_offset)) if cfg.start_offset > 0 else 0.0
    st = sim.initial_state(x0 - off * math.sin(psi0), y0 + off * math.cos(psi0), psi0,
                           cfg.start_speed)
    hist = HistoryBuffer(res.model.cfg.H if res.model is not None else 1)
    writer = None
    if log_path is not None:
        writer = kio.JsonlWriter(log_path, {"kind": "trajectory", "name": cfg.name, "seed": int(seed),
                                            "config": cfg.to_dict(), "config_sha256": cfg.sha256(),
                                            "inputs": res.hashes})
    records = []
    L = res.track.length
    s_prev = float(res.track.project(st.x[6], st.x[7])[0][0])
    progress = 0.0
    off_track = bool(res.cmap.lookup(st.x[6], st.x[7]) > 0)
    n_viol, n_fallback = 0, 0
    breaches = dict.fromkeys(BREACH_TERMS, 0)
    zint = np.zeros(3)
    speeds, times = [], []
    reason = "step_limit"
    k = 0
    try:
        for k in range(1, cfg.max_steps + 1):
            x = st.x
            if ctrl is not None:
                u, diag = ctrl.control_tick(x, hist, res.grid)
                times.append(diag.pop("compute_ms"))
                n_fallback += int(diag["fallback"])
            else:
                u, diag = np.asarray(policy(x, hist), float), {}
            try:
                st_new = sim.control_step(st, u)
            except NumericalDivergence as e:
                raise NumericalDivergence(f"{cfg.name} seed {seed} tick {k}: {e}") from e
            hist.push(x[:6], u)
            xn = st_new.x
            f, m = wrench_arrays(x[:3], x[3:6], xn[:3], xn[3:6], inertial, ccfg.dt)
            z = zetas(xn, f, m, inertial, cw.gravity_in_zeta1)
            beta = float(side_slip(xn[0], xn[1]))
            over = {"beta": abs(beta) > cw.beta_th, "theta": abs(xn[10]) > cw.theta_th,
                    "phi": abs(xn[11]) > cw.phi_th}
            for j in range(3):
                over[f"zeta{j + 1}"] = abs(z[j]) > cw.zeta_th[j]
            for key, hit in over.items():
                breaches[key] += int(hit)
            zint += np.abs(z) * ccfg.dt
            speeds.append(float(xn[0]))
            s_new, d_new = res.track.project(xn[6], xn[7])
            ds = float(s_new[0]) - s_prev
            progress += ds - L * round(ds / L)
            s_prev = float(s_new[0])
            now_off = bool(res.cmap.lookup(xn[6], xn[7]) > 0)
            n_viol += int(now_off and not off_track)
            off_track = now_off
            rec = {"k": k, "x": _f(x), "u": _f(u), "x_next": _f(xn)}
            rec.update({key: diag[key] for key in ("min_cost", "mean_cost", "ess", "n_infeasible",
                                                    "fallback", "member_hist") if key in diag})
            records.append(rec)
            if writer:
                writer.write(rec)
            st = st_new
            if st.rolled_over():
                reason = "rollover"
                break
            if (abs(float(d_new[0])) > res.track.width / 2 + cfg.exit_margin
                    or not res.grid.contains(xn[6], xn[7], margin=5.0)):
                reason = "boundary_exit"
                break
            if progress >= cfg.laps * L:
                reason = "lap"
                break
        sp = np.array(speeds) if speeds else np.zeros(1)
        metrics = EpisodeMetrics(
            seed=int(seed), reason=reason, lap_completed=reason == "lap", steps=k,
            progress=float(progress), mean_speed=float(sp.mean()), max_speed=float(sp.max()),
            boundary_violations=n_viol, rollovers=int(reason == "rollover"), breaches=breaches,
            zeta_integrals=_f(zint), fallbacks=n_fallback,
            compute_ms_mean=float(np.mean(times)) if times else 0.0,
            compute_ms_max=float(np.max(times)) if times else 0.0)
        if writer:
            writer.write({"kind": "end", "metrics": metrics.deterministic_dict()})
    finally:
        if writer:
            writer.close()
    return metrics, records


def episode_rows_from_logs(paths) -> list[dict]:
    """One flat metrics row per trajectory log (name, seed and the end-record metrics)."""
    rows = []
    for p in paths:
        recs = kio.read_jsonl(p)
        if not recs or recs[0].get("kind") != "trajectory":
            raise ValueError(f"{p} is not a trajectory log")
        end = recs[-1]
        if end.get("kind") != "end":
            raise ValueError(f"{p} has no end record (crashed episode?)")
        m = EpisodeMetrics(**end["metrics"])
        rows.append({"name": recs[0]["name"], **m.flat()})
    rows.sort(key=lambda r: (r["name"], r["seed"]))
    return rows


NUMERIC = ("lap_completed", "steps", "progress", "mean_speed", "max_speed", "boundary_violations",
           "rollovers", "fallbacks") + tuple(f"breach_{k}" for k in BREACH_TERMS) + \
    ("zeta1_integral", "zeta2_integral", "zeta3_integral")


def summarize(rows, names=None) -> dict:
    """Per-config means and totals, plus paired-seed differences against the first config."""
    names = names or sorted({r["name"] for r in rows}, key=[r["name"] for r in rows].index)
    by = {n: {r["seed"]: r for r in rows if r["name"] == n} for n in names}
    out = {"names": list(names), "per_config": {}, "paired": {}}
    for n in names:
        rs = list(by[n].values())
        out["per_config"][n] = {
            "episodes": len(rs),
            **{f"mean_{k}": float(np.mean([float(r[k]) for r in rs])) for k in NUMERIC},
            "total_rollovers": int(sum(r["rollovers"] for r in rs)),
            "total_boundary_violations": int(sum(r["boundary_violations"] for r in rs)),
        }
    base = names[0]
    for n in names[1:]:
        seeds = sorted(set(by[base]) & set(by[n]))
        out["paired"][n] = {"seeds": len(seeds), **{
            f"diff_{k}": float(np.mean([float(by[n][s][k]) - float(by[base][s][k]) for s in seeds]))
            if seeds else 0.0 for k in NUMERIC}}
    return out


def _csv(rows, cols) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({c: (repr(float(r[c])) if isinstance(r[c], float) else r[c]) for c in cols})
    return buf.getvalue()


PLOT_SCRIPT = """# gnuplot script: per-config means from summary.csv
set datafile separator ','
set terminal pngcairo size 900,500
set output 'summary.png'
set style data histograms
set style fill solid 0.6
set key autotitle columnhead
set multiplot layout 1,3
plot 'summary.csv' using (column('mean_mean_speed')):xtic(1) title 'mean speed'
plot 'summary.csv' using (column('total_rollovers')):xtic(1) title 'rollovers'
plot 'summary.csv' using (column('total_boundary_violations')):xtic(1) title 'violations'
unset multiplot
"""

EPISODE_PLOT = """# gnuplot script: per-episode mean speed from episodes.csv
set datafile separator ','
set terminal pngcairo size 900,500
set output 'episodes.png'
set key autotitle columnhead
plot 'episodes.csv' using (column('seed')):(column('mean_speed')) with points title 'mean speed'
"""


def write_report(rows, out_dir, names=None) -> dict:
    """CSV tables, a markdown summary and gnuplot scripts; a pure function of ``rows``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summ = summarize(rows, names)
    ep_cols = ["name", "seed", "reason"] + list(NUMERIC)
    (out / "episodes.csv").write_text(_csv(rows, ep_cols))
    s_rows = [{"name": n, **summ["per_config"][n]} for n in summ["names"]]
    s_cols = ["name", "episodes"] + [f"mean_{k}" for k in NUMERIC] + \
        ["total_rollovers", "total_boundary_violations"]
    (out / "summary.csv").write_text(_csv(s_rows, s_cols))
    p_rows = [{"name": n, **summ["paired"][n]} for n in summ["names"][1:]]
    p_cols = ["name", "seeds"] + [f"diff_{k}" for k in NUMERIC]
    (out / "paired.csv").write_text(_csv(p_rows, p_cols))
    md = [f"# Closed-loop comparison (baseline: {summ['names'][0]})", "",
          "| config | episodes | laps | mean speed | rollovers | violations | fallbacks |",
          "|---|---|---|---|---|---|---|"]
    for r in s_rows:
        md.append(f"| {r['name']} | {r['episodes']} | {r['mean_lap_completed']:.2f} | "
                  f"{r['mean_mean_speed']:.3f} | {r['total_rollovers']} | "
                  f"{r['total_boundary_violations']} | {r['mean_fallbacks']:.2f} |")
    if p_rows:
        md += ["", "Paired differences against the baseline (mean over shared seeds):", "",
               "| config | seeds | d speed | d rollovers | d violations |", "|---|---|---|---|---|"]
        for r in p_rows:
            md.append(f"| {r['name']} | {r['seeds']} | {r['diff_mean_speed']:+.3f} | "
                      f"{r['diff_rollovers']:+.2f} | {r['diff_boundary_violations']:+.2f} |")
    (out / "report.md").write_text("\n".join(md) + "\n")
    (out / "plot_summary.gp").write_text(PLOT_SCRIPT)
    (out / "plot_episodes.gp").write_text(EPISODE_PLOT)
    return summ


def _log_is_current(path, cfg: ExperimentConfig, res: Resources) -> bool:
    """A complete trajectory log written by this exact config on these exact inputs."""
    try:
        recs = kio.read_jsonl(path)
    except (OSError, ValueError):
        return False
    return (len(recs) >= 2 and recs[-1].get("kind") == "end"
            and recs[0].get("config_sha256") == cfg.sha256() and recs[0].get("inputs") == res.hashes)


def compare_experiments(configs, seeds, out_dir, resources=None, reuse=False) -> dict:
    """Run every config over the same seeds, log each episode and write the report.

    ``resources`` optionally maps config name to preloaded :class:`Resources`.
    With ``reuse`` an existing log from the same config and inputs is kept
    instead of re-driving the episode (runs are deterministic).
    """
    if len(configs) < 2:
        raise ValueError("need at least two configs to compare")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for cfg in configs:
        res = (resources or {}).get(cfg.name) or load_resources(cfg)
        for s in seeds:
            p = out / f"{cfg.name}_seed{s}.jsonl"
            if not (reuse and _log_is_current(p, cfg, res)):
                run_episode(cfg, s, res, log_path=p)
            paths.append(p)
    return write_report(episode_rows_from_logs(paths), out, [c.name for c in configs])


def closed_loop_verdict(summary: dict, baseline: str, candidate: str, speed_tol: float = 0.15) -> dict:
    """Rollover / violation / speed comparison between two summarized configs."""
    b, c = summary["per_config"][baseline], summary["per_config"][candidate]
    rb, rc = b["total_rollovers"], c["total_rollovers"]
    eb = rb + b["total_boundary_violations"]
    ec = rc + c["total_boundary_violations"]
    sb, sc = b["mean_mean_speed"], c["mean_mean_speed"]
    out = {"baseline_rollovers": rb, "candidate_rollovers": rc, "baseline_events": eb,
           "candidate_events": ec, "baseline_speed": sb, "candidate_speed": sc,
           "rollovers_halved": rb > 0 and rc <= 0.5 * rb,
           "fewer_events": ec < eb,
           "speed_within": sb > 0 and abs(sc - sb) <= speed_tol * sb}
    out["pass"] = out["rollovers_halved"] and out["fewer_events"] and out["speed_within"]
    return out


def build_terrain_and_costmap(recipe, seed: int):
    """Generated terrain plus the costmap of its track (everything free for non-track recipes)."""
    grid = generate_terrain(recipe, seed)
    track = StadiumTrack.from_recipe(grid.recipe) if grid.recipe.get("name") == "rally-track" else None
    return grid, make_costmap(grid, track)
