"""Open-loop multi-step prediction error and uncertainty comparisons."""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .model import KinoDynModel, encode_all, uncertainty
from .se3 import wrap_angle
from .terrain import ElevationGrid

STATE_NAMES = ("vx", "vy", "vz", "wx", "wy", "wz", "x", "y", "z", "psi", "theta", "phi")
ANGLES = (9, 10, 11)


def multistep_starts(ds: Dataset, n_starts: int, T: int, seed: int = 0) -> np.ndarray:
    """Random rows whose episode continues for at least ``T`` more steps."""
    n = len(ds)
    if n < T:
        return np.zeros(0, np.int64)
    k = np.arange(n - T + 1)
    ok = ds.t[k + T - 1] == ds.t[k] + T - 1
    cand = k[ok]
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(cand, size=min(n_starts, cand.size), replace=False))


def state_error(pred, truth) -> np.ndarray:
    err = np.abs(pred - truth)
    for a in ANGLES:
        err[..., a] = np.abs(wrap_angle(pred[..., a] - truth[..., a]))
    return err


def eval_multistep(model, ds: Dataset, n_starts: int = 200, T: int = 10, seed: int = 0,
                   grid: ElevationGrid | None = None, chunk: int = 256):
    """Roll the model open-loop with the logged controls from on-policy starts.

    Returns ``{"mean": (T, 12), "std": (T, 12), "errors": (n, T, 12), "starts": idx}``;
    step ``j`` compares against the simulator state after ``j + 1`` actions.
    ``model`` is anything with ``rollout_batch(x0, hist, grid, U)`` and ``cfg.H``.
    """
    grid = grid or ds.grid
    starts = multistep_starts(ds, n_starts, T, seed)
    H = model.cfg.H
    errs = np.zeros((starts.size, T, 12))
    valid = np.ones(starts.size, bool)
    for s in range(0, starts.size, chunk):
        idx = starts[s:s + chunk]
        xd, u = ds.history(idx, H)
        past = (xd[:, :H - 1], u[:, :H - 1])
        rows = idx[:, None] + np.arange(T)[None, :]
        r = model.rollout_batch(ds.x[idx], past, grid, ds.u[rows], ds.dt)
        errs[s:s + len(idx)] = state_error(r.states, ds.x_next[rows])
        valid[s:s + len(idx)] = r.valid
    e = errs[valid]
    return {"mean": e.mean(0), "std": e.std(0), "errors": e, "starts": starts[valid],
            "n_invalid": int((~valid).sum())}


def scaled_terrain(grid: ElevationGrid, factor: float) -> ElevationGrid:
    """Same terrain with its relief scaled about zero."""
    return ElevationGrid(grid.origin, grid.resolution, grid.heights * factor,
                         dict(grid.recipe, amplitude_scale=factor), grid.seed)


def paired_uncertainty(model: KinoDynModel, ds: Dataset, idx, factor: float = 3.0):
    """Mean UC for the same states on the dataset terrain and on a relief-scaled copy.

    On the scaled terrain the CoM is lifted with the ground beneath it so its
    ride height over the terrain is unchanged; only the surrounding relief
    differs. Returns ``(uc_in, uc_out)`` per state.
    """
    idx = np.asarray(idx)
    H = model.cfg.H
    xd, u = ds.history(idx, H)
    e = ds.x[idx, 9:12]
    pin = model.predict_ensemble(xd, u, e, feat=encode_all(model, ds, idx))
    big = scaled_terrain(ds.grid, factor)
    from .terrain import crop_batch, sample_height
    poses = ds.x[idx][:, [6, 7, 8, 9]].copy()
    poses[:, 2] += (factor - 1.0) * sample_height(ds.grid, poses[:, 0], poses[:, 1])
    maps, ok = crop_batch(big, poses, model.cfg.L)
    if not ok.all():
        raise ValueError("scaled-terrain crop out of bounds")
    pout = model.predict_ensemble(xd, u, e, maps=maps)
    return uncertainty(pin)[2], uncertainty(pout)[2]
