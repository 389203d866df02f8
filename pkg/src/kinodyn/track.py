"""Closed-loop rally track: centreline geometry, terrain and 2-D costmap."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

RALLY_DEFAULTS = {
    "straight": 100.0,       # m, length of each straight
    "radius": 16.0,          # m, hairpin centreline radius
    "width": 10.0,           # m, drivable width
    "margin": 8.0,           # m, terrain beyond the outer track edge
    "roughness": 0.04,       # m, background value-noise amplitude
    # bump-field sectors as (straight index 0|1, s_start, s_end) in metres
    "sectors": [[0, 30.0, 80.0], [1, 20.0, 75.0]],
    "amplitude": 0.35,
    "radius_range": [0.6, 1.6],
    "density": 4.0,
    "dip_fraction": 0.3,
    "min_amp_frac": 0.3,
    # staggered boulder chains as (straight index, s_start, centre offset);
    # a chain is n_boulders Gaussians spaced chain_spacing apart, alternating
    # +-chain_stagger about the centre offset
    "chains": [[0, 20.0, 0.0], [0, 62.0, -1.5], [1, 22.0, 1.5], [1, 64.0, 0.0]],
    "chain_amplitude": 0.7,
    "chain_radius": 0.7,
    "chain_spacing": 3.5,
    "chain_stagger": 0.8,
    "chain_boulders": 4,
}


@dataclass(frozen=True)
class StadiumTrack:
    """Two straights joined by semicircular hairpins, driven counter-clockwise.

    The start line is at ``(0, -radius)`` heading +x.
    """

    straight: float
    radius: float
    width: float

    @classmethod
    def from_recipe(cls, recipe: dict) -> "StadiumTrack":
        return cls(float(recipe["straight"]), float(recipe["radius"]), float(recipe["width"]))

    @property
    def length(self) -> float:
        return 2 * self.straight + 2 * np.pi * self.radius

    def start_pose(self):
        return np.array([0.0, -self.radius]), 0.0

    def project(self, x, y):
        """Arc-length progress ``s`` in [0, length) and signed lateral offset (left +)."""
        return _project(np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(y, float)),
                        self.straight, self.radius)

    def point(self, s):
        """Centreline point and heading at arc length ``s``."""
        Ls, R = self.straight, self.radius
        s = np.mod(np.asarray(s, float), self.length)
        half = np.pi * R
        x = np.empty_like(s)
        y = np.empty_like(s)
        h = np.empty_like(s)
        a = s < Ls
        x[a], y[a], h[a] = s[a], -R, 0.0
        b = (s >= Ls) & (s < Ls + half)
        ang = (s[b] - Ls) / R - np.pi / 2
        x[b], y[b], h[b] = Ls + R * np.cos(ang), R * np.sin(ang), ang + np.pi / 2
        c = (s >= Ls + half) & (s < 2 * Ls + half)
        x[c], y[c], h[c] = Ls - (s[c] - Ls - half), R, np.pi
        d = s >= 2 * Ls + half
        ang = (s[d] - 2 * Ls - half) / R + np.pi / 2
        x[d], y[d], h[d] = R * np.cos(ang), R * np.sin(ang), ang + np.pi / 2
        return x, y, np.angle(np.exp(1j * h))

    def straight_point(self, index: int, s_along: float, offset: float = 0.0):
        """World point ``s_along`` metres down straight ``index`` with a left offset."""
        if index == 0:
            return np.array([s_along, -self.radius + offset])
        return np.array([self.straight - s_along, self.radius - offset])


@numba.njit(cache=True)
def _project(xs, ys, Ls, R):
    n = xs.shape[0]
    s = np.empty(n)
    d = np.empty(n)
    L = 2 * Ls + 2 * np.pi * R
    for k in range(n):
        x, y = xs[k], ys[k]
        if 0.0 <= x <= Ls:
            if y < 0:
                s[k] = x
                d[k] = y + R
            else:
                s[k] = Ls + np.pi * R + (Ls - x)
                d[k] = R - y
        elif x > Ls:
            ang = np.arctan2(y, x - Ls)
            s[k] = Ls + (ang + np.pi / 2) * R
            d[k] = R - np.hypot(x - Ls, y)
        else:
            ang = np.arctan2(y, x)  # in (pi/2, 3pi/2) wrapped
            if ang < 0:
                ang += 2 * np.pi
            s[k] = 2 * Ls + np.pi * R + (ang - np.pi / 2) * R
            d[k] = R - np.hypot(x, y)
        if s[k] >= L:
            s[k] -= L
    return s, d


def rally_track_heights(recipe: dict, rng: np.random.Generator):
    from .terrain import _add_bumps, _value_noise

    trk = StadiumTrack.from_recipe(recipe)
    res = float(recipe["resolution"])
    pad = trk.width / 2 + float(recipe["margin"])
    x0, x1 = -trk.radius - pad, trk.straight + trk.radius + pad
    y0, y1 = -trk.radius - pad, trk.radius + pad
    nx = int(round((x1 - x0) / res)) + 1
    ny = int(round((y1 - y0) / res)) + 1
    xs = x0 + np.arange(nx) * res
    ys = y0 + np.arange(ny) * res
    z = recipe["roughness"] * _value_noise(rng, xs, ys, 3, 4.0, 0.5)
    hw = trk.width / 2
    for idx, s0, s1 in recipe["sectors"]:
        a = trk.straight_point(int(idx), s0)
        b = trk.straight_point(int(idx), s1)
        region = (min(a[0], b[0]), max(a[0], b[0]), a[1] - hw - 1.0, a[1] + hw + 1.0)
        _add_bumps(z, xs, ys, rng, region, recipe["amplitude"], recipe["radius_range"],
                   recipe["density"], recipe["dip_fraction"], recipe["min_amp_frac"])
    feats = list(recipe.get("features", []))
    for idx, s0, c in recipe.get("chains", []):
        for k in range(int(recipe["chain_boulders"])):
            off = c + recipe["chain_stagger"] * (1 if k % 2 == 0 else -1)
            feats.append([idx, s0 + k * recipe["chain_spacing"], off,
                          recipe["chain_amplitude"], recipe["chain_radius"]])
    for extra in feats:
        # explicit Gaussian features: [straight, s_along, offset, amplitude, radius]
        idx, s_along, off, amp, rad = extra
        cx, cy = trk.straight_point(int(idx), s_along, off)
        z += amp * np.exp(-((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) / (2 * rad * rad))
    return (x0, y0), z


@dataclass(frozen=True)
class Costmap2D:
    """{0, 1} track-membership grid aligned with an elevation grid (1 = off track)."""

    origin: tuple
    resolution: float
    cells: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.cells, dtype=np.uint8)
        c.setflags(write=False)
        object.__setattr__(self, "cells", c)

    def lookup(self, x, y) -> np.ndarray:
        """Nearest-cell lookup; anything outside the grid counts as off track."""
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        ix = np.rint((x - self.origin[0]) / self.resolution)
        iy = np.rint((y - self.origin[1]) / self.resolution)
        ny, nx = self.cells.shape
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & np.isfinite(ix) & np.isfinite(iy)
        out = np.ones(np.broadcast(x, y).shape, dtype=np.float64)
        ixs = np.where(inside, ix, 0).astype(np.int64)
        iys = np.where(inside, iy, 0).astype(np.int64)
        out[inside] = self.cells[iys[inside], ixs[inside]]
        return out


def make_costmap(grid, track: StadiumTrack | None = None) -> Costmap2D:
    """Costmap for ``grid``: the stadium track if given, else everything free."""
    if track is None:
        return Costmap2D(grid.origin, grid.resolution, np.zeros(grid.heights.shape, np.uint8))
    xs = grid.origin[0] + np.arange(grid.width) * grid.resolution
    ys = grid.origin[1] + np.arange(grid.height) * grid.resolution
    X, Y = np.meshgrid(xs, ys)
    _, d = track.project(X.ravel(), Y.ravel())
    cells = (np.abs(d) > track.width / 2).reshape(X.shape).astype(np.uint8)
    return Costmap2D(grid.origin, grid.resolution, cells)
