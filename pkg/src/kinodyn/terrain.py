"""Global elevation grids, procedural terrain recipes and local map crops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

DEFAULT_RESOLUTION = 0.1
DEFAULT_L = 65


class OutOfBounds(ValueError):
    pass


class UnknownRecipe(ValueError):
    pass


@dataclass(frozen=True)
class ElevationGrid:
    """Heights sampled at ``origin + (ix, iy) * resolution``.

    ``heights`` has shape ``(height, width)``: rows run along world y,
    columns along world x.
    """

    origin: tuple
    resolution: float
    heights: np.ndarray
    recipe: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        h = np.ascontiguousarray(self.heights, dtype=np.float64)
        if h.ndim != 2:
            raise ValueError("heights must be 2-D")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if not np.all(np.isfinite(h)):
            raise ValueError("heights must be finite")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def width(self) -> int:
        return self.heights.shape[1]

    @property
    def height(self) -> int:
        return self.heights.shape[0]

    @property
    def extent(self):
        """``(xmin, xmax, ymin, ymax)`` of the sampled area."""
        ox, oy = self.origin
        return (ox, ox + (self.width - 1) * self.resolution,
                oy, oy + (self.height - 1) * self.resolution)

    def contains(self, x, y, margin: float = 0.0):
        xmin, xmax, ymin, ymax = self.extent
        x, y = np.asarray(x), np.asarray(y)
        return (x >= xmin + margin) & (x <= xmax - margin) & (y >= ymin + margin) & (y <= ymax - margin)


@dataclass(frozen=True)
class LocalMap:
    cells: np.ndarray
    resolution: float
    center_pose: tuple

    @property
    def L(self) -> int:
        return self.cells.shape[0]


# ---------------------------------------------------------------------------
# interpolation kernels (shared by the simulator and the crop operator)

@numba.njit(cache=True, inline="always")
def bilinear(h, ox, oy, res, x, y):
    """Bilinear height; returns NaN outside the grid."""
    fx = (x - ox) / res
    fy = (y - oy) / res
    ny, nx = h.shape
    if not (fx >= 0.0 and fy >= 0.0 and fx <= nx - 1 and fy <= ny - 1):
        return np.nan
    ix = min(int(fx), nx - 2)
    iy = min(int(fy), ny - 2)
    tx = fx - ix
    ty = fy - iy
    h00 = h[iy, ix]
    h01 = h[iy, ix + 1]
    h10 = h[iy + 1, ix]
    h11 = h[iy + 1, ix + 1]
    return (h00 * (1 - tx) + h01 * tx) * (1 - ty) + (h10 * (1 - tx) + h11 * tx) * ty


@numba.njit(cache=True, inline="always")
def bilinear_grad(h, ox, oy, res, x, y):
    """Height and its x/y slope of the bilinear patch; NaN outside."""
    fx = (x - ox) / res
    fy = (y - oy) / res
    ny, nx = h.shape
    if not (fx >= 0.0 and fy >= 0.0 and fx <= nx - 1 and fy <= ny - 1):
        return np.nan, np.nan, np.nan
    ix = min(int(fx), nx - 2)
    iy = min(int(fy), ny - 2)
    tx = fx - ix
    ty = fy - iy
    h00 = h[iy, ix]
    h01 = h[iy, ix + 1]
    h10 = h[iy + 1, ix]
    h11 = h[iy + 1, ix + 1]
    z = (h00 * (1 - tx) + h01 * tx) * (1 - ty) + (h10 * (1 - tx) + h11 * tx) * ty
    dzdx = ((h01 - h00) * (1 - ty) + (h11 - h10) * ty) / res
    dzdy = ((h10 - h00) * (1 - tx) + (h11 - h01) * tx) / res
    return z, dzdx, dzdy


@numba.njit(cache=True)
def _sample_many(h, ox, oy, res, xs, ys, out):
    for k in range(xs.shape[0]):
        out[k] = bilinear(h, ox, oy, res, xs[k], ys[k])


@numba.njit(cache=True)
def _crop_batch(h, ox, oy, res, poses, L, cell, out, valid):
    c = (L - 1) / 2.0
    for n in range(poses.shape[0]):
        px, py, pz, psi = poses[n, 0], poses[n, 1], poses[n, 2], poses[n, 3]
        cs, sn = math.cos(psi), math.sin(psi)
        ok = True
        for i in range(L):
            by = (i - c) * cell
            for j in range(L):
                bx = (j - c) * cell
                z = bilinear(h, ox, oy, res, px + cs * bx - sn * by, py + sn * bx + cs * by)
                if z != z:
                    ok = False
                    z = 0.0
                out[n, i, j] = z - pz
        valid[n] = ok


def sample_height(grid: ElevationGrid, x, y):
    """Bilinear height at world ``(x, y)``; scalar or array inputs."""
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64)).ravel()
    ys = np.atleast_1d(np.asarray(y, dtype=np.float64)).ravel()
    out = np.empty(xs.shape[0])
    _sample_many(grid.heights, grid.origin[0], grid.origin[1], grid.resolution, xs, ys, out)
    if np.any(np.isnan(out)):
        raise OutOfBounds("query outside grid extent")
    if np.ndim(x) == 0 and np.ndim(y) == 0:
        return float(out[0])
    return out.reshape(np.broadcast(np.asarray(x), np.asarray(y)).shape)


def crop_batch(grid: ElevationGrid, poses, L: int = DEFAULT_L,
               cell: float | None = None, dtype=np.float32):
    """Yaw-aligned relative-height crops for many ``(x, y, z, psi)`` poses.

    Returns ``(maps (N, L, L), valid (N,))``; crops that leave the grid are
    zero-filled and flagged invalid instead of raising.
    """
    if L % 2 != 1:
        raise ValueError("L must be odd")
    poses = np.ascontiguousarray(np.atleast_2d(poses), dtype=np.float64)
    n = poses.shape[0]
    out = np.empty((n, L, L), dtype=dtype)
    valid = np.empty(n, dtype=np.bool_)
    _crop_batch(grid.heights, grid.origin[0], grid.origin[1], grid.resolution, poses, L,
                grid.resolution if cell is None else cell, out, valid)
    return out, valid


def crop_local_map(grid: ElevationGrid, pose, L: int = DEFAULT_L) -> LocalMap:
    """Local map centred at the CoM, aligned with yaw, heights relative to CoM.

    ``pose`` may be a :class:`kinodyn.se3.Pose` or any ``(x, y, z, psi, ...)``
    sequence. Cell ``(i, j)`` lies at body offset ``((j - c) res, (i - c) res)``.
    """
    if hasattr(pose, "p"):
        x, y, z = pose.p
        psi = pose.e[0]
    else:
        x, y, z, psi = (float(v) for v in list(pose)[:4])
    maps, valid = crop_batch(grid, [[x, y, z, psi]], L, dtype=np.float64)
    if not valid[0]:
        raise OutOfBounds("local map crop exceeds the global map")
    return LocalMap(maps[0], grid.resolution, (x, y, z, psi))


def add_observation_noise(local: LocalMap, sigma: float, seed: int) -> LocalMap:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return LocalMap(local.cells.copy(), local.resolution, local.center_pose)
    rng = np.random.default_rng(seed)
    return LocalMap(local.cells + rng.normal(0.0, sigma, local.cells.shape),
                    local.resolution, local.center_pose)


def check_local_map_size(L: int, resolution: float, v_max: float, dt: float,
                         r_vehicle: float) -> None:
    """The crop must cover everything reachable in one step plus all wheels."""
    if L * resolution < 2.0 * (v_max * dt + r_vehicle):
        raise ValueError(
            f"local map {L}x{resolution} m too small for v_max={v_max}, r={r_vehicle}")


# ---------------------------------------------------------------------------
# procedural recipes

def _axes(size, resolution, origin=None):
    sx, sy = size
    nx = int(round(sx / resolution)) + 1
    ny = int(round(sy / resolution)) + 1
    if origin is None:
        origin = (-(nx - 1) * resolution / 2, -(ny - 1) * resolution / 2)
    xs = origin[0] + np.arange(nx) * resolution
    ys = origin[1] + np.arange(ny) * resolution
    return origin, xs, ys


def _value_noise(rng, xs, ys, octaves, base_wavelength, persistence):
    out = np.zeros((ys.size, xs.size))
    amp, wl, total = 1.0, base_wavelength, 0.0
    for _ in range(octaves):
        gx = np.arange(xs[0] // wl - 1, xs[-1] // wl + 3) * wl
        gy = np.arange(ys[0] // wl - 1, ys[-1] // wl + 3) * wl
        lattice = rng.uniform(-1.0, 1.0, (gy.size, gx.size))
        fx = (xs - gx[0]) / wl
        fy = (ys - gy[0]) / wl
        ix, iy = fx.astype(int), fy.astype(int)
        tx, ty = fx - ix, fy - iy
        row0 = lattice[iy][:, ix] * (1 - tx) + lattice[iy][:, ix + 1] * tx
        row1 = lattice[iy + 1][:, ix] * (1 - tx) + lattice[iy + 1][:, ix + 1] * tx
        out += amp * (row0 * (1 - ty)[:, None] + row1 * ty[:, None])
        total += amp
        amp *= persistence
        wl /= 2.0
    return out / total


def _add_bumps(z, xs, ys, rng, region, amplitude, radius, density, dip_fraction, min_amp_frac):
    """Sum of Gaussian bumps scattered over ``region = (x0, x1, y0, y1)``."""
    x0, x1, y0, y1 = region
    area = (x1 - x0) * (y1 - y0)
    n = rng.poisson(density * area / 100.0)
    res = xs[1] - xs[0]
    r_lo, r_hi = radius
    for _ in range(n):
        cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
        r = rng.uniform(r_lo, r_hi)
        a = amplitude * rng.uniform(min_amp_frac, 1.0)
        if rng.uniform() < dip_fraction:
            a = -a
        half = 3.5 * r
        i0 = max(0, int((cx - half - xs[0]) / res))
        i1 = min(xs.size, int((cx + half - xs[0]) / res) + 2)
        j0 = max(0, int((cy - half - ys[0]) / res))
        j1 = min(ys.size, int((cy + half - ys[0]) / res) + 2)
        if i0 >= i1 or j0 >= j1:
            continue
        dx = xs[i0:i1] - cx
        dy = ys[j0:j1] - cy
        z[j0:j1, i0:i1] += a * np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * r * r))
    return z


RECIPE_DEFAULTS = {
    "flat": {"size": [40.0, 40.0], "amplitude": 0.0},
    "sinusoidal": {"size": [60.0, 30.0], "amplitude": 0.2, "wavelength": 5.0},
    "fractal-noise": {"size": [60.0, 60.0], "amplitude": 0.5, "wavelength": 16.0,
                      "octaves": 4, "persistence": 0.5},
    "bump-field": {"size": [120.0, 120.0], "amplitude": 0.35, "radius": [0.6, 1.6],
                   "density": 4.0, "dip_fraction": 0.3, "min_amp_frac": 0.3,
                   "roughness": 0.05, "clear_radius": 4.0},
}


def recipe_with_defaults(recipe) -> dict:
    if isinstance(recipe, str):
        recipe = {"name": recipe}
    name = recipe.get("name")
    if name == "rally-track":
        from .track import RALLY_DEFAULTS
        base = dict(RALLY_DEFAULTS)
    elif name in RECIPE_DEFAULTS:
        base = dict(RECIPE_DEFAULTS[name])
    else:
        raise UnknownRecipe(f"unknown terrain recipe {name!r}")
    base.update(recipe)
    base.setdefault("resolution", DEFAULT_RESOLUTION)
    return base


def generate_terrain(recipe, seed: int = 0) -> ElevationGrid:
    """Build a deterministic :class:`ElevationGrid` from a named recipe.

    ``recipe`` is a name or a dict with ``name`` plus overrides of
    :data:`RECIPE_DEFAULTS` (``size`` in metres, ``amplitude`` in metres, ...).
    """
    r = recipe_with_defaults(recipe)
    name, res = r["name"], float(r["resolution"])
    rng = np.random.default_rng(seed)
    if name == "rally-track":
        from .track import rally_track_heights
        origin, heights = rally_track_heights(r, rng)
        return ElevationGrid(origin, res, _f32(heights), r, seed)
    origin, xs, ys = _axes(r["size"], res, r.get("origin"))
    if name == "flat":
        z = np.full((ys.size, xs.size), float(r["amplitude"]))
    elif name == "sinusoidal":
        z = np.broadcast_to(r["amplitude"] * np.sin(2 * np.pi * xs / r["wavelength"]),
                            (ys.size, xs.size)).copy()
        if r.get("axis", "x") == "y":
            z = np.broadcast_to((r["amplitude"] * np.sin(2 * np.pi * ys / r["wavelength"]))[:, None],
                                (ys.size, xs.size)).copy()
    elif name == "fractal-noise":
        z = r["amplitude"] * _value_noise(rng, xs, ys, int(r["octaves"]), r["wavelength"],
                                          r["persistence"])
    else:  # bump-field
        z = r["roughness"] * _value_noise(rng, xs, ys, 3, 4.0, 0.5)
        _add_bumps(z, xs, ys, rng, (xs[0], xs[-1], ys[0], ys[-1]), r["amplitude"],
                   r["radius"], r["density"], r["dip_fraction"], r["min_amp_frac"])
        cr = r.get("clear_radius", 0.0)
        if cr > 0:
            # keep a smooth spawn pad around the origin
            d = np.hypot(xs[None, :], ys[:, None])
            w = np.clip((d - cr) / cr, 0.0, 1.0)
            z *= w * w * (3 - 2 * w)
    return ElevationGrid(origin, res, _f32(z), r, seed)


def _f32(z):
    # grids are stored as float32 on disk; generate at that precision so a
    # save/load round trip is exact
    return z.astype(np.float32).astype(np.float64)
