"""Terrain-aware probabilistic-ensemble dynamics model.

A small CNN encodes the yaw-aligned local heightmap into a latent feature;
B multilayer perceptrons map (velocity/control history, attitude sin/cos,
terrain feature) to a Gaussian over the next body-velocity change. Poses are
advanced by the explicit kinematic layer in :mod:`kinodyn.se3`.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io as kio
from .data import Dataset
from .nn import Adam, Conv2D, Dense, Flatten, ReLU, Sequential, conv_out
from .se3 import GIMBAL_EPS, body_omega_inverse_matrix, displacement_world, wrap_angle
from .terrain import ElevationGrid, crop_batch

log = logging.getLogger(__name__)


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    H: int = 5
    B: int = 5
    L: int = 65
    resolution: float = 0.1
    conv_channels: tuple = (8, 16, 32)
    fc_hidden: int = 128
    D_h: int = 32
    member_hidden: tuple = (256, 256)
    lr: float = 3e-4
    batch: int = 256
    epochs: int = 50
    encoder_epochs: int | None = None  # member-1 + encoder epochs; defaults to ``epochs``
    seed: int = 0
    val_frac: float = 0.1
    logstd_min: float = -5.0
    logstd_max: float = 2.0
    terrain_blind: bool = False
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("conv_channels", "member_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @property
    def n_in(self) -> int:
        return 8 * self.H + 6 + self.D_h


@dataclass
class EnsemblePrediction:
    """Per-member mean and std of the body-velocity change, shapes (B, N, 6)."""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class Normalizer:
    xd_mean: np.ndarray
    xd_std: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray
    map_mean: float
    map_std: float
    out_mean: np.ndarray
    out_std: np.ndarray

    @classmethod
    def identity(cls, L_unused=None):
        return cls(np.zeros(6), np.ones(6), np.zeros(2), np.ones(2), 0.0, 1.0,
                   np.zeros(6), np.ones(6))

    @classmethod
    def fit(cls, ds: Dataset, idx, rng, n_maps: int = 1000) -> "Normalizer":
        x, u = ds.x[idx], ds.u[idx]
        d = ds.x_next[idx, :6] - x[:, :6]
        pick = rng.choice(idx, size=min(n_maps, len(idx)), replace=False)
        maps = ds.local_maps(np.sort(pick))

        def sd(a):
            return np.maximum(a.std(0), 1e-6)

        return cls(x[:, :6].mean(0), sd(x[:, :6]), u.mean(0), sd(u), float(maps.mean()),
                   float(max(maps.std(), 1e-6)), d.mean(0), sd(d))

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (np.asarray(v, float) if isinstance(v, list) else float(v))
                      for k, v in d.items()})


def soft_clamp(a, lo, hi):
    """Smooth saturation into (lo, hi), near-identity away from the bounds.

    Softplus ceiling then softplus floor; the result is rescaled about ``lo``
    by (hi - lo) / (hi - lo + log(1 + e^{lo - hi})) so the upper bound is
    never exceeded. Returns value and derivative.
    """
    b = hi - np.logaddexp(0.0, hi - a)
    db = 0.5 * (1.0 + np.tanh(0.5 * (hi - a)))   # sigmoid(hi - a)
    c = lo + np.logaddexp(0.0, b - lo)
    dc = 0.5 * (1.0 + np.tanh(0.5 * (b - lo)))   # sigmoid(b - lo)
    k = (hi - lo) / (hi - lo + np.log1p(np.exp(lo - hi)))
    return lo + k * (c - lo), k * db * dc


def build_encoder(cfg: ModelConfig, rng, dtype):
    layers, c, n = [], 1, cfg.L
    for co in cfg.conv_channels:
        layers += [Conv2D(c, co, rng=rng, dtype=dtype), ReLU()]
        c, n = co, conv_out(n)
    layers += [Flatten(), Dense(c * n * n, cfg.fc_hidden, rng, dtype), ReLU(),
               Dense(cfg.fc_hidden, cfg.D_h, rng, dtype)]
    return Sequential(layers)


def build_member(cfg: ModelConfig, rng, dtype):
    layers, n = [], cfg.n_in
    for hdim in cfg.member_hidden:
        layers += [Dense(n, hdim, rng, dtype), ReLU()]
        n = hdim
    layers.append(Dense(n, 12, rng, dtype))
    return Sequential(layers)


class HistoryBuffer:
    """Ring of completed ``(x^d, u)`` pairs; ``window`` appends the current pair.

    Before warm-up the window is padded by repeating the first observation.
    """

    def __init__(self, H: int):
        self.H = H
        self.xd: list[np.ndarray] = []
        self.u: list[np.ndarray] = []

    def push(self, xd, u):
        self.xd.append(np.asarray(xd, float)[:6].copy())
        self.u.append(np.asarray(u, float).copy())
        if len(self.xd) > self.H - 1:
            self.xd.pop(0)
            self.u.pop(0)

    def window(self, xd_now, u_now):
        xs = self.xd + [np.asarray(xd_now, float)[:6]]
        us = self.u + [np.asarray(u_now, float)]
        pad = self.H - len(xs)
        xs = [xs[0]] * pad + xs
        us = [us[0]] * pad + us
        return np.array(xs), np.array(us)

    def past(self, xd_now):
        """Completed pairs as (H-1, 6), (H-1, 2) arrays, padded like :meth:`window`."""
        if not self.xd:
            return (np.repeat(np.asarray(xd_now, float)[None, :6], self.H - 1, 0),
                    None)
        xs, us = self.xd, self.u
        pad = self.H - 1 - len(xs)
        return np.array([xs[0]] * pad + xs), np.array([us[0]] * pad + us)

    def copy(self):
        h = HistoryBuffer(self.H)
        h.xd = [a.copy() for a in self.xd]
        h.u = [a.copy() for a in self.u]
        return h

    def __len__(self):
        return len(self.xd)


class KinoDynModel:
    def __init__(self, cfg: ModelConfig | None = None, norm: Normalizer | None = None, seed=None):
        self.cfg = cfg or ModelConfig()
        dt = np.dtype(self.cfg.dtype)
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        self.encoder = build_encoder(self.cfg, rng, dt)
        self.members = [build_member(self.cfg, np.random.default_rng([self.cfg.seed, i + 1]), dt)
                        for i in range(self.cfg.B)]
        self.norm = norm or Normalizer.identity()
        self.history: dict = {}

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def astype(self, dtype):
        self.cfg.dtype = np.dtype(dtype).name
        self.encoder.astype(dtype)
        for m in self.members:
            m.astype(dtype)
        return self

    # -- forward pieces -------------------------------------------------
    def _map_input(self, maps):
        maps = np.asarray(maps)
        if maps.ndim == 2:
            maps = maps[None]
        if maps.shape[1:] != (self.cfg.L, self.cfg.L):
            raise ShapeMismatch(f"expected {self.cfg.L}x{self.cfg.L} map, got {maps.shape[1:]}")
        return ((maps - self.norm.map_mean) / self.norm.map_std).astype(self.dtype)[..., None]

    def encode_map(self, maps) -> np.ndarray:
        """Latent terrain features (N, D_h); the blind ablation encodes an all-zero input."""
        x = self._map_input(maps)
        if self.cfg.terrain_blind:
            f = self.encoder.forward(np.zeros_like(x[:1]))
            return np.repeat(f, x.shape[0], 0)
        return self.encoder.forward(x)

    def member_inputs(self, xd_hist, u_hist, e, feat) -> np.ndarray:
        xd_hist, u_hist, e = np.asarray(xd_hist), np.asarray(u_hist), np.asarray(e)
        n = xd_hist.shape[0]
        H = self.cfg.H
        if xd_hist.shape[1:] != (H, 6) or u_hist.shape[1:] != (H, 2) or e.shape != (n, 3):
            raise ShapeMismatch("history must be (N, H, 6) and (N, H, 2), attitude (N, 3)")
        if feat.shape != (n, self.cfg.D_h):
            raise ShapeMismatch(f"feature must be (N, {self.cfg.D_h})")
        nx = (xd_hist - self.norm.xd_mean) / self.norm.xd_std
        nu = (u_hist - self.norm.u_mean) / self.norm.u_std
        hist = np.concatenate([nx, nu], axis=2).reshape(n, 8 * H)
        trig = np.stack([np.cos(e[:, 0]), np.sin(e[:, 0]), np.cos(e[:, 1]), np.sin(e[:, 1]),
                         np.cos(e[:, 2]), np.sin(e[:, 2])], axis=1)
        return np.concatenate([hist, trig, feat], axis=1).astype(self.dtype)

    def _head(self, out):
        """Raw member output -> (mu, sigma) in physical units."""
        mu = out[:, :6] * self.norm.out_std + self.norm.out_mean
        ls, _ = soft_clamp(out[:, 6:] + np.log(self.norm.out_std), self.cfg.logstd_min,
                           self.cfg.logstd_max)
        return mu, np.exp(ls)

    def predict_ensemble(self, xd_hist, u_hist, e, feat=None, maps=None) -> EnsemblePrediction:
        if feat is None:
            feat = self.encode_map(maps)
        z = self.member_inputs(xd_hist, u_hist, e, feat)
        mus, sigmas = [], []
        for m in self.members:
            mu, sg = self._head(m.forward(z).astype(np.float64))
            mus.append(mu)
            sigmas.append(sg)
        return EnsemblePrediction(np.array(mus), np.array(sigmas))

    def rollout_batch(self, x0, hist, grid, U, dt: float = 0.1) -> "RolloutResult":
        return rollout_batch(self, x0, hist, grid, U, dt)

    # -- checkpoint ----------------------------------------------------
    def _blocks(self):
        out = [("encoder", self.encoder)]
        out += [(f"member{i}", m) for i, m in enumerate(self.members)]
        return out

    def save(self, path, extra: dict | None = None) -> dict:
        path = Path(path)
        table, chunks, off = [], [], 0
        for bname, net in self._blocks():
            for pname, layer, key in net.named_params():
                a = np.ascontiguousarray(layer.params[key], "<f4")
                table.append({"name": f"{bname}/{pname}", "shape": list(a.shape), "offset": off,
                              "count": int(a.size)})
                chunks.append(a.tobytes())
                off += a.size * 4
        blob = b"".join(chunks)
        bin_path = path.with_suffix(".bin")
        bin_path.write_bytes(blob)
        cfg = asdict(self.cfg)
        man = {"kind": "checkpoint", "config": cfg, "normalization": self.norm.to_dict(),
               "dtype": "<f4", "data": bin_path.name, "sha256": kio.sha256_bytes(blob),
               "tensors": table, "history": self.history}
        if extra:
            man.update(extra)
        path.write_text(json.dumps(man, indent=1, sort_keys=True))
        return man

    @classmethod
    def load(cls, path) -> "KinoDynModel":
        path = Path(path)
        man = json.loads(path.read_text())
        if man.get("kind") != "checkpoint":
            raise ValueError(f"{path} is not a checkpoint manifest")
        blob = (path.parent / man["data"]).read_bytes()
        if kio.sha256_bytes(blob) != man["sha256"]:
            raise kio.ManifestMismatch(f"{path}: weight blob does not match manifest hash")
        cfg = ModelConfig.from_dict(man["config"])
        cfg.dtype = "float32"
        model = cls(cfg, Normalizer.from_dict(man["normalization"]))
        lookup = {t["name"]: t for t in man["tensors"]}
        for bname, net in model._blocks():
            for pname, layer, key in net.named_params():
                t = lookup[f"{bname}/{pname}"]
                a = np.frombuffer(blob, "<f4", t["count"], t["offset"]).reshape(t["shape"])
                if a.shape != layer.params[key].shape:
                    raise ShapeMismatch(f"{bname}/{pname}: {a.shape} vs {layer.params[key].shape}")
                layer.params[key] = a.astype(np.float32)
        model.history = man.get("history", {})
        model.manifest = man
        return model


# ---------------------------------------------------------------------------
# prediction helpers

def sample_next_dyn(pred: EnsemblePrediction, xd, seed) -> np.ndarray:
    """``x_d + mu_i + sigma_i * eps_i`` with fresh noise per member; shape (B, N, 6)."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(pred.mu.shape)
    return np.asarray(xd)[None] + pred.mu + pred.sigma * eps


def predict_worst_case(pred: EnsemblePrediction, xd):
    """Mean update of the member with the largest ||sigma||; ties go to the lowest index."""
    norms = np.linalg.norm(pred.sigma, axis=2)
    idx = np.argmax(norms, axis=0)
    n = np.arange(pred.mu.shape[1])
    return np.asarray(xd) + pred.mu[idx, n], idx


def uncertainty(pred: EnsemblePrediction):
    """(AU, EU, UC) per sample: mean ||sigma_i||^2, ||Var_i mu_i||, and their sum."""
    au = np.mean(np.sum(pred.sigma ** 2, axis=2), axis=0)
    # population variance from pairwise differences: exactly zero for identical members
    d = pred.mu[:, None] - pred.mu[None, :]
    var = np.sum(d * d, axis=(0, 1)) / (2 * pred.mu.shape[0] ** 2)
    eu = np.linalg.norm(var, axis=1)
    return au, eu, au + eu


def kinematic_step(pose, v_next, dt, eps=GIMBAL_EPS):
    """Batched pose update; returns ``(pose', ok)`` with ``ok`` false where the pitch is guarded.

    Same midpoint rule as :func:`kinodyn.se3.integrate_pose`.
    """
    p, e = pose[:, :3], pose[:, 3:]
    ok = np.abs(e[:, 1]) < np.pi / 2 - eps
    e_safe = e.copy()
    e_safe[~ok, 1] = 0.0
    de = np.einsum("nij,nj->ni", body_omega_inverse_matrix(e_safe), v_next[:, 3:]) * dt
    p_new = p + displacement_world(e_safe + 0.5 * de, v_next[:, :3], dt)
    e_new = e_safe + de
    e_new[:, 0] = wrap_angle(e_new[:, 0])
    e_new[:, 2] = wrap_angle(e_new[:, 2])
    ok &= np.all(np.isfinite(p_new), axis=1) & np.all(np.isfinite(e_new), axis=1)
    return np.concatenate([p_new, e_new], axis=1), ok


@dataclass
class RolloutResult:
    states: np.ndarray      # (K, T, 12) predicted states after each action
    uc: np.ndarray          # (K, T)
    member: np.ndarray      # (K, T) chosen ensemble index
    valid: np.ndarray       # (K,)


def rollout_batch(model: KinoDynModel, x0, hist, grid: ElevationGrid, U,
                  dt: float = 0.1) -> RolloutResult:
    """Roll K control sequences (K, T, 2) through the model.

    ``x0`` is one state (12,) shared by all samples or one per sample (K, 12);
    ``hist`` is a :class:`HistoryBuffer` or per-sample completed pairs
    ``(xd (K, H-1, 6), u (K, H-1, 2))``. Each step crops the map at the
    predicted pose, encodes it, advances the velocity with the worst-case
    member mean and the pose with the kinematic layer. A sample whose crop
    leaves the map or whose pitch hits the guard is marked invalid and frozen.
    """
    U = np.asarray(U, float)
    K, T = U.shape[:2]
    H = model.cfg.H
    x0 = np.asarray(x0, float)
    if x0.ndim == 1:
        x0 = np.repeat(x0[None], K, 0)
    states = np.zeros((K, T, 12))
    ucs = np.zeros((K, T))
    mem = np.zeros((K, T), np.int64)
    valid = np.ones(K, bool)
    if T == 0:
        return RolloutResult(states, ucs, mem, valid)
    xd_hist = np.empty((K, H, 6))
    u_hist = np.empty((K, H, 2))
    if isinstance(hist, HistoryBuffer):
        px, pu = hist.past(x0[0, :6])
    else:
        px, pu = hist
    xd_hist[:, :H - 1] = px
    if pu is None:
        u_hist[:, :H - 1] = U[:, :1]
    else:
        u_hist[:, :H - 1] = pu
    xd = x0[:, :6].copy()
    pose = x0[:, 6:].copy()
    for t in range(T):
        xd_hist[:, H - 1] = xd
        u_hist[:, H - 1] = U[:, t]
        maps, ok = crop_batch(grid, pose[:, :4], model.cfg.L, dtype=model.dtype)
        valid &= ok
        pred = model.predict_ensemble(xd_hist, u_hist, pose[:, 3:], maps=maps)
        xd_new, idx = predict_worst_case(pred, xd)
        _, _, uc = uncertainty(pred)
        pose_new, ok = kinematic_step(pose, xd_new, dt)
        valid &= ok & np.all(np.isfinite(xd_new), axis=1)
        xd = np.where(valid[:, None], xd_new, xd)
        pose = np.where(valid[:, None], pose_new, pose)
        states[:, t, :6], states[:, t, 6:] = xd, pose
        ucs[:, t], mem[:, t] = uc, idx
        xd_hist[:, :-1] = xd_hist[:, 1:].copy()
        u_hist[:, :-1] = u_hist[:, 1:].copy()
    return RolloutResult(states, ucs, mem, valid)


def rollout(model: KinoDynModel, x0, hist: HistoryBuffer, grid: ElevationGrid, u_seq,
            dt: float = 0.1) -> np.ndarray:
    """Single-sequence rollout; raises if any step is invalid."""
    u_seq = np.asarray(u_seq, float).reshape(-1, 2)
    r = rollout_batch(model, x0, hist, grid, u_seq[None], dt)
    if not r.valid[0]:
        raise ValueError("rollout left the map or hit the pitch guard")
    return r.states[0]


# ---------------------------------------------------------------------------
# training

def nll_and_grad(out, target_n, norm: Normalizer, cfg: ModelConfig):
    """Mean Gaussian NLL (normalized units, constant dropped) and dL/dout."""
    n = out.shape[0]
    mu = out[:, :6]
    log_os = np.log(norm.out_std)
    ls_raw, dls = soft_clamp(out[:, 6:] + log_os, cfg.logstd_min, cfg.logstd_max)
    ls = ls_raw - log_os
    inv = np.exp(-2.0 * ls)
    r = target_n - mu
    loss = float(np.sum(ls + 0.5 * r * r * inv) / n)
    g = np.empty_like(out)
    g[:, :6] = -r * inv / n
    g[:, 6:] = (1.0 - r * r * inv) * dls / n
    return loss, g


def _batch_arrays(ds: Dataset, idx, model: KinoDynModel):
    xd, u = ds.history(idx, model.cfg.H)
    e = ds.x[idx, 9:12]
    tgt = (ds.x_next[idx, :6] - ds.x[idx, :6] - model.norm.out_mean) / model.norm.out_std
    return xd, u, e, tgt


def loss_and_grads(model: KinoDynModel, member: int, xd, u, e, maps, tgt, encoder_grad=True):
    """Forward + backward through encoder and one member; gradients accumulate in place."""
    enc, net = model.encoder, model.members[member]
    enc.zero_grad()
    net.zero_grad()
    x = model._map_input(maps)
    blind = model.cfg.terrain_blind
    feat = enc.forward(np.zeros_like(x[:1]) if blind else x)
    if blind:
        feat = np.repeat(feat, x.shape[0], 0)
    z = model.member_inputs(xd, u, e, feat)
    out = net.forward(z)
    loss, g = nll_and_grad(out, tgt, model.norm, model.cfg)
    dz = net.backward(g.astype(out.dtype))
    if encoder_grad:
        df = dz[:, -model.cfg.D_h:]
        if blind:
            df = df.sum(0, keepdims=True)
        enc.backward(df)
    return loss


def _split(ds: Dataset, frac, rng):
    ep = ds.episode_ids()
    n_ep = int(ep.max()) + 1 if len(ds) else 0
    order = rng.permutation(n_ep)
    n_val = int(round(frac * n_ep)) if n_ep > 1 else 0
    val_eps = np.zeros(n_ep, bool)
    val_eps[order[:n_val]] = True
    is_val = val_eps[ep]
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def _eval_loss(model, ds, idx, member, feats=None, chunk=1024):
    tot, n = 0.0, 0
    for s in range(0, len(idx), chunk):
        b = idx[s:s + chunk]
        xd, u, e, tgt = _batch_arrays(ds, b, model)
        f = feats[s:s + chunk] if feats is not None else model.encode_map(ds.local_maps(b))
        out = model.members[member].forward(model.member_inputs(xd, u, e, f))
        tot += nll_and_grad(out, tgt, model.norm, model.cfg)[0] * len(b)
        n += len(b)
    return tot / max(n, 1)


def encode_all(model: KinoDynModel, ds: Dataset, idx, chunk=1024):
    out = np.empty((len(idx), model.cfg.D_h), model.dtype)
    for s in range(0, len(idx), chunk):
        b = idx[s:s + chunk]
        out[s:s + len(b)] = model.encode_map(ds.local_maps(b))
    return out


def train(ds: Dataset, cfg: ModelConfig | None = None, progress=None,
          max_val: int = 4096) -> KinoDynModel:
    """Fit the encoder jointly with member 0, freeze it, then fit members 1..B-1.

    Each member sees its own shuffling stream. Per-epoch train and validation
    NLL are kept in ``model.history``.
    """
    cfg = cfg or ModelConfig()
    if len(ds) < cfg.batch:
        raise ValueError(f"dataset has {len(ds)} samples, fewer than one batch ({cfg.batch})")
    if ds.L != cfg.L:
        raise ShapeMismatch(f"dataset crops are {ds.L}, config expects {cfg.L}")
    rng = np.random.default_rng(cfg.seed)
    tr, va = _split(ds, cfg.val_frac, rng)
    if len(va) > max_val:
        va = np.sort(rng.choice(va, max_val, replace=False))
    model = KinoDynModel(cfg, Normalizer.fit(ds, tr, rng))
    hist = {"train": [[] for _ in range(cfg.B)], "val": [[] for _ in range(cfg.B)],
            "n_train": int(len(tr)), "n_val": int(len(va))}
    t0 = time.time()
    enc_opt = Adam(model.encoder, cfg.lr)
    ep_enc = cfg.encoder_epochs or cfg.epochs
    feats_tr = feats_va = None
    for i in range(cfg.B):
        opt = Adam(model.members[i], cfg.lr)
        mrng = np.random.default_rng([cfg.seed, 1000 + i])
        if i == 1:
            feats_tr = encode_all(model, ds, tr)
            feats_va = encode_all(model, ds, va)
        n_ep = ep_enc if i == 0 else cfg.epochs
        for epoch in range(n_ep):
            perm = mrng.permutation(len(tr))
            tot, nb = 0.0, 0
            for s in range(0, len(perm) - cfg.batch + 1, cfg.batch):
                bi = perm[s:s + cfg.batch]
                b = tr[bi]
                xd, u, e, tgt = _batch_arrays(ds, b, model)
                if i == 0:
                    loss = loss_and_grads(model, 0, xd, u, e, ds.local_maps(b), tgt)
                    enc_opt.step()
                else:
                    net = model.members[i]
                    net.zero_grad()
                    out = net.forward(model.member_inputs(xd, u, e, feats_tr[bi]))
                    loss, g = nll_and_grad(out, tgt, model.norm, cfg)
                    net.backward(g.astype(out.dtype))
                if not np.isfinite(loss):
                    raise NonFiniteLoss(f"member {i} epoch {epoch}: loss {loss} "
                                        f"(batch rows {b[:5].tolist()}...)")
                opt.step()
                tot += loss
                nb += 1
            vl = _eval_loss(model, ds, va, i, feats_va if i > 0 else None) if len(va) else float("nan")
            hist["train"][i].append(tot / max(nb, 1))
            hist["val"][i].append(vl)
            msg = f"member {i} epoch {epoch + 1}/{n_ep} train {tot / max(nb, 1):.4f} val {vl:.4f}"
            log.info(msg)
            if progress:
                progress(msg)
    hist["seconds"] = time.time() - t0
    model.history = hist
    return model


def grad_check(model: KinoDynModel, ds_batch, h: float = 1e-5, member: int = 0,
               atol: float = 1e-8) -> float:
    """Max relative error of analytic vs central-difference gradients over all parameters.

    ``ds_batch`` is ``(xd, u, e, maps, tgt)``. The model is evaluated in
    float64; relative error is ``|a - n| / max(|a|, |n|, floor)`` where the
    floor is ``atol`` or 1e-6 of the tensor's largest gradient, whichever is
    larger (entries far below that are dominated by finite-difference rounding).
    """
    model.astype(np.float64)
    xd, u, e, maps, tgt = ds_batch
    loss_and_grads(model, member, xd, u, e, maps, tgt)
    nets = (model.encoder, model.members[member])
    analytic_all = {(id(layer), key): layer.grads[key].copy()
                    for net in nets for _, layer, key in net.named_params()}
    worst = 0.0
    for net in nets:
        for _, layer, key in net.named_params():
            analytic = analytic_all[(id(layer), key)]
            p = layer.params[key]
            flat = p.reshape(-1)
            num = np.empty(flat.size)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + h
                lp = loss_and_grads(model, member, xd, u, e, maps, tgt)
                flat[j] = old - h
                lm = loss_and_grads(model, member, xd, u, e, maps, tgt)
                flat[j] = old
                num[j] = (lp - lm) / (2 * h)
            a = analytic.reshape(-1)
            floor = max(atol, 1e-6 * float(np.abs(a).max(initial=0.0)))
            rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
            worst = max(worst, float(rel.max()) if rel.size else 0.0)
    loss_and_grads(model, member, xd, u, e, maps, tgt)
    return worst
