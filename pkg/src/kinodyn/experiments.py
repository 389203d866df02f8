"""Reference experiment recipes: datasets, the trained model and closed-loop configs.

Every artifact is derived deterministically from the constants below and
cached under a directory keyed by their hash, so reruns reuse earlier work.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

from . import data, harness
from . import io as kio
from .model import KinoDynModel, ModelConfig, train
from .terrain import generate_terrain
from .track import StadiumTrack, make_costmap

log = logging.getLogger(__name__)

BUMP = {"name": "bump-field", "amplitude": 0.35}
RALLY = {"name": "rally-track"}
SEEDS = {"bump_train": 0, "bump_test": 100, "rally_train": 8, "rally_drive": 0}

TRAINING = {
    "bump": [("random-walk", 24000, 1), ("sinusoidal", 16000, 2)],
    "rally": [("scripted-laps", 20000, 3)],
    "model": {"B": 5, "epochs": 20, "seed": 0},
}
HELDOUT = [("random-walk", 3000, 3), ("sinusoidal", 2000, 4)]

CONTROLLER = {"K": 64, "T": 12, "sigma": [0.05, 0.5], "sampling": "smooth",
              "costs": {"v_ref": 7.0, "lam": 3.0, "w_progress": 2.0}}
DRIVE = {"max_steps": 450, "laps": 1.0, "start_offset": 1.0, "start_speed": 0.0}


def recipe_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def training_set(training: dict = TRAINING) -> data.Dataset:
    """Bump-field excitation data plus scripted laps on a rally track with its own terrain seed."""
    bump = generate_terrain(BUMP, SEEDS["bump_train"])
    rally = generate_terrain(RALLY, SEEDS["rally_train"])
    parts = [data.collect_dataset(bump, p, n, seed=s) for p, n, s in training["bump"]]
    parts += [data.collect_dataset(rally, p, n, seed=s) for p, n, s in training["rally"]]
    return data.concat(parts)


def heldout_bump_set(parts=HELDOUT) -> data.Dataset:
    """On-policy excitation data on an unseen bump-field terrain."""
    grid = generate_terrain(BUMP, SEEDS["bump_test"])
    return data.concat([data.collect_dataset(grid, p, n, seed=s) for p, n, s in parts])


def reference_model(cache_dir, terrain_blind: bool = False, training: dict = TRAINING,
                    progress=None) -> KinoDynModel:
    """Train (or load the cached) reference model; the blind variant zeroes the map input."""
    mcfg = dict(training["model"], terrain_blind=terrain_blind)
    key = recipe_hash({"training": training, "model": mcfg, "bump": BUMP, "rally": RALLY,
                       "seeds": SEEDS})
    path = Path(cache_dir) / f"model_{'blind' if terrain_blind else 'full'}_{key}.json"
    if path.exists():
        return KinoDynModel.load(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    ds = training_set(training)
    model = train(ds, ModelConfig.from_dict(mcfg), progress=progress)
    model.save(path, {"recipe_key": key, "train_seconds": time.time() - t0})
    return KinoDynModel.load(path)


def rally_artifacts(out_dir) -> tuple[Path, Path]:
    """Drive terrain and its costmap written to ``out_dir`` (reused if already there)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tp, cp = out / "rally_terrain.json", out / "rally_costmap.json"
    if not (tp.exists() and cp.exists()):
        grid = generate_terrain(RALLY, SEEDS["rally_drive"])
        kio.save_terrain(tp, grid)
        kio.save_costmap(cp, make_costmap(grid, StadiumTrack.from_recipe(grid.recipe)),
                         kio.artifact_hash(tp))
    return tp, cp


def closed_loop_configs(out_dir, checkpoint, controller: dict = CONTROLLER,
                        drive: dict = DRIVE, n_seeds: int = 10):
    """The ``2d`` baseline and the full cost suite on the bundled rally track."""
    tp, cp = rally_artifacts(out_dir)
    base = dict(terrain=tp.name, costmap=cp.name, checkpoint=str(Path(checkpoint).resolve()),
                n_seeds=n_seeds, base_dir=str(Path(out_dir)), **drive)
    full = harness.ExperimentConfig(name="full", controller=controller, **base)
    flat = dict(controller, costs=dict(controller["costs"], mode="2d"))
    baseline = harness.ExperimentConfig(name="2d", controller=flat, **base)
    return baseline, full
