"""Command-line entry point: ``kinodyn <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data, harness
from . import io as kio
from .evaluation import STATE_NAMES, eval_multistep
from .model import KinoDynModel, ModelConfig, train
from .terrain import generate_terrain
from .track import StadiumTrack, make_costmap

log = logging.getLogger("kinodyn")


class InvariantFailure(RuntimeError):
    pass


def _section(args) -> dict:
    """The ``--config`` JSON: its sub-dict named after the command if present, else the whole object."""
    if not args.config:
        return {}
    cfg = json.loads(Path(args.config).read_text())
    return dict(cfg.get(args.cmd, cfg))


def _parse_sets(pairs) -> dict:
    out = {}
    for p in pairs or []:
        k, _, v = p.partition("=")
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _out(args, name) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def cmd_gen_terrain(args):
    recipe = _section(args)
    if args.recipe:
        recipe["name"] = args.recipe
    recipe.update(_parse_sets(args.set))
    grid = generate_terrain(recipe, args.seed)
    path = _out(args, args.name)
    hdr = kio.save_terrain(path, grid)
    if kio.load_terrain(path).heights.tobytes() != grid.heights.astype("<f4").astype(float).tobytes():
        raise InvariantFailure("terrain round trip is not exact")
    print(json.dumps({"terrain": str(path), "sha256": hdr["sha256"]}))


def cmd_gen_costmap(args):
    grid = kio.load_terrain(args.terrain)
    track = None
    if grid.recipe.get("name") == "rally-track":
        track = StadiumTrack.from_recipe(grid.recipe)
    cmap = make_costmap(grid, track)
    path = _out(args, args.name)
    hdr = kio.save_costmap(path, cmap, kio.artifact_hash(args.terrain))
    print(json.dumps({"costmap": str(path), "sha256": hdr["sha256"],
                      "off_track_fraction": float(cmap.cells.mean())}))


def cmd_collect(args):
    opts = _section(args)
    grid = kio.load_terrain(args.terrain)
    ds = data.collect_dataset(grid, args.policy or opts.get("policy", "random-walk"),
                              args.steps or opts.get("steps", 1000), seed=args.seed,
                              map_noise=opts.get("map_noise", 0.0))
    ds.validate()
    path = _out(args, args.name)
    hdr = data.save_dataset_jsonl(path, ds, kio.artifact_hash(args.terrain))
    print(json.dumps({"dataset": str(path), "n": hdr["n"], "sha256": kio.sha256_file(path)}))


def cmd_train(args):
    opts = _section(args)
    opts.update(_parse_sets(args.set))
    opts.setdefault("seed", args.seed)
    cfg = ModelConfig.from_dict(opts)
    parts = [data.load_dataset_jsonl(p) for p in args.data]
    ds = data.concat(parts) if len(parts) > 1 else parts[0]
    ds.validate()
    model = train(ds, cfg, progress=print)
    path = _out(args, args.name)
    model.save(path, {"datasets": [kio.sha256_file(p) for p in args.data]})
    final = [h[-1] for h in model.history["val"]]
    if not all(np.isfinite(final)):
        raise InvariantFailure("non-finite validation loss")
    print(json.dumps({"checkpoint": str(path), "val": final}))


def cmd_eval_model(args):
    model = KinoDynModel.load(args.checkpoint)
    grid = kio.load_terrain(args.terrain)
    ds = data.load_dataset_jsonl(args.data)
    want = ds.meta["header"].get("terrain_sha256")
    if want is not None and want != kio.artifact_hash(args.terrain):
        raise kio.ManifestMismatch("dataset was collected on a different terrain")
    r = eval_multistep(model, ds, args.starts, args.horizon, seed=args.seed, grid=grid)
    path = _out(args, args.name)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step"] + [f"{n}_mean" for n in STATE_NAMES] + [f"{n}_std" for n in STATE_NAMES])
        for j in range(args.horizon):
            w.writerow([j + 1] + [repr(float(v)) for v in r["mean"][j]] +
                       [repr(float(v)) for v in r["std"][j]])
    if not np.all(np.isfinite(r["mean"])):
        raise InvariantFailure("non-finite prediction errors")
    print(json.dumps({"table": str(path), "starts": int(r["starts"].size),
                      "invalid": r["n_invalid"]}))


def _seeds(args):
    if args.seeds:
        a, _, b = args.seeds.partition("-")
        return list(range(int(a), int(b) + 1)) if b else [int(a)]
    return [args.seed]


def cmd_drive(args):
    if not args.config:
        raise SystemExit("drive needs --config <experiment.json>")
    cfg = harness.ExperimentConfig.load(args.config)
    if args.costs:
        cfg.controller = dict(cfg.controller, costs=dict(cfg.controller.get("costs", {}),
                                                        mode=args.costs))
        cfg.name = f"{cfg.name}-{args.costs}"
    res = harness.load_resources(cfg)
    for s in _seeds(args):
        path = _out(args, f"{cfg.name}_seed{s}.jsonl")
        m, _ = harness.run_episode(cfg, s, res, log_path=path)
        _check_log(path, m)
        # wall-clock timing lives here, never in the trajectory log
        _out(args, f"{cfg.name}_seed{s}.metrics.json").write_text(
            json.dumps(asdict(m), indent=1, sort_keys=True))
        print(json.dumps({"log": str(path), "reason": m.reason, "rollovers": m.rollovers,
                          "violations": m.boundary_violations,
                          "mean_speed": round(m.mean_speed, 3),
                          "compute_ms_mean": round(m.compute_ms_mean, 1)}))


def _check_log(path, m):
    recs = kio.read_jsonl(path)
    if recs[0].get("kind") != "trajectory" or recs[-1].get("kind") != "end":
        raise InvariantFailure(f"{path}: malformed trajectory log")
    if len(recs) != m.steps + 2:
        raise InvariantFailure(f"{path}: {len(recs) - 2} tick records for {m.steps} steps")
    counts = [m.boundary_violations, m.rollovers, m.fallbacks, *m.breaches.values()]
    if min(counts) < 0 or not np.isfinite(m.mean_speed):
        raise InvariantFailure(f"{path}: invalid metrics")


def cmd_report(args):
    paths = sorted(Path(p) for p in args.logs)
    rows = harness.episode_rows_from_logs(paths)
    names = args.order.split(",") if args.order else None
    summ = harness.write_report(rows, args.out_dir, names)
    print(json.dumps({"report": str(Path(args.out_dir) / "report.md"), "configs": summ["names"]}))


def build_parser():
    p = argparse.ArgumentParser(prog="kinodyn", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON config (a per-command section or a whole object)")
    p.add_argument("--out-dir", default=".")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("gen-terrain", help="generate a heightmap from a named recipe")
    s.add_argument("--recipe")
    s.add_argument("--set", action="append", metavar="KEY=JSON", help="recipe override")
    s.add_argument("--name", default="terrain.json")
    s.set_defaults(fn=cmd_gen_terrain)

    s = sub.add_parser("gen-costmap", help="track-membership costmap for a terrain")
    s.add_argument("--terrain", required=True)
    s.add_argument("--name", default="costmap.json")
    s.set_defaults(fn=cmd_gen_costmap)

    s = sub.add_parser("collect", help="drive a scripted policy and log transitions")
    s.add_argument("--terrain", required=True)
    s.add_argument("--policy", choices=data.POLICIES)
    s.add_argument("--steps", type=int)
    s.add_argument("--name", default="dataset.jsonl")
    s.set_defaults(fn=cmd_collect)

    s = sub.add_parser("train", help="fit the ensemble dynamics model")
    s.add_argument("--data", nargs="+", required=True)
    s.add_argument("--set", action="append", metavar="KEY=JSON", help="model config override")
    s.add_argument("--name", default="checkpoint.json")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval-model", help="open-loop multi-step prediction error table (CSV)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--terrain", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--starts", type=int, default=200)
    s.add_argument("--horizon", type=int, default=10)
    s.add_argument("--name", default="multistep.csv")
    s.set_defaults(fn=cmd_eval_model)

    s = sub.add_parser("drive", help="closed-loop episodes with the MPPI controller")
    s.add_argument("--seeds", help="seed or inclusive range like 0-9 (default: --seed)")
    s.add_argument("--costs", choices=("full", "2d"), help="override the cost mode")
    s.set_defaults(fn=cmd_drive)

    s = sub.add_parser("report", help="CSV + markdown + plot scripts from trajectory logs")
    s.add_argument("--logs", nargs="+", required=True)
    s.add_argument("--order", help="comma-separated config names; the first is the baseline")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except (InvariantFailure, kio.ManifestMismatch, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
