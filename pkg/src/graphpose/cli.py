"""Command-line entry point.

Every command is a pure function of the config (file plus ``--set``
overrides) and seed. Output goes to ``--out``, else ``$GRAPHPOSE_OUTPUT``,
else the config's ``output_dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import PipelineConfig
from .crg import CenterRefinementGraph, MLPBaseline
from .errors import ConfigError, GraphPoseError, TrainingDivergedError
from .experiment import build_scenes, needed_models, query_bench, run_experiment, train_models
from .mmg import EpipolarMatcher, GroundTruthMatcher, MatchingGraph, _item_seed
from .prg import PoseRegressionGraph, initial_poses_for_centers
from .synth import BONES, make_frame


EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
ENV_OUTPUT = "GRAPHPOSE_OUTPUT"
WEIGHT_CLASSES = {"mmg": MatchingGraph, "crg": CenterRefinementGraph, "mlp": MLPBaseline,
                  "prg": PoseRegressionGraph}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "views", None) is not None:
        overrides.append(f"eval.views=[{args.views}]")
    cfg = cfg.with_overrides(overrides)
    out = args.out or os.environ.get(ENV_OUTPUT) or cfg.output_dir
    return cfg.with_overrides([f"output_dir={json.dumps(str(out))}"])


def load_models(cfg: PipelineConfig, names) -> dict:
    wdir = Path(cfg.output_dir) / "weights"
    models = {}
    for name in sorted(names):
        path = wdir / f"{name}.json"
        if path.exists():
            models[name] = WEIGHT_CLASSES[name].load_weights(path)
    return models


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_scenes(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.output_dir)
    for split in ("train", "test"):
        for i, scene in enumerate(build_scenes(cfg, split)):
            p = out / "scenes" / split / f"{i:05d}.json"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(scene.dumps())
    (out / "config.json").write_text(cfg.dumps() + "\n")
    print(f"wrote {cfg.scene['n_train']} train and {cfg.scene['n_test']} test scenes to {out / 'scenes'}")
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.output_dir)
    names = [args.module] if args.module != "all" else ["mmg", "crg", "mlp", "prg"]
    models = train_models(cfg, names)
    for name, model in models.items():
        (out / "weights").mkdir(parents=True, exist_ok=True)
        model.save_weights(out / "weights" / f"{name}.json")
        _write_json(out / "history" / f"{name}.json",
                    {"module": name, "n_updates": model.n_updates_, "epochs": model.history_})
        print(f"{name}: {len(model.history_)} epochs, final {model.history_[-1]}")
    return EXIT_OK


def cmd_infer(cfg: PipelineConfig, args) -> int:
    ev = cfg.eval
    matcher, centers, poses = ev["matchers"][0], ev["centers"][0], ev["poses"][0]
    views = int(ev["views"][0])
    need = {n for n in (matcher, centers) if n in WEIGHT_CLASSES} | ({"prg"} if poses == "prg" else set())
    models = load_models(cfg, need)
    missing = need - set(models)
    if missing:
        raise ConfigError(f"no trained weights for {sorted(missing)}; run `graphpose train` first")
    out = Path(cfg.output_dir) / "infer"
    m = cfg.mmg["m"]
    match_est = {"epipolar": EpipolarMatcher(m, cfg.mmg["threshold"]), "gt": GroundTruthMatcher(m)}
    for i, scene in enumerate(build_scenes(cfg, "test")):
        frame = make_frame(scene, scene.seed)
        frame = frame.subset(range(views)) if views != frame.n_views else frame
        mr = models["mmg"].predict(frame) if matcher == "mmg" else match_est[matcher].predict(frame)
        if centers == "triangulation":
            c, s = mr.coarse_centers, mr.center_scores
        else:
            rc = models[centers].predict(frame, mr)
            c, s = rc.centers, rc.confidences
        init = initial_poses_for_centers(scene, c, _item_seed(scene.seed, 41),
                                         cfg.noise["initial_pose_sigma_mm"],
                                         ev["initial_match_radius_mm"])
        persons = []
        for pid, (p, score) in enumerate(zip(init, s)):
            if poses == "prg":
                rp = models["prg"].refine_pose(p, frame.cameras, frame.grids, BONES, frame.bounds)
                rec = rp.to_record(pid)
            else:
                rec = {"person": pid, "joints": p.tolist(), "confidences": [None] * len(p)}
            rec["score"] = float(score)
            persons.append(rec)
        _write_json(out / f"{i:05d}.json", {"scene_seed": scene.seed, "views": views,
                                             "variant": [matcher, centers, poses], "persons": persons})
    print(f"wrote {cfg.scene['n_test']} frame records to {out}")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    models = load_models(cfg, needed_models(cfg))
    report = run_experiment(cfg, models)
    out = Path(cfg.output_dir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.dumps() + "\n")
    (out / "pr_curves.csv").write_text(report.pr_csv())
    summary = report.summary()
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_bench_queries(cfg: PipelineConfig, args) -> int:
    bench = query_bench(cfg)
    _write_json(Path(cfg.output_dir) / "bench" / "queries.json", bench)
    print(f"{'persons':>7}  {'crg_queries':>11}  {'grid_queries':>12}  {'ratio':>8}")
    for r in bench["rows"]:
        print(f"{r['persons']:>7}  {r['crg_queries']:>11}  {r['grid_queries']:>12}  {r['ratio']:>8.1f}")
    return EXIT_OK


COMMANDS = {"gen-scenes": cmd_gen_scenes, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "bench-queries": cmd_bench_queries}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults built in)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config field; repeatable")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help=f"output directory (else ${ENV_OUTPUT}, else config)")
    common.add_argument("--views", type=int, help="evaluate/infer on the first N cameras")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    parser = argparse.ArgumentParser(prog="graphpose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-scenes", parents=[common], help="write train/test scene files")
    t = sub.add_parser("train", parents=[common], help="train a module and save its weights")
    t.add_argument("module", choices=["mmg", "crg", "mlp", "prg", "all"])
    sub.add_parser("infer", parents=[common], help="per-frame pose records for the test scenes")
    sub.add_parser("eval", parents=[common], help="run the variant matrix and write reports")
    sub.add_parser("bench-queries", parents=[common], help="grid vs coarse-to-fine query counts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (GraphPoseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
