"""Experiment driver: trains the modules a variant matrix needs, runs every
variant over held-out scenes and reduces the results into a report."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import PipelineConfig
from .crg import RefinedCenters, SearchSchedule, ball_lattice, queries_per_proposal, refine_center
from .errors import ConfigError, ContractError
from .metrics import f1_from_counts, pair_counts, pcp3d_per_actor, pooled_pose_scores, pooled_pr_curve
from .mmg import EpipolarMatcher, GroundTruthMatcher, MatchResult, _item_seed
from .prg import initial_poses_for_centers
from .synth import BONES, Frame, Scene, generate_scene, make_frame

log = logging.getLogger(__name__)

TRAINABLE = ("mmg", "crg", "mlp", "prg")


def _n_persons(config: PipelineConfig, seed: int) -> int:
    sc = config.scene
    return int(np.random.default_rng([seed, 7]).integers(sc["persons_min"], sc["persons_max"] + 1))


def build_scenes(config: PipelineConfig, split: str) -> list[Scene]:
    """Deterministic train or test scenes; each scene's seed is its identity."""
    sc = config.scene
    if split == "train":
        n, offset = sc["n_train"], sc["train_seed_offset"]
    elif split == "test":
        n, offset = sc["n_test"], sc["test_seed_offset"]
    else:
        raise ConfigError(f"unknown split {split!r}")
    rig = config.rig_spec()
    noise = config.noise_config()
    bounds = np.asarray(sc["bounds"], dtype=np.float64)
    out = []
    for i in range(n):
        seed = int(config.seed) * 1_000_003 + offset + i
        out.append(generate_scene(seed, _n_persons(config, seed), rig, bounds, noise))
    return out


def needed_models(config: PipelineConfig) -> set[str]:
    ev = config.eval
    need = set()
    if "mmg" in ev["matchers"]:
        need.add("mmg")
    need |= {c for c in ev["centers"] if c in ("crg", "mlp")}
    if "prg" in ev["poses"]:
        need.add("prg")
    return need


def train_models(config: PipelineConfig, names=None, scenes=None) -> dict:
    names = sorted(needed_models(config) if names is None else names)
    scenes = build_scenes(config, "train") if scenes is None else scenes
    models = {}
    for name in names:
        if name not in TRAINABLE:
            raise ConfigError(f"unknown module {name!r}")
        log.info("training %s on %d scenes", name, len(scenes))
        models[name] = config.estimator(name).fit(scenes)
    return models


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, NaN/inf to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


@dataclass
class EvalReport:
    fingerprint: str
    seed: int
    n_scenes: int
    variants: dict
    queries: dict
    pr_curves: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return _clean({"config_fingerprint": self.fingerprint, "seed": self.seed,
                       "n_scenes": self.n_scenes, "variants": self.variants,
                       "queries": self.queries})

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def pr_csv(self) -> str:
        lines = ["variant,threshold_mm,rank,score,precision,recall"]
        for name in sorted(self.pr_curves):
            for t, rows in sorted(self.pr_curves[name].items()):
                for r in rows:
                    lines.append(f"{name},{t:g},{int(r[0])},{r[1]!r},{r[2]!r},{r[3]!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        """Aligned-column table of the headline numbers."""
        head = ("variant", "match_F1", "center_mAP", "pose_mAP", "pose_mAR", "MPJPE", "PCP3D")
        rows = [head]
        for name in sorted(self.variants):
            v = self.variants[name]
            if "error" in v:
                rows.append((name, v["error"], "", "", "", "", ""))
                continue

            def fmt(x, scale=1.0):
                return "nan" if x is None or not np.isfinite(x) else f"{x * scale:.2f}"

            rows.append((name, fmt(v["matching"]["f1"]), fmt(v["center"]["mAP"], 100),
                         fmt(v["pose"]["mAP"], 100), fmt(v["pose"]["mAR"], 100),
                         fmt(v["pose"]["mpjpe_mm"]), fmt(v["pose"]["pcp3d"], 100)))
        widths = [max(len(str(r[i])) for r in rows) for i in range(len(head))]
        return "\n".join("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
                         for r in rows) + "\n"


def variant_name(matcher: str, centers: str, poses: str, views: int) -> str:
    return f"{matcher}+{centers}+{poses}@{views}v"


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


class _SceneCache:
    def __init__(self, config, scene, models):
        self.config, self.scene, self.models = config, scene, models
        self.frame = make_frame(scene, scene.seed)
        self.matches: dict = {}
        self.centers: dict = {}

    def view_frame(self, views: int) -> Frame:
        return self.frame if views == self.frame.n_views else self.frame.subset(range(views))

    def match(self, matcher: str, views: int) -> MatchResult:
        key = (matcher, views)
        if key not in self.matches:
            m = self.config.mmg["m"]
            est = {"epipolar": lambda: EpipolarMatcher(m, self.config.mmg["threshold"]),
                   "gt": lambda: GroundTruthMatcher(m),
                   "mmg": lambda: self.models["mmg"]}[matcher]()
            self.matches[key] = est.predict(self.view_frame(views))
        return self.matches[key]

    def detect(self, matcher: str, centers: str, views: int):
        key = (matcher, centers, views)
        if key not in self.centers:
            mr = self.match(matcher, views)
            if centers == "triangulation":
                res = (mr.coarse_centers, mr.center_scores, 0)
            else:
                rc: RefinedCenters = self.models[centers].predict(self.view_frame(views), mr)
                res = (rc.centers, rc.confidences, rc.query_count)
            self.centers[key] = res
        return self.centers[key]


def _run_variant(caches, matcher, centers, poses, views, config, models) -> tuple[dict, dict]:
    ev = config.eval
    thresholds = [float(t) for t in ev["thresholds_mm"]]
    counts = np.zeros(3, dtype=np.int64)
    center_frames, pose_frames = [], []
    actors: dict[int, list] = {}
    queries = []
    sigma = config.noise["initial_pose_sigma_mm"]
    for cache in caches:
        scene = cache.scene
        mr = cache.match(matcher, views)
        counts += pair_counts(mr.clusters, mr.graph.identities)
        c, s, q = cache.detect(matcher, centers, views)
        queries.append(q)
        center_frames.append((c[:, None, :], s, scene.centers[:, None, :]))
        init = initial_poses_for_centers(scene, c, _item_seed(scene.seed, 41), sigma,
                                         ev["initial_match_radius_mm"])
        if poses == "prg":
            frame = cache.view_frame(views)
            final = np.array([models["prg"].refine_pose(p, frame.cameras, frame.grids, BONES,
                                                        frame.bounds).joints for p in init])
            final = final.reshape(init.shape)
        else:
            final = init
        gts = np.stack([p.joints for p in scene.persons])
        pose_frames.append((final, s, gts))
        for j, v in enumerate(pcp3d_per_actor(final, gts, BONES, ev["pcp_alpha"])):
            actors.setdefault(j, []).append(v)
    p, r, f1 = f1_from_counts(*counts.tolist())
    cs = pooled_pose_scores(center_frames, thresholds, ev["mpjpe_match_mm"])
    ps = pooled_pose_scores(pose_frames, thresholds, ev["mpjpe_match_mm"])
    per_actor = {str(j): float(np.mean(v)) for j, v in sorted(actors.items())}
    all_pcp = [x for v in actors.values() for x in v]
    report = {
        "matcher": matcher, "centers": centers, "poses": poses, "views": views,
        "matching": {"precision": p, "recall": r, "f1": f1},
        "center": {"ap": {f"{t:g}": cs.ap[t] for t in thresholds},
                   "ar": {f"{t:g}": cs.ar[t] for t in thresholds},
                   "mAP": cs.mAP, "mAR": cs.mAR, "mean_error_mm": cs.mpjpe,
                   "n_pred": cs.n_pred, "n_gt": cs.n_gt},
        "pose": {"ap": {f"{t:g}": ps.ap[t] for t in thresholds},
                 "ar": {f"{t:g}": ps.ar[t] for t in thresholds},
                 "mAP": ps.mAP, "mAR": ps.mAR, "mpjpe_mm": ps.mpjpe,
                 "pcp3d_per_actor": per_actor,
                 "pcp3d": float(np.mean(all_pcp)) if all_pcp else 0.0,
                 "n_pred": ps.n_pred, "n_gt": ps.n_gt},
        "queries": {"total": int(np.sum(queries)), "per_frame": float(np.mean(queries))},
    }
    curves = {t: pooled_pr_curve(pose_frames, t).tolist() for t in thresholds}
    return report, curves


def run_experiment(config: PipelineConfig, models: Optional[dict] = None,
                   scenes: Optional[list] = None) -> EvalReport:
    """Evaluate every variant in ``config.eval`` on the test scenes.

    Missing trained modules are trained from the config's training scenes.
    Variants a module cannot serve (the MLP baseline on a different camera
    count) are reported with an ``error`` entry instead of numbers.
    """
    ev = config.eval
    models = dict(models or {})
    missing = needed_models(config) - set(models)
    if missing:
        models.update(train_models(config, missing))
    scenes = build_scenes(config, "test") if scenes is None else scenes
    caches = [_SceneCache(config, s, models) for s in scenes]
    variants, curves = {}, {}
    for views in ev["views"]:
        for matcher in ev["matchers"]:
            for centers in ev["centers"]:
                for poses in ev["poses"]:
                    name = variant_name(matcher, centers, poses, views)
                    try:
                        variants[name], curves[name] = _run_variant(
                            caches, matcher, centers, poses, int(views), config, models)
                    except ContractError as exc:
                        variants[name] = {"matcher": matcher, "centers": centers, "poses": poses,
                                          "views": views, "error": str(exc)}
    return EvalReport(config.fingerprint(), config.seed, len(scenes), variants,
                      query_bench(config), curves)


# ---------------------------------------------------------------------------
# Query accounting
# ---------------------------------------------------------------------------


def grid_queries(bounds, pitch: float) -> int:
    """Points of a regular full-volume scan at ``pitch``."""
    b = np.asarray(bounds, dtype=np.float64)
    return int(round(np.prod(b[1] - b[0]) / pitch ** 3))


def query_bench(config: PipelineConfig, max_persons: int = 6) -> dict:
    """Full-grid scan vs coarse-to-fine search query counts.

    The search count is measured by running the schedule with a counting
    scorer around each person's centre, which is exact because lattice points
    are clipped into bounds rather than dropped.
    """
    crg = config.crg
    schedule = SearchSchedule(crg["r0"], crg["tau0"], crg["gamma"], crg["gamma_prime"], crg["epsilon"])
    ev = config.eval
    bounds = np.asarray(config.scene["bounds"], dtype=np.float64)
    grid = grid_queries(bounds, ev["bench_grid_pitch_mm"])
    rows = []
    for n in range(1, max(max_persons, ev["bench_persons"]) + 1):
        scene = generate_scene(_item_seed(config.seed, 51, n), n, config.rig_spec(), bounds,
                               config.noise_config())
        measured = sum(refine_center(lambda p: np.zeros(len(p)), c, schedule, bounds)[2]
                       for c in scene.centers)
        rows.append({"persons": n, "crg_queries": int(measured), "grid_queries": grid,
                     "ratio": grid / measured})
    default = next(r for r in rows if r["persons"] == ev["bench_persons"])
    return {
        "schedule": [{"pitch_mm": p, "radius_mm": r, "lattice_points": len(ball_lattice(p, r))}
                     for p, r in schedule.steps()],
        "per_proposal": queries_per_proposal(schedule),
        "grid_pitch_mm": ev["bench_grid_pitch_mm"],
        "rows": rows,
        "default": default,
    }
