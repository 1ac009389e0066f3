"""Pipeline configuration: one JSON document with a section per module.

Module sections default to the estimator defaults, so the constants live in
exactly one place. ``key=value`` overrides address fields as
``section.field``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .crg import CenterRefinementGraph, MLPBaseline
from .errors import ConfigError
from .mmg import MatchingGraph
from .prg import PoseRegressionGraph
from .synth import NoiseConfig, RigSpec

MATCHERS = ("epipolar", "mmg", "gt")
CENTERS = ("triangulation", "mlp", "crg")
POSES = ("none", "prg")


def _plain(d: dict) -> dict:
    # JSON-normalise (tuples become lists) so parse/serialise round-trips exactly
    return json.loads(json.dumps(d, sort_keys=True))


def _estimator_defaults(cls) -> dict:
    params = cls().get_params()
    params.pop("random_state", None)
    return _plain(params)


def _scene_defaults() -> dict:
    rig = asdict(RigSpec())
    return _plain({
        "n_train": 150, "n_test": 40, "persons_min": 2, "persons_max": 5,
        "train_seed_offset": 0, "test_seed_offset": 100000,
        "bounds": [[-4000.0, -4000.0, 0.0], [4000.0, 4000.0, 2000.0]],
        **rig,
    })


def _eval_defaults() -> dict:
    return {
        "matchers": ["mmg"], "centers": ["crg"], "poses": ["prg"], "views": [5],
        "thresholds_mm": [25.0, 50.0, 75.0, 100.0, 125.0, 150.0],
        "pcp_alpha": 0.5, "mpjpe_match_mm": 500.0, "initial_match_radius_mm": 500.0,
        "bench_persons": 4, "bench_grid_pitch_mm": 50.0,
    }


@dataclass
class PipelineConfig:
    scene: dict = field(default_factory=_scene_defaults)
    noise: dict = field(default_factory=lambda: _plain(asdict(NoiseConfig())))
    mmg: dict = field(default_factory=lambda: _estimator_defaults(MatchingGraph))
    crg: dict = field(default_factory=lambda: _estimator_defaults(CenterRefinementGraph))
    mlp: dict = field(default_factory=lambda: _estimator_defaults(MLPBaseline))
    prg: dict = field(default_factory=lambda: _estimator_defaults(PoseRegressionGraph))
    eval: dict = field(default_factory=_eval_defaults)
    seed: int = 0
    output_dir: str = "graphpose-out"

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("seed", "output_dir"):
                continue
            base = f.default_factory()
            given = getattr(self, f.name)
            if not isinstance(given, dict):
                raise ConfigError(f"section {f.name!r} must be an object")
            unknown = set(given) - set(base)
            if unknown:
                raise ConfigError(f"unknown keys in {f.name}: {sorted(unknown)}")
            setattr(self, f.name, _plain({**base, **given}))
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        ev = self.eval
        for key, allowed in (("matchers", MATCHERS), ("centers", CENTERS), ("poses", POSES)):
            bad = [v for v in ev[key] if v not in allowed]
            if bad:
                raise ConfigError(f"unknown {key} variant(s) {bad}; choose from {list(allowed)}")
        if any(not 3 <= int(v) <= self.scene["n_views"] for v in ev["views"]):
            raise ConfigError("eval views must lie between 3 and the rig size")
        if self.scene["persons_min"] > self.scene["persons_max"] or self.scene["persons_min"] < 1:
            raise ConfigError("need 1 <= persons_min <= persons_max")
        try:
            self.noise_config()
            self.rig_spec()
        except Exception as exc:  # surface validation failures as config errors
            raise ConfigError(str(exc)) from exc

    # --- typed views --------------------------------------------------------------

    def noise_config(self) -> NoiseConfig:
        return NoiseConfig(**self.noise)

    def rig_spec(self, n_views: int | None = None) -> RigSpec:
        keys = {f.name for f in fields(RigSpec)}
        d = {k: v for k, v in self.scene.items() if k in keys}
        d["target"], d["image_size"] = tuple(d["target"]), tuple(d["image_size"])
        if n_views is not None:
            d["n_views"] = n_views
        return RigSpec(**d)

    def estimator(self, name: str):
        classes = {"mmg": MatchingGraph, "crg": CenterRefinementGraph, "mlp": MLPBaseline,
                   "prg": PoseRegressionGraph}
        if name not in classes:
            raise ConfigError(f"unknown module {name!r}")
        params = dict(getattr(self, name))
        if name == "mlp":
            params["n_views"] = self.scene["n_views"]
        return classes[name](random_state=self.seed, **params)

    # --- serialisation ------------------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def loads(cls, text: str) -> "PipelineConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.loads(fh.read())

    def fingerprint(self) -> str:
        blob = json.dumps({k: v for k, v in self.to_dict().items() if k != "output_dir"},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, assignments) -> "PipelineConfig":
        """Apply ``section.key=value`` (or ``seed=N``) overrides; values parse
        as JSON when possible, else as strings."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = key.strip().split(".")
            if len(parts) == 1 and parts[0] in ("seed", "output_dir"):
                d[parts[0]] = value
            elif len(parts) == 2 and isinstance(d.get(parts[0]), dict):
                if parts[1] not in d[parts[0]]:
                    raise ConfigError(f"unknown config field {key!r}")
                d[parts[0]][parts[1]] = value
            else:
                raise ConfigError(f"unknown config field {key!r}")
        return PipelineConfig.from_dict(d)
