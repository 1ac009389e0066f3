"""Shared estimator plumbing: training loop, weight files, validation."""

from __future__ import annotations

import json
import logging
from typing import Callable, Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ContractError, TrainingDivergedError
from .nn import Adam, GnnModel
from .synth import Frame, Scene

log = logging.getLogger(__name__)

WEIGHTS_FORMAT = "graphpose-weights"
WEIGHTS_VERSION = 1


def check_scenes(X) -> list[Scene]:
    scenes = list(X) if not isinstance(X, Scene) else [X]
    if not scenes:
        raise ContractError("need at least one training scene")
    for s in scenes:
        if not isinstance(s, Scene):
            raise ContractError(f"expected Scene, got {type(s).__name__}")
    return scenes


def check_frame(frame) -> Frame:
    if not isinstance(frame, Frame):
        raise ContractError(f"expected Frame, got {type(frame).__name__}")
    if len(frame.grids) != frame.n_views or len(frame.detections) != frame.n_views:
        raise ContractError("frame cameras, grids and detections must align per view")
    return frame


def check_points(points, bounds=None) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    if p.ndim != 2 or p.shape[1] != 3:
        raise ContractError("points must be (N, 3)")
    if not np.all(np.isfinite(p)):
        raise ContractError("points must be finite")
    return p


def normalize_coords(points: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Map world points into the unit cube spanned by ``bounds``."""
    lo, hi = bounds
    return (points - lo) / (hi - lo)


class GraphEstimator(BaseEstimator):
    """Base class for the trainable graph modules.

    Subclasses build ``self.models_`` (a dict of :class:`GnnModel`) in
    ``_build_models`` and implement ``_prepare`` (per-scene training data for
    every epoch) and ``_batch_step`` (loss and gradients for a batch).
    """

    _model_names: tuple = ("model",)

    def _rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([int(self.random_state), stream])

    # --- training -----------------------------------------------------------------

    def _build_models(self, rng) -> dict[str, GnnModel]:
        raise NotImplementedError

    def _prepare(self, scene: Scene, index: int, n_epochs: int) -> list:
        raise NotImplementedError

    def _batch_step(self, items: list, compute_grads: bool = True):
        """Returns ``(loss, grads, stats)``."""
        raise NotImplementedError

    def _all_parameters(self):
        out = []
        for key in self._model_names:
            out.extend((f"{key}/{n}", p) for n, p in self.models_[key].parameters())
        return out

    def _merge_grads(self, per_model: dict[str, dict]) -> dict:
        merged = {}
        for key, grads in per_model.items():
            merged.update({f"{key}/{n}": g for n, g in grads.items()})
        return merged

    def _fit(self, X, epoch_callback: Callable | None = None):
        scenes = check_scenes(X)
        self.models_ = self._build_models(self._rng(0))
        prepared = [self._prepare(s, i, self.epochs) for i, s in enumerate(scenes)]
        opt = Adam(lr=self.learning_rate)
        order_rng = self._rng(1)
        self.history_ = []
        params = self._all_parameters()
        for epoch in range(self.epochs):
            order = order_rng.permutation(len(prepared))
            items = [item for i in order for item in prepared[i][epoch]]
            totals: dict[str, float] = {}
            count = 0
            for start in range(0, len(items), self.batch_size):
                batch = items[start:start + self.batch_size]
                loss, grads, stats = self._batch_step(batch)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
                opt.step(params, grads)
                n = len(batch)
                count += n
                totals["loss"] = totals.get("loss", 0.0) + loss * n
                for k, v in stats.items():
                    totals[k] = totals.get(k, 0.0) + v * n
            record = {"epoch": epoch + 1, **{k: v / max(count, 1) for k, v in totals.items()}}
            self.history_.append(record)
            log.info("%s epoch %d: %s", type(self).__name__, epoch + 1, record)
            if epoch_callback is not None:
                epoch_callback(self, record)
        self.n_updates_ = opt.t
        return self

    def evaluate_loss(self, items: list) -> dict:
        """Mean loss and statistics over prepared items without updating."""
        check_is_fitted(self, "models_")
        loss, _, stats = self._batch_step(items, compute_grads=False)
        return {"loss": loss, **stats}

    # --- weights ------------------------------------------------------------------

    def weights_dict(self) -> dict:
        check_is_fitted(self, "models_")
        return {
            "format": WEIGHTS_FORMAT,
            "version": WEIGHTS_VERSION,
            "estimator": type(self).__name__,
            "params": self.get_params(),
            "extra": self._extra_state(),
            "models": {
                key: {
                    "architecture": m.describe(),
                    "parameters": {n: {"shape": list(p.shape), "data": p.ravel().tolist()}
                                   for n, p in m.parameters()},
                }
                for key, m in self.models_.items()
            },
        }

    def _extra_state(self) -> dict:
        return {}

    def _load_extra_state(self, extra: dict) -> None:
        pass

    def save_weights(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.weights_dict(), fh, sort_keys=True)

    @classmethod
    def from_weights_dict(cls, d: dict):
        if d.get("format") != WEIGHTS_FORMAT or d.get("version") != WEIGHTS_VERSION:
            raise ContractError("not a supported weight file")
        if d.get("estimator") != cls.__name__:
            raise ContractError(f"weight file holds {d.get('estimator')}, not {cls.__name__}")
        est = cls(**d["params"])
        models = est._build_models(est._rng(0))
        if set(models) != set(d["models"]):
            raise ContractError("weight file model set does not match architecture")
        for key, model in models.items():
            entry = d["models"][key]
            if model.describe() != entry["architecture"]:
                raise ContractError(f"architecture mismatch for {key}")
            state = {}
            for name, spec in entry["parameters"].items():
                arr = np.asarray(spec["data"], dtype=np.float64)
                if arr.size != int(np.prod(spec["shape"])):
                    raise ContractError(f"parameter {name} has wrong element count")
                state[name] = arr.reshape(spec["shape"])
            model.load_state_dict(state)
        est.models_ = models
        est._load_extra_state(d.get("extra", {}))
        return est

    @classmethod
    def load_weights(cls, path):
        with open(path) as fh:
            return cls.from_weights_dict(json.load(fh))


def batched(seq: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(seq), size):
        yield seq[i:i + size]
