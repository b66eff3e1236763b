"""End-to-end generative pipeline: flow field plus copula base.

Fitting runs ingest -> fit-field -> scores -> (nu) -> surface and packages
the result as an SfmModel; generation samples base curves from the copula
model and pushes them through the forward flow on the working grid.  Errors
raised inside a stage are re-raised with the stage label attached.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from .copula import (CopulaBaseModel, estimate_nu, estimate_surface,
                     latent_scores, sample_base, scores_to_matrix,
                     t_transform_scores)
from .dataset import IrregularDataset, RegularGrid
from .errors import NumericalError, SmoothflowError, StageError, ValidationError
from .flow import (FlowTrainingConfig, TensorSplineField, fit_vector_field,
                   integrate_curves)

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 50


def _staged(stage: str, fn, *args, **kwargs):
    """Run one pipeline stage, attaching the stage label to any failure."""
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except SmoothflowError as exc:
        raise StageError(stage, str(exc)) from exc


@dataclass
class GeneratedEnsemble:
    """m generated curves on the working grid."""

    curves: np.ndarray
    grid: RegularGrid
    seed: object = None

    def __post_init__(self):
        self.curves = np.atleast_2d(np.asarray(self.curves, dtype=float))
        if self.curves.shape[1] != self.grid.n_points:
            raise ValidationError("curves do not match the grid")
        if not np.all(np.isfinite(self.curves)):
            raise ValidationError("generated curves must be finite")

    @property
    def n_curves(self) -> int:
        return self.curves.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["curve_id", "t", "value"])
            for i, row in enumerate(self.curves):
                cid = f"gen{i:05d}"
                for t, v in zip(self.grid.values, row):
                    writer.writerow([cid, repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "GeneratedEnsemble":
        by_curve: dict = {}
        times: dict = {}
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or \
                    set(("curve_id", "t", "value")) - set(reader.fieldnames):
                raise ValidationError(
                    f"{path}: expected columns curve_id,t,value")
            for rec in reader:
                by_curve.setdefault(rec["curve_id"], []).append(
                    float(rec["value"]))
                times.setdefault(rec["curve_id"], []).append(float(rec["t"]))
        if not by_curve:
            raise ValidationError(f"{path}: no curves found")
        t0 = np.asarray(next(iter(times.values())))
        if len(t0) < 4:
            raise ValidationError(f"{path}: curves too short")
        spacing = np.diff(t0)
        if np.ptp(spacing) > 1e-9 * max(abs(t0[-1] - t0[0]), 1.0):
            raise ValidationError(f"{path}: curve times are not a regular grid")
        grid = RegularGrid(float(t0[0]), float(t0[-1]), len(t0))
        curves = np.asarray([by_curve[c] for c in by_curve], dtype=float)
        return cls(curves=curves, grid=grid)


class SfmModel:
    """Fitted generative model: vector field + copula base on one grid."""

    FORMAT = 1

    def __init__(self, field: TensorSplineField, base: CopulaBaseModel,
                 grid: RegularGrid, config: dict | None = None):
        bg = base.grid
        if (bg.n_points, bg.t_min, bg.t_max) != \
                (grid.n_points, grid.t_min, grid.t_max):
            raise ValidationError("base model grid differs from model grid")
        self.field = field
        self.base = base
        self.grid = grid
        self.config = dict(config or {})

    def to_dict(self) -> dict:
        return {
            "format": self.FORMAT,
            "field": self.field.to_dict(),
            "base": self.base.to_dict(),
            "grid": self.grid.to_dict(),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SfmModel":
        if data.get("format") != cls.FORMAT:
            raise ValidationError("unsupported model format")
        return cls(field=TensorSplineField.from_dict(data["field"]),
                   base=CopulaBaseModel.from_dict(data["base"]),
                   grid=RegularGrid.from_dict(data["grid"]),
                   config=data.get("config", {}))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "SfmModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def fit(ds: IrregularDataset, cfg: FlowTrainingConfig | None = None,
        base_family: str = "gaussian", surface_dim: int = 10,
        steps: int = DEFAULT_STEPS) -> SfmModel:
    """Fit the full generative model on sparse irregular data."""
    if base_family not in ("gaussian", "student-t"):
        raise ValidationError(
            f"base_family must be 'gaussian' or 'student-t', got {base_family!r}")
    if cfg is None:
        cfg = FlowTrainingConfig()
    if ds.n_subjects < 1 or ds.n_observations < 1:
        raise StageError("ingest", "dataset has no observations")
    grid = ds.grid

    field = _staged("fit-field", fit_vector_field, ds, cfg)
    scores = _staged("scores", latent_scores, ds, field, steps)

    nu = None
    if base_family == "student-t":
        matrix = scores_to_matrix(scores, grid)
        nu = _staged("nu", estimate_nu, matrix)
        scores = t_transform_scores(scores, nu)
        logger.info("estimated degrees of freedom: %.3f", nu)

    surface = _staged("surface", estimate_surface, scores, grid, surface_dim)
    base = _staged("surface", CopulaBaseModel, base_family, surface, nu)

    config = dict(cfg.to_dict())
    config.update({"base_family": base_family, "surface_dim": surface_dim,
                   "steps": steps})
    if nu is not None:
        config["nu"] = float(nu)
    return SfmModel(field=field, base=base, grid=grid, config=config)


def generate(model: SfmModel, m: int, seed=None,
             steps: int | None = None) -> GeneratedEnsemble:
    """Sample m base curves and transport them through the forward flow."""
    if m < 1:
        raise ValidationError("need m >= 1 generated curves")
    if steps is None:
        steps = int(model.config.get("steps", DEFAULT_STEPS))
    base_curves = _staged("sample", sample_base, model.base, m, seed)

    def _forward():
        out = integrate_curves(model.field, base_curves, model.grid,
                               direction="forward", steps=steps, strict=False)
        bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1))
        if bad.size:
            raise NumericalError(
                "forward integration failed for curve indices "
                f"{bad[:10].tolist()}{'...' if bad.size > 10 else ''}")
        return out

    curves = _staged("integrate", _forward)
    return GeneratedEnsemble(curves=curves, grid=model.grid, seed=seed)


def resample_ensemble(ens: GeneratedEnsemble, n_points: int) -> GeneratedEnsemble:
    """Cubic-spline interpolation of generated curves onto a finer grid.

    Post-processing convenience only; the model itself generates on the
    working grid.
    """
    from scipy.interpolate import CubicSpline
    if n_points < ens.grid.n_points:
        raise ValidationError("resampling targets a finer grid")
    fine = RegularGrid(ens.grid.t_min, ens.grid.t_max, n_points)
    spline = CubicSpline(ens.grid.values, ens.curves, axis=1)
    return GeneratedEnsemble(curves=spline(fine.values), grid=fine,
                             seed=ens.seed)
