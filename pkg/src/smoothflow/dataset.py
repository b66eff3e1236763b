"""Sparse irregular functional observations on a common regular time grid.

Each subject carries a short list of (time, value) observations.  All times are
snapped to the nearest point of an equally spaced grid so that downstream
stages (flow training, score extraction, surface smoothing) can index curves
by grid position.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 50


@dataclass(frozen=True)
class RegularGrid:
    """Equally spaced time grid covering the observation domain."""

    t_min: float
    t_max: float
    n_points: int

    def __post_init__(self):
        if not (math.isfinite(self.t_min) and math.isfinite(self.t_max)):
            raise ValidationError("grid bounds must be finite")
        if self.t_max <= self.t_min:
            raise ValidationError(f"need t_max > t_min, got [{self.t_min}, {self.t_max}]")
        if self.n_points < 4:
            raise ValidationError(f"grid needs at least 4 points, got {self.n_points}")

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_max, self.n_points)

    @property
    def spacing(self) -> float:
        return (self.t_max - self.t_min) / (self.n_points - 1)

    def snap_index(self, t: np.ndarray) -> np.ndarray:
        """Index of the nearest grid point for each time (clamped to the domain)."""
        t = np.asarray(t, dtype=float)
        idx = np.rint((t - self.t_min) / self.spacing).astype(int)
        return np.clip(idx, 0, self.n_points - 1)

    def to_dict(self) -> dict:
        return {"t_min": self.t_min, "t_max": self.t_max, "n_points": self.n_points}

    @classmethod
    def from_dict(cls, d: dict) -> "RegularGrid":
        return cls(float(d["t_min"]), float(d["t_max"]), int(d["n_points"]))


@dataclass
class Subject:
    """One subject's observations, sorted by strictly increasing grid time."""

    id: str
    times: np.ndarray       # snapped times, members of grid.values
    values: np.ndarray      # observed values, finite
    grid_idx: np.ndarray    # index of each time on the grid

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.grid_idx = np.asarray(self.grid_idx, dtype=int)
        if len(self.times) == 0:
            raise ValidationError(f"subject {self.id!r} has no observations")
        if not (len(self.times) == len(self.values) == len(self.grid_idx)):
            raise ValidationError(f"subject {self.id!r}: mismatched field lengths")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError(f"subject {self.id!r}: non-finite value")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError(f"subject {self.id!r}: times not strictly increasing")

    @property
    def n_points(self) -> int:
        return len(self.times)


@dataclass
class IrregularDataset:
    subjects: list[Subject]
    grid: RegularGrid
    # set when any raw observation time fell outside the declared domain
    clamped_points: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.subjects:
            raise ValidationError("dataset has no subjects")
        gv = self.grid.values
        for s in self.subjects:
            if not np.array_equal(s.times, gv[s.grid_idx]):
                raise ValidationError(f"subject {s.id!r}: times not on the grid")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_observations(self) -> int:
        return sum(s.n_points for s in self.subjects)

    @property
    def domain(self) -> tuple[float, float]:
        return (self.grid.t_min, self.grid.t_max)

    def value_range(self) -> tuple[float, float]:
        lo = min(float(s.values.min()) for s in self.subjects)
        hi = max(float(s.values.max()) for s in self.subjects)
        return lo, hi

    # ---- construction -----------------------------------------------------

    @classmethod
    def from_records(
        cls,
        records,
        grid_size: int = DEFAULT_GRID_SIZE,
        grid: RegularGrid | None = None,
    ) -> "IrregularDataset":
        """Build a dataset from (subject_id, t, value) triples.

        Without an explicit grid, the domain is the min/max observed time and
        the grid has ``grid_size`` points.  Times are snapped to the nearest
        grid point; duplicate observations at one snapped time are averaged.
        Times outside an explicitly declared domain are clamped (and counted).
        """
        ids, ts, xs = [], [], []
        for rec in records:
            sid, t, x = rec
            ids.append(str(sid))
            ts.append(float(t))
            xs.append(float(x))
        if not ids:
            raise ValidationError("no observation records")
        ts = np.asarray(ts)
        xs = np.asarray(xs)
        if not np.all(np.isfinite(ts)):
            raise ValidationError("non-finite observation time")
        if not np.all(np.isfinite(xs)):
            raise ValidationError("non-finite observation value")

        if grid is None:
            t_min, t_max = float(ts.min()), float(ts.max())
            if t_max <= t_min:
                raise ValidationError("all observation times identical; cannot build a grid")
            grid = RegularGrid(t_min, t_max, grid_size)

        clamped = int(np.sum((ts < grid.t_min) | (ts > grid.t_max)))
        if clamped:
            logger.warning(
                "%d observation times outside [%g, %g]; clamped to the domain",
                clamped, grid.t_min, grid.t_max,
            )

        idx = grid.snap_index(ts)
        gv = grid.values

        by_subject: dict[str, dict[int, list[float]]] = {}
        order: list[str] = []
        for sid, gi, x in zip(ids, idx, xs):
            if sid not in by_subject:
                by_subject[sid] = {}
                order.append(sid)
            by_subject[sid].setdefault(int(gi), []).append(x)

        subjects = []
        for sid in order:
            items = sorted(by_subject[sid].items())
            gi = np.array([k for k, _ in items], dtype=int)
            vals = np.array([float(np.mean(v)) for _, v in items])
            subjects.append(Subject(sid, gv[gi], vals, gi))
        return cls(subjects, grid, clamped_points=clamped)

    # ---- export / interchange --------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subject_id", "t", "value"])
            for s in self.subjects:
                for t, x in zip(s.times, s.values):
                    w.writerow([s.id, repr(float(t)), repr(float(x))])

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "subjects": [
                {"id": s.id, "grid_idx": s.grid_idx.tolist(), "values": s.values.tolist()}
                for s in self.subjects
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def from_dict(cls, d: dict) -> "IrregularDataset":
        grid = RegularGrid.from_dict(d["grid"])
        gv = grid.values
        subjects = []
        for rec in d["subjects"]:
            gi = np.asarray(rec["grid_idx"], dtype=int)
            subjects.append(Subject(rec["id"], gv[gi], np.asarray(rec["values"], dtype=float), gi))
        return cls(subjects, grid)

    @classmethod
    def from_json(cls, path) -> "IrregularDataset":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def load_csv(path, grid_size: int = DEFAULT_GRID_SIZE) -> IrregularDataset:
    """Load ``subject_id,t,value`` CSV (header required) into a dataset."""
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: empty file")
        missing = {"subject_id", "t", "value"} - set(reader.fieldnames)
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                t = float(row["t"])
                x = float(row["value"])
            except (TypeError, ValueError) as e:
                raise ValidationError(f"{path}:{lineno}: unparseable number ({e})") from e
            if not (math.isfinite(t) and math.isfinite(x)):
                raise ValidationError(f"{path}:{lineno}: non-finite t or value")
            records.append((row["subject_id"], t, x))
    if not records:
        raise ValidationError(f"{path}: no data rows")
    return IrregularDataset.from_records(records, grid_size=grid_size)


def filter_min_points(ds: IrregularDataset, k: int) -> IrregularDataset:
    """Keep only subjects with at least ``k`` observations (grid unchanged)."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    kept = [s for s in ds.subjects if s.n_points >= k]
    if not kept:
        raise ValidationError(f"no subject has >= {k} points")
    return IrregularDataset(kept, ds.grid)


def dataset_to_matrix(ds: IrregularDataset) -> np.ndarray:
    """Subjects-by-grid matrix of observed values, NaN where unobserved."""
    out = np.full((ds.n_subjects, ds.grid.n_points), np.nan)
    for i, s in enumerate(ds.subjects):
        out[i, s.grid_idx] = s.values
    return out
