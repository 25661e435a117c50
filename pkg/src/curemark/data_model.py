"""Core data containers, CSV ingestion and landmark dataset construction."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Raised when input data violate a schema or integrity constraint."""


def _frozen(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Long-format repeated measurements ``(subject, covariate, time, value)``."""

    subject_id: np.ndarray
    covariate: np.ndarray
    time: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        sid = _frozen(np.asarray(self.subject_id).astype(str), dtype=object)
        cov = _frozen(np.asarray(self.covariate).astype(str), dtype=object)
        t = _frozen(self.time, dtype=float)
        v = _frozen(self.value, dtype=float)
        if not (len(sid) == len(cov) == len(t) == len(v)):
            raise DataError("longitudinal columns have different lengths")
        if not np.all(np.isfinite(t)) or np.any(t < 0):
            raise DataError("measurement times must be finite and nonnegative")
        if not np.all(np.isfinite(v)):
            raise DataError("measurement values must be finite")
        key = pd.DataFrame({"s": sid, "c": cov, "t": t})
        dup = key.duplicated()
        if dup.any():
            row = key[dup].iloc[0]
            raise DataError(
                f"duplicate measurement for subject {row.s!r}, covariate {row.c!r}, time {row.t!r}"
            )
        object.__setattr__(self, "subject_id", sid)
        object.__setattr__(self, "covariate", cov)
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "value", v)

    def __len__(self) -> int:
        return len(self.time)

    @property
    def covariates(self) -> list[str]:
        return sorted(set(self.covariate))

    def subset(self, mask: np.ndarray) -> "LongitudinalDataset":
        # rows of a validated dataset stay valid, so skip the checks
        out = object.__new__(LongitudinalDataset)
        for name in ("subject_id", "covariate", "time", "value"):
            col = getattr(self, name)[mask]
            col.setflags(write=False)
            object.__setattr__(out, name, col)
        return out

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "subject_id": self.subject_id,
                "covariate": self.covariate,
                "time": self.time,
                "value": self.value,
            }
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, LongitudinalDataset):
            return NotImplemented
        return (
            np.array_equal(self.subject_id, other.subject_id)
            and np.array_equal(self.covariate, other.covariate)
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.value, other.value)
        )


@dataclass(frozen=True, eq=False)
class SubjectTable:
    """Per-subject outcome ``(t_i, delta_i)`` with incidence (X) and latency (Z) covariates."""

    subject_id: np.ndarray
    time: np.ndarray
    event: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    x_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()

    def __post_init__(self):
        sid = _frozen(np.asarray(self.subject_id).astype(str), dtype=object)
        m = len(sid)
        t = _frozen(self.time, dtype=float)
        ev = np.asarray(self.event)
        X = np.asarray(self.X, dtype=float).reshape(m, -1)
        Z = np.asarray(self.Z, dtype=float).reshape(m, -1)
        if len(t) != m or len(ev) != m:
            raise DataError("subject columns have different lengths")
        if len(set(sid)) != m:
            raise DataError("subject_id values must be unique")
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise DataError("observed times must be finite and strictly positive")
        if not np.all(np.isin(ev, (0, 1))):
            raise DataError("event indicator must be 0 or 1")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z))):
            raise DataError("baseline covariates contain missing or non-finite values")
        x_names = tuple(self.x_names) or tuple(f"x{k + 1}" for k in range(X.shape[1]))
        z_names = tuple(self.z_names) or tuple(f"z{k + 1}" for k in range(Z.shape[1]))
        if len(x_names) != X.shape[1] or len(z_names) != Z.shape[1]:
            raise DataError("covariate names do not match design widths")
        object.__setattr__(self, "subject_id", sid)
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", _frozen(ev, dtype=int))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "Z", _frozen(Z))
        object.__setattr__(self, "x_names", x_names)
        object.__setattr__(self, "z_names", z_names)

    def __len__(self) -> int:
        return len(self.subject_id)

    def subset(self, mask: np.ndarray) -> "SubjectTable":
        return SubjectTable(
            self.subject_id[mask],
            self.time[mask],
            self.event[mask],
            self.X[mask],
            self.Z[mask],
            self.x_names,
            self.z_names,
        )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"subject_id": self.subject_id, "time": self.time, "event": self.event})
        for k, name in enumerate(self.x_names):
            df[name] = self.X[:, k]
        for k, name in enumerate(self.z_names):
            if name not in df:
                df[name] = self.Z[:, k]
        return df

    def __eq__(self, other) -> bool:
        if not isinstance(other, SubjectTable):
            return NotImplemented
        return (
            np.array_equal(self.subject_id, other.subject_id)
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.event, other.event)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.Z, other.Z)
            and self.x_names == other.x_names
            and self.z_names == other.z_names
        )


@dataclass(frozen=True)
class LandmarkConfig:
    landmark_time: float
    prediction_horizons: tuple[float, ...] = ()

    def __post_init__(self):
        tl = float(self.landmark_time)
        if not np.isfinite(tl) or tl <= 0:
            raise DataError("landmark time must be positive")
        h = tuple(float(x) for x in self.prediction_horizons)
        if any(x <= tl for x in h):
            raise DataError("prediction horizons must lie after the landmark time")
        if any(b <= a for a, b in zip(h, h[1:])):
            raise DataError("prediction horizons must be strictly increasing")
        object.__setattr__(self, "landmark_time", tl)
        object.__setattr__(self, "prediction_horizons", h)


@dataclass(frozen=True, eq=False)
class LandmarkDataset:
    """At-risk subjects at the landmark and their truncated longitudinal history.

    ``subjects`` keeps the original study-time clock so the construction is
    idempotent; ``times_since_landmark`` is the reset clock used downstream.
    """

    landmark_time: float
    subjects: SubjectTable
    history: LongitudinalDataset
    pre_landmark_counts: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def times_since_landmark(self) -> np.ndarray:
        return self.subjects.time - self.landmark_time

    @property
    def covariates(self) -> list[str]:
        return list(self.pre_landmark_counts)

    def covariate_slice(self, covariate: str) -> "CovariateSlice":
        return CovariateSlice.from_history(self.history, covariate, self.subjects.subject_id)


@dataclass(frozen=True, eq=False)
class CovariateSlice:
    """Measurements of one longitudinal covariate, indexed against an ordered subject list.

    ``group`` holds the position of each record's subject within ``subject_ids``.
    Records are sorted by (group, time).
    """

    subject_ids: np.ndarray
    group: np.ndarray
    time: np.ndarray
    y: np.ndarray

    @classmethod
    def from_history(cls, history: LongitudinalDataset, covariate: str, subject_ids) -> "CovariateSlice":
        subject_ids = np.asarray(subject_ids).astype(str)
        pos = {s: k for k, s in enumerate(subject_ids)}
        mask = history.covariate == covariate
        sid = history.subject_id[mask]
        keep = np.array([s in pos for s in sid], dtype=bool)
        grp = np.array([pos[s] for s in sid[keep]], dtype=int)
        t = history.time[mask][keep]
        y = history.value[mask][keep]
        order = np.lexsort((t, grp))
        return cls(subject_ids, grp[order], t[order], y[order])

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    def counts(self) -> np.ndarray:
        return np.bincount(self.group, minlength=self.n_subjects)


def load_datasets(
    longitudinal_path: str | Path,
    subjects_path: str | Path,
    incidence_cols: Sequence[str] | None = None,
    latency_cols: Sequence[str] | None = None,
) -> tuple[LongitudinalDataset, SubjectTable]:
    """Read and validate the longitudinal and subject CSV files.

    Columns of the subject file beyond ``subject_id,time,event`` are baseline
    covariates. When ``incidence_cols`` is omitted every such column enters the
    incidence design; ``latency_cols`` defaults to none.
    """
    long_df = _read_csv(longitudinal_path, ["subject_id", "covariate", "time", "value"])
    subj_df = _read_csv(subjects_path, ["subject_id", "time", "event"])

    extra = [c for c in subj_df.columns if c not in ("subject_id", "time", "event")]
    x_cols = list(extra if incidence_cols is None else incidence_cols)
    z_cols = list(latency_cols or [])
    for c in x_cols + z_cols:
        if c not in subj_df.columns:
            raise DataError(f"{subjects_path}: missing covariate column {c!r}")

    for c in ["time", "event"] + x_cols + z_cols:
        subj_df[c] = _numeric(subj_df[c], subjects_path, c)
    for c in ["time", "value"]:
        long_df[c] = _numeric(long_df[c], longitudinal_path, c)

    subj = SubjectTable(
        subject_id=subj_df["subject_id"].to_numpy(),
        time=subj_df["time"].to_numpy(),
        event=subj_df["event"].to_numpy(),
        X=subj_df[x_cols].to_numpy(dtype=float).reshape(len(subj_df), len(x_cols)),
        Z=subj_df[z_cols].to_numpy(dtype=float).reshape(len(subj_df), len(z_cols)),
        x_names=tuple(x_cols),
        z_names=tuple(z_cols),
    )
    long = LongitudinalDataset(
        subject_id=long_df["subject_id"].to_numpy(),
        covariate=long_df["covariate"].to_numpy(),
        time=long_df["time"].to_numpy(),
        value=long_df["value"].to_numpy(),
    )
    unknown = sorted(set(long.subject_id) - set(subj.subject_id))
    if unknown:
        raise DataError(
            f"longitudinal records reference {len(unknown)} subject(s) absent from the subject table, "
            f"e.g. {unknown[0]!r}"
        )
    return long, subj


def _read_csv(path, required: list[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype={"subject_id": str, "covariate": str}, encoding="utf-8")
    except FileNotFoundError:
        raise
    except Exception as exc:  # malformed file
        raise DataError(f"{path}: cannot parse CSV ({exc})") from exc
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    return df


def _numeric(col: pd.Series, path, name) -> pd.Series:
    out = pd.to_numeric(col, errors="coerce")
    bad = out.isna()
    if bad.any():
        raise DataError(f"{path}: non-numeric or missing value in column {name!r} (row {int(np.argmax(bad.to_numpy()))})")
    return out


def build_landmark_dataset(
    long: LongitudinalDataset, subj: SubjectTable, cfg: LandmarkConfig | float
) -> LandmarkDataset:
    """Restrict to subjects at risk at the landmark and to measurements taken up to it.

    Raises
    ------
    DataError
        If nobody is at risk at the landmark, or an at-risk subject has no
        pre-landmark measurement for some longitudinal covariate.
    """
    tl = cfg.landmark_time if isinstance(cfg, LandmarkConfig) else LandmarkConfig(cfg).landmark_time
    at_risk = subj.time > tl
    if not at_risk.any():
        raise DataError(f"no subject is at risk at landmark time {tl}")
    subjects = subj.subset(at_risk)
    keep_ids = set(subjects.subject_id)
    in_risk = np.array([s in keep_ids for s in long.subject_id], dtype=bool)
    history = long.subset(in_risk & (long.time <= tl))

    counts: dict[str, np.ndarray] = {}
    for cov in long.covariates:
        sl = CovariateSlice.from_history(history, cov, subjects.subject_id)
        n_i = sl.counts()
        if np.any(n_i == 0):
            who = subjects.subject_id[np.argmax(n_i == 0)]
            raise DataError(
                f"subject {who!r} is at risk at t={tl} but has no measurement of {cov!r} up to the landmark"
            )
        n_i.setflags(write=False)
        counts[cov] = n_i
    return LandmarkDataset(tl, subjects, history, counts)
