"""Post-landmark predictions from a fitted landmark cure model.

Two ways of summarizing the pre-landmark history are supported: the
last observed value of each covariate (``locf``) and the predicted random
effects of a per-covariate mixed model (``model_based``). Either summary is fed
to the latency linear predictor of a :class:`~curemark.cure_em.CureModelFit`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .cure_em import CureModelFit
from .data_model import CovariateSlice, DataError, LandmarkDataset, LongitudinalDataset
from .mixed_models import BoundaryFitWarning, MixedModelFit, predict_random_effects

KINDS = ("model_based", "locf")


def locf_summary(history: LongitudinalDataset, landmark_time: float, subject_ids, covariates=None) -> np.ndarray:
    """Last value observed at or before the landmark, per subject and covariate.

    Returns an ``(m, p_Y)`` array in the order of ``subject_ids`` and
    ``covariates`` (all covariates of ``history`` by default).

    Raises
    ------
    DataError
        If a subject has no measurement of some covariate up to the landmark.
    """
    covariates = list(covariates if covariates is not None else history.covariates)
    subject_ids = np.asarray(subject_ids).astype(str)
    out = np.empty((len(subject_ids), len(covariates)))
    pre = history.subset(history.time <= landmark_time)
    for k, cov in enumerate(covariates):
        sl = CovariateSlice.from_history(pre, cov, subject_ids)
        n_i = sl.counts()
        if np.any(n_i == 0):
            who = subject_ids[np.argmax(n_i == 0)]
            raise DataError(f"subject {who!r} has no measurement of {cov!r} up to t={landmark_time}")
        # records are sorted by (subject, time): the last row of each block is the latest
        last = np.cumsum(n_i) - 1
        out[:, k] = sl.y[last]
    return out


@dataclass(frozen=True, eq=False)
class SummaryStrategy:
    """How the longitudinal history is turned into latency covariates.

    For ``model_based`` the fitted mixed models are kept so the same
    parameters can be applied to new subjects without refitting.
    """

    kind: str
    covariates: tuple[str, ...]
    mixed_fits: dict[str, MixedModelFit] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown summary strategy {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.kind == "model_based":
            missing = [c for c in self.covariates if c not in self.mixed_fits]
            if missing:
                raise ValueError(f"model-based strategy lacks mixed-model fits for {missing}")

    @classmethod
    def locf(cls, covariates) -> "SummaryStrategy":
        return cls("locf", tuple(covariates))

    @classmethod
    def model_based(cls, fits: dict[str, MixedModelFit]) -> "SummaryStrategy":
        return cls("model_based", tuple(fits), dict(fits))

    def names(self) -> list[str]:
        if self.kind == "locf":
            return [f"{c}:last" for c in self.covariates]
        return [f"{c}:{r}" for c in self.covariates for r in self.mixed_fits[c].spec.random_names()]

    def summaries(self, history: LongitudinalDataset, subject_ids, landmark_time: float,
                  subject_covariates: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """Per-subject summary matrix, one row per entry of ``subject_ids``.

        ``subject_covariates`` maps column names to per-subject arrays and is
        only needed when a mixed model has baseline covariates in its fixed part.
        """
        if self.kind == "locf":
            return locf_summary(history, landmark_time, subject_ids, self.covariates)
        subject_ids = np.asarray(subject_ids).astype(str)
        pre = history.subset(history.time <= landmark_time)
        blocks = []
        for cov in self.covariates:
            fit = self.mixed_fits[cov]
            sl = CovariateSlice.from_history(pre, cov, subject_ids)
            if np.any(sl.counts() == 0):
                who = subject_ids[np.argmax(sl.counts() == 0)]
                raise DataError(f"subject {who!r} has no measurement of {cov!r} up to t={landmark_time}")
            S = None
            if fit.spec.fixed_covariates:
                if subject_covariates is None:
                    raise DataError(f"mixed model for {cov!r} needs baseline covariates {fit.spec.fixed_covariates}")
                S = np.column_stack([subject_covariates[c] for c in fit.spec.fixed_covariates])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", BoundaryFitWarning)
                blocks.append(predict_random_effects(fit, sl, S))
        return np.hstack(blocks) if blocks else np.empty((len(subject_ids), 0))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "covariates": list(self.covariates),
            "mixed_fits": {c: f.to_dict() for c, f in self.mixed_fits.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SummaryStrategy":
        fits = {c: MixedModelFit.from_dict(f) for c, f in d.get("mixed_fits", {}).items()}
        return cls(d["kind"], tuple(d["covariates"]), fits)


@dataclass(frozen=True)
class PredictionResult:
    """Plug-in predictions on the post-landmark clock.

    ``horizons`` are times since the landmark; ``S_u_hat`` and ``S_hat`` have
    one row per subject and one column per horizon.
    """

    subject_ids: np.ndarray
    horizons: np.ndarray
    pi_hat: np.ndarray
    S_u_hat: np.ndarray
    S_hat: np.ndarray
    eta_inc: np.ndarray
    eta_lat: np.ndarray
    landmark_time: float = 0.0

    def to_frame(self, absolute_time: bool = True) -> pd.DataFrame:
        """Long format with columns ``subject_id,horizon,pi_hat,S_u_hat,S_hat,eta_inc,eta_lat``."""
        m, h = self.S_hat.shape
        hz = self.horizons + (self.landmark_time if absolute_time else 0.0)
        return pd.DataFrame({
            "subject_id": np.repeat(self.subject_ids, h),
            "horizon": np.tile(hz, m),
            "pi_hat": np.repeat(self.pi_hat, h),
            "S_u_hat": self.S_u_hat.ravel(),
            "S_hat": self.S_hat.ravel(),
            "eta_inc": np.repeat(self.eta_inc, h),
            "eta_lat": np.repeat(self.eta_lat, h),
        })


def predict_from_design(fit: CureModelFit, X, Z_ext, horizons, subject_ids=None,
                        landmark_time: float = 0.0) -> PredictionResult:
    """Predictions given the incidence design and the extended latency design.

    ``horizons`` are measured from the landmark and must be positive.
    """
    horizons = np.atleast_1d(np.asarray(horizons, dtype=float))
    if np.any(horizons <= 0):
        raise ValueError("prediction horizons must lie after the landmark")
    X = np.asarray(X, dtype=float).reshape(-1, len(fit.alpha))
    Z_ext = np.asarray(Z_ext, dtype=float).reshape(len(X), -1)
    eta_inc = fit.incidence_lp(X)
    pi = fit.uncured_probability(X)
    eta_lat = fit.latency_lp(Z_ext)
    S_u = fit.baseline.survival(horizons[None, :], eta_lat[:, None])
    S = (1.0 - pi)[:, None] + pi[:, None] * S_u
    if subject_ids is None:
        subject_ids = np.arange(len(X)).astype(str)
    return PredictionResult(np.asarray(subject_ids).astype(str), horizons, pi, S_u, S, eta_inc, eta_lat,
                            float(landmark_time))


def predict(fit: CureModelFit, strategy: SummaryStrategy, landmark: LandmarkDataset, horizons,
            absolute: bool = False) -> PredictionResult:
    """Predictions for every subject of a landmark dataset.

    Works for the estimation sample and for independent subjects alike: the
    summaries are recomputed from each subject's own history using the stored
    mixed-model parameters. With ``absolute=True`` the horizons are study times
    and must exceed the landmark.
    """
    tl = landmark.landmark_time
    horizons = np.atleast_1d(np.asarray(horizons, dtype=float))
    if absolute:
        if np.any(horizons <= tl):
            raise ValueError(f"prediction horizons must exceed the landmark time {tl}")
        horizons = horizons - tl
    subj = landmark.subjects
    cols = {n: subj.X[:, k] for k, n in enumerate(subj.x_names)}
    cols.update({n: subj.Z[:, k] for k, n in enumerate(subj.z_names)})
    summ = strategy.summaries(landmark.history, subj.subject_id, tl, cols)
    Z_ext = np.hstack([subj.Z, summ])
    return predict_from_design(fit, subj.X, Z_ext, horizons, subj.subject_id, tl)


def predict_subject(fit: CureModelFit, strategy: SummaryStrategy, X_i, Z_i, history_i: LongitudinalDataset,
                    horizons, landmark_time: float, subject_id=None) -> PredictionResult:
    """Predictions for one subject given baseline covariates and raw history.

    ``horizons`` are study times after ``landmark_time``; measurements taken
    after the landmark are ignored.
    """
    horizons = np.atleast_1d(np.asarray(horizons, dtype=float))
    if np.any(horizons <= landmark_time):
        raise ValueError(f"prediction horizons must exceed the landmark time {landmark_time}")
    ids = np.unique(history_i.subject_id)
    if subject_id is None:
        if len(ids) != 1:
            raise DataError("history must belong to exactly one subject when no subject_id is given")
        subject_id = ids[0]
    X_i = np.asarray(X_i, dtype=float).ravel()
    Z_i = np.asarray(Z_i, dtype=float).ravel()
    cols = {n: np.array([X_i[k]]) for k, n in enumerate(fit.x_names)}
    cols.update({n: np.array([Z_i[k]]) for k, n in enumerate(fit.z_names)})
    summ = strategy.summaries(history_i, [subject_id], landmark_time, cols)
    Z_ext = np.concatenate([Z_i, summ.ravel()])
    return predict_from_design(fit, X_i, Z_ext, horizons - landmark_time, [subject_id], landmark_time)
