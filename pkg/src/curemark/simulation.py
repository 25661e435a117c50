"""Synthetic landmark cure data with linear longitudinal trajectories.

Each subject has four standard normal baseline covariates driving a logistic
cure model, and four longitudinal covariates following
``b0 + b1 t + noise`` on ``[0, landmark]``. Uncured subjects get a Weibull PH
event time after the landmark whose linear predictor depends on a
mechanism-specific summary of the trajectories; cured subjects never have
the event. Censoring is exponential from the landmark with an administrative
cutoff.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

from .data_model import LongitudinalDataset, SubjectTable

MECHANISMS = ("strong_locf", "mild_current_value", "true_random_effects")
DESIGNS = ("balanced", "unbalanced")

INCIDENCE_COEF = np.array([-1.0, 0.0, 1.0, 0.0])
LATENCY_COEF = np.array([1.0, 0.0, -1.0, 0.0])
ALPHA0 = {0.20: 2.0, 0.40: 0.65}
INTERCEPT_VAR = 1.0
SLOPE_VAR = 0.7
NOISE_VAR = 1.0
N_VISITS = 10
MIN_VISITS = 5
WEIBULL_SHAPE = 1.5
FOLLOW_UP = 10.0
TARGET_EVENT_SHARE = 0.70
TARGET_CENSOR_SHARE = 0.25

# (Weibull scale, censoring rate) per mechanism, from calibrate(seed=20240501,
# n=100_000). The summaries do not depend on X or on the cure status, so one
# pair serves both cure fractions.
CALIBRATION = {
    "strong_locf": (1.1631600992840156, 0.12892724090828722),
    "mild_current_value": (1.2564574814019154, 0.12877326286481416),
    "true_random_effects": (2.860885068317679, 0.09683614525103094),
}

# scenario id -> (cure fraction, design, mechanism)
SCENARIOS = {
    1: (0.20, "balanced", "strong_locf"),
    2: (0.20, "unbalanced", "strong_locf"),
    3: (0.40, "balanced", "strong_locf"),
    4: (0.40, "unbalanced", "strong_locf"),
    5: (0.20, "balanced", "mild_current_value"),
    6: (0.20, "unbalanced", "mild_current_value"),
    7: (0.40, "balanced", "mild_current_value"),
    8: (0.40, "unbalanced", "mild_current_value"),
    9: (0.20, "balanced", "true_random_effects"),
    10: (0.20, "unbalanced", "true_random_effects"),
    11: (0.40, "balanced", "true_random_effects"),
    12: (0.40, "unbalanced", "true_random_effects"),
}

X_NAMES = tuple(f"x{k + 1}" for k in range(4))
Y_NAMES = tuple(f"y{k + 1}" for k in range(4))


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: int
    m: int = 300
    replicates: int = 100
    seed: int = 0
    landmark_time: float = 3.0
    cure_fraction: float = field(init=False)
    design: str = field(init=False)
    mechanism: str = field(init=False)
    alpha0: float = field(init=False)

    def __post_init__(self):
        if self.scenario_id not in SCENARIOS:
            raise ValueError(f"scenario_id must be one of 1..12, got {self.scenario_id}")
        if self.m < 1 or self.replicates < 1:
            raise ValueError("m and replicates must be positive")
        cf, design, mech = SCENARIOS[self.scenario_id]
        object.__setattr__(self, "cure_fraction", cf)
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "mechanism", mech)
        object.__setattr__(self, "alpha0", ALPHA0[cf])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass(frozen=True, eq=False)
class GeneratedDataset:
    """Observed data plus the latent truth, which fitting code never reads."""

    longitudinal: LongitudinalDataset
    subjects: SubjectTable
    truth: pd.DataFrame

    def write(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.longitudinal.to_frame().to_csv(d / "longitudinal.csv", index=False, float_format="%.17g")
        self.subjects.to_frame().to_csv(d / "subjects.csv", index=False, float_format="%.17g")
        self.truth.to_csv(d / "truth.csv", index=False, float_format="%.17g")


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a position in the (seed, key...) tree."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, key)])))


def visit_times(landmark_time: float = 3.0) -> np.ndarray:
    return np.linspace(0.0, landmark_time, N_VISITS)


def sample_event_time(eta, shape: float, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Weibull PH draw ``scale * (-log U / exp(eta)) ** (1 / shape)``.

    The survival function is ``exp(-(t / scale) ** shape * exp(eta))``.
    """
    if shape <= 0 or scale <= 0:
        raise ValueError("Weibull shape and scale must be positive")
    eta = np.asarray(eta, dtype=float)
    u = rng.random(eta.shape)
    return scale * (-np.log1p(-u) / np.exp(eta)) ** (1.0 / shape)


def latency_summary_for_mechanism(mechanism: str, b0, b1, y_landmark=None, landmark_time: float = 3.0) -> np.ndarray:
    """Covariate summary that drives the event hazard.

    ``strong_locf`` uses the noisy measurement taken at the landmark,
    ``mild_current_value`` the noiseless trajectory ``b0 + b1 * t_landmark``
    and ``true_random_effects`` the sum ``b0 + b1`` of the random effects.
    Arrays broadcast; the last axis indexes covariates.
    """
    b0 = np.asarray(b0, dtype=float)
    b1 = np.asarray(b1, dtype=float)
    if mechanism == "strong_locf":
        if y_landmark is None:
            raise ValueError("strong_locf needs the measurement at the landmark")
        return np.asarray(y_landmark, dtype=float)
    if mechanism == "mild_current_value":
        return b0 + b1 * landmark_time
    if mechanism == "true_random_effects":
        return b0 + b1
    raise ValueError(f"unknown mechanism {mechanism!r}")


def _latent(rng: np.random.Generator, m: int, alpha0: float, landmark_time: float):
    X = rng.standard_normal((m, 4))
    uncured = rng.random(m) < expit(alpha0 + X @ INCIDENCE_COEF)
    b0 = rng.normal(0.0, np.sqrt(INTERCEPT_VAR), (m, 4))
    b1 = rng.normal(0.0, np.sqrt(SLOPE_VAR), (m, 4))
    t = visit_times(landmark_time)
    eps = rng.normal(0.0, np.sqrt(NOISE_VAR), (m, 4, N_VISITS))
    Y = b0[:, :, None] + b1[:, :, None] * t + eps
    return X, uncured, b0, b1, Y


def _keep_mask(rng: np.random.Generator, m: int, design: str) -> np.ndarray:
    keep = np.ones((m, N_VISITS), dtype=bool)
    if design == "unbalanced":
        n_keep = rng.integers(MIN_VISITS, N_VISITS + 1, size=m)
        for i in range(m):
            drop = rng.permutation(np.arange(1, N_VISITS))[: N_VISITS - n_keep[i]]
            keep[i, drop] = False
    return keep


def generate_one(spec: ScenarioSpec, rng: np.random.Generator, prefix: str = "s") -> GeneratedDataset:
    """One dataset of ``spec.m`` subjects drawn from ``rng``."""
    m, tl = spec.m, spec.landmark_time
    scale, rate = CALIBRATION[spec.mechanism]
    X, uncured, b0, b1, Y = _latent(rng, m, spec.alpha0, tl)
    keep = _keep_mask(rng, m, spec.design)
    summary = latency_summary_for_mechanism(spec.mechanism, b0, b1, Y[:, :, -1], tl)
    eta = summary @ LATENCY_COEF
    t_event = np.where(uncured, sample_event_time(eta, WEIBULL_SHAPE, scale, rng), np.inf)
    t_cens = rng.exponential(1.0 / rate, m)
    t_obs = np.minimum(np.minimum(t_event, t_cens), FOLLOW_UP)
    event = (t_event <= np.minimum(t_cens, FOLLOW_UP)).astype(int)

    width = len(str(m))
    ids = np.array([f"{prefix}{i + 1:0{width}d}" for i in range(m)], dtype=object)
    vt = visit_times(tl)
    ii, ll, jj = np.nonzero(np.broadcast_to(keep[:, None, :], Y.shape))
    long = LongitudinalDataset(ids[ii], np.array(Y_NAMES, dtype=object)[ll], vt[jj], Y[ii, ll, jj])
    subjects = SubjectTable(ids, tl + t_obs, event, X, np.empty((m, 0)), X_NAMES, ())
    truth = pd.DataFrame({"subject_id": ids, "G": uncured.astype(int)})
    for k, name in enumerate(Y_NAMES):
        truth[f"b0_{name}"] = b0[:, k]
        truth[f"b1_{name}"] = b1[:, k]
    truth["latency_lp"] = eta
    truth["event_time"] = tl + t_event
    truth["censoring_time"] = tl + t_cens
    truth["n_visits"] = keep.sum(axis=1)
    return GeneratedDataset(long, subjects, truth)


def generate_dataset(spec: ScenarioSpec, replicate_index: int) -> tuple[GeneratedDataset, GeneratedDataset]:
    """Training and validation datasets for one replicate.

    The two sets come from independent streams keyed by
    ``(seed, scenario, m, replicate, 0 | 1)``, so any replicate can be
    regenerated on its own.
    """
    key = (spec.scenario_id, spec.m, replicate_index)
    train = generate_one(spec, stream(spec.seed, *key, 0), "s")
    valid = generate_one(spec, stream(spec.seed, *key, 1), "v")
    return train, valid


def _event_shares(eta, logu, e, scale, rate):
    """Share of uncured subjects with an observed event and with an exponential censoring."""
    t = scale * (logu / np.exp(eta)) ** (1.0 / WEIBULL_SHAPE)
    c = e / rate
    ev = np.mean(t <= np.minimum(c, FOLLOW_UP))
    ce = np.mean(c < np.minimum(t, FOLLOW_UP))
    return ev, ce


def _bisect(f, lo, hi, tol=1e-10, max_iter=200):
    """Root of an increasing function on a log-scale bracket."""
    flo, fhi = f(lo), f(hi)
    if flo > 0 or fhi < 0:
        raise ValueError("calibration bracket does not contain the target")
    for _ in range(max_iter):
        mid = np.sqrt(lo * hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi / lo - 1 < tol:
            break
    return np.sqrt(lo * hi)


def calibrate(mechanism: str, n: int = 100_000, seed: int = 20240501, landmark_time: float = 3.0):
    """Weibull scale and censoring rate hitting the target shares among the uncured.

    Among uncured subjects, ``TARGET_EVENT_SHARE`` should have an observed
    event and ``TARGET_CENSOR_SHARE`` should be censored by the exponential
    clock before the administrative cutoff. The censoring rate is bisected
    for each candidate scale inside an outer bisection on the scale, on a
    pilot sample with common random numbers.
    """
    rng = stream(seed, MECHANISMS.index(mechanism))
    _, _, b0, b1, Y = _latent(rng, n, 0.0, landmark_time)
    eta = latency_summary_for_mechanism(mechanism, b0, b1, Y[:, :, -1], landmark_time) @ LATENCY_COEF
    logu = -np.log1p(-rng.random(n))
    e = rng.exponential(1.0, n)

    def rate_for(scale):
        return _bisect(lambda r: _event_shares(eta, logu, e, scale, r)[1] - TARGET_CENSOR_SHARE, 1e-6, 1e3)

    def event_gap(scale):
        # a larger scale means later events, so fewer of them: negate to make it increasing
        return TARGET_EVENT_SHARE - _event_shares(eta, logu, e, scale, rate_for(scale))[0]

    scale = _bisect(event_gap, 1e-3, 1e4)
    return float(scale), float(rate_for(scale))


def write_replicates(spec: ScenarioSpec, out: str | Path, validation: bool = False) -> list[Path]:
    """Write ``rep-<k>/{longitudinal,subjects,truth}.csv`` for every replicate."""
    out = Path(out)
    dirs = []
    for k in range(spec.replicates):
        train, valid = generate_dataset(spec, k)
        d = out / f"rep-{k}"
        train.write(d)
        if validation:
            valid.write(d / "validation")
        dirs.append(d)
    (out / "scenario.json").write_text(spec.to_json())
    return dirs
