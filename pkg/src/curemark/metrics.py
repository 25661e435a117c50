"""Predictive performance measures for mixture cure models.

Incidence is scored with a posterior-weighted AUC and an IPCW Brier score;
latency with time-dependent AUC and Brier score and Harrell's C-index. All
pairwise indices use strict inequality on the scores, so tied scores never
count as concordant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class MetricWarning(UserWarning):
    """A metric is undefined for the given data and was reported as NaN."""


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function starting at 1, e.g. a survival curve."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t) -> np.ndarray:
        k = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[1.0], self.values])[k]

    def left(self, t) -> np.ndarray:
        """Left limit ``F(t-)``."""
        k = np.searchsorted(self.times, np.asarray(t, dtype=float), side="left")
        return np.concatenate([[1.0], self.values])[k]


def km_censoring(times, delta) -> StepFunction:
    """Kaplan-Meier estimate of the censoring survival ``G(t) = P(C > t)``.

    Censorings (``delta == 0``) are the events; everyone with ``t_i >= c`` is at
    risk at a censoring time ``c``.
    """
    times = np.asarray(times, dtype=float)
    delta = np.asarray(delta, dtype=int)
    if len(times) == 0:
        raise ValueError("need at least one subject")
    cens = times[delta == 0]
    if len(cens) == 0:
        return StepFunction(np.empty(0), np.empty(0))
    ct, n_c = np.unique(cens, return_counts=True)
    at_risk = len(times) - np.searchsorted(np.sort(times), ct, side="left")
    return StepFunction(ct, np.cumprod(1.0 - n_c / at_risk))


@dataclass(frozen=True)
class CensoringWeights:
    """Inverse probability of censoring weights; zero marks an excluded subject."""

    weights: np.ndarray
    excluded_zero_g: int = 0


def incidence_weights(times, delta, G: StepFunction | None = None) -> tuple[np.ndarray, CensoringWeights]:
    """Surrogate cure labels and their IPCW weights.

    ``G~ = 1`` for events and ``0`` for subjects censored after the largest
    observed event time; everybody else is undetermined and gets weight 0.
    Without any event there is no plateau to judge by, so nobody is determined.
    Determined subjects are weighted by ``1 / G(t_i-)``.
    """
    times = np.asarray(times, dtype=float)
    delta = np.asarray(delta, dtype=int)
    G = G or km_censoring(times, delta)
    last_event = times[delta == 1].max() if delta.any() else np.inf
    g_tilde = np.where(delta == 1, 1.0, 0.0)
    determined = (delta == 1) | (times > last_event)
    g = G.left(times)
    ok = determined & (g > 0)
    w = np.zeros(len(times))
    w[ok] = 1.0 / g[ok]
    return g_tilde, CensoringWeights(w, int(np.sum(determined & (g <= 0))))


def time_weights(times, delta, t: float, G: StepFunction | None = None) -> CensoringWeights:
    """IPCW weights at horizon ``t``.

    Events by ``t`` get ``1 / G(t_i-)``, subjects still under observation after
    ``t`` get ``1 / G(t)``, subjects censored by ``t`` get 0.
    """
    times = np.asarray(times, dtype=float)
    delta = np.asarray(delta, dtype=int)
    G = G or km_censoring(times, delta)
    case = (times <= t) & (delta == 1)
    alive = times > t
    g = np.where(case, G.left(times), np.where(alive, G(t), 0.0))
    ok = (case | alive) & (g > 0)
    w = np.zeros(len(times))
    w[ok] = 1.0 / g[ok]
    return CensoringWeights(w, int(np.sum((case | alive) & (g <= 0))))


def _undefined(msg: str) -> float:
    warnings.warn(msg, MetricWarning, stacklevel=3)
    return float("nan")


def _weighted_pairs(score, w_case, w_ctrl) -> tuple[float, float]:
    """``sum_{i != j} 1[s_i > s_j] a_i b_j`` and ``sum_{i != j} a_i b_j``."""
    score = np.asarray(score, dtype=float)
    a = np.asarray(w_case, dtype=float)
    b = np.asarray(w_ctrl, dtype=float)
    order = np.argsort(score, kind="stable")
    s_sorted = score[order]
    cum_b = np.concatenate([[0.0], np.cumsum(b[order])])
    below = cum_b[np.searchsorted(s_sorted, score, side="left")]
    num = float(np.sum(a * below))
    den = float(a.sum() * b.sum() - np.sum(a * b))
    # the two sums round differently; keep the ratio inside [0, 1]
    return min(max(num, 0.0), max(den, 0.0)), den


def weighted_auc_inc(eta_inc, q) -> float:
    """Posterior-weighted incidence AUC.

    ``sum_{i != j} 1[eta_i > eta_j] q_i (1 - q_j) / sum_{i != j} q_i (1 - q_j)``.
    Constant scores give 0 and a warning.
    """
    q = np.asarray(q, dtype=float)
    num, den = _weighted_pairs(eta_inc, q, 1.0 - q)
    if den <= 0:
        return _undefined("weighted incidence AUC undefined: no pair with q_i (1 - q_j) > 0")
    if np.ptp(np.asarray(eta_inc, dtype=float)) == 0:
        warnings.warn("constant incidence scores: strict-inequality AUC is 0", MetricWarning, stacklevel=2)
    return num / den


def weighted_brier_inc(pred, delta, times, weights: CensoringWeights | None = None) -> float:
    """IPCW Brier score of predicted uncured probabilities against ``G~``.

    ``(1/m) sum_i u_i (pred_i - G~_i)^2`` with ``m`` the sample size and ``u_i``
    zero for subjects whose cure status is undetermined.
    """
    pred = np.asarray(pred, dtype=float)
    g_tilde, cw = incidence_weights(times, delta)
    if weights is not None:
        cw = weights
    if not np.any(cw.weights > 0):
        return _undefined("incidence Brier score undefined: no subject with determined cure status")
    return float(np.sum(cw.weights * (pred - g_tilde) ** 2) / len(pred))


def auc_lat_t(eta_lat, times, delta, t: float, weights: CensoringWeights | None = None,
              G: StepFunction | None = None) -> float:
    """Cumulative/dynamic AUC at ``t`` with IPCW weights.

    Cases had the event by ``t`` (``t_i <= t``, ``delta_i = 1``); controls are
    still event-free after ``t``.
    """
    times = np.asarray(times, dtype=float)
    delta = np.asarray(delta, dtype=int)
    cw = weights or time_weights(times, delta, t, G)
    case = (times <= t) & (delta == 1)
    ctrl = times > t
    wc = np.where(case, cw.weights, 0.0)
    wn = np.where(ctrl, cw.weights, 0.0)
    if not (np.any(wc > 0) and np.any(wn > 0)):
        return _undefined(f"time-dependent AUC undefined at t={t:g}: need both cases and controls")
    num, den = _weighted_pairs(eta_lat, wc, wn)
    return num / den


def brier_lat_t(S_hat_t, times, delta, t: float, weights: CensoringWeights | None = None,
                G: StepFunction | None = None) -> float:
    """IPCW Brier score ``(1/m) sum_i u_i(t) (1[t_i > t] - S_i(t))^2``."""
    S_hat_t = np.asarray(S_hat_t, dtype=float)
    times = np.asarray(times, dtype=float)
    cw = weights or time_weights(times, delta, t, G)
    if cw.excluded_zero_g:
        warnings.warn(f"{cw.excluded_zero_g} subject(s) dropped at t={t:g}: censoring survival is zero",
                      MetricWarning, stacklevel=2)
    if not np.any(cw.weights > 0):
        return _undefined(f"Brier score undefined at t={t:g}: no usable subject")
    y = (times > t).astype(float)
    return float(np.sum(cw.weights * (y - S_hat_t) ** 2) / len(times))


def c_index(eta_lat, times, delta) -> float:
    """Harrell-type concordance with comparable pairs

    ``D_ij = 1[t_i < t_j, delta_i = 1] + 1[t_i = t_j, delta_i = 1, delta_j = 0]``.
    """
    eta = np.asarray(eta_lat, dtype=float)
    t = np.asarray(times, dtype=float)
    d = np.asarray(delta, dtype=int)
    ev = d[:, None] == 1
    D = ev & ((t[:, None] < t[None, :]) | ((t[:, None] == t[None, :]) & (d[None, :] == 0)))
    den = int(D.sum())
    if den == 0:
        return _undefined("C-index undefined: no comparable pairs")
    return float(np.sum(D & (eta[:, None] > eta[None, :])) / den)


def default_grid(times_since_landmark, delta=None, n: int = 10, upper_quantile: float = 0.9) -> np.ndarray:
    """``n`` equispaced post-landmark horizons ending at an upper quantile.

    With ``delta`` the quantile is taken over event times only. Under an
    administrative cutoff the 90th percentile of all observed times often sits
    on the cutoff itself, where nobody is left as a control.
    """
    t = np.asarray(times_since_landmark, dtype=float)
    if delta is not None and np.any(np.asarray(delta) == 1):
        t = t[np.asarray(delta) == 1]
    hi = float(np.quantile(t, upper_quantile))
    return np.linspace(0.0, hi, n + 1)[1:]


@dataclass
class MetricReport:
    auc_inc: float
    brier_inc: float
    grid: np.ndarray
    auc_lat: np.ndarray
    brier_lat: np.ndarray
    c_index: float
    warnings: list[str] = field(default_factory=list)

    def rows(self, time_offset: float = 0.0) -> list[tuple[str, float, float]]:
        """``(metric, time, value)`` rows; scalar metrics carry an empty time."""
        out = [("auc_inc", float("nan"), self.auc_inc), ("brier_inc", float("nan"), self.brier_inc),
               ("c_index", float("nan"), self.c_index)]
        for t, a, b in zip(self.grid, self.auc_lat, self.brier_lat):
            out.append(("auc_lat", t + time_offset, a))
            out.append(("brier_lat", t + time_offset, b))
        return out


def evaluate(
    times,
    delta,
    eta_inc,
    q_hat,
    pi_hat,
    eta_lat,
    S_hat,
    grid,
) -> MetricReport:
    """Full metric suite on post-landmark data.

    ``S_hat`` holds the predicted overall survival, one column per grid point.
    ``q_hat`` may be ``None`` when no posterior is available, in which case the
    incidence AUC is reported missing.
    """
    times = np.asarray(times, dtype=float)
    delta = np.asarray(delta, dtype=int)
    grid = np.asarray(grid, dtype=float)
    S_hat = np.asarray(S_hat, dtype=float).reshape(len(times), len(grid))
    G = km_censoring(times, delta)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MetricWarning)
        auc_i = weighted_auc_inc(eta_inc, q_hat) if q_hat is not None else _undefined(
            "incidence AUC needs posterior weights")
        bs_i = weighted_brier_inc(pi_hat, delta, times)
        auc_t = np.array([auc_lat_t(eta_lat, times, delta, t, G=G) for t in grid])
        bs_t = np.array([brier_lat_t(S_hat[:, k], times, delta, t, G=G) for k, t in enumerate(grid)])
        ci = c_index(eta_lat, times, delta)
    msgs = [str(w.message) for w in caught if issubclass(w.category, MetricWarning)]
    return MetricReport(auc_i, bs_i, grid, auc_t, bs_t, ci, msgs)
