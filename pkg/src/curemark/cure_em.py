"""Cox proportional hazards mixture cure model fitted by EM.

Incidence is logistic in the baseline covariates ``X``; latency is a Cox model
in ``Z_ext`` (baseline latency covariates followed by longitudinal summaries)
with a nonparametric baseline cumulative hazard. Uncured survival is set to
zero beyond the largest event time (zero-tail constraint), so subjects
censored after it are treated as cured.

The M-step for the latency part profiles the baseline hazard out: given the
posterior weights ``q`` the coefficient update maximizes the ``q``-weighted
Cox partial likelihood, and the cumulative hazard is the weighted Breslow
estimator at the new coefficients. Every EM iteration therefore does not
decrease the observed-data log-likelihood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

log = logging.getLogger(__name__)

INCIDENCE_CAP = 15.0
LATENCY_CAP = 40.0


class CureModelError(ValueError):
    """The data cannot support a mixture cure model fit."""


@dataclass(frozen=True)
class BaselineHazard:
    """Right-continuous step function ``H_0`` with jumps at the event times."""

    jump_times: np.ndarray
    cumulative_values: np.ndarray
    zero_tail: bool = True

    def __post_init__(self):
        t = np.asarray(self.jump_times, dtype=float)
        h = np.asarray(self.cumulative_values, dtype=float)
        if t.shape != h.shape:
            raise ValueError("jump times and cumulative values differ in length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("jump times must be strictly increasing")
        if np.any(np.diff(h) < 0) or np.any(h < 0):
            raise ValueError("cumulative hazard must be nonnegative and nondecreasing")
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "cumulative_values", h)

    @property
    def last_event_time(self) -> float:
        return float(self.jump_times[-1]) if len(self.jump_times) else 0.0

    @property
    def jumps(self) -> np.ndarray:
        return np.diff(self.cumulative_values, prepend=0.0)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.jump_times, t, side="right")
        vals = np.concatenate([[0.0], self.cumulative_values])
        return vals[k]

    def jump_at(self, t) -> np.ndarray:
        """Hazard mass exactly at ``t`` (zero off the jump grid)."""
        t = np.asarray(t, dtype=float)
        if len(self.jump_times) == 0:
            return np.zeros(t.shape)
        k = np.minimum(np.searchsorted(self.jump_times, t), len(self.jump_times) - 1)
        return np.where(self.jump_times[k] == t, self.jumps[k], 0.0)

    def survival(self, t, eta) -> np.ndarray:
        """``exp(-H_0(t) exp(eta))`` with the zero tail past the last event."""
        t = np.asarray(t, dtype=float)
        S = np.exp(-self(t) * np.exp(eta))
        if self.zero_tail:
            S = np.where(t > self.last_event_time, 0.0, S)
        return S

    def to_dict(self) -> dict:
        return {
            "jump_times": self.jump_times.tolist(),
            "cumulative_values": self.cumulative_values.tolist(),
            "zero_tail": self.zero_tail,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineHazard":
        return cls(np.asarray(d["jump_times"]), np.asarray(d["cumulative_values"]), bool(d.get("zero_tail", True)))


@dataclass(frozen=True)
class CureModelFit:
    alpha0: float
    alpha: np.ndarray
    beta: np.ndarray
    psi: np.ndarray
    baseline: BaselineHazard
    posterior_q: np.ndarray
    loglik_trace: tuple[float, ...]
    iterations: int = 0
    converged: bool = True
    flags: tuple[str, ...] = ()
    x_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()
    summary_names: tuple[str, ...] = ()

    @property
    def latency_coef(self) -> np.ndarray:
        return np.concatenate([self.beta, self.psi])

    def incidence_lp(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, len(self.alpha))
        return self.alpha0 + X @ self.alpha

    def latency_lp(self, Z_ext) -> np.ndarray:
        c = self.latency_coef
        Z_ext = np.asarray(Z_ext, dtype=float).reshape(-1, len(c))
        return Z_ext @ c

    def uncured_probability(self, X) -> np.ndarray:
        return expit(np.clip(self.incidence_lp(X), -INCIDENCE_CAP, INCIDENCE_CAP))

    def to_dict(self) -> dict:
        return {
            "alpha0": float(self.alpha0),
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "psi": self.psi.tolist(),
            "x_names": list(self.x_names),
            "z_names": list(self.z_names),
            "summary_names": list(self.summary_names),
            "baseline": self.baseline.to_dict(),
            "posterior_q": self.posterior_q.tolist(),
            "loglik_trace": list(self.loglik_trace),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CureModelFit":
        return cls(
            alpha0=float(d["alpha0"]),
            alpha=np.asarray(d["alpha"], dtype=float),
            beta=np.asarray(d["beta"], dtype=float),
            psi=np.asarray(d["psi"], dtype=float),
            baseline=BaselineHazard.from_dict(d["baseline"]),
            posterior_q=np.asarray(d.get("posterior_q", []), dtype=float),
            loglik_trace=tuple(d.get("loglik_trace", ())),
            iterations=int(d.get("iterations", 0)),
            converged=bool(d.get("converged", True)),
            flags=tuple(d.get("flags", ())),
            x_names=tuple(d.get("x_names", ())),
            z_names=tuple(d.get("z_names", ())),
            summary_names=tuple(d.get("summary_names", ())),
        )


# -- E-step -------------------------------------------------------------------


def estep_q(pi, S_u, delta):
    """Posterior probability of being uncured.

    ``q = delta + (1 - delta) pi S_u / ((1 - pi) + pi S_u)``; works elementwise
    on arrays and returns a float for scalar input.
    """
    pi = np.asarray(pi, dtype=float)
    S_u = np.asarray(S_u, dtype=float)
    delta = np.asarray(delta)
    num = pi * S_u
    q = np.where(delta == 1, 1.0, num / ((1.0 - pi) + num))
    return float(q) if q.ndim == 0 else q


# -- incidence M-step ----------------------------------------------------------


@dataclass(frozen=True)
class IncidenceStep:
    alpha0: float
    alpha: np.ndarray
    capped: bool = False
    gradient_norm: float = 0.0
    iterations: int = 0

    def __iter__(self):
        return iter((self.alpha0, self.alpha))


def incidence_objective(coef, X, q) -> float:
    """``sum q log pi + (1 - q) log(1 - pi)`` with ``coef = (alpha0, alpha)``."""
    eta = coef[0] + np.asarray(X).reshape(len(q), -1) @ coef[1:]
    return float(np.sum(q * log_expit(eta) + (1 - q) * log_expit(-eta)))


def mstep_incidence(X, q, delta=None, start=None, cap: float = INCIDENCE_CAP,
                    tol: float = 1e-10, max_iter: int = 100) -> IncidenceStep:
    """Maximize the fractional-response logistic likelihood by damped Newton.

    Steps are halved until the objective increases and every linear predictor
    stays within ``[-cap, cap]``. When the unconstrained maximum lies outside
    that box (separation, or all weights at one), the iterate stops on the cap
    and ``capped`` is set. ``delta`` is accepted for call-site symmetry; the
    weights already encode it since ``q = 1`` for events.
    """
    q = np.asarray(q, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(q), -1)
    A = np.column_stack([np.ones(len(q)), X])
    coef = np.zeros(A.shape[1]) if start is None else np.asarray(start, dtype=float).copy()

    def obj(c):
        eta = A @ c
        return float(np.sum(q * log_expit(eta) + (1 - q) * log_expit(-eta)))

    f = obj(coef)
    capped = False
    it = 0
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        eta = A @ coef
        p = expit(eta)
        g = A.T @ (q - p)
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            break
        H = (A * (p * (1 - p))[:, None]).T @ A
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        accepted = False
        for _ in range(60):
            cand = coef + t * step
            if np.max(np.abs(A @ cand)) <= cap:
                fc = obj(cand)
                if fc >= f:
                    accepted = True
                    break
            else:
                capped = True
            t *= 0.5
        if not accepted:
            break
        done = fc - f <= 1e-15 * (1 + abs(f)) and t < 1.0
        coef, f = cand, fc
        if done:
            break
    if capped:
        eta = A @ coef
        p = expit(eta)
        gnorm = float(np.linalg.norm(A.T @ (q - p)))
        capped = bool(np.max(np.abs(eta)) > cap * (1 - 1e-3))
    return IncidenceStep(float(coef[0]), coef[1:].copy(), capped, gnorm, it)


# -- latency M-step ------------------------------------------------------------


class _RiskSets:
    """Risk-set bookkeeping for data sorted by ascending time."""

    def __init__(self, times, delta):
        self.times = np.asarray(times, dtype=float)
        self.delta = np.asarray(delta, dtype=int)
        if np.any(np.diff(self.times) < 0):
            raise ValueError("times must be sorted")
        ev = self.delta == 1
        self.event_times, self.d = np.unique(self.times[ev], return_counts=True)
        self.start = np.searchsorted(self.times, self.event_times, side="left")
        self.event_idx = np.flatnonzero(ev)

    def sums(self, w, eta, Z, order=2):
        c = eta.max() if len(eta) else 0.0
        r = w * np.exp(eta - c)
        S0 = np.cumsum(r[::-1])[::-1][self.start]
        out = [S0, c]
        if order >= 1:
            rz = r[:, None] * Z
            out.append(np.cumsum(rz[::-1], axis=0)[::-1][self.start])
        if order >= 2:
            rzz = rz[:, :, None] * Z[:, None, :]
            out.append(np.cumsum(rzz[::-1], axis=0)[::-1][self.start])
        return out


def weighted_partial_loglik(coef, Z, times, delta, q, _rs: _RiskSets | None = None) -> float:
    """Breslow-tie Cox log partial likelihood with risk-set weights ``q``."""
    order = np.argsort(times, kind="stable")
    if _rs is None:
        Z, times, delta, q = (np.asarray(a)[order] for a in (Z, times, delta, q))
        _rs = _RiskSets(times, delta)
    Z = np.asarray(Z, dtype=float).reshape(len(_rs.times), -1)
    eta = Z @ np.asarray(coef, dtype=float)
    S0, c = _rs.sums(np.asarray(q, dtype=float), eta, Z, order=0)
    return float(eta[_rs.event_idx].sum() - np.sum(_rs.d * (np.log(S0) + c)))


def _pl_derivs(coef, Z, rs: _RiskSets, q):
    eta = Z @ coef
    S0, c, S1, S2 = rs.sums(q, eta, Z)
    ll = float(eta[rs.event_idx].sum() - np.sum(rs.d * (np.log(S0) + c)))
    mean = S1 / S0[:, None]
    g = Z[rs.event_idx].sum(axis=0) - (rs.d[:, None] * mean).sum(axis=0)
    H = -np.einsum("k,kab->ab", rs.d, S2 / S0[:, None, None] - mean[:, :, None] * mean[:, None, :])
    return ll, g, H


def breslow(times, delta, q, eta, zero_tail: bool = True) -> BaselineHazard:
    """Weighted Breslow estimator: jump ``d_k / sum_{j in R_k} q_j exp(eta_j)``."""
    order = np.argsort(times, kind="stable")
    t, dl, w, e = (np.asarray(a)[order] for a in (times, delta, q, eta))
    rs = _RiskSets(t, dl)
    if len(rs.event_times) == 0:
        return BaselineHazard(np.empty(0), np.empty(0), zero_tail)
    S0, c = rs.sums(w.astype(float), e.astype(float), np.zeros((len(t), 0)), order=0)
    jumps = rs.d / (S0 * np.exp(c))
    return BaselineHazard(rs.event_times, np.cumsum(jumps), zero_tail)


@dataclass(frozen=True)
class LatencyStep:
    coef: np.ndarray
    baseline: BaselineHazard
    capped: bool = False
    no_events: bool = False
    gradient_norm: float = 0.0
    iterations: int = 0


def mstep_latency(Z_ext, q, times, delta, start=None, newton_steps: int | None = None,
                  cap: float = LATENCY_CAP, tol: float = 1e-10, max_iter: int = 100,
                  zero_tail: bool = True, _sorted: bool = False, _rs: _RiskSets | None = None) -> LatencyStep:
    """Update latency coefficients and baseline hazard.

    The coefficients climb the ``q``-weighted partial likelihood by Newton
    with step-halving (``newton_steps`` passes, or to convergence when
    ``None``); the cumulative hazard is then the weighted Breslow estimator at
    the new coefficients. Without events the coefficients are left unchanged,
    ``H_0`` is identically zero and ``no_events`` is set.
    """
    q = np.asarray(q, dtype=float)
    n = len(q)
    Z = np.asarray(Z_ext, dtype=float).reshape(n, -1)
    times = np.asarray(times, dtype=float)
    delta = np.asarray(delta, dtype=int)
    coef = np.zeros(Z.shape[1]) if start is None else np.asarray(start, dtype=float).copy()
    if not delta.any():
        return LatencyStep(coef, BaselineHazard(np.empty(0), np.empty(0), zero_tail), no_events=True)
    if not _sorted:
        order = np.argsort(times, kind="stable")
        Z, times, delta, q = Z[order], times[order], delta[order], q[order]
    rs = _rs or _RiskSets(times, delta)

    capped = False
    gnorm = 0.0
    it = 0
    if Z.shape[1]:
        steps = max_iter if newton_steps is None else newton_steps
        ll, g, H = _pl_derivs(coef, Z, rs, q)
        gnorm = float(np.linalg.norm(g))
        for it in range(1, steps + 1):
            if gnorm < tol:
                break
            try:
                step = np.linalg.solve(-H, g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(-H, g, rcond=None)[0]
            t = 1.0
            accepted = False
            for _ in range(60):
                cand = coef + t * step
                eta = Z @ cand
                if np.ptp(eta) <= 2 * cap:
                    llc = weighted_partial_loglik(cand, Z, times, delta, q, _rs=rs)
                    if llc >= ll:
                        accepted = True
                        break
                else:
                    capped = True
                t *= 0.5
            if not accepted:
                break
            small = llc - ll <= 1e-15 * (1 + abs(ll))
            coef = cand
            ll, g, H = _pl_derivs(coef, Z, rs, q)
            gnorm = float(np.linalg.norm(g))
            if small and t < 1.0:
                break
        if capped:
            capped = bool(np.ptp(Z @ coef) > 2 * cap * (1 - 1e-3))
    base = breslow(times, delta, q, Z @ coef, zero_tail)
    return LatencyStep(coef, base, capped, False, gnorm, it)


# -- likelihood ----------------------------------------------------------------


def observed_loglik(alpha0, alpha, latency_coef, baseline: BaselineHazard, X, Z_ext, times, delta) -> float:
    """Observed-data log-likelihood of the mixture cure model.

    Events contribute ``log pi + log dH_0(t_i) + eta_i - H_0(t_i) e^eta_i``;
    censored subjects contribute ``log((1 - pi) + pi S_u(t_i))``. Returns
    ``-inf`` when some term has zero probability.
    """
    times = np.asarray(times, dtype=float)
    delta = np.asarray(delta, dtype=int)
    m = len(times)
    if m == 0:
        return 0.0
    X = np.asarray(X, dtype=float).reshape(m, -1)
    Z = np.asarray(Z_ext, dtype=float).reshape(m, -1)
    eta_i = np.clip(alpha0 + X @ np.asarray(alpha, dtype=float), -INCIDENCE_CAP, INCIDENCE_CAP)
    eta_l = Z @ np.asarray(latency_coef, dtype=float)
    pi = expit(eta_i)
    ev = delta == 1
    total = 0.0
    if ev.any():
        h = baseline.jump_at(times[ev])
        if np.any(h <= 0):
            return -np.inf
        total += float(np.sum(log_expit(eta_i[ev]) + np.log(h) + eta_l[ev]
                              - baseline(times[ev]) * np.exp(eta_l[ev])))
    if (~ev).any():
        S = baseline.survival(times[~ev], eta_l[~ev])
        with np.errstate(divide="ignore"):
            total += float(np.sum(np.log1p(-pi[~ev] * (1.0 - S))))
    return total


# -- EM driver -----------------------------------------------------------------


@dataclass
class _EMData:
    times: np.ndarray
    delta: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    order: np.ndarray
    rs: _RiskSets = field(repr=False)

    @classmethod
    def build(cls, times, delta, X, Z_ext) -> "_EMData":
        times = np.asarray(times, dtype=float)
        m = len(times)
        delta = np.asarray(delta, dtype=int)
        X = np.asarray(X, dtype=float).reshape(m, -1)
        Z = np.asarray(Z_ext, dtype=float).reshape(m, -1)
        # canonical order so results do not depend on input row order
        keys = [Z[:, j] for j in range(Z.shape[1] - 1, -1, -1)]
        keys += [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
        order = np.lexsort(keys + [-delta, times])
        t, d = times[order], delta[order]
        return cls(t, d, X[order], Z[order], order, _RiskSets(t, d))


@dataclass
class EMState:
    """Parameter state of the EM iteration (data in canonical order)."""

    alpha0: float
    alpha: np.ndarray
    coef: np.ndarray
    baseline: BaselineHazard
    capped_incidence: bool = False
    capped_latency: bool = False

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.alpha0], self.alpha, self.coef, self.baseline.cumulative_values])


def _posterior(state: EMState, data: _EMData) -> np.ndarray:
    pi = expit(np.clip(state.alpha0 + data.X @ state.alpha, -INCIDENCE_CAP, INCIDENCE_CAP))
    S = state.baseline.survival(data.times, data.Z @ state.coef)
    return estep_q(pi, S, data.delta)


def _loglik(state: EMState, data: _EMData) -> float:
    return observed_loglik(state.alpha0, state.alpha, state.coef, state.baseline,
                           data.X, data.Z, data.times, data.delta)


def _em_iteration(state: EMState, data: _EMData, newton_steps=1) -> EMState:
    q = _posterior(state, data)
    inc = mstep_incidence(data.X, q, start=np.concatenate([[state.alpha0], state.alpha]))
    lat = mstep_latency(data.Z, q, data.times, data.delta, start=state.coef,
                        newton_steps=newton_steps, _sorted=True, _rs=data.rs)
    return EMState(inc.alpha0, inc.alpha, lat.coef, lat.baseline, inc.capped, lat.capped)


def _initial_state(data: _EMData) -> EMState:
    inc = mstep_incidence(data.X, data.delta.astype(float))
    lat = mstep_latency(data.Z, np.ones(len(data.times)), data.times, data.delta,
                        _sorted=True, _rs=data.rs)
    return EMState(inc.alpha0, inc.alpha, lat.coef, lat.baseline, inc.capped, lat.capped)


def em_step(fit: CureModelFit, times, delta, X, Z_ext) -> CureModelFit:
    """Apply one EM iteration to an existing fit (for fixed-point checks)."""
    data = _EMData.build(times, delta, X, Z_ext)
    state = EMState(fit.alpha0, fit.alpha, fit.latency_coef, fit.baseline)
    new = _em_iteration(state, data)
    return _to_fit(new, data, fit, iterations=fit.iterations + 1,
                   trace=fit.loglik_trace + (_loglik(new, data),), converged=fit.converged, flags=fit.flags)


def _to_fit(state: EMState, data: _EMData, template: CureModelFit | None = None, **kw) -> CureModelFit:
    q_sorted = _posterior(state, data)
    q = np.empty_like(q_sorted)
    q[data.order] = q_sorted
    nz = len(template.beta) if template is not None else kw.pop("n_z", 0)
    names = {}
    if template is not None:
        names = dict(x_names=template.x_names, z_names=template.z_names, summary_names=template.summary_names)
    else:
        names = {k: kw.pop(k) for k in ("x_names", "z_names", "summary_names") if k in kw}
    return CureModelFit(
        alpha0=float(state.alpha0),
        alpha=np.asarray(state.alpha, dtype=float),
        beta=np.asarray(state.coef[:nz], dtype=float),
        psi=np.asarray(state.coef[nz:], dtype=float),
        baseline=state.baseline,
        posterior_q=q,
        loglik_trace=tuple(kw.pop("trace")),
        iterations=kw.pop("iterations"),
        converged=kw.pop("converged"),
        flags=tuple(kw.pop("flags")),
        **names,
    )


def fit_cure_em(
    times,
    delta,
    X,
    Z_ext,
    n_z: int = 0,
    tol: float = 1e-6,
    max_iter: int = 500,
    x_names=(),
    z_names=(),
    summary_names=(),
) -> CureModelFit:
    """Fit the Cox PH mixture cure model by EM.

    Parameters
    ----------
    times, delta : array_like
        Post-landmark observed times (> 0) and event indicators.
    X : array_like, shape (m, p_X)
        Incidence covariates (the intercept is added internally).
    Z_ext : array_like, shape (m, p_Z + p_S)
        Latency design: the first ``n_z`` columns are baseline latency
        covariates (``beta``), the rest are longitudinal summaries (``psi``).
    tol, max_iter
        Stop when the largest relative parameter change falls below ``tol``.

    Notes
    -----
    Starting values come from a logistic regression of ``delta`` on ``X`` and
    an ordinary Cox fit on everybody. If ``max_iter`` is reached the last
    iterate is returned with ``converged=False`` and a ``"max_iter"`` flag.
    """
    times = np.asarray(times, dtype=float)
    delta = np.asarray(delta, dtype=int)
    if len(times) == 0:
        raise CureModelError("no subjects")
    if not delta.any():
        raise CureModelError("no events: the latency component is not estimable")
    if delta.all():
        raise CureModelError("every subject had the event: no information on cure")
    data = _EMData.build(times, delta, X, Z_ext)
    if np.linalg.matrix_rank(np.column_stack([np.ones(len(times)), data.X])) < data.X.shape[1] + 1:
        raise CureModelError("incidence design is rank deficient")
    if data.Z.shape[1] and np.linalg.matrix_rank(data.Z - data.Z.mean(axis=0)) < data.Z.shape[1]:
        raise CureModelError("latency design is rank deficient")

    state = _initial_state(data)
    trace = [_loglik(state, data)]
    flags: set[str] = set()
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new = _em_iteration(state, data)
        old_v, new_v = state.vector(), new.vector()
        if len(old_v) == len(new_v):
            change = float(np.max(np.abs(new_v - old_v) / np.maximum(1.0, np.abs(old_v))))
        else:
            change = np.inf
        state = new
        trace.append(_loglik(state, data))
        if change < tol:
            converged = True
            break
    if state.capped_incidence:
        flags.add("incidence_capped")
    if state.capped_latency:
        flags.add("latency_capped")
    if not converged:
        flags.add("max_iter")
        log.warning("EM stopped after %d iterations without meeting tol=%g", max_iter, tol)
    return _to_fit(state, data, None, n_z=n_z, x_names=tuple(x_names), z_names=tuple(z_names),
                   summary_names=tuple(summary_names), trace=trace, iterations=it,
                   converged=converged, flags=sorted(flags))
