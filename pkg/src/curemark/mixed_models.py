"""Per-covariate (generalized) linear mixed models and random-effect prediction.

Linear mixed models are fitted by REML. The optimizer works on the
Cholesky factor of the random-effect covariance relative to the residual
variance (diagonal bounded below by zero); the residual variance and the fixed
effects are profiled out in closed form. Each subject is reduced to small
``q x q`` statistics once, so a criterion evaluation costs ``O(m q^3)``.

Non-Gaussian responses are handled by penalized quasi-likelihood: the model is
linearized on the link scale and a weighted LMM is refitted to the working
response until the estimates stabilize.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.special import expit, logit

from .data_model import CovariateSlice, LandmarkDataset

log = logging.getLogger(__name__)

LINKS = ("identity", "logit", "log")
_LOG2PI = np.log(2.0 * np.pi)
_MU_EPS = 1e-8


class ConvergenceError(RuntimeError):
    """An iterative fit did not converge within its iteration budget."""


class BoundaryError(ValueError):
    """The data put the fitted mean on the boundary of the link's domain."""


class BoundaryFitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MixedModelSpec:
    """Design of a single longitudinal covariate model.

    The fixed design ``W`` holds polynomial terms in time up to ``fixed_degree``
    followed by optional subject-level covariates; the random design ``V`` holds
    the first ``random_degree + 1`` polynomial columns, so ``V`` is a subset of
    ``W``. ``dispersion`` selects how PQL sets the working residual scale:
    ``"pearson"`` (estimated from Pearson residuals) or ``"fixed"`` (one).
    """

    link: str = "identity"
    fixed_degree: int = 1
    random_degree: int = 1
    fixed_covariates: tuple[str, ...] = ()
    dispersion: str = "pearson"

    def __post_init__(self):
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}; expected one of {LINKS}")
        if self.fixed_degree < 0 or self.random_degree < 0:
            raise ValueError("polynomial degrees must be nonnegative")
        if self.random_degree > self.fixed_degree:
            raise ValueError("random design must be a subset of the fixed design")
        if self.dispersion not in ("pearson", "fixed"):
            raise ValueError("dispersion must be 'pearson' or 'fixed'")
        object.__setattr__(self, "fixed_covariates", tuple(self.fixed_covariates))

    @property
    def p_w(self) -> int:
        return self.fixed_degree + 1 + len(self.fixed_covariates)

    @property
    def p_v(self) -> int:
        return self.random_degree + 1

    def fixed_names(self) -> list[str]:
        return _poly_names(self.fixed_degree) + list(self.fixed_covariates)

    def random_names(self) -> list[str]:
        return _poly_names(self.random_degree)

    def design(self, data: CovariateSlice, subject_covariates=None) -> tuple[np.ndarray, np.ndarray]:
        """Row-level fixed (W) and random (V) design matrices."""
        t = data.time
        W = np.vander(t, self.fixed_degree + 1, increasing=True)
        if self.fixed_covariates:
            if subject_covariates is None:
                raise ValueError("MixedModelSpec declares fixed covariates but none were supplied")
            S = np.asarray(subject_covariates, dtype=float).reshape(data.n_subjects, -1)
            if S.shape[1] != len(self.fixed_covariates):
                raise ValueError("subject covariate matrix width does not match MixedModelSpec.fixed_covariates")
            W = np.hstack([W, S[data.group]])
        return W, W[:, : self.p_v]

    def to_dict(self) -> dict:
        return {
            "link": self.link,
            "fixed_degree": self.fixed_degree,
            "random_degree": self.random_degree,
            "fixed_covariates": list(self.fixed_covariates),
            "dispersion": self.dispersion,
            "fixed_columns": self.fixed_names(),
            "random_columns": self.random_names(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixedModelSpec":
        return cls(
            link=d["link"],
            fixed_degree=int(d["fixed_degree"]),
            random_degree=int(d["random_degree"]),
            fixed_covariates=tuple(d.get("fixed_covariates", ())),
            dispersion=d.get("dispersion", "pearson"),
        )


def _poly_names(deg: int) -> list[str]:
    return ["(intercept)"] + ["time" if k == 1 else f"time^{k}" for k in range(1, deg + 1)]


@dataclass(frozen=True)
class MixedModelFit:
    """Estimates of one (G)LMM.

    ``sigma_eps_sq`` is the residual variance of the LMM, or the working
    dispersion of the linearized model for non-identity links.
    """

    spec: MixedModelSpec
    gamma: np.ndarray
    sigma_b: np.ndarray
    sigma_eps_sq: float
    sigma_b_chol: np.ndarray
    iterations: int = 0
    reml_criterion: float = float("nan")
    converged: bool = True
    boundary: bool = False
    pql_cycles: int = 0
    n_obs: int = 0
    n_subjects: int = 0
    trace: tuple[float, ...] = field(default=(), repr=False)

    @property
    def link(self) -> str:
        return self.spec.link

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "gamma": self.gamma.tolist(),
            "sigma_b_chol": self.sigma_b_chol.tolist(),
            "sigma_eps_sq": float(self.sigma_eps_sq),
            "convergence": {
                "iterations": int(self.iterations),
                "reml_criterion": float(self.reml_criterion),
                "converged": bool(self.converged),
                "boundary": bool(self.boundary),
                "pql_cycles": int(self.pql_cycles),
                "n_obs": int(self.n_obs),
                "n_subjects": int(self.n_subjects),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixedModelFit":
        L = np.asarray(d["sigma_b_chol"], dtype=float)
        conv = d.get("convergence", {})
        return cls(
            spec=MixedModelSpec.from_dict(d["spec"]),
            gamma=np.asarray(d["gamma"], dtype=float),
            sigma_b=L @ L.T,
            sigma_eps_sq=float(d["sigma_eps_sq"]),
            sigma_b_chol=L,
            iterations=int(conv.get("iterations", 0)),
            reml_criterion=float(conv.get("reml_criterion", float("nan"))),
            converged=bool(conv.get("converged", True)),
            boundary=bool(conv.get("boundary", False)),
            pql_cycles=int(conv.get("pql_cycles", 0)),
            n_obs=int(conv.get("n_obs", 0)),
            n_subjects=int(conv.get("n_subjects", 0)),
        )


@dataclass(frozen=True)
class RandomEffectSummary:
    """Predicted random effects for every at-risk subject and covariate."""

    subject_ids: np.ndarray
    covariates: tuple[str, ...]
    effects: dict[str, np.ndarray]
    random_names: tuple[str, ...] = ("(intercept)", "time")

    def matrix(self) -> np.ndarray:
        """Concatenated per-subject summaries, covariate-major (length ``p_Y * p_V``)."""
        return np.hstack([self.effects[c] for c in self.covariates])

    def column_names(self) -> list[str]:
        return [f"{c}:{r}" for c in self.covariates for r in self.random_names]


# -- sufficient statistics ---------------------------------------------------


@dataclass(frozen=True)
class _Stats:
    """Per-subject data rotated onto the column space of the random design.

    Each subject's rows are split by an orthonormal basis ``Q_i`` of its
    (weighted) random-effects design ``V_i = Q_i R_i``. The projected part has
    covariance ``R_i D R_i' + sigma2 I`` and the orthogonal complement is pure
    residual noise, so it is summed once over all subjects. Working on these
    pieces avoids the cancellation of the Woodbury form when ``sigma2`` is
    small compared with ``D``.
    """

    n: np.ndarray  # (m,) rows per subject
    R: np.ndarray  # (m, q, q) triangular factors, zero rows beyond rank
    Wp: np.ndarray  # (m, q, p) projected fixed design
    yp: np.ndarray  # (m, q) projected response
    mask: np.ndarray  # (m, q) True on rows inside the subject's rank
    WWc: np.ndarray  # (p, p) complement cross products, summed
    Wyc: np.ndarray  # (p,)
    yyc: float
    n_c: int  # total complement dimension
    logw: float  # sum of log weights


def _stats(W, V, y, group, m, w=None) -> _Stats:
    if w is None:
        sw = np.ones_like(y)
        logw = 0.0
    else:
        sw = np.sqrt(w)
        logw = float(np.sum(np.log(w)))
    Xw, Zw, yw = W * sw[:, None], V * sw[:, None], y * sw
    order = np.argsort(group, kind="stable")
    Xw, Zw, yw = Xw[order], Zw[order], yw[order]
    n = np.bincount(group, minlength=m)
    start = np.concatenate([[0], np.cumsum(n)[:-1]])
    q, p = Zw.shape[1], Xw.shape[1]
    R = np.zeros((m, q, q))
    Wp = np.zeros((m, q, p))
    yp = np.zeros((m, q))
    mask = np.zeros((m, q), dtype=bool)
    WWc, Wyc, yyc = np.zeros((p, p)), np.zeros(p), 0.0
    for c in np.unique(n[n > 0]):
        who = np.flatnonzero(n == c)
        rows = start[who][:, None] + np.arange(c)
        Zb, Xb, yb = Zw[rows], Xw[rows], yw[rows]
        Q, Rb = np.linalg.qr(Zb)  # reduced: (k, c, r), (k, r, q) with r = min(c, q)
        r = Rb.shape[1]
        Xp = np.swapaxes(Q, 1, 2) @ Xb
        ypb = np.einsum("kcr,kc->kr", Q, yb)
        Xc = Xb - Q @ Xp
        yc = yb - np.einsum("kcr,kr->kc", Q, ypb)
        R[who, :r] = Rb
        Wp[who, :r] = Xp
        yp[who, :r] = ypb
        mask[who, :r] = True
        WWc += np.einsum("kca,kcb->ab", Xc, Xc)
        Wyc += np.einsum("kca,kc->a", Xc, yc)
        yyc += float(np.sum(yc**2))
    n_c = int(n.sum() - mask.sum())
    return _Stats(n, R, Wp, yp, mask, WWc, Wyc, yyc, n_c, logw)


def _n_chol(q: int) -> int:
    return q * (q + 1) // 2


def _chol_from_theta(th: np.ndarray, q: int) -> np.ndarray:
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = th
    return L


def _theta_from_cov(D: np.ndarray) -> np.ndarray:
    q = D.shape[0]
    try:
        L = np.linalg.cholesky(D)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(D + 1e-8 * np.eye(q))
    return L[np.tril_indices(q)].copy()


def _gls(st: _Stats, D: np.ndarray, sigma2: float):
    """GLS pieces of the marginal model ``V_i = Z D Z' + sigma2 W^-1``.

    Raises ``LinAlgError`` when some projected block is not positive definite.
    """
    A = st.R @ D @ np.swapaxes(st.R, 1, 2)
    d = np.arange(A.shape[1])
    A[:, d, d] += np.where(st.mask, sigma2, 1.0)
    C = np.linalg.cholesky(A)
    AW = np.linalg.solve(A, st.Wp)
    Ay = np.linalg.solve(A, st.yp[..., None])[..., 0]
    logdetV = 2.0 * float(np.log(C[:, d, d]).sum()) + st.n_c * np.log(sigma2) - st.logw
    XVX = np.einsum("kqa,kqb->ab", st.Wp, AW) + st.WWc / sigma2
    XVy = np.einsum("kqa,kq->a", st.Wp, Ay) + st.Wyc / sigma2
    yVy = float(np.einsum("kq,kq->", st.yp, Ay)) + st.yyc / sigma2
    return XVX, XVy, yVy, logdetV


def _reml_value(st: _Stats, D: np.ndarray, sigma2: float) -> tuple[float, np.ndarray]:
    """``-2`` times the REML log-likelihood, and the GLS fixed effects."""
    try:
        XVX, XVy, yVy, logdetV = _gls(st, D, sigma2)
        C = np.linalg.cholesky(XVX)
    except np.linalg.LinAlgError:
        return np.inf, np.full(st.Wp.shape[2], np.nan)
    gamma = np.linalg.solve(XVX, XVy)
    n = int(st.n.sum())
    p = len(XVy)
    quad = yVy - XVy @ gamma
    crit = (n - p) * _LOG2PI + logdetV + 2.0 * np.log(np.diag(C)).sum() + quad
    return float(crit), gamma


def reml_criterion(
    data: CovariateSlice,
    spec: MixedModelSpec,
    sigma_b: np.ndarray,
    sigma_eps_sq: float,
    subject_covariates=None,
    weights=None,
) -> float:
    """Evaluate ``-2 log L_REML`` at the given variance components."""
    W, V = spec.design(data, subject_covariates)
    st = _stats(W, V, data.y, data.group, data.n_subjects, weights)
    return _reml_value(st, np.asarray(sigma_b, dtype=float), float(sigma_eps_sq))[0]


# -- LMM ---------------------------------------------------------------------

_MAX_OUTER = 200


def _profiled_value(st: _Stats, Lam: np.ndarray) -> tuple[float, np.ndarray, float]:
    """REML criterion with the residual variance profiled out.

    ``Lam`` is the random-effect covariance relative to the residual variance;
    the residual variance maximizing the REML likelihood for that ``Lam`` is
    ``quad / (n - p)`` and is returned alongside the criterion and fixed effects.
    """
    n = int(st.n.sum())
    p = st.Wp.shape[2]
    try:
        XVX, XVy, yVy, logdetV = _gls(st, Lam, 1.0)
        C = np.linalg.cholesky(XVX)
    except np.linalg.LinAlgError:
        return np.inf, np.full(p, np.nan), np.nan
    gamma = np.linalg.solve(XVX, XVy)
    quad = yVy - XVy @ gamma
    if not quad > 0:
        return np.inf, gamma, np.nan
    s2 = quad / (n - p)
    crit = (n - p) * (_LOG2PI + np.log(s2) + 1.0) + logdetV + 2.0 * np.log(np.diag(C)).sum()
    return float(crit), gamma, float(s2)


def _fit_reml(st: _Stats, q: int, sigma2_fixed: float | None = None, theta0=None, maxiter=_MAX_OUTER):
    """Minimize ``-2 log L_REML`` over the Cholesky factor of the covariance.

    With a free residual variance the search runs over the covariance relative
    to it, which keeps the problem well scaled when the residual variance is
    tiny; ``theta0`` then carries the log residual variance as its last entry.
    """
    k = _n_chol(q)
    diag_pos = set(int(i * (i + 3) // 2) for i in range(q))  # diagonal slots of the packed tril
    bounds = [(0.0, None) if j in diag_pos else (None, None) for j in range(k)]
    th0 = np.asarray(theta0, dtype=float)
    profiled = sigma2_fixed is None

    if profiled:
        # start from the relative covariance implied by the supplied (D, sigma2)
        L0 = _chol_from_theta(th0[:k], q)
        th0 = _theta_from_cov((L0 @ L0.T) / np.exp(th0[k]))

        def value(th):
            L = _chol_from_theta(th, q)
            return _profiled_value(st, L @ L.T)[0]
    else:

        def value(th):
            L = _chol_from_theta(th, q)
            return _reml_value(st, L @ L.T, float(sigma2_fixed))[0]

    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    th0 = np.clip(th0, lo, hi)
    # search in units of the starting factor's row norms so that the gradient
    # tolerance means the same thing whatever the scale of the covariance
    row = np.sqrt(np.diag(_chol_from_theta(th0, q) @ _chol_from_theta(th0, q).T))
    row = np.where(row > 0, row, 1.0)
    scale = row[np.tril_indices(q)[0]]

    def fun(x):
        val = value(x * scale)
        return val if np.isfinite(val) else 1e300

    trace: list[float] = [fun(th0 / scale)]
    res = optimize.minimize(
        fun,
        th0 / scale,
        method="L-BFGS-B",
        bounds=bounds,
        callback=lambda xk: trace.append(fun(xk)),
        options={"maxiter": maxiter, "ftol": 1e-14, "gtol": 1e-9, "maxls": 40},
    )
    x, success, nit = res.x, bool(res.success) or res.status == 0, int(res.nit)
    if not success and res.status == 2:
        # the line search stalls when finite-difference gradients are dominated
        # by rounding near the optimum; finish with a derivative-free polish
        polish = optimize.minimize(lambda th: fun(np.clip(th, lo, hi)), x, method="Nelder-Mead",
                                   options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 400 * len(x)})
        if polish.fun <= res.fun:
            x = np.clip(polish.x, lo, hi)
            trace.append(fun(x))
        success = bool(polish.success)
        nit += int(polish.nit)
    # the criterion is even in each diagonal entry, so a zero diagonal is a
    # stationary point even when it is a saddle; restart just inside the bound
    diag = np.array(sorted(diag_pos))
    for _ in range(q):
        if not success or np.all(x[diag] > 1e-6):
            break
        x1 = x.copy()
        x1[diag] = np.maximum(x1[diag], 0.1)
        again = optimize.minimize(fun, x1, method="L-BFGS-B", bounds=bounds,
                                  options={"maxiter": maxiter, "ftol": 1e-14, "gtol": 1e-9, "maxls": 40})
        nit += int(again.nit)
        if not again.fun < fun(x) - 1e-10 * abs(fun(x)):
            break
        x = again.x
        trace.append(fun(x))
    x = x * scale
    L = _chol_from_theta(x, q)
    if profiled:
        crit, gamma, s2 = _profiled_value(st, L @ L.T)
        L = L * np.sqrt(s2)
    else:
        s2 = float(sigma2_fixed)
        crit, gamma = _reml_value(st, L @ L.T, s2)
    if not (np.all(np.isfinite(x)) and np.isfinite(crit)):
        success = False
    return {
        "theta": x,
        "L": L,
        "D": L @ L.T,
        "sigma2": s2,
        "gamma": gamma,
        "crit": crit,
        "nit": nit,
        "success": success,
        "message": res.message,
        "trace": tuple(trace),
    }


def _initial_theta(W, V, y, group, m, w=None, with_sigma=True):
    sw = np.ones_like(y) if w is None else np.sqrt(w)
    coef, *_ = np.linalg.lstsq(W * sw[:, None], y * sw, rcond=None)
    r = y - W @ coef
    s2 = max(float(np.mean(sw**2 * r**2)), 1e-8)
    q = V.shape[1]
    scale = np.ones(q)
    for j in range(1, q):
        sd = np.std(V[:, j])
        scale[j] = 1.0 / sd if sd > 0 else 1.0
    D0 = np.diag((0.5 * s2) * scale**2)
    th = _theta_from_cov(D0)
    return np.append(th, np.log(0.5 * s2)) if with_sigma else th


def _moment_theta(st: _Stats, sigma2_fixed: float | None = None):
    """Method-of-moments start from per-subject least squares, or ``None``.

    The residual variance is pooled from the within-subject complements and
    the covariance starts at the spread of the per-subject coefficients minus
    their average sampling variance, floored to stay positive definite. Only
    subjects whose design has full column rank contribute.
    """
    full = st.mask.all(axis=1)
    q = st.R.shape[1]
    if st.n_c == 0 or full.sum() < q + 1:
        return None
    try:
        Rinv = np.linalg.inv(st.R[full])
    except np.linalg.LinAlgError:
        return None
    s2 = st.yyc / st.n_c if sigma2_fixed is None else float(sigma2_fixed)
    if not s2 > 0:
        return None
    coef = np.einsum("kab,kb->ka", Rinv, st.yp[full])
    samp = np.einsum("kab,kcb->ac", Rinv, Rinv) / full.sum()
    ev, U = np.linalg.eigh(np.atleast_2d(np.cov(coef.T)) - s2 * samp)
    ev = np.maximum(ev, 1e-4 * max(float(ev.max()), s2))
    th = _theta_from_cov((U * ev) @ U.T)
    return np.append(th, np.log(s2)) if sigma2_fixed is None else th


def _check_inputs(data: CovariateSlice, W: np.ndarray):
    if np.any(data.counts() == 0):
        raise ValueError("every subject needs at least one observation")
    if len(data.y) <= W.shape[1]:
        raise ValueError("need more observations than fixed-effect columns")
    if np.linalg.matrix_rank(W) < W.shape[1]:
        raise np.linalg.LinAlgError("fixed-effect design is singular")


def fit_lmm(data: CovariateSlice, spec: MixedModelSpec | None = None, subject_covariates=None) -> MixedModelFit:
    """Fit a linear mixed model by REML.

    Parameters
    ----------
    data : CovariateSlice
        Pre-landmark measurements of one covariate.
    spec : MixedModelSpec, optional
        Defaults to random intercept and slope with a linear fixed time trend.
    subject_covariates : array_like, optional
        Subject-level columns appended to the fixed design, in subject order.

    Returns
    -------
    MixedModelFit
        Carries the REML criterion (``-2 log L_REML``) at the optimum; a
        singular random-effect covariance sets ``boundary`` and emits a warning.
    """
    spec = spec or MixedModelSpec()
    if spec.link != "identity":
        raise ValueError("fit_lmm handles the identity link only; use fit_glmm_pql")
    W, V = spec.design(data, subject_covariates)
    _check_inputs(data, W)
    m, q = data.n_subjects, spec.p_v

    # exact fit: nothing left for the variance components to explain
    coef, *_ = np.linalg.lstsq(W, data.y, rcond=None)
    rss = float(np.sum((data.y - W @ coef) ** 2))
    if rss <= 1e-24 * max(1.0, float(data.y @ data.y)):
        warnings.warn("data are fitted exactly by the fixed effects; variance components set to zero",
                      BoundaryFitWarning, stacklevel=2)
        return MixedModelFit(
            spec=spec, gamma=coef, sigma_b=np.zeros((q, q)), sigma_eps_sq=0.0,
            sigma_b_chol=np.zeros((q, q)), iterations=0, reml_criterion=-np.inf,
            converged=True, boundary=True, n_obs=len(data.y), n_subjects=m,
        )

    st = _stats(W, V, data.y, data.group, m)
    theta0 = _moment_theta(st)
    if theta0 is None:
        theta0 = _initial_theta(W, V, data.y, data.group, m)
    res = _fit_reml(st, q, theta0=theta0)
    if not res["success"]:
        raise ConvergenceError(f"REML optimizer stopped without converging: {res['message']}")
    fit = _make_fit(spec, res, len(data.y), m)
    if fit.boundary:
        warnings.warn("random-effect covariance estimate is singular (boundary fit)",
                      BoundaryFitWarning, stacklevel=2)
    return fit


def _make_fit(spec, res, n_obs, m, **extra) -> MixedModelFit:
    D = res["D"]
    ev = np.linalg.eigvalsh(D)
    boundary = bool(ev.min() <= 1e-6 * max(float(np.trace(D)) + res["sigma2"], 1e-300))
    return MixedModelFit(
        spec=spec,
        gamma=np.asarray(res["gamma"], dtype=float),
        sigma_b=D,
        sigma_eps_sq=float(res["sigma2"]),
        sigma_b_chol=res["L"],
        iterations=res["nit"],
        reml_criterion=res["crit"],
        converged=True,
        boundary=boundary,
        n_obs=n_obs,
        n_subjects=m,
        trace=res["trace"],
        **extra,
    )


# -- random effects -----------------------------------------------------------


def _pad(data: CovariateSlice, *cols):
    """Scatter row-level arrays into per-subject blocks padded with zeros."""
    counts = data.counts()
    nmax = int(counts.max())
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(data.group)) - starts[data.group]
    mask = np.zeros((data.n_subjects, nmax), dtype=bool)
    mask[data.group, slot] = True
    out = []
    for c in cols:
        c = np.asarray(c, dtype=float)
        P = np.zeros((data.n_subjects, nmax) + c.shape[1:])
        P[data.group, slot] = c
        out.append(P)
    return mask, out


def _blup(data: CovariateSlice, V: np.ndarray, resid: np.ndarray, D: np.ndarray, r_var: np.ndarray):
    """``D V_i' [V_i D V_i' + R_i]^{-1} r_i`` for every subject at once.

    Padded rows get unit residual variance and zero design/residual so they
    decouple from the real block.
    """
    mask, (Vp, rp, Rp) = _pad(data, V, resid, r_var)
    Rp = np.where(mask, Rp, 1.0)
    cov = Vp @ D @ np.swapaxes(Vp, 1, 2)
    idx = np.arange(cov.shape[1])
    cov[:, idx, idx] += Rp
    ok = np.ones(data.n_subjects, dtype=bool)
    b = np.zeros((data.n_subjects, D.shape[0]))
    try:
        sol = np.linalg.solve(cov, rp[..., None])[..., 0]
    except np.linalg.LinAlgError:
        sol = np.zeros_like(rp)
        for i in range(data.n_subjects):
            try:
                sol[i] = np.linalg.solve(cov[i], rp[i])
            except np.linalg.LinAlgError:
                ok[i] = False
    b[ok] = np.einsum("ab,knb,kn->ka", D, Vp[ok], sol[ok])
    return b, ok


def _link_parts(link: str, eta: np.ndarray):
    """Mean, derivative ``g'(mu)`` and variance function ``V(mu)``."""
    if link == "logit":
        mu = np.clip(expit(eta), _MU_EPS, 1 - _MU_EPS)
        var = mu * (1 - mu)
        return mu, 1.0 / var, var
    if link == "log":
        mu = np.exp(np.clip(eta, -30, 30))
        return mu, 1.0 / mu, mu
    return eta, np.ones_like(eta), np.ones_like(eta)


def predict_random_effects(
    fit: MixedModelFit,
    data: CovariateSlice,
    subject_covariates=None,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> np.ndarray:
    """Empirical Bayes random effects ``E(b_i | y_i)`` at the fitted parameters.

    For the identity link this is the closed form
    ``Sigma_b V_i' (V_i Sigma_b V_i' + sigma^2 I)^{-1} (y_i - W_i gamma)``.
    For other links the same expression is applied to the linearized response
    ``y*`` with working variance ``phi / w``, re-linearizing around the current
    prediction until it stops moving. Works for subjects outside the
    estimation sample as long as their design rows can be built.

    Returns an ``(m, p_V)`` array in the subject order of ``data``. Subjects with
    a singular marginal covariance get a zero vector and a warning.
    """
    spec = fit.spec
    W, V = spec.design(data, subject_covariates)
    D = np.asarray(fit.sigma_b, dtype=float)
    fixed = W @ fit.gamma
    if spec.link == "identity":
        b, ok = _blup(data, V, data.y - fixed, D, np.full(len(data.y), fit.sigma_eps_sq))
    else:
        b = np.zeros((data.n_subjects, spec.p_v))
        for _ in range(max_iter):
            eta = fixed + np.einsum("ij,ij->i", V, b[data.group])
            mu, gp, var = _link_parts(spec.link, eta)
            ystar = eta + (data.y - mu) * gp
            w = 1.0 / (gp**2 * var)
            b_new, ok = _blup(data, V, ystar - fixed, D, fit.sigma_eps_sq / w)
            done = np.max(np.abs(b_new - b)) <= tol * (1 + np.max(np.abs(b)))
            b = b_new
            if done:
                break
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} subject(s) have a singular marginal covariance; "
                      "their random effects are set to zero", BoundaryFitWarning, stacklevel=2)
    return b


# -- PQL -----------------------------------------------------------------------


def _deviance(link: str, y: np.ndarray, mu: np.ndarray) -> float:
    if link == "logit":
        return float(-2.0 * np.sum(y * np.log(mu) + (1 - y) * np.log(1 - mu)))
    if link == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(y > 0, y * np.log(y / mu), 0.0)
        return float(2.0 * np.sum(t - (y - mu)))
    return float(np.sum((y - mu) ** 2))


def _glm_irls(W, y, link, max_iter=50):
    if link == "logit":
        mu = (y + 0.5) / 2.0
        eta = logit(mu)
    else:
        mu = y + 0.5
        eta = np.log(mu)
    coef = np.zeros(W.shape[1])
    for _ in range(max_iter):
        mu, gp, var = _link_parts(link, eta)
        z = eta + (y - mu) * gp
        w = 1.0 / (gp**2 * var)
        new, *_ = np.linalg.lstsq(W * np.sqrt(w)[:, None], z * np.sqrt(w), rcond=None)
        if np.max(np.abs(new - coef)) < 1e-10 * (1 + np.max(np.abs(coef))):
            coef = new
            break
        coef = new
        eta = W @ coef
    return coef


def fit_glmm_pql(
    data: CovariateSlice,
    spec: MixedModelSpec,
    subject_covariates=None,
    max_cycles: int = 100,
    tol: float = 1e-6,
) -> MixedModelFit:
    """Fit a GLMM by penalized quasi-likelihood.

    Each cycle builds the working response ``y* = eta + (y - mu) g'(mu)`` and
    weights ``w = 1 / (g'(mu)^2 V(mu))``, fits a weighted LMM with residual
    covariance ``phi diag(1/w)`` and updates the linear predictor with the new
    fixed effects and BLUPs. The update is step-halved when it increases the
    penalized quasi-deviance. Iteration stops once the relative change in
    ``(gamma, Sigma_b)`` drops below ``tol``.

    With the identity link the call is delegated to :func:`fit_lmm`.
    """
    if spec.link == "identity":
        return fit_lmm(data, spec, subject_covariates)
    W, V = spec.design(data, subject_covariates)
    _check_inputs(data, W)
    y = np.asarray(data.y, dtype=float)
    if spec.link == "logit":
        if np.any((y < 0) | (y > 1)):
            raise ValueError("logit-link responses must lie in [0, 1]")
        if np.all(y == y[0]):
            raise BoundaryError("all responses equal %g: fitted means sit on the logit boundary" % y[0])
    elif spec.link == "log":
        if np.any(y < 0):
            raise ValueError("log-link responses must be nonnegative")
        if np.all(y == 0):
            raise BoundaryError("all responses are zero: fitted means sit on the log-link boundary")

    m, q = data.n_subjects, spec.p_v
    n, p = len(y), W.shape[1]
    gamma = _glm_irls(W, y, spec.link)
    b = np.zeros((m, q))
    eta = W @ gamma
    D = None
    theta = None
    boundary = False
    res = None
    converged = False
    cycle = 0

    def pq_dev(eta_, b_, D_, phi_):
        mu_, _, _ = _link_parts(spec.link, eta_)
        Dinv = np.linalg.pinv(D_)
        pen = float(np.einsum("ka,ab,kb->", b_, Dinv, b_))
        return _deviance(spec.link, y, mu_) / phi_ + pen

    for cycle in range(1, max_cycles + 1):
        mu, gp, var = _link_parts(spec.link, eta)
        if spec.link == "logit" and np.any((mu <= _MU_EPS) | (mu >= 1 - _MU_EPS)):
            boundary = True
        ystar = eta + (y - mu) * gp
        w = 1.0 / (gp**2 * var)
        phi_fixed = None
        if spec.dispersion == "pearson":
            phi_fixed = max(float(np.sum((y - mu) ** 2 / var) / (n - p)), 1e-8)
        elif spec.dispersion == "fixed":
            phi_fixed = 1.0
        st = _stats(W, V, ystar, data.group, m, w)
        if theta is None:
            theta = _moment_theta(st, phi_fixed)
            if theta is None:
                theta = _initial_theta(W, V, ystar, data.group, m, w, with_sigma=False)
        res = _fit_reml(st, q, sigma2_fixed=phi_fixed, theta0=theta)
        theta = res["theta"][: _n_chol(q)]
        phi = res["sigma2"]
        gamma_new, D_new = res["gamma"], res["D"]
        b_new, _ = _blup(data, V, ystar - W @ gamma_new, D_new, phi / w)
        eta_new = W @ gamma_new + np.einsum("ij,ij->i", V, b_new[data.group])

        # step-halve toward the previous predictor if the penalized deviance got worse
        if cycle > 1:
            old = pq_dev(eta, b, D_new, phi)
            step = 1.0
            for _ in range(30):
                eta_try = eta + step * (eta_new - eta)
                b_try = b + step * (b_new - b)
                if pq_dev(eta_try, b_try, D_new, phi) <= old + 1e-10 * abs(old):
                    break
                step *= 0.5
            if step < 1.0:
                log.debug("PQL cycle %d damped to step %.3g", cycle, step)
                eta_new, b_new = eta_try, b_try

        change = 0.0
        if D is not None:
            old_par = np.concatenate([gamma, D.ravel()])
            new_par = np.concatenate([gamma_new, D_new.ravel()])
            change = float(np.max(np.abs(new_par - old_par)) / max(1.0, np.max(np.abs(old_par))))
        gamma, D, b, eta = gamma_new, D_new, b_new, eta_new
        if D is not None and cycle > 1 and change < tol:
            converged = True
            break

    if boundary:
        warnings.warn("fitted means reached the link boundary; PQL updates were damped",
                      BoundaryFitWarning, stacklevel=2)
    if not converged:
        raise ConvergenceError(f"PQL did not converge in {max_cycles} cycles")
    fit = _make_fit(spec, res, n, m, pql_cycles=cycle)
    return replace(fit, boundary=fit.boundary or boundary)


def fit_mixed_model(data: CovariateSlice, spec: MixedModelSpec | None = None, subject_covariates=None) -> MixedModelFit:
    spec = spec or MixedModelSpec()
    if spec.link == "identity":
        return fit_lmm(data, spec, subject_covariates)
    return fit_glmm_pql(data, spec, subject_covariates)


def fit_all_covariates(
    landmark: LandmarkDataset,
    covariates=None,
    specs: dict[str, MixedModelSpec] | MixedModelSpec | None = None,
) -> dict[str, MixedModelFit]:
    """One independent (G)LMM per longitudinal covariate, on pre-landmark data."""
    covariates = list(covariates or landmark.covariates)
    out = {}
    for cov in covariates:
        spec = specs.get(cov) if isinstance(specs, dict) else specs
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryFitWarning)
            out[cov] = fit_mixed_model(landmark.covariate_slice(cov), spec or MixedModelSpec())
    return out


def summarize_random_effects(fits: dict[str, MixedModelFit], landmark: LandmarkDataset) -> RandomEffectSummary:
    """Predicted random effects of every at-risk subject, one block per covariate."""
    effects = {}
    names: tuple[str, ...] = ()
    for cov, fit in fits.items():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryFitWarning)
            effects[cov] = predict_random_effects(fit, landmark.covariate_slice(cov))
        names = tuple(fit.spec.random_names())
    return RandomEffectSummary(landmark.subjects.subject_id, tuple(fits), effects, names)
