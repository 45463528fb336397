"""Known-group estimation, plug-in standard errors and IC-based choice of G."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .errors import EmptyGroup, SingularGram
from .likelihood import (
    ConcentratedPanel,
    GroupMatrix,
    composite_errors,
    concentrate,
    mu_star_hat,
)
from .model import EPS_PHI, EcmParams, ModelSpec, PanelDataset

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class FitResult:
    params: EcmParams
    labels: np.ndarray
    N: int
    T: int
    ssce: float
    sigma2_hat: float
    omega_n: float
    ic_value: float
    std_errors: dict
    conf_intervals: dict
    theta_unbounded: np.ndarray
    alpha: float = 0.05
    diagnostics: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    @property
    def G(self) -> int:
        return self.params.G

    @property
    def groups(self) -> GroupMatrix:
        return GroupMatrix.from_labels(self.labels, self.G)

    def to_dict(self) -> dict:
        ci = {k: [np.asarray(v[0]).tolist(), np.asarray(v[1]).tolist()]
              for k, v in self.conf_intervals.items()}
        return {
            "schema_version": SCHEMA_VERSION,
            "G": self.G, "N": self.N, "T": self.T,
            "theta": self.params.theta.tolist(),
            "phi": self.params.phi.tolist(),
            "mu_star": self.params.mu_star,
            "labels": self.labels.tolist(),
            "ssce": self.ssce,
            "sigma2_hat": self.sigma2_hat,
            "omega_n": self.omega_n,
            "ic": self.ic_value,
            "std_errors": {k: np.asarray(v).tolist() for k, v in self.std_errors.items()},
            "conf_intervals": ci,
            "conf_level": 1.0 - self.alpha,
            "theta_ci_unbounded": self.theta_unbounded.tolist(),
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def omega_value(omega: float | str | tuple | None, N: int) -> float:
    """Penalty per group: ``None``/"log" gives log N, ("clog", c) gives c log N,
    a number is used as is."""
    if omega is None or omega == "log":
        return math.log(N)
    if isinstance(omega, (tuple, list)) and omega[0] == "clog":
        return float(omega[1]) * math.log(N)
    return float(omega)


def _group_design(cp: ConcentratedPanel, labels: np.ndarray, G: int) -> np.ndarray:
    """Columns: per-group sums of B (coefficient phi_c), then of C (coefficient
    -phi_c theta_c), each divided by N."""
    u = GroupMatrix.from_labels(labels, G).u
    sb = u @ cp.B / cp.N  # (G, L)
    sc = np.einsum("gn,nlk->glk", u, cp.C) / cp.N
    return np.concatenate([sb.T, sc.transpose(1, 0, 2).reshape(cp.T, -1)], axis=1)


def _check_nonempty(labels: np.ndarray, G: int) -> None:
    counts = np.bincount(labels, minlength=G)
    if np.any(counts == 0):
        raise EmptyGroup(f"groups {np.flatnonzero(counts == 0).tolist()} have no members")


def known_group_ols(cp: ConcentratedPanel, labels: np.ndarray, G: int) -> EcmParams:
    """Unconstrained least-squares roots of the score equations for fixed groups."""
    labels = np.asarray(labels, dtype=int)
    _check_nonempty(labels, G)
    X = _group_design(cp, labels, G)
    coef, *_ = np.linalg.lstsq(X, cp.A, rcond=None)
    phi = coef[:G]
    beta = -coef[G:].reshape(G, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(np.abs(phi)[:, None] >= EPS_PHI, beta / phi[:, None], np.nan)
    params = EcmParams(theta, phi)
    params.mu_star = mu_star_hat(cp, EcmParams(np.nan_to_num(theta), phi), GroupMatrix.from_labels(labels, G))
    return params


def _f_and_grad(cp: ConcentratedPanel, u: np.ndarray, z: np.ndarray, G: int):
    phi, theta = z[:G], z[G:].reshape(G, -1)
    p = EcmParams(theta, phi)
    e = composite_errors(cp, p, GroupMatrix(u, check=False))
    s = cp.N * (cp.A - e)
    f = np.sum(s * (s - 2.0 * cp.N * cp.A)) / cp.T
    be = cp.B @ e / cp.T
    ce = np.einsum("ntk,t->nk", cp.C, e) / cp.T
    m = be[None, :] - theta @ ce.T
    g_phi = -2.0 * cp.N * np.sum(u * m, axis=1)
    g_theta = 2.0 * cp.N * phi[:, None] * (u @ ce)
    return float(f), np.concatenate([g_phi, g_theta.ravel()])


def refit_labels(cp: ConcentratedPanel, spec: ModelSpec, labels: np.ndarray) -> tuple[float, EcmParams]:
    """Box-constrained (phi, theta) for fixed labels and the value of N^2 (ssce - A0).

    Uses least squares when it lands inside the boxes, otherwise a bounded
    quasi-Newton search started from the clipped least-squares point.
    """
    G = spec.G
    labels = np.asarray(labels, dtype=int)
    u = GroupMatrix.from_labels(labels, G).u
    X = _group_design(cp, labels, G)
    coef, *_ = np.linalg.lstsq(X, cp.A, rcond=None)
    phi = coef[:G]
    beta = -coef[G:].reshape(G, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(phi[:, None] != 0.0, beta / phi[:, None], 0.0)
    empty = np.bincount(labels, minlength=G) == 0
    phi[empty] = 0.0
    theta[empty] = 0.0
    inside = np.all(np.abs(phi) <= spec.box_phi) and np.all(np.abs(theta) <= spec.box_theta)
    z0 = np.concatenate([np.clip(phi, -spec.box_phi, spec.box_phi),
                         np.clip(theta, -spec.box_theta, spec.box_theta).ravel()])
    if inside:
        f, _ = _f_and_grad(cp, u, z0, G)
        return f, EcmParams(z0[G:].reshape(G, -1), z0[:G])
    bounds = list(zip(-np.concatenate([spec.box_phi, spec.box_theta.ravel()]),
                      np.concatenate([spec.box_phi, spec.box_theta.ravel()])))
    f0, _ = _f_and_grad(cp, u, z0, G)
    res = minimize(lambda z: _f_and_grad(cp, u, z, G), z0, jac=True, method="L-BFGS-B",
                   bounds=bounds, options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-10})
    z = np.clip(res.x, [b[0] for b in bounds], [b[1] for b in bounds])
    f, _ = _f_and_grad(cp, u, z, G)
    if f > f0:
        z, f = z0, f0
    return float(f), EcmParams(z[G:].reshape(G, -1), z[:G])


def standard_errors(cp: ConcentratedPanel, params: EcmParams, labels: np.ndarray,
                    sigma2: float, alpha: float = 0.05):
    """Plug-in asymptotic standard errors and normal confidence intervals.

    Returns (std_errors, conf_intervals, theta_unbounded). Groups whose
    speed estimate is numerically zero get infinite theta intervals.
    """
    G, N, T = params.G, cp.N, cp.T
    labels = np.asarray(labels, dtype=int)
    sizes = np.bincount(labels, minlength=G).astype(float)
    g = sizes / N
    dx = cp.d_x
    u = GroupMatrix.from_labels(labels, G).u
    with np.errstate(invalid="ignore", divide="ignore"):
        xbar = np.einsum("gn,nlk->glk", u, cp.x_w) / sizes[:, None, None]
        ybar = u @ cp.y_lag_w / sizes[:, None]
    theta = np.nan_to_num(params.theta)
    xi = ybar - np.einsum("glk,gk->gl", xbar, theta)
    X = np.concatenate([xbar.transpose(1, 0, 2).reshape(T, -1), -xi.T, -cp.one_w[:, None]], axis=1)
    Q = X.T @ X / T
    scale = np.concatenate([np.repeat(params.phi * g, dx), g, [1.0]])
    M = scale[:, None] * Q * scale[None, :]
    unbounded = np.abs(params.phi) < EPS_PHI
    keep = np.concatenate([np.repeat(~unbounded, dx), np.ones(G + 1, dtype=bool)])
    Mk = M[np.ix_(keep, keep)]
    d = np.sqrt(np.diag(Mk))
    if np.any(~np.isfinite(d)) or np.any(d == 0):
        raise SingularGram("regressor Gram matrix has a zero or undefined direction")
    corr = Mk / np.outer(d, d)
    if np.linalg.cond(corr) > 1e12:
        raise SingularGram("regressor Gram matrix is numerically singular")
    var = np.full(M.shape[0], np.inf)
    var[keep] = np.diag(np.linalg.solve(Mk, np.eye(Mk.shape[0]))) * sigma2 / (N * T)
    se = np.sqrt(np.maximum(var, 0.0))
    se_theta = se[:G * dx].reshape(G, dx)
    se_phi = se[G * dx:G * dx + G]
    se_mu = float(se[-1])
    z = norm.ppf(1.0 - alpha / 2.0)
    th = params.theta
    cis = {
        "theta": (np.where(unbounded[:, None], -np.inf, th - z * se_theta),
                  np.where(unbounded[:, None], np.inf, th + z * se_theta)),
        "phi": (params.phi - z * se_phi, params.phi + z * se_phi),
        "mu_star": (params.mu_star - z * se_mu, params.mu_star + z * se_mu),
    }
    ses = {"theta": se_theta, "phi": se_phi, "mu_star": se_mu}
    return ses, cis, unbounded


def assemble_fit(cp: ConcentratedPanel, spec: ModelSpec, params: EcmParams, labels: np.ndarray,
                 omega=None, diagnostics: dict | None = None, alpha: float = 0.05,
                 with_se: bool = True) -> FitResult:
    G = params.G
    labels = np.asarray(labels, dtype=np.int64)
    u = GroupMatrix.from_labels(labels, G)
    safe = EcmParams(np.nan_to_num(params.theta), params.phi)
    params.mu_star = mu_star_hat(cp, safe, u)
    e = composite_errors(cp, safe, u)
    s = float(np.sum(e * e) / cp.T)
    sig2 = cp.N * s
    om = omega_value(omega, cp.N)
    diagnostics = dict(diagnostics or {})
    empty = np.bincount(labels, minlength=G) == 0
    if np.any(empty):
        diagnostics["empty_groups"] = np.flatnonzero(empty).tolist()
    ses: dict = {}
    cis: dict = {}
    unbounded = np.abs(params.phi) < EPS_PHI
    if with_se and not np.any(empty):
        try:
            ses, cis, unbounded = standard_errors(cp, params, labels, sig2, alpha)
        except SingularGram as exc:
            diagnostics["se_error"] = str(exc)
    return FitResult(params, labels, cp.N, cp.T, s, sig2, om, sig2 + G * om, ses, cis,
                     unbounded, alpha, diagnostics)


def estimate_known_groups(d: PanelDataset | ConcentratedPanel, spec: ModelSpec, u0,
                          omega=None, alpha: float = 0.05, nuisance: str = "pooled") -> FitResult:
    """Estimates for a given membership (GroupMatrix or label vector).

    ``nuisance="pooled"`` concentrates one short-run coefficient vector
    shared by all groups; ``"group"`` concentrates one per group, which stays
    consistent when the short-run dynamics differ across groups.
    """
    if isinstance(u0, GroupMatrix):
        if not u0.is_binary:
            raise ValueError("known-group estimation needs a binary membership matrix")
        labels, G = u0.labels(), u0.G
    else:
        labels, G = np.asarray(u0, dtype=int), spec.G
    _check_nonempty(labels, G)
    if nuisance == "group":
        if isinstance(d, ConcentratedPanel):
            raise ValueError("group-specific short-run terms need the raw panel")
        cp = concentrate(d, spec, labels)
    elif nuisance == "pooled":
        cp = d if isinstance(d, ConcentratedPanel) else concentrate(d, spec)
    else:
        raise ValueError(f"nuisance must be 'pooled' or 'group', got {nuisance!r}")
    params = known_group_ols(cp, labels, G)
    diag = {"method": "known_groups", "nuisance": nuisance}
    return assemble_fit(cp, spec, params, labels, omega, diag, alpha)


def ic(fit: FitResult, omega=None) -> float:
    om = fit.omega_n if omega is None else omega_value(omega, fit.N)
    return fit.sigma2_hat + fit.G * om


@dataclass
class IcRow:
    G: int
    ssce_term: float
    penalty_term: float
    ic: float
    argmin: bool


@dataclass
class IcTable:
    rows: list

    @property
    def best_G(self) -> int:
        return next(r.G for r in self.rows if r.argmin)


def ic_table(fits: list, omega=None) -> IcTable:
    vals = [ic(f, omega) for f in fits]
    best = int(np.argmin(vals))  # first minimum, so ties go to the smallest G
    rows = [IcRow(f.G, f.sigma2_hat, f.G * (f.omega_n if omega is None else omega_value(omega, f.N)),
                  v, i == best) for i, (f, v) in enumerate(zip(fits, vals))]
    return IcTable(rows)


def select_groups(d: PanelDataset | ConcentratedPanel, spec: ModelSpec, g_max: int,
                  config=None, omega=None):
    """Fit G = 1..g_max and pick the IC minimiser. Returns (table, best fit, all fits)."""
    from .search import vns_dca_pipeline

    if g_max < 1:
        raise ValueError("g_max must be at least 1")
    group = config is not None and config.nuisance == "group"
    # pooled concentration does not depend on G, so it is shared across fits
    cp = d if group or isinstance(d, ConcentratedPanel) else concentrate(d, spec.with_groups(1))
    fits = [vns_dca_pipeline(cp, spec.with_groups(G), config, omega) for G in range(1, g_max + 1)]
    table = ic_table(fits)
    return table, fits[table.best_G - 1], fits
