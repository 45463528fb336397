"""Concentrated composite errors, SSCE and the composite quasi-likelihood."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonpositiveVariance, SingularGram, ValidationError
from .model import EcmParams, ModelSpec, PanelDataset, build_regressors

COND_MAX = 1e12


class GroupMatrix:
    """G x N membership weights; every column lies on the probability simplex."""

    def __init__(self, u: np.ndarray, check: bool = True, tol: float = 1e-10):
        u = np.array(u, dtype=float, ndmin=2)
        if check:
            if np.any(u < -tol) or np.any(np.abs(u.sum(axis=0) - 1.0) > tol):
                raise ValidationError("membership columns must lie on the simplex")
        self.u = u

    @classmethod
    def from_labels(cls, labels, G: int | None = None) -> "GroupMatrix":
        labels = np.asarray(labels, dtype=int)
        G = int(labels.max()) + 1 if G is None else G
        u = np.zeros((G, labels.size))
        u[labels, np.arange(labels.size)] = 1.0
        return cls(u, check=False)

    @property
    def G(self) -> int:
        return self.u.shape[0]

    @property
    def N(self) -> int:
        return self.u.shape[1]

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.u == 0.0) | (self.u == 1.0)))

    def labels(self) -> np.ndarray:
        # argmax returns the first maximum, so ties go to the lowest group index
        return np.argmax(self.u, axis=0)

    def rounded(self) -> "GroupMatrix":
        return GroupMatrix.from_labels(self.labels(), self.G)

    def permuted(self, perm) -> "GroupMatrix":
        return GroupMatrix(self.u[list(perm)], check=False)


@dataclass(frozen=True)
class ConcentratedPanel:
    """Series after projecting out the averaged short-run regressors.

    ``dy_star_w``, ``y_lag_w``, ``x_w``, ``one_w`` are residuals on the
    cross-sectional mean of w; ``A``, ``B``, ``C`` additionally remove the
    projected constant ``one_w``.
    """

    dy_star_w: np.ndarray  # (L,)
    y_lag_w: np.ndarray  # (N, L)
    x_w: np.ndarray  # (N, L, d_x)
    one_w: np.ndarray  # (L,)
    A: np.ndarray  # (L,)
    B: np.ndarray  # (N, L)
    C: np.ndarray  # (N, L, d_x)
    w_bar: np.ndarray  # (L, d_w)

    @property
    def N(self) -> int:
        return self.B.shape[0]

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def d_x(self) -> int:
        return self.C.shape[2]


def _orthonormal_basis(w_bar: np.ndarray) -> np.ndarray:
    if w_bar.shape[1] == 0:
        return np.zeros((w_bar.shape[0], 0))
    sv = np.linalg.svd(w_bar, compute_uv=False)
    # cond(W'W) = cond(W)^2
    if sv[-1] == 0.0 or (sv[0] / sv[-1]) ** 2 > COND_MAX:
        raise SingularGram("Gram matrix of averaged short-run regressors is singular")
    q, _ = np.linalg.qr(w_bar)
    return q


def _residual(q: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Residual of z (time on axis 0) after projection on the columns of q."""
    if q.shape[1] == 0:
        return z.copy()
    flat = z.reshape(z.shape[0], -1)
    return (flat - q @ (q.T @ flat)).reshape(z.shape)


def concentrate(d: PanelDataset, spec: ModelSpec, labels=None) -> ConcentratedPanel:
    """Project out the averaged short-run regressors.

    With ``labels`` the short-run block gets one coefficient vector per
    group: the projection uses the group sums of w divided by N instead of
    the pooled cross-sectional mean.
    """
    reg = build_regressors(d, spec)
    L = reg.length
    if labels is None:
        w_bar = reg.w.mean(axis=0)
    else:
        labels = np.asarray(labels, dtype=int)
        u = np.zeros((int(labels.max()) + 1, labels.size))
        u[labels, np.arange(labels.size)] = 1.0
        w_bar = np.einsum("gn,nlk->lgk", u, reg.w).reshape(L, -1) / d.n_units
    if L <= w_bar.shape[1] + 2:
        raise ValidationError(f"effective window {L} too short for {w_bar.shape[1]} short-run regressors")
    q = _orthonormal_basis(w_bar)
    dy_w = _residual(q, reg.dy.mean(axis=0))
    y_w = _residual(q, reg.y_lag.T).T
    x_w = _residual(q, reg.x.transpose(1, 0, 2)).transpose(1, 0, 2)
    one_w = _residual(q, np.ones(L))
    nn = np.sum(one_w * one_w)
    if nn <= 1e-12 * L:
        raise SingularGram("constant lies in the span of the averaged short-run regressors")

    def drop_one(z):
        coef = np.tensordot(one_w, z, axes=(0, -2 if z.ndim == 3 else -1)) / nn
        if z.ndim == 1:
            return z - coef * one_w
        if z.ndim == 2:
            return z - coef[:, None] * one_w[None, :]
        return z - coef[:, None, :] * one_w[None, :, None]

    return ConcentratedPanel(dy_w, y_w, x_w, one_w, drop_one(dy_w), drop_one(y_w),
                             drop_one(x_w), w_bar)


def composite_errors(cp: ConcentratedPanel, params: EcmParams, u: GroupMatrix) -> np.ndarray:
    """Whole series of concentrated composite errors over the window."""
    uu = u.u
    agg_b = uu @ cp.B  # (G, L)
    agg_c = np.einsum("gn,nlk->glk", uu, cp.C)
    fit = np.einsum("g,gl->l", params.phi, agg_b - np.einsum("glk,gk->gl", agg_c, params.theta))
    return cp.A - fit / cp.N


def composite_error(cp: ConcentratedPanel, params: EcmParams, u: GroupMatrix, t: int) -> float:
    if not 0 <= t < cp.T:
        raise IndexError(f"period {t} outside the effective window of length {cp.T}")
    r = cp.B[:, t][None, :] - params.theta @ cp.C[:, t, :].T  # (G, N)
    return float(cp.A[t] - np.sum(u.u * params.phi[:, None] * r) / cp.N)


def ssce(cp: ConcentratedPanel, params: EcmParams, u: GroupMatrix) -> float:
    e = composite_errors(cp, params, u)
    return float(np.sum(e * e) / cp.T)


def sigma2_hat(cp: ConcentratedPanel, params: EcmParams, u: GroupMatrix) -> float:
    e = composite_errors(cp, params, u)
    return float(cp.N * np.sum(e * e) / cp.T)


def cql_value(cp: ConcentratedPanel, params: EcmParams, u: GroupMatrix, sigma2: float) -> float:
    if not sigma2 > 0:
        raise NonpositiveVariance(f"sigma2={sigma2}")
    e = composite_errors(cp, params, u)
    T = cp.T
    return float(-0.5 * T * np.log(2 * np.pi) - 0.5 * T * np.log(sigma2)
                 - cp.N * np.sum(e * e) / (2 * sigma2))


def mu_star_hat(cp: ConcentratedPanel, params: EcmParams, u: GroupMatrix) -> float:
    """Pooled intercept recovered from its first-order condition."""
    one = cp.one_w
    yo = cp.y_lag_w @ one  # (N,)
    xo = np.einsum("nlk,l->nk", cp.x_w, one)  # (N, d_x)
    inner = yo[None, :] - params.theta @ xo.T  # (G, N)
    s = np.sum(u.u * params.phi[:, None] * inner) / cp.N
    return float((np.sum(cp.dy_star_w * one) - s) / np.sum(one * one))
