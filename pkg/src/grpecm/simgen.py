"""Grouped panel simulator with spatially dependent errors.

Each group lives on its own rectangular lattice. Errors follow a linear
spatial autoregression on rook or queen contiguity, or a nonlinear sine
recursion solved by fixed-point iteration on an enlarged lattice.
Covariates follow a threshold autoregression or a random walk.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import ExplosivePath, SingularSystem, ValidationError
from .likelihood import GroupMatrix
from .model import EcmParams, PanelDataset


@dataclass(frozen=True)
class SpatialWeights:
    w: np.ndarray
    scheme: str = "custom"
    normalized: bool = False

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError("weights must be a square matrix")
        if np.any(w < 0) or np.any(np.diag(w) != 0):
            raise ValidationError("weights must be nonnegative with a zero diagonal")

    @property
    def n_sites(self) -> int:
        return self.w.shape[0]


def _row_normalize(w: np.ndarray) -> np.ndarray:
    rs = w.sum(axis=1, keepdims=True)
    return np.divide(w, rs, out=np.zeros_like(w), where=rs > 0)


def grid_contiguity(rows: int, cols: int, scheme: str = "rook", normalize: bool = True) -> SpatialWeights:
    """Rook (4-neighbour) or queen (8-neighbour) adjacency on a rows x cols lattice."""
    if scheme not in ("rook", "queen"):
        raise ValidationError(f"unknown contiguity scheme {scheme!r}")
    n = rows * cols
    w = np.zeros((n, n))
    steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if scheme == "queen":
        steps += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    for r in range(rows):
        for c in range(cols):
            for dr, dc in steps:
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    w[r * cols + c, rr * cols + cc] = 1.0
    return SpatialWeights(_row_normalize(w) if normalize else w, scheme, normalize)


def read_weights_csv(path: str | Path, n_sites: int, normalize: bool = True) -> SpatialWeights:
    """Edge list with columns site_a, site_b, weight (0-based site indices)."""
    w = np.zeros((n_sites, n_sites))
    with Path(path).open(newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or [h.strip() for h in header] != ["site_a", "site_b", "weight"]:
            raise ValidationError(f"{path}:1: header must be site_a,site_b,weight")
        for line, row in enumerate(rd, start=2):
            try:
                a, b, v = int(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"{path}:{line}: {exc}") from None
            if not (0 <= a < n_sites and 0 <= b < n_sites) or a == b:
                raise ValidationError(f"{path}:{line}: bad site pair ({a}, {b})")
            w[a, b] = v
    return SpatialWeights(_row_normalize(w) if normalize else w, "custom", normalize)


def grid_shape(n: int) -> tuple[int, int]:
    """Most nearly square rows x cols factorisation of n (rows <= cols)."""
    r = int(math.isqrt(n))
    while n % r:
        r -= 1
    return r, n // r


def simulate_sar_linear(wts: SpatialWeights, rho: float, sigma: np.ndarray, T: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw eps_t = (I - rho W)^{-1} e_t for T independent periods; returns (sites, T)."""
    n = wts.n_sites
    if not wts.normalized and rho != 0.0:
        radius = np.max(np.abs(np.linalg.eigvals(wts.w)))
        if abs(rho) * radius >= 1.0:
            raise SingularSystem(f"|rho| * spectral radius = {abs(rho) * radius:.3g} >= 1")
    e = rng.standard_normal((n, T)) * np.asarray(sigma, dtype=float).reshape(n, 1)
    if rho == 0.0:
        return e
    m = np.eye(n) - rho * wts.w
    try:
        lu = lu_factor(m, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularSystem(str(exc)) from None
    if np.any(np.abs(np.diag(lu[0])) < 1e-14 * max(1.0, np.abs(m).max())):
        raise SingularSystem("I - rho W is singular")
    return lu_solve(lu, e)


SINE_ITERATIONS = 30
SINE_MARGIN = 100
SINE_OFFSET = 74  # 0-based start of the kept block


def sine_sar_fixed_point(e: np.ndarray, iterations: int = SINE_ITERATIONS) -> np.ndarray:
    """Iterate eps <- sin(sum of rook neighbours of eps) + e from zero.

    ``e`` has shape (..., rows, cols); sites beyond the lattice count as zero.
    """
    eps = np.zeros_like(e)
    for _ in range(iterations):
        nb = np.zeros_like(e)
        nb[..., 1:, :] += eps[..., :-1, :]
        nb[..., :-1, :] += eps[..., 1:, :]
        nb[..., :, 1:] += eps[..., :, :-1]
        nb[..., :, :-1] += eps[..., :, 1:]
        eps = np.sin(nb) + e
    return eps


def simulate_sar_nonlinear(m: int, n: int, sigma: np.ndarray, T: int,
                           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Nonlinear spatial errors for an m x n target lattice; returns (sites, T).

    ``sigma`` gives innovation standard deviations for every site of the
    enlarged (100+m) x (100+n) lattice, flattened row-major. The second
    return value holds the innovations used.
    """
    if m < 1 or n < 1:
        raise ValidationError("lattice dimensions must be positive")
    R, Cc = SINE_MARGIN + m, SINE_MARGIN + n
    sig = np.asarray(sigma, dtype=float).reshape(R, Cc)
    e = rng.standard_normal((T, R, Cc)) * sig[None]
    eps = sine_sar_fixed_point(e)
    block = eps[:, SINE_OFFSET:SINE_OFFSET + m, SINE_OFFSET:SINE_OFFSET + n]
    return block.reshape(T, m * n).T.copy(), e


def simulate_covariates(kind: str, innovations: np.ndarray) -> np.ndarray:
    """Apply the covariate recursion along the last (time) axis from x = 0."""
    eta = np.asarray(innovations, dtype=float)
    x = np.empty_like(eta)
    prev = np.zeros(eta.shape[:-1])
    for t in range(eta.shape[-1]):
        if kind == "threshold":
            coef = np.where(np.abs(prev) < 1.0, 0.6, -0.6)
            prev = coef * prev + eta[..., t]
        elif kind == "unit_root":
            prev = prev + eta[..., t]
        else:
            raise ValidationError(f"unknown covariate kind {kind!r}")
        x[..., t] = prev
    return x


@dataclass(frozen=True)
class DgpConfig:
    """Four-group (or any G) ECM data-generating process.

    Per-group parameters are tuples of equal length. ``error_kind`` is one of
    ``sar_rook``, ``sar_queen``, ``nonlinear``; ``covariate_kind`` is
    ``threshold`` or ``unit_root``. ``factor_loading`` optionally adds a
    group-specific common shock times the loading to every unit's
    covariate innovations, which makes groups easier to tell apart.
    """

    group_sizes: tuple = (45, 30, 30, 70)
    phi: tuple = (-0.9, -0.5, -0.2, -0.7)
    theta: tuple = (-2.0, -1.0, 1.0, 8.0)
    lam: tuple = (-1.0, -0.05, 0.05, 1.0)
    gamma: tuple = (-1.0, -0.04, 0.04, 1.0)
    mu: tuple = (-0.05, 0.05, -1.0, 1.0)
    rho: tuple = (0.4, 0.05, 0.6, 0.1)
    covariate_kind: str = "threshold"
    error_kind: str = "sar_rook"
    T: int = 250
    burn_in: int = 200
    seed: int = 0
    sigma2_e: tuple = (0.5, 1.5)
    sigma2_xi: tuple = (0.5, 1.0)
    sigma_e_nonlinear: tuple = (0.5, 1.0)
    sigma_xi_nonlinear: tuple = (0.5, 1.5)
    noise_scale: float = 1.0
    factor_loading: float = 0.0
    explosive_limit: float = 1e12

    def __post_init__(self) -> None:
        G = len(self.group_sizes)
        for name in ("phi", "theta", "lam", "gamma", "mu", "rho"):
            if len(getattr(self, name)) != G:
                raise ValidationError(f"{name} needs {G} entries")
        if any(int(s) < 1 for s in self.group_sizes):
            raise ValidationError("group sizes must be positive")
        if self.error_kind not in ("sar_rook", "sar_queen", "nonlinear"):
            raise ValidationError(f"unknown error kind {self.error_kind!r}")
        if self.covariate_kind not in ("threshold", "unit_root"):
            raise ValidationError(f"unknown covariate kind {self.covariate_kind!r}")
        if self.error_kind != "nonlinear" and any(abs(r) >= 1 for r in self.rho):
            raise ValidationError("|rho| must be below one with row-normalised weights")
        if self.T < 1 or self.burn_in < 0:
            raise ValidationError("T must be positive and burn_in nonnegative")

    @property
    def G(self) -> int:
        return len(self.group_sizes)

    @property
    def N(self) -> int:
        return int(sum(self.group_sizes))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        names = set(cls.__dataclass_fields__)
        extra = set(d) - names
        if extra:
            raise ValidationError(f"unknown DGP keys: {sorted(extra)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SimulatedPanel:
    data: PanelDataset
    u0: GroupMatrix
    labels: np.ndarray
    truth: EcmParams
    config: DgpConfig
    errors: np.ndarray = field(repr=False, default=None)

    def truth_dict(self) -> dict:
        return {"labels": self.labels.tolist(), "theta": self.truth.theta.tolist(),
                "phi": self.truth.phi.tolist(), "mu": list(self.config.mu),
                "dgp": self.config.to_dict()}


def ecm_recursion(phi: float, theta: float, lam: float, gamma: float, mu: float,
                  x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """y paths for units in rows, started from zero history."""
    n, T = x.shape
    y = np.zeros((n, T))
    y1 = np.zeros(n)
    y2 = np.zeros(n)
    x1 = np.zeros(n)
    for t in range(T):
        dy = phi * (y1 - theta * x[:, t]) + lam * (y1 - y2) + gamma * (x[:, t] - x1) + mu + eps[:, t]
        y[:, t] = y1 + dy
        y2, y1, x1 = y1, y[:, t], x[:, t]
    return y


def generate_panel(cfg: DgpConfig, rng: np.random.Generator | None = None) -> SimulatedPanel:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    total = cfg.T + cfg.burn_in
    ys, xs, es, labels = [], [], [], []
    factor_rng = rng.spawn(1)[0]
    for g, size in enumerate(cfg.group_sizes):
        size = int(size)
        m, n = grid_shape(size)
        if cfg.error_kind == "nonlinear":
            R, Cc = SINE_MARGIN + m, SINE_MARGIN + n
            se = rng.uniform(*cfg.sigma_e_nonlinear, R * Cc)
            sx = rng.uniform(*cfg.sigma_xi_nonlinear, R * Cc)
            eps, _ = simulate_sar_nonlinear(m, n, se, total, rng)
            eta, _ = simulate_sar_nonlinear(m, n, sx, total, rng)
        else:
            wts = grid_contiguity(m, n, "rook" if cfg.error_kind == "sar_rook" else "queen")
            se = np.sqrt(rng.uniform(*cfg.sigma2_e, size))
            sx = np.sqrt(rng.uniform(*cfg.sigma2_xi, size))
            eps = simulate_sar_linear(wts, cfg.rho[g], se, total, rng)
            # the covariate innovations use the opposite spatial sign
            eta = simulate_sar_linear(wts, -cfg.rho[g], sx, total, rng)
        if cfg.factor_loading:
            eta = eta + cfg.factor_loading * factor_rng.standard_normal(total)[None, :]
        x = simulate_covariates(cfg.covariate_kind, eta)
        eps = cfg.noise_scale * eps
        with np.errstate(over="ignore", invalid="ignore"):
            y = ecm_recursion(cfg.phi[g], cfg.theta[g], cfg.lam[g], cfg.gamma[g], cfg.mu[g], x, eps)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > cfg.explosive_limit:
            raise ExplosivePath(f"group {g} path exceeds {cfg.explosive_limit:g}")
        ys.append(y[:, cfg.burn_in:])
        xs.append(x[:, cfg.burn_in:])
        es.append(eps[:, cfg.burn_in:])
        labels.append(np.full(size, g))
    lab = np.concatenate(labels)
    data = PanelDataset(np.vstack(ys), np.vstack(xs)[:, :, None])
    truth = EcmParams(np.asarray(cfg.theta, dtype=float)[:, None], np.asarray(cfg.phi, dtype=float))
    return SimulatedPanel(data, GroupMatrix.from_labels(lab, cfg.G), lab, truth, cfg, np.vstack(es))


# ---------------------------------------------------------------- presets

EXPERIMENT_SIZES = {1: (45, 30, 30, 70), 2: (100, 60, 65, 150),
                    3: (45, 30, 30, 70), 4: (100, 60, 65, 150)}
LAMBDA_BASE = (-1.0, -0.05, 0.05, 1.0)
LAMBDA_SHRUNK = (-0.5, -0.05, 0.05, 0.5)


def experiment_config(number: int, errors: str = "rook", covariate: str = "threshold",
                      T: int = 250, seed: int = 0, **overrides) -> DgpConfig:
    """Four-group design number 1-4 with rook, queen or nonlinear errors.

    Designs 1 and 2 contain a group whose autoregression is explosive, so
    their presets lift the explosion guard.
    """
    if number not in EXPERIMENT_SIZES:
        raise ValidationError(f"experiment number must be 1-4, got {number}")
    kind = {"rook": "sar_rook", "queen": "sar_queen", "nonlinear": "nonlinear"}[errors]
    cfg = DgpConfig(group_sizes=EXPERIMENT_SIZES[number],
                    lam=LAMBDA_BASE if number in (1, 2) else LAMBDA_SHRUNK,
                    covariate_kind=covariate, error_kind=kind, T=T, seed=seed,
                    explosive_limit=math.inf if number in (1, 2) else 1e12)
    return replace(cfg, **overrides)


def preset(name: str, T: int = 250, seed: int = 0) -> DgpConfig:
    """Named designs such as ``experiment3-queen`` or ``experiment2``.

    ``experiment5`` is design 1 with nonlinear errors (``experiment5-2`` uses
    design 2); ``experiment6-<k>[-errors]`` is design k with random-walk
    covariates. A ``-unitroot`` suffix does the same for designs 1-4.
    """
    parts = name.lower().split("-")
    if not parts[0].startswith("experiment"):
        raise ValidationError(f"unknown preset {name!r}")
    try:
        number = int(parts[0][len("experiment"):])
    except ValueError:
        raise ValidationError(f"unknown preset {name!r}") from None
    rest = parts[1:]
    covariate = "unit_root" if "unitroot" in rest else "threshold"
    rest = [p for p in rest if p != "unitroot"]
    forced_errors = None
    if number in (5, 6):
        base = 1 if number == 5 else 3
        if rest and rest[0].isdigit():
            base = int(rest.pop(0))
        if number == 5:
            if base not in (1, 2):
                raise ValidationError(f"unknown preset {name!r}")
            forced_errors = "nonlinear"
        else:
            covariate = "unit_root"
        number = base
    errors = rest[0] if rest else (forced_errors or "rook")
    if errors not in ("rook", "queen", "nonlinear") or len(rest) > 1 \
            or (forced_errors and errors != forced_errors):
        raise ValidationError(f"unknown preset {name!r}")
    return experiment_config(number, errors, covariate, T, seed)
