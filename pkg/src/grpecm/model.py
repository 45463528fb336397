"""Panel containers, model specification and ARDL/ECM parameter mapping."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateSpeed,
    InsufficientTimeSpan,
    StabilityViolation,
    ValidationError,
)

EPS_PHI = 1e-8
EPS_ROOT = 1e-10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel: ``y`` is (N, T), ``x`` is (N, T, d_x)."""

    y: np.ndarray
    x: np.ndarray
    unit_ids: tuple = ()
    time_ids: tuple = ()

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 2:
            x = x[:, :, None]
        if y.ndim != 2 or x.ndim != 3 or x.shape[:2] != y.shape:
            raise ValidationError(f"shape mismatch: y {y.shape}, x {x.shape}")
        if x.shape[2] < 1:
            raise ValidationError("need at least one covariate")
        if y.shape[0] < 2:
            raise ValidationError("need at least two units")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValidationError("missing or non-finite values in panel")
        n, t = y.shape
        units = tuple(self.unit_ids) or tuple(range(n))
        times = tuple(self.time_ids) or tuple(range(t))
        if len(units) != n or len(times) != t:
            raise ValidationError("id labels do not match array dimensions")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "unit_ids", units)
        object.__setattr__(self, "time_ids", times)

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def d_x(self) -> int:
        return self.x.shape[2]


@dataclass(frozen=True)
class ModelSpec:
    """Lag orders, group count and the symmetric parameter boxes.

    ``box_phi`` holds one half-width per group and ``box_theta`` one per
    group and covariate.
    """

    p: int
    q: int
    G: int
    box_phi: np.ndarray
    box_theta: np.ndarray

    def __post_init__(self) -> None:
        if self.p < 1 or self.q < 0 or self.G < 1:
            raise ValidationError(f"invalid orders p={self.p}, q={self.q}, G={self.G}")
        bp = np.broadcast_to(np.asarray(self.box_phi, dtype=float), (self.G,))
        bt = np.asarray(self.box_theta, dtype=float)
        if bt.ndim < 2:
            bt = np.broadcast_to(bt.reshape(-1)[None, :] if bt.ndim == 1 else bt, (self.G, max(bt.size, 1)))
        if bt.shape[0] != self.G:
            raise ValidationError("box_theta needs one row per group")
        for b in (bp, bt):
            if not np.all(np.isfinite(b)) or np.any(b <= 0):
                raise ValidationError("box half-widths must be positive and finite")
        object.__setattr__(self, "box_phi", _frozen(bp))
        object.__setattr__(self, "box_theta", _frozen(bt))

    @classmethod
    def uniform(cls, p: int, q: int, G: int, d_x: int, phi_bound: float = 2.0,
                theta_bound: float = 10.0) -> "ModelSpec":
        return cls(p, q, G, np.full(G, phi_bound), np.full((G, d_x), theta_bound))

    @property
    def d_x(self) -> int:
        return self.box_theta.shape[1]

    @property
    def d_w(self) -> int:
        return self.p - 1 + self.d_x * self.q

    def with_groups(self, G: int) -> "ModelSpec":
        """Same orders and boxes (first group's widths) for a different G."""
        return ModelSpec(self.p, self.q, G, np.full(G, self.box_phi[0]),
                         np.repeat(self.box_theta[:1], G, axis=0))

    def to_dict(self) -> dict:
        return {"p": self.p, "q": self.q, "G": self.G,
                "box_phi": self.box_phi.tolist(), "box_theta": self.box_theta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(int(d["p"]), int(d["q"]), int(d["G"]),
                   np.asarray(d["box_phi"], dtype=float), np.asarray(d["box_theta"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "ModelSpec":
        return cls.from_dict(json.loads(s))


@dataclass
class EcmParams:
    theta: np.ndarray  # (G, d_x)
    phi: np.ndarray  # (G,)
    mu_star: float = 0.0
    lam: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.phi = np.asarray(self.phi, dtype=float).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=float).reshape(self.phi.size, -1)

    @property
    def G(self) -> int:
        return self.phi.size

    def in_box(self, spec: ModelSpec, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.phi) <= spec.box_phi + tol)
                    and np.all(np.abs(self.theta) <= spec.box_theta + tol))

    def permuted(self, perm: Sequence[int]) -> "EcmParams":
        perm = list(perm)
        return EcmParams(self.theta[perm].copy(), self.phi[perm].copy(), self.mu_star, self.lam)


@dataclass
class ArdlParams:
    """Group ARDL coefficients: ``lambda_ar`` (G, p), ``delta`` (G, q+1, d_x)."""

    lambda_ar: np.ndarray
    delta: np.ndarray
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.lambda_ar = np.atleast_2d(np.asarray(self.lambda_ar, dtype=float))
        d = np.asarray(self.delta, dtype=float)
        if d.ndim == 2:
            d = d[:, :, None]
        self.delta = d


@dataclass
class EcmForm:
    """Error-correction coefficients with the short-run blocks."""

    phi: np.ndarray  # (G,)
    theta: np.ndarray  # (G, d_x)
    lambda_star: np.ndarray  # (G, p-1)
    delta_star: np.ndarray  # (G, q, d_x)


@dataclass
class StabilityReport:
    stable: np.ndarray  # per-group booleans
    root_moduli: list


def _roots(lam: np.ndarray) -> np.ndarray:
    # roots of 1 - sum_j lam_j z^j are the reciprocals of the companion eigenvalues
    p = lam.size
    comp = np.zeros((p, p))
    comp[0, :] = lam
    if p > 1:
        comp[1:, :-1] = np.eye(p - 1)
    eig = np.linalg.eigvals(comp)
    with np.errstate(divide="ignore"):
        return np.where(np.abs(eig) > 0, 1.0 / np.abs(eig), np.inf)


def check_stability(a: ArdlParams, eps_root: float = EPS_ROOT) -> StabilityReport:
    moduli = [np.sort(_roots(row)) for row in a.lambda_ar]
    stable = np.array([bool(np.all(m > 1.0 + eps_root)) for m in moduli])
    return StabilityReport(stable, moduli)


def ardl_to_ecm(a: ArdlParams, eps_phi: float = EPS_PHI, check: bool = True) -> EcmForm:
    lam, delta = a.lambda_ar, a.delta
    if check:
        rep = check_stability(a)
        if not rep.stable.all():
            bad = np.flatnonzero(~rep.stable).tolist()
            raise StabilityViolation(f"groups {bad} have a root on or inside the unit circle")
    phi = -(1.0 - lam.sum(axis=1))
    if np.any(np.abs(phi) < eps_phi):
        raise DegenerateSpeed(f"|phi| below {eps_phi}")
    theta = -delta.sum(axis=1) / phi[:, None]
    p = lam.shape[1]
    q = delta.shape[1] - 1
    # lambda*_j = -sum_{m>j} lambda_m, delta*_j = -sum_{m>j} delta_m
    lam_star = np.stack([-lam[:, j + 1:].sum(axis=1) for j in range(p - 1)], axis=1) if p > 1 \
        else np.zeros((lam.shape[0], 0))
    delta_star = np.stack([-delta[:, j + 1:].sum(axis=1) for j in range(q)], axis=1) if q > 0 \
        else np.zeros((lam.shape[0], 0, delta.shape[2]))
    return EcmForm(phi, theta, lam_star, delta_star)


def ecm_to_ardl(e: EcmForm) -> ArdlParams:
    """Inverse of :func:`ardl_to_ecm` (without the stability check)."""
    G = e.phi.size
    lam_s = np.asarray(e.lambda_star, dtype=float).reshape(G, -1)
    del_s = np.asarray(e.delta_star, dtype=float).reshape(G, -1, e.theta.shape[1])
    p = lam_s.shape[1] + 1
    q = del_s.shape[1]
    lam = np.zeros((G, p))
    # lambda_m = lambda*_m - lambda*_{m-1} for m >= 2, then lambda_1 from the sum
    for m in range(2, p + 1):
        nxt = lam_s[:, m - 1] if m - 1 < p - 1 else 0.0
        lam[:, m - 1] = nxt - lam_s[:, m - 2]
    lam[:, 0] = 1.0 + e.phi - lam[:, 1:].sum(axis=1)
    delta = np.zeros((G, q + 1, e.theta.shape[1]))
    for m in range(1, q + 1):
        nxt = del_s[:, m] if m < q else 0.0
        delta[:, m] = nxt - del_s[:, m - 1]
    delta[:, 0] = -e.phi[:, None] * e.theta - delta[:, 1:].sum(axis=1)
    return ArdlParams(lam, delta)


@dataclass(frozen=True)
class Regressors:
    """Lag-aligned arrays over the effective window.

    ``dy``, ``y_lag`` are (N, L); ``x`` is (N, L, d_x); ``w`` is (N, L, d_w)
    holding the lagged differences of y followed by current and lagged
    differences of x. ``start`` is the 0-based index of the first kept period.
    """

    dy: np.ndarray
    y_lag: np.ndarray
    x: np.ndarray
    w: np.ndarray
    start: int

    @property
    def length(self) -> int:
        return self.dy.shape[1]

    @property
    def d_w(self) -> int:
        return self.w.shape[2]


def build_regressors(d: PanelDataset, spec: ModelSpec) -> Regressors:
    p, q = spec.p, spec.q
    T = d.n_periods
    if T < p + q + 3:
        raise InsufficientTimeSpan(f"T={T} < p+q+3={p + q + 3}")
    if spec.d_x != d.d_x:
        raise ValidationError(f"spec has d_x={spec.d_x}, data has {d.d_x}")
    s0 = max(p, q) + 1
    y, x = d.y, d.x
    dy_full = np.diff(y, axis=1, prepend=np.nan)  # dy_full[:, s] = y_s - y_{s-1}
    dx_full = np.diff(x, axis=1, prepend=np.nan)
    win = slice(s0, T)
    blocks = [dy_full[:, s0 - j:T - j, None] for j in range(1, p)]
    blocks += [dx_full[:, s0 - j:T - j, :] for j in range(q)]
    n = d.n_units
    w = np.concatenate(blocks, axis=2) if blocks else np.zeros((n, T - s0, 0))
    return Regressors(dy_full[:, win].copy(), y[:, s0 - 1:T - 1].copy(), x[:, win].copy(), w, s0)


def read_panel_csv(path: str | Path) -> PanelDataset:
    """Read a long-format panel with columns ``unit, time, y, x1..xd``."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [(i, r) for i, r in enumerate(csv.reader(fh), start=1)
                if r and not r[0].startswith("#")]
    if not rows:
        raise ValidationError(f"{path}: empty file")
    hline, header = rows[0]
    header = [h.strip() for h in header]
    xcols = [h for h in header[3:]]
    if header[:3] != ["unit", "time", "y"] or not xcols \
            or any(h != f"x{k + 1}" for k, h in enumerate(xcols)):
        raise ValidationError(f"{path}:{hline}: header must be unit,time,y,x1..xd")
    units: dict[str, int] = {}
    times: dict[str, int] = {}
    cells: dict[tuple[int, int], list[float]] = {}
    for line, r in rows[1:]:
        if len(r) != len(header):
            raise ValidationError(f"{path}:{line}: expected {len(header)} fields, got {len(r)}")
        try:
            vals = [float(v) for v in r[2:]]
        except ValueError as exc:
            raise ValidationError(f"{path}:{line}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"{path}:{line}: non-finite value")
        u = units.setdefault(r[0].strip(), len(units))
        t = times.setdefault(r[1].strip(), len(times))
        if (u, t) in cells:
            raise ValidationError(f"{path}:{line}: duplicate (unit, time)")
        cells[(u, t)] = vals
    n, T, dx = len(units), len(times), len(xcols)
    if len(cells) != n * T:
        raise ValidationError(f"{path}: panel is not rectangular ({len(cells)} of {n * T} cells)")
    y = np.empty((n, T))
    x = np.empty((n, T, dx))
    for (u, t), vals in cells.items():
        y[u, t] = vals[0]
        x[u, t] = vals[1:]
    return PanelDataset(y, x, tuple(units), tuple(times))


def write_panel_csv(d: PanelDataset, path: str | Path, header_lines: Sequence[str] = ()) -> None:
    with Path(path).open("w", newline="") as fh:
        for h in header_lines:
            fh.write(f"# {h}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["unit", "time", "y"] + [f"x{k + 1}" for k in range(d.d_x)])
        for i, u in enumerate(d.unit_ids):
            for t, s in enumerate(d.time_ids):
                wr.writerow([u, s, repr(float(d.y[i, t]))] + [repr(float(v)) for v in d.x[i, t]])


def write_labels_csv(labels, path: str | Path, unit_ids: Sequence | None = None,
                     header_lines: Sequence[str] = ()) -> None:
    labels = np.asarray(labels, dtype=int)
    ids = range(labels.size) if unit_ids is None else unit_ids
    with Path(path).open("w", newline="") as fh:
        for h in header_lines:
            fh.write(f"# {h}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["unit", "label"])
        for u, g in zip(ids, labels):
            wr.writerow([u, int(g)])


def read_labels_csv(path: str | Path) -> tuple[list, np.ndarray]:
    """Read a ``unit,label`` file; labels must be nonnegative integers."""
    units, labels = [], []
    try:
        fh = Path(path).open(newline="")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    with fh:
        header = None
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if header is None:
                header = [c.strip() for c in row]
                if header != ["unit", "label"]:
                    raise ValidationError(f"{path}:{lineno}: expected header 'unit,label'")
                continue
            if len(row) != 2:
                raise ValidationError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                g = int(row[1])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: label {row[1]!r} is not an integer") from None
            if g < 0:
                raise ValidationError(f"{path}:{lineno}: negative label")
            units.append(row[0].strip())
            labels.append(g)
    if not labels:
        raise ValidationError(f"{path}: no labels")
    return units, np.asarray(labels, dtype=int)
