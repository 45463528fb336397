"""Run configuration: TOML or JSON files validated before any computation."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import ValidationError
from .model import ModelSpec
from .search import SaSchedule, SearchConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelBlock(_Strict):
    p: int = Field(2, ge=1)
    q: int = Field(1, ge=0)
    G: int = Field(4, ge=1)
    box_phi: Union[float, list[float]] = 2.0
    box_theta: Union[float, list[float], list[list[float]]] = 10.0

    def to_spec(self, d_x: int) -> ModelSpec:
        bt = self.box_theta
        if isinstance(bt, (int, float)):
            bt = [[float(bt)] * d_x] * self.G
        elif bt and not isinstance(bt[0], list):
            bt = [list(bt)] * self.G
        bp = self.box_phi if isinstance(self.box_phi, list) else [self.box_phi] * self.G
        spec = ModelSpec(self.p, self.q, self.G, bp, bt)
        if spec.d_x != d_x:
            raise ValidationError(f"box_theta has {spec.d_x} covariate columns, data has {d_x}")
        return spec


class SaBlock(_Strict):
    te0: Optional[float] = Field(None, gt=0)
    tl: Optional[int] = Field(None, ge=1)
    alpha: float = Field(0.9, gt=0, lt=1)
    max_epochs: int = Field(1000, ge=1)
    patience: int = Field(5, ge=1)
    tl_per_unit: int = Field(50, ge=1)
    target_acceptance: float = Field(0.8, gt=0, lt=1)
    n_probe: int = Field(100, ge=1)


class SearchBlock(_Strict):
    n_starts: int = Field(5, ge=1)
    k_max: int = Field(10, ge=1)
    l_max: Optional[int] = Field(None, ge=1)
    coupled: bool = True
    max_shakes: Optional[int] = Field(None, ge=1)
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(5000, ge=1)
    tau: float = Field(0.5, gt=0, lt=1)
    gamma0: float = Field(1.0, gt=0)
    nuisance: Literal["pooled", "group"] = "pooled"
    sa: SaBlock = SaBlock()

    def to_config(self, seed: int) -> SearchConfig:
        d = self.model_dump()
        sa = SaSchedule(**d.pop("sa"))
        return SearchConfig(sa=sa, seed=seed, **d)


Omega = Union[Literal["log"], float, tuple[Literal["clog"], float]]


class EstimateBlock(_Strict):
    panel: str
    known_labels: Optional[str] = None
    nuisance: Literal["pooled", "group"] = "pooled"
    alpha: float = Field(0.05, gt=0, lt=1)
    omega: Omega = "log"


class SelectBlock(_Strict):
    panel: str
    g_max: int = Field(4, ge=1)
    omega: Omega = "log"


class SimulateBlock(_Strict):
    preset: Optional[str] = None
    T: int = Field(250, ge=1)
    dgp: Optional[dict] = None

    @field_validator("dgp")
    @classmethod
    def _no_seed(cls, v):
        if v is not None and "seed" in v:
            raise ValueError("the seed comes from --seed, not from the dgp block")
        return v


class BenchmarkBlock(SimulateBlock):
    n_reps: int = Field(30, ge=1)
    mode: Literal["known", "unknown"] = "known"
    nuisance: Literal["pooled", "group"] = "pooled"


class RunConfig(_Strict):
    model: ModelBlock = ModelBlock()
    search: SearchBlock = SearchBlock()
    estimate: Optional[EstimateBlock] = None
    select: Optional[SelectBlock] = None
    simulate: Optional[SimulateBlock] = None
    benchmark: Optional[BenchmarkBlock] = None


def load_config(path: str | Path | None) -> tuple[RunConfig, dict]:
    """Parse and validate a config file; returns the model and the raw mapping."""
    if path is None:
        return RunConfig(), {}
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: {exc}") from None
    import pydantic

    try:
        return RunConfig.model_validate(raw), raw
    except pydantic.ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def resolve(base: Path | None, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() or base is None else base / q
