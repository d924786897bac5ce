"""YAML run configuration with a strict schema.

Unknown keys and bad values are reported with the line they sit on.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import harness, privacy, scenario
from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CenterConfig(_Strict):
    id: str = Field(min_length=1)
    n_samples: int = Field(gt=0)
    gain: float = 1.0
    offset: float = 0.5
    noise: float = Field(0.1, ge=0)
    bias: float = Field(0.0, ge=0, lt=1)
    radius_mean: float = Field(8.0, gt=0)
    radius_std: float = Field(1.5, ge=0)
    blur: float = Field(1.0, ge=0)
    test_only: bool = False
    bias_correct: bool = False

    def profile(self) -> scenario.CenterProfile:
        d = self.model_dump()
        return scenario.CenterProfile(d.pop("id"), **d)


def _default_centers() -> list:
    out = []
    for p in scenario.DEFAULT_PROFILES:
        d = dict(p.__dict__)
        d["id"] = d.pop("center_id")
        out.append(CenterConfig(**d))
    return out


class ScenarioConfig(_Strict):
    seed: int = 0
    shape: tuple[int, int, int] = scenario.DEFAULT_SHAPE
    centers: list[CenterConfig] = Field(default_factory=_default_centers)

    @field_validator("centers")
    @classmethod
    def _centers(cls, v):
        if not v:
            raise ValueError("at least one center is required")
        ids = [c.id for c in v]
        if len(set(ids)) != len(ids):
            raise ValueError("center ids must be unique")
        if not any(not c.test_only for c in v):
            raise ValueError("at least one training center is required")
        return v

    @field_validator("shape")
    @classmethod
    def _shape(cls, v):
        if v[0] < 1 or any(n < 8 for n in (v[1:] if v[0] == 1 else v)):
            raise ValueError("each spatial dimension needs at least 8 voxels")
        return v


class TrainConfig(_Strict):
    K: int = Field(harness.TrainSpec.K, gt=0)
    batch_size: int = Field(harness.TrainSpec.batch_size, gt=0)
    lr: float = Field(harness.TrainSpec.lr, gt=0)
    weight_decay: float = Field(harness.TrainSpec.weight_decay, ge=0)
    optimizer: Literal["adamw", "sgd"] = harness.TrainSpec.optimizer
    dropout: float = Field(harness.TrainSpec.dropout, ge=0, lt=1)
    local_steps: int = Field(harness.TrainSpec.local_steps, gt=0)
    mu: float = Field(harness.TrainSpec.mu, ge=0)
    radius: int = Field(harness.TrainSpec.radius, ge=0)
    hidden: int = Field(harness.TrainSpec.hidden, gt=0)
    threshold: float = Field(harness.TrainSpec.threshold, gt=0, lt=1)
    ube_passes: int = Field(harness.TrainSpec.ube_passes, ge=2)
    ube_eps: float = Field(harness.TrainSpec.ube_eps, ge=0)
    ube_direction: Literal["inverse", "direct"] = harness.TrainSpec.ube_direction
    staple_tol: float = Field(harness.TrainSpec.staple_tol, gt=0)
    staple_max_iter: int = Field(harness.TrainSpec.staple_max_iter, gt=0)
    nsd_tau: float = Field(harness.TrainSpec.nsd_tau, gt=0)


class GridConfig(_Strict):
    lr: Optional[list[float]] = None
    batch_size: Optional[list[int]] = None
    dropout: Optional[list[float]] = None
    local_steps: Optional[list[int]] = None
    K: Optional[list[int]] = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.model_dump().items() if v is not None}


class PlanConfig(_Strict):
    strategies: list[str] = list(harness.STRATEGIES)
    folds: int = Field(5, ge=2)
    seeds: list[int] = [0]
    leave_out: str = "N03"
    train: TrainConfig = TrainConfig()
    grid: Optional[GridConfig] = None

    @field_validator("strategies")
    @classmethod
    def _strategies(cls, v):
        bad = [s for s in v if s not in harness.STRATEGIES]
        if bad:
            raise ValueError(f"unknown strategy {bad[0]!r}; known: {', '.join(harness.STRATEGIES)}")
        if not v:
            raise ValueError("at least one strategy is required")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v


class DpSection(_Strict):
    sigma: float = Field(privacy.DpConfig.sigma, gt=0)
    clip: float = Field(privacy.DpConfig.clip, gt=0)
    delta: float = Field(privacy.DpConfig.delta, gt=0, lt=1)
    lr: float = Field(privacy.DpConfig.lr, gt=0)
    optimizer: Literal["sgd", "adamw"] = privacy.DpConfig.optimizer
    eps_grid: list[float] = list(privacy.DEFAULT_EPS_GRID)
    seeds: list[int] = [0]

    @field_validator("eps_grid")
    @classmethod
    def _grid(cls, v):
        if not v or any(b <= a for a, b in zip(v, v[1:])) or v[0] <= 0:
            raise ValueError("epsilon grid must be positive and strictly increasing")
        return v


class OutputConfig(_Strict):
    data_dir: str = "data"
    results_dir: str = "results"


class Config(_Strict):
    scenario: ScenarioConfig = ScenarioConfig()
    plan: PlanConfig = PlanConfig()
    dp: DpSection = DpSection()
    output: OutputConfig = OutputConfig()
    base_dir: str = Field(".", exclude=True)

    @model_validator(mode="after")
    def _cross(self):
        ids = {c.id: c for c in self.scenario.centers}
        if self.plan.leave_out not in ids:
            raise ValueError(f"plan.leave_out names unknown center {self.plan.leave_out!r}")
        return self

    # --- conversion -----------------------------------------------------

    def profiles(self) -> list[scenario.CenterProfile]:
        return [c.profile() for c in self.scenario.centers]

    def train_spec(self) -> harness.TrainSpec:
        return harness.TrainSpec(**self.plan.train.model_dump(), target_shape=tuple(self.scenario.shape))

    def dp_config(self) -> privacy.DpConfig:
        d = self.dp.model_dump()
        return privacy.DpConfig(d["clip"], d["sigma"], d["delta"], d["lr"], d["optimizer"])

    def plan_for(self, datasets, workers: int = 1) -> harness.ExperimentPlan:
        return harness.ExperimentPlan(datasets, {p.center_id: p for p in self.profiles()},
                                      tuple(self.plan.strategies), self.plan.folds, tuple(self.plan.seeds),
                                      self.train_spec(), workers=workers)

    def path(self, which: str) -> Path:
        p = Path(getattr(self.output, which))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; equal digests mean equal runs."""
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, nsd_tau: float | None = None) -> "Config":
        plan, dp = self.plan, self.dp
        if seed is not None:
            plan = plan.model_copy(update={"seeds": [seed]})
            dp = dp.model_copy(update={"seeds": [seed]})
        if nsd_tau is not None:
            if not nsd_tau > 0:
                raise ConfigError("--nsd-tau must be > 0")
            plan = plan.model_copy(update={"train": plan.train.model_copy(update={"nsd_tau": nsd_tau})})
        return self.model_copy(update={"plan": plan, "dp": dp})


def _node_line(root, loc) -> int | None:
    """1-based line of the YAML node at ``loc``, or of its closest existing parent."""
    node = root
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        child = None
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if k.value == key:
                    # point at the key itself so "extra field" errors land on the right line
                    child, line = v, k.start_mark.line + 1
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            child = node.value[key]
            line = child.start_mark.line + 1
        if child is None:
            break
        node = child
    return line


def parse_config(text: str, base_dir: str = ".") -> Config:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1)
    if "base_dir" in data:
        raise ConfigError("unknown key 'base_dir'", _node_line(root, ["base_dir"]))
    try:
        return Config(**data, base_dir=base_dir)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = [p for p in err["loc"]]
        where = ".".join(str(p) for p in loc) or "<root>"
        raise ConfigError(f"{where}: {err['msg']}", _node_line(root, loc)) from None


def load_config(path) -> Config:
    path = Path(path)
    return parse_config(path.read_text(), str(path.parent))


def default_config_yaml() -> str:
    """The default configuration written out in full."""
    data = Config().model_dump(mode="json")
    return yaml.safe_dump(data, sort_keys=False)
