"""Run configuration: a strict JSON grammar with documented defaults."""
from __future__ import annotations

import difflib
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .estimators import DEFAULT_RESAMPLES, ENUMERATION_CAP
from .experiment import ESTIMATORS, ExperimentConfig
from .model import TransitionModel
from .policies import IndexPolicySpec
from .sim import P1_DEFAULT, P2_DEFAULT, P3_DEFAULT, CohortConfig, TrialConfig

Prob = Field(ge=0.0, le=1.0)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TransitionSection(_Strict):
    p_pass_01: float = Prob
    p_pass_11: float = Prob
    p_act_01: float = Prob
    p_act_11: float = Prob

    @classmethod
    def of(cls, model: TransitionModel) -> "TransitionSection":
        return cls(**model.to_dict())

    def build(self) -> TransitionModel:
        return TransitionModel(**self.model_dump())


class PolicySection(_Strict):
    kind: Literal["Greedy", "Whittle", "RoundRobin", "Control", "TypeTarget"]
    beta: float = Field(0.95, gt=0.0, lt=1.0)
    tol: float = Field(1e-6, gt=0.0)
    target_type: Optional[int] = None
    id: Optional[str] = None

    @model_validator(mode="after")
    def _target(self):
        if self.kind == "TypeTarget" and self.target_type is None:
            raise ValueError("TypeTarget policy needs target_type")
        return self

    def build(self) -> IndexPolicySpec:
        return IndexPolicySpec(self.kind, self.beta, self.target_type, self.tol)


class CohortSection(_Strict):
    kind: Literal["SyntheticThreeType", "RandomMonotone"] = "SyntheticThreeType"
    n1: int = Field(0, ge=0)
    n2: int = Field(0, ge=0)
    eta: float = Field(1.0, ge=0.0)
    n3: Optional[int] = Field(None, ge=0)
    p1: TransitionSection = TransitionSection.of(P1_DEFAULT)
    p2: TransitionSection = TransitionSection.of(P2_DEFAULT)
    p3: TransitionSection = TransitionSection.of(P3_DEFAULT)
    total: int = Field(0, ge=0)
    pass01_range: Tuple[float, float] = (0.05, 0.5)
    pass11_range: Tuple[float, float] = (0.4, 0.95)
    uplift_range: Tuple[float, float] = (0.05, 0.3)
    initial_state: Union[Literal[0, 1], Literal["random"]] = 1
    planner_noise: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _ranges(self):
        for name in ("pass01_range", "pass11_range", "uplift_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"{name}={[lo, hi]} must satisfy 0 <= lo <= hi <= 1")
        return self

    def build(self) -> CohortConfig:
        data = self.model_dump()
        for key in ("p1", "p2", "p3"):
            data[key] = getattr(self, key).build()
        return CohortConfig(**data)


def _default_policy_ids(policies: List[PolicySection]) -> List[str]:
    ids, bound = [], {}
    for m, p in enumerate(policies):
        pid = p.id or p.kind.lower() + (str(p.target_type) if p.kind == "TypeTarget" else "")
        spec = p.build()
        if bound.setdefault(pid, spec) != spec:
            if p.id:
                raise ValueError(f"policies[{m}].id {pid!r} is already bound to a different policy")
            pid = f"{pid}_{m}"
            bound[pid] = spec
        ids.append(pid)
    return ids


class TrialSection(_Strict):
    policies: List[PolicySection] = Field(min_length=1)
    n_per_arm: Optional[int] = Field(None, ge=0, description="defaults to cohort size / number of arms")
    budgets: Optional[List[int]] = Field(None, description="defaults to 10% of n_per_arm (0 for Control)")
    horizon: int = Field(10, ge=1)
    seed: Optional[int] = Field(None, description="transition seed; defaults to the top-level seed")


class EstimatorSection(_Strict):
    kinds: List[Literal[ESTIMATORS]] = ["raw", "permuted"]
    enumeration_cap: int = Field(ENUMERATION_CAP, ge=1)
    n_resamples: int = Field(DEFAULT_RESAMPLES, ge=1)
    resample_seed: int = 0
    trim: Optional[Tuple[float, float]] = (0.01, 0.99)
    partition_samples: int = Field(200, ge=1)

    @model_validator(mode="after")
    def _trim(self):
        if self.trim is not None and not 0.0 < self.trim[0] <= self.trim[1] < 1.0:
            raise ValueError(f"trim={list(self.trim)} must satisfy 0 < lo <= hi < 1")
        return self


class ExperimentSection(_Strict):
    n_trials: int = Field(100, ge=1)
    master_seed: Optional[int] = Field(None, description="defaults to the top-level seed")
    fixed_cohort: bool = False
    workers: int = Field(1, ge=1)
    bootstrap_reps: int = Field(4000, ge=10)
    output_csv: Optional[str] = None
    output_summary: Optional[str] = None


class RunConfig(_Strict):
    seed: int
    cohort: CohortSection
    trial: TrialSection
    estimators: EstimatorSection = Field(default_factory=EstimatorSection)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)

    @model_validator(mode="after")
    def _resolve(self):
        cohort = self.cohort.build()
        trial = self.trial
        arms = len(trial.policies)
        if trial.n_per_arm is None:
            if cohort.size % arms:
                raise ValueError(f"cohort of {cohort.size} agents cannot be split evenly into {arms} arms")
            trial.n_per_arm = cohort.size // arms
        elif trial.n_per_arm * arms != cohort.size:
            raise ValueError(f"trial.n_per_arm={trial.n_per_arm} x {arms} arms != cohort size {cohort.size}")
        if trial.budgets is None:
            trial.budgets = [0 if p.kind == "Control" else max(1, round(0.1 * trial.n_per_arm)) if trial.n_per_arm else 0
                             for p in trial.policies]
        if len(trial.budgets) != arms:
            raise ValueError(f"trial.budgets has {len(trial.budgets)} entries for {arms} policies")
        for m, b in enumerate(trial.budgets):
            if not 0 <= b <= trial.n_per_arm:
                raise ValueError(f"trial.budgets[{m}]={b} must lie in [0, n_per_arm={trial.n_per_arm}]")
        ids = _default_policy_ids(trial.policies)
        for p, pid in zip(trial.policies, ids):
            p.id = pid
        if trial.seed is None:
            trial.seed = self.seed
        if self.experiment.master_seed is None:
            self.experiment.master_seed = self.seed
        return self

    # -- domain objects ---------------------------------------------------------

    def cohort_config(self) -> CohortConfig:
        return self.cohort.build()

    def trial_config(self) -> TrialConfig:
        t = self.trial
        return TrialConfig(len(t.policies), t.n_per_arm, tuple(t.budgets), t.horizon,
                           tuple(p.build() for p in t.policies), tuple(p.id for p in t.policies), t.seed)

    def experiment_config(self) -> ExperimentConfig:
        e, est = self.experiment, self.estimators
        return ExperimentConfig(self.cohort_config(), self.trial_config(), tuple(est.kinds), e.n_trials,
                                e.master_seed, e.fixed_cohort, est.enumeration_cap, est.n_resamples,
                                est.resample_seed, est.trim, est.partition_samples, e.bootstrap_reps)

    def effective(self) -> dict:
        return self.model_dump(mode="json")


def _section_fields(loc) -> list:
    model = RunConfig
    for part in loc[:-1]:
        if isinstance(part, int):
            continue
        field = model.model_fields.get(part)
        if field is None:
            return []
        ann = field.annotation
        inner = getattr(ann, "__args__", None)
        candidates = [ann] + list(inner or [])
        nxt = next((c for c in candidates if isinstance(c, type) and issubclass(c, BaseModel)), None)
        if nxt is None:
            return []
        model = nxt
    return list(model.model_fields)


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = e["loc"]
        path = ""
        for part in loc:
            path += f"[{part}]" if isinstance(part, int) else (f".{part}" if path else str(part))
        if e["type"] == "extra_forbidden":
            hint = difflib.get_close_matches(str(loc[-1]), _section_fields(loc), n=1)
            suggestion = f" (did you mean {hint[0]!r}?)" if hint else ""
            lines.append(f"{path}: unknown key{suggestion}")
        else:
            msg = e["msg"].removeprefix("Value error, ")
            # cross-section checks already name their field in the message
            lines.append(f"{path}: {msg}" if path else msg)
    return "; ".join(lines)


def parse_config_dict(data) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config_dict(data)


def config_schema() -> dict:
    return RunConfig.model_json_schema()
