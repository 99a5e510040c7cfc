"""Domain types shared by the simulator, estimators and file formats."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

_FIELDS = ("p_pass_01", "p_pass_11", "p_act_01", "p_act_11")


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TransitionModel:
    """Probability of moving to state 1 given (current state, action).

    ``p_pass_01`` reads "passive action, from state 0, to state 1"; the
    probabilities of landing in state 0 are the complements.
    """

    p_pass_01: float
    p_pass_11: float
    p_act_01: float
    p_act_11: float

    def __post_init__(self):
        for name in _FIELDS:
            value = float(getattr(self, name))
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name}={value} is outside [0, 1]")
            object.__setattr__(self, name, value)

    def p_next_one(self, state: int, action: int) -> float:
        if action:
            return self.p_act_11 if state else self.p_act_01
        return self.p_pass_11 if state else self.p_pass_01

    def as_array(self) -> np.ndarray:
        """Return probabilities as a (state, action) 2x2 array."""
        return np.array([[self.p_pass_01, self.p_act_01],
                         [self.p_pass_11, self.p_act_11]])

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _FIELDS}

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "TransitionModel":
        missing = [name for name in _FIELDS if name not in data]
        extra = [key for key in data if key not in _FIELDS]
        if missing or extra:
            raise DataError(f"transition model keys: missing {missing}, unexpected {extra}")
        return cls(**{name: data[name] for name in _FIELDS})


@dataclass(frozen=True)
class AgentSpec:
    """One trial participant.

    ``observable_features`` starts with the planner's transition estimate
    in TransitionModel field order; ``group`` is an observable type label.
    """

    id: int
    observable_features: tuple
    true_model: TransitionModel
    initial_state: int = 1
    group: int = 0

    def __post_init__(self):
        if int(self.id) < 0:
            raise ConfigError(f"agent id must be non-negative, got {self.id}")
        if self.initial_state not in (0, 1):
            raise ConfigError(f"agent {self.id}: initial_state must be 0 or 1")
        feats = tuple(float(v) for v in self.observable_features)
        if len(feats) < 4:
            raise ConfigError(f"agent {self.id}: observable_features needs the 4 estimated probabilities")
        object.__setattr__(self, "observable_features", feats)
        object.__setattr__(self, "id", int(self.id))

    @property
    def estimated_model(self) -> TransitionModel:
        return TransitionModel(*self.observable_features[:4])

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "observable_features": list(self.observable_features),
            "true_model": self.true_model.to_dict(),
            "initial_state": self.initial_state,
            "group": self.group,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AgentSpec":
        return cls(
            id=data["id"],
            observable_features=tuple(data["observable_features"]),
            true_model=TransitionModel.from_dict(data["true_model"]),
            initial_state=data.get("initial_state", 1),
            group=data.get("group", 0),
        )


def validate_roster(roster: Sequence[AgentSpec]) -> None:
    ids = [agent.id for agent in roster]
    if ids != list(range(len(roster))):
        raise DataError("roster ids must be unique, contiguous from 0 and in order")


@dataclass(frozen=True)
class Assignment:
    """Partition of agents ``0..n-1`` into ordered arms."""

    arm_of: np.ndarray
    arm_sizes: tuple

    def __post_init__(self):
        arm_of = _frozen(self.arm_of, np.int64)
        sizes = tuple(int(s) for s in self.arm_sizes)
        object.__setattr__(self, "arm_of", arm_of)
        object.__setattr__(self, "arm_sizes", sizes)
        if arm_of.ndim != 1:
            raise DataError("arm_of must be one-dimensional")
        if arm_of.size and (arm_of.min() < 0 or arm_of.max() >= len(sizes)):
            raise DataError(f"arm indices must lie in [0, {len(sizes)})")
        counts = np.bincount(arm_of, minlength=len(sizes))
        if tuple(int(c) for c in counts) != sizes:
            raise DataError(f"arm sizes {tuple(counts.tolist())} do not match declared {sizes}")

    @property
    def n_arms(self) -> int:
        return len(self.arm_sizes)

    def members(self, arm: int) -> np.ndarray:
        return np.flatnonzero(self.arm_of == arm)

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]]) -> "Assignment":
        n = sum(len(g) for g in groups)
        arm_of = np.full(n, -1, dtype=np.int64)
        for arm, group in enumerate(groups):
            arm_of[list(group)] = arm
        if (arm_of < 0).any():
            raise DataError("groups do not cover agents 0..n-1 exactly once")
        return cls(arm_of, tuple(len(g) for g in groups))

    def __eq__(self, other):
        if not isinstance(other, Assignment):
            return NotImplemented
        return self.arm_sizes == other.arm_sizes and np.array_equal(self.arm_of, other.arm_of)

    def __hash__(self):
        return hash((self.arm_sizes, self.arm_of.tobytes()))


@dataclass(frozen=True)
class TrialMeta:
    arms: int
    n_per_arm: int
    budgets: tuple
    horizon: int
    seed: Optional[int]
    policy_ids: tuple
    policies: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))
        object.__setattr__(self, "policy_ids", tuple(str(p) for p in self.policy_ids))
        object.__setattr__(self, "policies", tuple(self.policies))
        if len(self.budgets) != self.arms or len(self.policy_ids) != self.arms:
            raise DataError("meta: budgets and policy_ids need one entry per arm")
        if any(b < 0 for b in self.budgets):
            raise DataError("meta: budgets must be non-negative")
        if self.policies and len(self.policies) != self.arms:
            raise DataError("meta: policies need one entry per arm when present")


@dataclass(frozen=True, eq=False)
class TrialRecord:
    """Everything observed in one trial.

    ``states`` is (agents, T+1), ``actions`` is (agents, T) and each entry of
    ``indices`` maps a policy id to an (agents, T) matrix holding the index
    that policy assigns every agent given that agent's own history.
    """

    meta: TrialMeta
    roster: tuple
    assignment: Assignment
    states: np.ndarray
    actions: np.ndarray
    indices: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "roster", tuple(self.roster))
        object.__setattr__(self, "states", _frozen(self.states, np.uint8))
        object.__setattr__(self, "actions", _frozen(self.actions, np.uint8))
        object.__setattr__(self, "indices", {str(k): _frozen(v, np.float64) for k, v in self.indices.items()})
        self.validate()

    @property
    def n_agents(self) -> int:
        return len(self.roster)

    @property
    def horizon(self) -> int:
        return self.meta.horizon

    def validate(self) -> None:
        meta, n, T = self.meta, len(self.roster), self.meta.horizon
        validate_roster(self.roster)
        if n != meta.arms * meta.n_per_arm:
            raise DataError(f"roster has {n} agents, expected arms*n_per_arm={meta.arms * meta.n_per_arm}")
        if self.assignment.arm_sizes != (meta.n_per_arm,) * meta.arms:
            raise DataError("assignment arm sizes disagree with meta")
        if self.assignment.arm_of.size != n:
            raise DataError("assignment does not cover the roster")
        if self.states.shape != (n, T + 1):
            raise DataError(f"states shape {self.states.shape} != {(n, T + 1)}")
        if self.actions.shape != (n, T):
            raise DataError(f"actions shape {self.actions.shape} != {(n, T)}")
        for name, mat in (("states", self.states), ("actions", self.actions)):
            bad = np.argwhere(mat > 1)
            if bad.size:
                row, col = bad[0]
                raise DataError(f"{name}[{row}][{col}]={mat[row, col]} is not binary")
        initial = np.array([a.initial_state for a in self.roster], dtype=np.uint8)
        bad = np.flatnonzero(self.states[:, 0] != initial)
        if bad.size:
            raise DataError(f"states[{bad[0]}][0] differs from the roster initial state")
        for arm in range(meta.arms):
            members = self.assignment.members(arm)
            used = self.actions[members].sum(axis=0)
            expected = min(meta.budgets[arm], members.size)
            bad = np.flatnonzero(used != expected)
            if bad.size:
                t = int(bad[0])
                raise DataError(
                    f"arm {arm} at t={t + 1} treats {int(used[t])} agents; budget requires exactly {expected}"
                )
        for pid, mat in self.indices.items():
            if mat.shape != (n, T):
                raise DataError(f"indices[{pid!r}] shape {mat.shape} != {(n, T)}")
            if np.isnan(mat).any():
                raise DataError(f"indices[{pid!r}] contains NaN")

    def __eq__(self, other):
        if not isinstance(other, TrialRecord):
            return NotImplemented
        return (self.meta == other.meta and self.roster == other.roster
                and self.assignment == other.assignment
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions)
                and self.indices.keys() == other.indices.keys()
                and all(np.array_equal(v, other.indices[k]) for k, v in self.indices.items()))

    __hash__ = None

    def rewards(self) -> np.ndarray:
        """Per-agent reward vector."""
        return self.states[:, 1:].sum(axis=1).astype(np.float64)

    def arm_index_matrix(self, arm: int) -> np.ndarray:
        pid = self.meta.policy_ids[arm]
        if pid not in self.indices:
            raise DataError(f"record lacks the index matrix for policy {pid!r}")
        return self.indices[pid]


@dataclass(frozen=True)
class EstimateReport:
    kind: str
    eval_per_arm: tuple
    delta: Optional[float]
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        evals = tuple(float(v) for v in self.eval_per_arm)
        object.__setattr__(self, "eval_per_arm", evals)
        if len(evals) >= 2:
            object.__setattr__(self, "delta", evals[1] - evals[0])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "eval_per_arm": list(self.eval_per_arm),
            "delta": self.delta,
            "diagnostics": self.diagnostics,
        }


def reward(states_row) -> float:
    """Total time spent in state 1 after the first allocation (s_0 excluded)."""
    row = np.asarray(states_row)
    return float(row[1:].sum())


def eval_arm(record: TrialRecord, arm: int) -> float:
    if not 0 <= arm < record.meta.arms:
        raise IndexError(f"arm {arm} out of range for {record.meta.arms} arms")
    members = record.assignment.members(arm)
    return float(record.rewards()[members].sum())
