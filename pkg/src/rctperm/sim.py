"""Cohort generation, random assignment and sequential trial simulation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, DataError
from .model import AgentSpec, Assignment, TransitionModel, TrialMeta, TrialRecord, validate_roster
from .policies import RosterArrays, batch_indices, top_b
from .rng import STREAM_INITIAL_STATE, STREAM_TRANSITION, hash_uniform

# non-recoverable: hard to revive once in state 0, so persistent treatment pays
P1_DEFAULT = TransitionModel(p_pass_01=0.05, p_pass_11=0.95, p_act_01=0.10, p_act_11=0.99)
# self-healing: returns to state 1 quickly without help
P2_DEFAULT = TransitionModel(p_pass_01=0.85, p_pass_11=0.60, p_act_01=0.90, p_act_11=0.95)
# indifferent: dynamics ignore the action
P3_DEFAULT = TransitionModel(0.5, 0.5, 0.5, 0.5)

COHORT_KINDS = ("SyntheticThreeType", "RandomMonotone")


@dataclass(frozen=True)
class CohortConfig:
    kind: str = "SyntheticThreeType"
    n1: int = 0
    n2: int = 0
    eta: float = 1.0
    n3: Optional[int] = None
    p1: TransitionModel = P1_DEFAULT
    p2: TransitionModel = P2_DEFAULT
    p3: TransitionModel = P3_DEFAULT
    total: int = 0
    pass01_range: tuple = (0.05, 0.5)
    pass11_range: tuple = (0.4, 0.95)
    uplift_range: tuple = (0.05, 0.3)
    initial_state: Union[int, str] = 1
    planner_noise: float = 0.0

    def __post_init__(self):
        if self.kind not in COHORT_KINDS:
            raise ConfigError(f"unknown cohort kind {self.kind!r}; expected one of {COHORT_KINDS}")
        for name in ("n1", "n2", "total"):
            if getattr(self, name) < 0:
                raise ConfigError(f"cohort.{name} must be non-negative")
        if self.eta < 0 or (self.n3 is not None and self.n3 < 0):
            raise ConfigError("cohort.eta and cohort.n3 must be non-negative")
        for name in ("pass01_range", "pass11_range", "uplift_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"cohort.{name}={(lo, hi)} must satisfy 0 <= lo <= hi <= 1")
        if self.initial_state not in (0, 1, "random"):
            raise ConfigError("cohort.initial_state must be 0, 1 or 'random'")
        if self.planner_noise < 0:
            raise ConfigError("cohort.planner_noise must be non-negative")

    @property
    def type_counts(self) -> tuple:
        n3 = self.n3 if self.n3 is not None else int(round(self.eta * self.n1))
        return self.n1, self.n2, n3

    @property
    def size(self) -> int:
        if self.kind == "SyntheticThreeType":
            return sum(self.type_counts)
        return self.total


@dataclass(frozen=True)
class TrialConfig:
    arms: int
    n_per_arm: int
    budgets: tuple
    horizon: int
    policies: tuple
    policy_ids: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))
        object.__setattr__(self, "policies", tuple(self.policies))
        ids = tuple(self.policy_ids) or tuple(f"pi{m}" for m in range(self.arms))
        object.__setattr__(self, "policy_ids", tuple(str(i) for i in ids))
        if self.arms < 1 or self.n_per_arm < 0 or self.horizon < 1:
            raise ConfigError("trial needs arms >= 1, n_per_arm >= 0 and horizon >= 1")
        if not (len(self.budgets) == len(self.policies) == len(self.policy_ids) == self.arms):
            raise ConfigError("trial.budgets, trial.policies and policy ids need one entry per arm")
        for m, b in enumerate(self.budgets):
            if b < 0:
                raise ConfigError(f"trial.budgets[{m}] must be non-negative")
            if b > self.n_per_arm:
                raise ConfigError(f"trial.budgets[{m}]={b} exceeds n_per_arm={self.n_per_arm}")
        seen = {}
        for pid, spec in zip(self.policy_ids, self.policies):
            if seen.setdefault(pid, spec) != spec:
                raise ConfigError(f"policy id {pid!r} is bound to two different policies")

    @property
    def roster_size(self) -> int:
        return self.arms * self.n_per_arm

    def meta(self, seed: Optional[int]) -> TrialMeta:
        return TrialMeta(self.arms, self.n_per_arm, self.budgets, self.horizon, seed,
                         self.policy_ids, self.policies)


def _initial_states(config: CohortConfig, n: int, seed: int) -> np.ndarray:
    if config.initial_state == "random":
        return (hash_uniform(seed, STREAM_INITIAL_STATE, np.arange(n), 0) < 0.5).astype(int)
    return np.full(n, int(config.initial_state))


def generate_cohort(config: CohortConfig, seed: int) -> tuple:
    """Build a deterministic roster for ``seed``."""
    rng = np.random.default_rng(seed)
    if config.kind == "SyntheticThreeType":
        models, groups = [], []
        for group, (count, model) in enumerate(zip(config.type_counts, (config.p1, config.p2, config.p3)), start=1):
            models += [model.as_array()] * count
            groups += [group] * count
        p = np.array(models, dtype=np.float64).reshape(-1, 2, 2)
        groups = np.array(groups, dtype=np.int64)
    else:
        n = config.total
        p = np.empty((n, 2, 2))
        p[:, 0, 0] = rng.uniform(*config.pass01_range, size=n)
        p[:, 1, 0] = rng.uniform(*config.pass11_range, size=n)
        uplift = rng.uniform(*config.uplift_range, size=(n, 2))
        p[:, :, 1] = np.minimum(p[:, :, 0] + uplift, 1.0)
        groups = np.zeros(n, dtype=np.int64)
    n = len(p)
    if n == 0:
        raise ConfigError("cohort configuration produces an empty roster")
    p_hat = p
    if config.planner_noise > 0:
        p_hat = np.clip(p + rng.normal(0.0, config.planner_noise, size=p.shape), 0.0, 1.0)
    initial = _initial_states(config, n, seed)
    roster = []
    for i in range(n):
        true = TransitionModel(p[i, 0, 0], p[i, 1, 0], p[i, 0, 1], p[i, 1, 1])
        est = (p_hat[i, 0, 0], p_hat[i, 1, 0], p_hat[i, 0, 1], p_hat[i, 1, 1])
        roster.append(AgentSpec(i, est, true, int(initial[i]), int(groups[i])))
    return tuple(roster)


def sample_assignment(roster, arms: int, n_per_arm: int, seed: int) -> Assignment:
    """Uniformly random split into ``arms`` ordered arms of ``n_per_arm`` agents."""
    n = roster if isinstance(roster, (int, np.integer)) else len(roster)
    if n != arms * n_per_arm:
        raise ConfigError(f"roster of {n} agents cannot be split into {arms} arms of {n_per_arm}")
    perm = np.random.default_rng(seed).permutation(n)
    arm_of = np.empty(n, dtype=np.int64)
    for m in range(arms):
        arm_of[perm[m * n_per_arm:(m + 1) * n_per_arm]] = m
    return Assignment(arm_of, (n_per_arm,) * arms)


def transition_uniforms(seed: int, ids, horizon: int) -> np.ndarray:
    """(agents, T) matrix of the draws that decide each agent's transitions."""
    ids = np.asarray(ids, dtype=np.int64)
    return hash_uniform(seed, STREAM_TRANSITION, ids[:, None], np.arange(1, horizon + 1)[None, :])


def next_state(model: TransitionModel, state: int, action: int, seed: int, agent_id: int, t: int) -> int:
    """State at ``t`` for an agent that was in ``state`` and received ``action`` at ``t``."""
    u = hash_uniform(seed, STREAM_TRANSITION, agent_id, t)[0]
    return int(u < model.p_next_one(state, action))


def simulate(roster, assignment: Assignment, config: TrialConfig, uniforms: np.ndarray,
             seed: Optional[int] = None, arrays: Optional[RosterArrays] = None) -> TrialRecord:
    """Run a trial with explicit transition draws ``uniforms`` of shape (agents, T)."""
    roster = tuple(roster)
    validate_roster(roster)
    n, T = len(roster), config.horizon
    if n != config.roster_size:
        raise ConfigError(f"roster has {n} agents, trial expects {config.roster_size}")
    if assignment.arm_sizes != (config.n_per_arm,) * config.arms:
        raise ConfigError("assignment arm sizes disagree with the trial configuration")
    arrays = arrays or RosterArrays(roster)
    true_p = np.array([a.true_model.as_array() for a in roster]).reshape(n, 2, 2)
    rows = np.arange(n)
    members = [assignment.members(m) for m in range(config.arms)]
    specs = dict(zip(config.policy_ids, config.policies))

    states = np.zeros((n, T + 1), dtype=np.uint8)
    states[:, 0] = [a.initial_state for a in roster]
    actions = np.zeros((n, T), dtype=np.uint8)
    treated = np.zeros(n, dtype=np.int64)
    indices = {pid: np.empty((n, T)) for pid in specs}
    for t in range(1, T + 1):
        current = states[:, t - 1]
        for pid, spec in specs.items():
            try:
                indices[pid][:, t - 1] = batch_indices(spec, arrays, current, treated, t)
            except Exception as exc:
                raise type(exc)(f"policy {pid!r} failed at t={t}: {exc}") from exc
        for m, idx in enumerate(members):
            chosen = top_b(idx, indices[config.policy_ids[m]][idx, t - 1], config.budgets[m])
            actions[idx[chosen], t - 1] = 1
        a_t = actions[:, t - 1]
        states[:, t] = uniforms[:, t - 1] < true_p[rows, current, a_t]
        treated += a_t
    return TrialRecord(config.meta(seed), roster, assignment, states, actions, indices)


def run_trial(roster, assignment: Assignment, config: TrialConfig, seed: Optional[int] = None,
              arrays: Optional[RosterArrays] = None) -> TrialRecord:
    """Simulate one trial; transition draws are keyed by (seed, agent id, t)."""
    seed = config.seed if seed is None else seed
    ids = [a.id for a in roster]
    return simulate(roster, assignment, config, transition_uniforms(seed, ids, config.horizon), seed, arrays)


def recompute_indices(record: TrialRecord) -> TrialRecord:
    """Fill missing index matrices from the policy specs stored in ``record.meta``.

    Indices depend only on each agent's own history, so they can be rebuilt
    from the recorded states and actions without re-simulating.
    """
    meta = record.meta
    missing = [pid for pid in dict.fromkeys(meta.policy_ids) if pid not in record.indices]
    if not missing:
        return record
    if not meta.policies:
        raise DataError(f"record lacks index matrices for {missing} and carries no policy specs to rebuild them")
    specs = dict(zip(meta.policy_ids, meta.policies))
    arrays = RosterArrays(record.roster)
    n, T = record.n_agents, meta.horizon
    indices = dict(record.indices)
    for pid in missing:
        mat = np.empty((n, T))
        for t in range(1, T + 1):
            treated = record.actions[:, :t - 1].sum(axis=1, dtype=np.int64)
            mat[:, t - 1] = batch_indices(specs[pid], arrays, record.states[:, t - 1], treated, t)
        indices[pid] = mat
    return TrialRecord(meta, record.roster, record.assignment, record.states, record.actions, indices)
