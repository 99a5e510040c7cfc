"""Estimators of per-arm policy value from a single recorded trial.

Four estimators are provided:

* ``eval_raw``: the observed per-arm reward sums.
* ``eval_permuted_general``: average over every reassignment of agents to
  arms under which all recorded actions would be reproduced, found by
  exhaustive enumeration (small rosters only).
* ``eval_permuted_indexed``: the two-arm shortcut that swaps agents sharing
  an action row whose indices sit strictly on the same side of both arms'
  treatment thresholds at every step.
* ``eval_ipw``: inverse propensity weighting for single-step trials.

None of them re-simulates anything; they only re-average observed rewards.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, UnsupportedError
from .model import Assignment, EstimateReport, TrialRecord, eval_arm

ENUMERATION_CAP = 16
DEFAULT_RESAMPLES = 2000
TRIM = (0.01, 0.99)

FULL = "FullDagger"
THRESHOLD = "ThresholdRestricted"


def eval_raw(record: TrialRecord) -> EstimateReport:
    evals = [eval_arm(record, m) for m in range(record.meta.arms)]
    return EstimateReport("raw", evals, None)


# -- replay machinery ---------------------------------------------------------

def _index_stack(record: TrialRecord) -> np.ndarray:
    """(arms, agents, T) index matrices, one per arm's policy."""
    missing = [pid for pid in record.meta.policy_ids if pid not in record.indices]
    if missing:
        if not record.meta.policies:
            raise DataError(f"record lacks index matrices for policies {missing}; "
                            "permutation estimators need stored or recomputable indices")
        from .sim import recompute_indices
        record = recompute_indices(record)
    return np.stack([record.indices[pid] for pid in record.meta.policy_ids])


def _orders(record: TrialRecord, stack: np.ndarray) -> np.ndarray:
    """(arms, T, agents) agent order by (index desc, id asc) per arm policy and step."""
    ids = np.arange(record.n_agents)
    arms, _, T = stack.shape
    out = np.empty((arms, T, record.n_agents), dtype=np.int64)
    for m in range(arms):
        for t in range(T):
            out[m, t] = np.lexsort((ids, -stack[m, :, t]))
    return out


def replay_actions(record: TrialRecord, arm_of: np.ndarray) -> np.ndarray:
    """Actions each candidate assignment would produce against the recorded histories.

    ``arm_of`` has shape (K, agents); returns a (K, agents, T) uint8 array.
    Each arm's policy ranks its candidate members by the stored indices and
    treats the first ``B`` of them.
    """
    arm_of = np.atleast_2d(np.asarray(arm_of, dtype=np.int64))
    stack = _index_stack(record)
    orders = _orders(record, stack)
    K, n = arm_of.shape
    T = record.horizon
    out = np.zeros((K, n, T), dtype=np.uint8)
    for m in range(record.meta.arms):
        budget = record.meta.budgets[m]
        if budget == 0:
            continue
        member = arm_of == m
        for t in range(T):
            order = orders[m, t]
            ranked = member[:, order]
            treated_sorted = ranked & (np.cumsum(ranked, axis=1) <= budget)
            treated = np.empty_like(treated_sorted)
            treated[:, order] = treated_sorted
            out[:, :, t] |= treated
    return out


def observable_mask(record: TrialRecord, arm_of: np.ndarray) -> np.ndarray:
    """Boolean per candidate row: does replay reproduce every recorded action?"""
    replayed = replay_actions(record, arm_of)
    return (replayed == record.actions[None]).all(axis=(1, 2))


def is_observable_counterfactual(record: TrialRecord, candidate: Assignment) -> bool:
    if candidate.arm_sizes != record.assignment.arm_sizes:
        raise DataError(f"candidate arm sizes {candidate.arm_sizes} differ from {record.assignment.arm_sizes}")
    return bool(observable_mask(record, candidate.arm_of[None])[0])


def thresholds_for(record: TrialRecord, arm_of: np.ndarray) -> np.ndarray:
    """(K, arms, T) smallest index among treated members of each arm; +inf if none."""
    arm_of = np.atleast_2d(np.asarray(arm_of, dtype=np.int64))
    stack = _index_stack(record)
    treated = record.actions.astype(bool)
    out = np.empty((arm_of.shape[0], record.meta.arms, record.horizon))
    for m in range(record.meta.arms):
        hit = (arm_of == m)[:, :, None] & treated[None]
        out[:, m] = np.where(hit, stack[m][None], np.inf).min(axis=1)
    return out


# -- exhaustive enumeration ---------------------------------------------------

def enumerate_assignments(arm_sizes) -> np.ndarray:
    """All ordered partitions of ``sum(arm_sizes)`` agents, as a (K, agents) arm-label array."""
    arm_sizes = tuple(int(s) for s in arm_sizes)
    n = sum(arm_sizes)

    def rec(pool, arm):
        if arm == len(arm_sizes) - 1:
            yield {i: arm for i in pool}
            return
        for chosen in itertools.combinations(pool, arm_sizes[arm]):
            rest = [i for i in pool if i not in chosen]
            for tail in rec(rest, arm + 1):
                tail.update({i: arm for i in chosen})
                yield tail

    rows = [[labels[i] for i in range(n)] for labels in rec(list(range(n)), 0)]
    return np.array(rows, dtype=np.int64).reshape(-1, n)


@dataclass
class CounterfactualSet:
    """Observable counterfactual assignments of one recorded trial."""

    arm_of: np.ndarray
    arm_sizes: tuple
    kind: str = FULL

    def __len__(self):
        return len(self.arm_of)

    @property
    def assignments(self) -> list:
        return [Assignment(row, self.arm_sizes) for row in self.arm_of]

    def __contains__(self, assignment: Assignment) -> bool:
        return bool((self.arm_of == assignment.arm_of[None]).all(axis=1).any())


def _check_cap(record: TrialRecord, cap: int) -> None:
    if record.n_agents > cap:
        raise UnsupportedError(
            f"exhaustive enumeration is capped at {cap} agents (record has {record.n_agents}); "
            "use the indexed estimator for larger trials"
        )


def enumerate_counterfactuals(record: TrialRecord, cap: int = ENUMERATION_CAP,
                              restrict_thresholds: bool = False) -> CounterfactualSet:
    """Every assignment that reproduces the recorded actions.

    With ``restrict_thresholds`` the set is further cut to assignments that
    also leave every arm's per-step treatment threshold unchanged.
    """
    _check_cap(record, cap)
    candidates = enumerate_assignments(record.assignment.arm_sizes)
    keep = observable_mask(record, candidates)
    if restrict_thresholds:
        base = thresholds_for(record, record.assignment.arm_of)[0]
        keep &= (thresholds_for(record, candidates) == base[None]).all(axis=(1, 2))
    return CounterfactualSet(candidates[keep], record.assignment.arm_sizes, THRESHOLD if restrict_thresholds else FULL)


def mean_eval_over(record: TrialRecord, cset: CounterfactualSet) -> np.ndarray:
    """Per-arm mean of the original rewards each member assignment places in that arm."""
    rewards = record.rewards()
    onehot = cset.arm_of[:, :, None] == np.arange(record.meta.arms)[None, None, :]
    return (onehot * rewards[None, :, None]).sum(axis=1).mean(axis=0)


def eval_permuted_general(record: TrialRecord, cap: int = ENUMERATION_CAP) -> EstimateReport:
    cset = enumerate_counterfactuals(record, cap)
    return EstimateReport("permuted_general", mean_eval_over(record, cset), None,
                          {"n_counterfactuals": len(cset)})


# -- two-arm index-threshold shortcut -----------------------------------------

@dataclass
class SwapStructure:
    supergroup_of: np.ndarray
    lam: np.ndarray
    thresholds: np.ndarray
    groups: list = field(default_factory=list)
    representative_rewards: np.ndarray = None

    @property
    def n_supergroups(self) -> int:
        return int(self.supergroup_of.max()) + 1 if self.supergroup_of.size else 0

    def diagnostics(self) -> dict:
        return {
            "thresholds": self.thresholds.tolist(),
            "n_supergroups": self.n_supergroups,
            "group_sizes": [len(g) for g in self.groups],
            "n_swappable": int(self.lam.sum()),
        }


def build_swap_structure(record: TrialRecord) -> SwapStructure:
    if record.meta.arms != 2:
        raise UnsupportedError(f"the indexed estimator supports exactly 2 arms, got {record.meta.arms}")
    stack = _index_stack(record)
    _, supergroup_of = np.unique(record.actions, axis=0, return_inverse=True)
    supergroup_of = np.asarray(supergroup_of).reshape(-1)
    tau = thresholds_for(record, record.assignment.arm_of)[0]
    # signs of the gaps; a finite index against +inf gives -1, an exact tie gives 0
    signs = np.sign(stack - tau[:, None, :])
    lam = ((signs[0] * signs[1]) > 0).all(axis=1).astype(np.int64)
    rewards = record.rewards()
    groups, reps = [], []
    for k in range(int(supergroup_of.max()) + 1 if supergroup_of.size else 0):
        g = np.flatnonzero((supergroup_of == k) & (lam == 1))
        groups.append(g)
        reps.append(rewards[g].mean() if g.size else np.nan)
    return SwapStructure(supergroup_of, lam, tau, groups, np.array(reps))


def eval_permuted_indexed(record: TrialRecord, structure: Optional[SwapStructure] = None) -> EstimateReport:
    s = structure or build_swap_structure(record)
    rewards = record.rewards()
    rep = np.where(s.lam == 1, s.representative_rewards[s.supergroup_of], 0.0)
    adjusted = np.where(s.lam == 1, rep, rewards)
    evals = [float(adjusted[record.assignment.members(m)].sum()) for m in range(2)]
    return EstimateReport("permuted", evals, None, s.diagnostics())


# -- inverse propensity weighting ---------------------------------------------

def _require_single_step(record: TrialRecord) -> None:
    if record.horizon != 1:
        raise UnsupportedError(f"IPW requires T=1 (record has T={record.horizon})")


def _beats(record: TrialRecord, arm: int) -> np.ndarray:
    """beats[i, c] is True when agent c outranks agent i under arm ``arm``'s policy at t=1."""
    idx = _index_stack(record)[arm, :, 0]
    ids = np.arange(record.n_agents)
    return (idx[None, :] > idx[:, None]) | ((idx[None, :] == idx[:, None]) & (ids[None, :] < ids[:, None]))


def _trim(p: np.ndarray, trim) -> np.ndarray:
    if trim is None:
        return p
    lo, hi = trim
    if not 0.0 < lo <= hi < 1.0:
        raise ConfigError(f"trim bounds {trim} must satisfy 0 < lo <= hi < 1")
    return np.clip(p, lo, hi)


def estimate_propensities(record: TrialRecord, policy_arm: int, n_resamples: int = DEFAULT_RESAMPLES,
                          resample_seed: int = 0, trim=TRIM) -> np.ndarray:
    """Per-agent probability that ``policy_arm``'s policy gives the agent its observed action.

    Each agent gets its own resample stream keyed by (resample_seed, id) so
    that two arms running the same policy receive identical estimates.
    """
    _require_single_step(record)
    if n_resamples < 1:
        raise ConfigError(f"n_resamples must be >= 1, got {n_resamples}")
    n, size = record.n_agents, record.meta.n_per_arm
    budget = record.meta.budgets[policy_arm]
    beats = _beats(record, policy_arm)
    observed = record.actions[:, 0].astype(bool)
    p = np.empty(n)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        rng = np.random.default_rng([resample_seed, i])
        keys = rng.random((n_resamples, n - 1))
        companions = others[np.argsort(keys, axis=1)[:, :size - 1]]
        treated = beats[i, companions].sum(axis=1) < budget
        p[i] = np.mean(treated == observed[i])
    return _trim(p, trim)


def exact_propensities(record: TrialRecord, policy_arm: int, trim=None) -> np.ndarray:
    """Exact counterpart of :func:`estimate_propensities` over all companion sets.

    Agent ``i`` is treated iff fewer than ``B`` of its ``N-1`` uniformly
    drawn companions outrank it, a hypergeometric count.
    """
    _require_single_step(record)
    n, size = record.n_agents, record.meta.n_per_arm
    budget = record.meta.budgets[policy_arm]
    beats = _beats(record, policy_arm)
    observed = record.actions[:, 0].astype(bool)
    total = math.comb(n - 1, size - 1)
    p = np.empty(n)
    for i in range(n):
        k = int(beats[i].sum())
        treated = sum(math.comb(k, x) * math.comb(n - 1 - k, size - 1 - x) for x in range(min(budget, size)))
        p_treated = treated / total
        p[i] = p_treated if observed[i] else 1.0 - p_treated
    return _trim(p, trim)


def eval_ipw(record: TrialRecord, target_arm: Optional[int] = None, n_resamples: int = DEFAULT_RESAMPLES,
             resample_seed: int = 0, trim=TRIM, exact: bool = False, per_arm: bool = False) -> EstimateReport:
    """Reweight every arm's observed rewards toward a target arm's policy.

    The pooled estimate for target policy ``j`` averages over source arms:
    ``(1/M) * sum_m sum_{i in arm m} p(i|pi_j) / p(i|pi_m) * r_i``.
    Without ``target_arm`` every arm's policy is estimated in turn. With
    ``per_arm`` the report holds the per-source-arm terms for one target.
    """
    _require_single_step(record)
    M = record.meta.arms
    rewards = record.rewards()
    arm_of = record.assignment.arm_of

    def props(arm):
        if exact:
            return exact_propensities(record, arm, trim)
        return estimate_propensities(record, arm, n_resamples, resample_seed, trim)

    cache = {}

    def prop(arm):
        pid = record.meta.policy_ids[arm]
        key = (pid, record.meta.budgets[arm])
        if key not in cache:
            cache[key] = props(arm)
        return cache[key]

    own = np.empty(record.n_agents)
    for m in range(M):
        members = arm_of == m
        own[members] = prop(m)[members]
    targets = range(M) if target_arm is None else [target_arm]
    if target_arm is not None and not 0 <= target_arm < M:
        raise ConfigError(f"target arm {target_arm} out of range for {M} arms")
    values, weights_all, terms = [], [], []
    for j in targets:
        w = prop(j) / own
        contrib = [float((w * rewards)[arm_of == m].sum()) for m in range(M)]
        terms.append(contrib)
        values.append(sum(contrib) / M)
        weights_all.append(w)
    w = np.concatenate(weights_all)
    diag = {"min_weight": float(w.min()), "max_weight": float(w.max()),
            "n_resamples": None if exact else n_resamples, "exact": exact,
            "targets": list(targets), "per_source_arm": terms}
    if per_arm:
        if target_arm is None:
            raise ConfigError("per_arm IPW output needs a target_arm")
        return EstimateReport("ipw_per_arm", terms[0], None, diag)
    return EstimateReport("ipw", values, None, diag)
