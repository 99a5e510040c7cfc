"""Exhaustive oracles for tiny trials.

Transitions are driven by one uniform draw per (agent, step), and a draw
only matters through which of the agent's transition probabilities it falls
below. Splitting [0, 1) at those probabilities gives finitely many "worlds",
each with an exact probability. Enumerating worlds x assignments gives exact
expectations and variances of every estimator, and inside one world two
assignments are observable counterfactuals of each other exactly when
re-simulating them yields the same action matrix. That re-simulation view
is independent of the replay used by the estimators, so the two can be
cross-checked.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, OracleError, UnsupportedError
from .estimators import (enumerate_assignments, eval_ipw, eval_permuted_general,
                         eval_permuted_indexed)
from .model import Assignment, TransitionModel, AgentSpec
from .policies import IndexPolicySpec, RosterArrays
from .sim import TrialConfig, simulate

MAX_AGENTS = 8
MAX_HORIZON = 3
MAX_WORLDS = 4096
TOL = 1e-10


def _breakpoints(model: TransitionModel) -> np.ndarray:
    return np.unique(np.concatenate([[0.0, 1.0], model.as_array().ravel()]))


def enumerate_worlds(roster, horizon: int, max_worlds: int = MAX_WORLDS):
    """Return (probabilities (W,), uniforms (W, agents, T)) covering every transition outcome."""
    cells = []
    for agent in roster:
        edges = _breakpoints(agent.true_model)
        lo, hi = edges[:-1], edges[1:]
        cells.append((0.5 * (lo + hi), hi - lo))
    count = 1
    for mids, _ in cells:
        count *= len(mids) ** horizon
    if count > max_worlds:
        raise UnsupportedError(f"{count} worlds exceed the cap of {max_worlds}")
    per_slot = [cells[i] for i in range(len(roster)) for _ in range(horizon)]
    probs, uniforms = [], []
    for combo in itertools.product(*[range(len(m)) for m, _ in per_slot]):
        probs.append(np.prod([w[k] for (_, w), k in zip(per_slot, combo)]))
        uniforms.append([m[k] for (m, _), k in zip(per_slot, combo)])
    u = np.array(uniforms).reshape(-1, len(roster), horizon)
    return np.array(probs), u


def _thresholds(record) -> np.ndarray:
    out = np.full((record.meta.arms, record.horizon), np.inf)
    for m, pid in enumerate(record.meta.policy_ids):
        for i in record.assignment.members(m):
            for t in range(record.horizon):
                if record.actions[i, t]:
                    out[m, t] = min(out[m, t], record.indices[pid][i, t])
    return out


def indices_unique(record) -> bool:
    """True when no two agents share an index value at any step under any policy."""
    for mat in record.indices.values():
        ordered = np.sort(mat, axis=0)
        if (np.diff(ordered, axis=0) == 0).any():
            return False
    return True


def _cell_labels(keys) -> np.ndarray:
    lookup = {}
    return np.array([lookup.setdefault(k, len(lookup)) for k in keys])


@dataclass
class ExhaustiveExpectation:
    """Exact joint distribution over (world, assignment) of a tiny trial.

    Arrays indexed [world, assignment, arm]. ``eval_dagger_oracle`` averages
    raw Eval over the re-simulation cells; ``eval_dagger`` and
    ``eval_upsilon`` are the estimators applied to each simulated record.
    """

    world_probs: np.ndarray
    assignments: np.ndarray
    eval_raw: np.ndarray
    eval_dagger: np.ndarray
    eval_dagger_oracle: np.ndarray
    eval_upsilon: Optional[np.ndarray]
    eval_upsilon_oracle: Optional[np.ndarray]
    cells: np.ndarray
    cells_upsilon: np.ndarray
    outcome_table: list = field(default_factory=list)
    unique_indices: bool = True

    @property
    def n_assignments(self) -> int:
        return len(self.assignments)

    def weights(self) -> np.ndarray:
        return self.world_probs[:, None] / self.n_assignments

    def mean(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("wc,wc...->...", self.weights(), values)

    def variance(self, values: np.ndarray) -> np.ndarray:
        mu = self.mean(values)
        return self.mean((values - mu) ** 2)

    @property
    def eval_star(self) -> np.ndarray:
        return self.mean(self.eval_raw)

    def partition_sum(self, values: Optional[np.ndarray] = None) -> np.ndarray:
        """Per-world (1/|C|) sum over cells of sum(E^2) - (sum E)^2/|cell|, averaged over worlds."""
        values = self.eval_raw if values is None else values
        total = np.zeros(values.shape[2:])
        for w, p in enumerate(self.world_probs):
            acc = np.zeros(values.shape[2:])
            for j in np.unique(self.cells[w]):
                block = values[w, self.cells[w] == j]
                acc += (block ** 2).sum(axis=0) - block.sum(axis=0) ** 2 / len(block)
            total += p * acc / self.n_assignments
        return total


def exact_expectation(roster, config: TrialConfig, max_worlds: int = MAX_WORLDS,
                      with_upsilon: Optional[bool] = None) -> ExhaustiveExpectation:
    """Enumerate every assignment and transition outcome of a tiny trial."""
    roster = tuple(roster)
    if len(roster) > MAX_AGENTS or config.horizon > MAX_HORIZON:
        raise UnsupportedError(f"exact expectation needs <= {MAX_AGENTS} agents and T <= {MAX_HORIZON}")
    with_upsilon = config.arms == 2 if with_upsilon is None else with_upsilon
    probs, uniforms = enumerate_worlds(roster, config.horizon, max_worlds)
    arm_of = enumerate_assignments((config.n_per_arm,) * config.arms)
    arrays = RosterArrays(roster)
    W, K, M = len(probs), len(arm_of), config.arms
    raw = np.empty((W, K, M))
    dagger = np.empty((W, K, M))
    upsilon = np.empty((W, K, M)) if with_upsilon else None
    cells = np.empty((W, K), dtype=np.int64)
    cells_ups = np.empty((W, K), dtype=np.int64)
    outcome = [dict() for _ in range(K)]
    unique = True
    for w in range(W):
        keys, ukeys = [], []
        for k in range(K):
            assignment = Assignment(arm_of[k], (config.n_per_arm,) * M)
            rec = simulate(roster, assignment, config, uniforms[w], config.seed, arrays)
            raw[w, k] = [rec.rewards()[arm_of[k] == m].sum() for m in range(M)]
            dagger[w, k] = eval_permuted_general(rec).eval_per_arm
            if with_upsilon:
                upsilon[w, k] = eval_permuted_indexed(rec).eval_per_arm
            unique = unique and indices_unique(rec)
            keys.append(rec.actions.tobytes())
            ukeys.append(rec.actions.tobytes() + _thresholds(rec).tobytes())
            skey = rec.states.tobytes()
            outcome[k][skey] = outcome[k].get(skey, 0.0) + probs[w]
        cells[w] = _cell_labels(keys)
        cells_ups[w] = _cell_labels(ukeys)

    def cell_mean(labels):
        out = np.empty_like(raw)
        for w in range(W):
            for j in np.unique(labels[w]):
                sel = labels[w] == j
                out[w, sel] = raw[w, sel].mean(axis=0)
        return out

    return ExhaustiveExpectation(probs, arm_of, raw, dagger, cell_mean(cells),
                                 upsilon, cell_mean(cells_ups) if with_upsilon else None,
                                 cells, cells_ups, outcome, unique)


def _check(name, residuals, tol, details):
    worst = float(np.max(np.abs(residuals)))
    if worst > tol:
        details.append(f"{name}: residual {worst:.3e} > {tol:.0e} ({np.asarray(residuals).tolist()})")
    return worst


def verify_unbiasedness(exp: ExhaustiveExpectation, tol: float = TOL) -> dict:
    """Residuals of both permutation estimators' expectations against the true expected value."""
    star = exp.eval_star
    details = []
    report = {"eval_star": star.tolist(),
              "dagger": _check("E[Eval dagger] - Eval*", exp.mean(exp.eval_dagger) - star, tol, details),
              "dagger_oracle": _check("estimator vs re-simulation cells",
                                      exp.eval_dagger - exp.eval_dagger_oracle, tol, details)}
    if exp.eval_upsilon is not None:
        report["upsilon"] = _check("E[Eval upsilon] - Eval*", exp.mean(exp.eval_upsilon) - star, tol, details)
        # with tied indices the threshold cells can be larger than the swap groups,
        # so the cell-by-cell match is only guaranteed for distinct indices
        if exp.unique_indices:
            report["upsilon_oracle"] = _check("indexed estimator vs threshold cells",
                                              exp.eval_upsilon - exp.eval_upsilon_oracle, tol, details)
        else:
            report["upsilon_oracle"] = None
    if details:
        for w in range(len(exp.world_probs)):
            for j in np.unique(exp.cells[w]):
                sel = exp.cells[w] == j
                gap = np.abs(exp.eval_dagger[w, sel] - exp.eval_dagger_oracle[w, sel]).max()
                if gap > tol:
                    details.append(f"world {w} cell {j}: estimator/oracle gap {gap:.3e}")
        raise OracleError("unbiasedness check failed", details)
    return report


def verify_variance_identity(exp: ExhaustiveExpectation, tol: float = TOL) -> dict:
    """Compare Var(Eval) - Var(Eval dagger) with the per-cell sum-of-squares formula."""
    lhs = exp.variance(exp.eval_raw) - exp.variance(exp.eval_dagger)
    rhs = exp.partition_sum()
    details = []
    report = {"lhs": lhs.tolist(), "rhs": rhs.tolist(),
              "residual": _check("variance identity", lhs - rhs, tol, details)}
    if (rhs < -1e-12).any():
        details.append(f"negative contraction {rhs.tolist()}")
    if exp.eval_upsilon is not None:
        v_ups = exp.variance(exp.eval_upsilon)
        v_dag, v_raw = exp.variance(exp.eval_dagger), exp.variance(exp.eval_raw)
        report["var_upsilon"] = v_ups.tolist()
        if (v_ups < v_dag - 1e-12).any() or (v_ups > v_raw + 1e-12).any():
            details.append(f"Var(upsilon) {v_ups.tolist()} outside [{v_dag.tolist()}, {v_raw.tolist()}]")
    if details:
        raise OracleError("variance identity check failed", details)
    return report


# -- relation checks ----------------------------------------------------------

def relation_matrix(roster, config: TrialConfig, uniforms: np.ndarray, restrict_thresholds: bool = False,
                    arrays: Optional[RosterArrays] = None):
    """R[a, b] is True when assignment b is an observable counterfactual of assignment a.

    Uses the estimators' replay on each assignment's own simulated record.
    """
    from .estimators import observable_mask, thresholds_for
    arm_of = enumerate_assignments((config.n_per_arm,) * config.arms)
    arrays = arrays or RosterArrays(roster)
    R = np.zeros((len(arm_of), len(arm_of)), dtype=bool)
    for a, row in enumerate(arm_of):
        rec = simulate(roster, Assignment(row, (config.n_per_arm,) * config.arms), config, uniforms,
                       config.seed, arrays)
        keep = observable_mask(rec, arm_of)
        if restrict_thresholds:
            base = thresholds_for(rec, row)[0]
            keep &= (thresholds_for(rec, arm_of) == base[None]).all(axis=(1, 2))
        R[a] = keep
    return arm_of, R


def check_equivalence(R: np.ndarray) -> dict:
    """Reflexivity, symmetry, transitivity and partition property of a relation matrix."""
    reflexive = bool(np.diag(R).all())
    symmetric = bool((R == R.T).all())
    Ri = R.astype(np.int64)
    transitive = bool(((Ri @ Ri > 0) <= R).all())
    rows = {r.tobytes() for r in R}
    cells = [np.frombuffer(r, dtype=bool) for r in rows]
    cover = np.sum(cells, axis=0)
    partition = bool((cover == 1).all())
    return {"reflexive": reflexive, "symmetric": symmetric, "transitive": transitive,
            "partition": partition, "n_cells": len(cells)}


# -- IPW -----------------------------------------------------------------------

def ipw_expectation(roster, config: TrialConfig, target_arm: int, max_worlds: int = MAX_WORLDS) -> dict:
    """Exact expectation of the untrimmed exact-propensity IPW estimate versus the target's true value."""
    if config.horizon != 1:
        raise UnsupportedError("IPW requires T=1")
    probs, uniforms = enumerate_worlds(roster, 1, max_worlds)
    arm_of = enumerate_assignments((config.n_per_arm,) * config.arms)
    arrays = RosterArrays(roster)
    est = star = 0.0
    for w, p in enumerate(probs):
        for row in arm_of:
            rec = simulate(roster, Assignment(row, (config.n_per_arm,) * config.arms), config,
                           uniforms[w], config.seed, arrays)
            value = eval_ipw(rec, target_arm, trim=None, exact=True).eval_per_arm[0]
            est += p * value / len(arm_of)
            star += p * rec.rewards()[row == target_arm].sum() / len(arm_of)
    return {"ipw": est, "eval_star": star, "residual": est - star}


# -- built-in tiny instances --------------------------------------------------

def _agent(i, model, group=0, initial=1):
    return AgentSpec(i, tuple(model.to_dict().values()), model, initial, group)


DET_STAY = TransitionModel(0.0, 1.0, 1.0, 1.0)       # needs treatment to recover
DET_DECAY = TransitionModel(0.0, 0.0, 1.0, 1.0)      # engaged only when treated
COIN = TransitionModel(0.5, 0.5, 0.5, 0.5)
RESPONSIVE = TransitionModel(0.2, 0.6, 0.7, 0.6)
FRAGILE = TransitionModel(0.0, 0.3, 0.0, 0.9)


@dataclass(frozen=True)
class TinyInstance:
    name: str
    roster: tuple
    config: TrialConfig


def tiny_instances() -> list:
    """Small mixed deterministic/stochastic two-arm trials for the exact checks."""
    G, W, C = IndexPolicySpec("Greedy"), IndexPolicySpec("Whittle"), IndexPolicySpec("Control")
    RR = IndexPolicySpec("RoundRobin")
    out = []

    roster = tuple(_agent(i, m, initial=s) for i, (m, s) in enumerate(
        [(COIN, 1), (DET_STAY, 0), (COIN, 0), (DET_DECAY, 1)]))
    out.append(TinyInstance("control-vs-control", roster, TrialConfig(2, 2, (0, 0), 2, (C, C), ("ctl", "ctl"))))

    roster = tuple(_agent(i, m, initial=s) for i, (m, s) in enumerate(
        [(DET_DECAY, 1), (COIN, 1), (DET_STAY, 0), (FRAGILE, 1)]))
    out.append(TinyInstance("greedy-vs-control", roster, TrialConfig(2, 2, (1, 0), 2, (G, C), ("greedy", "ctl"))))

    roster = tuple(_agent(i, m, initial=s) for i, (m, s) in enumerate(
        [(RESPONSIVE, 0), (DET_STAY, 0), (COIN, 1), (DET_DECAY, 0), (DET_STAY, 1), (FRAGILE, 1)]))
    out.append(TinyInstance("whittle-vs-greedy", roster, TrialConfig(2, 3, (1, 1), 1, (W, G), ("whittle", "greedy"))))

    roster = tuple(_agent(i, m, group=g, initial=s) for i, (m, g, s) in enumerate(
        [(DET_DECAY, 1, 1), (COIN, 2, 0), (DET_STAY, 1, 0), (DET_DECAY, 2, 1)]))
    tt = IndexPolicySpec("TypeTarget", target_type=1)
    out.append(TinyInstance("roundrobin-vs-typetarget", roster, TrialConfig(2, 2, (1, 1), 2, (RR, tt), ("rr", "tt1"))))

    roster = tuple(_agent(i, m, initial=s) for i, (m, s) in enumerate(
        [(DET_STAY, 0), (COIN, 1), (DET_DECAY, 0), (DET_STAY, 1), (COIN, 0), (DET_DECAY, 1)]))
    out.append(TinyInstance("greedy-vs-greedy", roster, TrialConfig(2, 3, (1, 1), 1, (G, G), ("greedy", "greedy"))))

    roster = tuple(_agent(i, m, initial=s) for i, (m, s) in enumerate(
        [(DET_STAY, 0), (DET_DECAY, 1), (COIN, 1), (DET_STAY, 1), (DET_DECAY, 0), (DET_STAY, 0)]))
    out.append(TinyInstance("whittle-vs-control", roster, TrialConfig(2, 3, (2, 0), 2, (W, C), ("whittle", "ctl"))))

    distinct = (TransitionModel(0.0, 0.9, 0.5, 1.0), TransitionModel(0.0, 0.6, 0.3, 1.0),
                TransitionModel(0.25, 1.0, 1.0, 1.0), DET_DECAY)
    roster = tuple(_agent(i, m, initial=s) for i, (m, s) in enumerate(zip(distinct, (0, 1, 0, 1))))
    out.append(TinyInstance("greedy-vs-whittle-distinct", roster, TrialConfig(2, 2, (1, 1), 2, (G, W), ("greedy", "whittle"))))
    return out


def run_oracle_suite(instances=None, tol: float = TOL) -> list:
    """Run both exact checks on each instance; returns one result dict per instance."""
    results = []
    for inst in instances or tiny_instances():
        exp = exact_expectation(inst.roster, inst.config)
        entry = {"name": inst.name, "worlds": len(exp.world_probs), "assignments": exp.n_assignments}
        try:
            entry["unbiasedness"] = verify_unbiasedness(exp, tol)
            entry["variance"] = verify_variance_identity(exp, tol)
            entry["ok"] = True
        except OracleError as err:
            entry["ok"] = False
            entry["error"] = str(err)
            entry["details"] = err.details
        results.append(entry)
    return results
