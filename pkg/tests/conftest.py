import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rctperm.model import AgentSpec, Assignment, TransitionModel, TrialMeta, TrialRecord
from rctperm.policies import IndexPolicySpec
from rctperm.sim import CohortConfig, TrialConfig, generate_cohort, run_trial, sample_assignment

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def agent(i, model=TransitionModel(0.5, 0.5, 0.5, 0.5), initial=1, group=0):
    return AgentSpec(i, tuple(model.to_dict().values()), model, initial, group)


def handmade_record(states, actions, arm_of, budgets, indices=None, policy_ids=None):
    """Record built directly from matrices, for estimator arithmetic tests."""
    states = np.asarray(states)
    actions = np.asarray(actions)
    arm_of = np.asarray(arm_of)
    n, T = actions.shape
    arms = len(budgets)
    sizes = tuple(int(c) for c in np.bincount(arm_of, minlength=arms))
    roster = tuple(agent(i, initial=int(states[i, 0])) for i in range(n))
    ids = policy_ids or tuple(f"p{m}" for m in range(arms))
    meta = TrialMeta(arms, sizes[0], tuple(budgets), T, 0, ids)
    if indices is None:
        indices = {pid: np.zeros((n, T)) for pid in set(ids)}
    return TrialRecord(meta, roster, Assignment(arm_of, sizes), states, actions, indices)


def random_trial(seed, n_per_arm, horizon, kinds=("Greedy", "Whittle"), budgets=None, total_arms=2):
    rng = np.random.default_rng(seed)
    roster = generate_cohort(CohortConfig(kind="RandomMonotone", total=total_arms * n_per_arm), seed)
    specs = tuple(IndexPolicySpec(k) for k in kinds)
    ids = tuple(k.lower() for k in kinds)
    if budgets is None:
        budgets = tuple(0 if k == "Control" else int(rng.integers(1, n_per_arm + 1)) for k in kinds)
    config = TrialConfig(total_arms, n_per_arm, budgets, horizon, specs, ids)
    assignment = sample_assignment(roster, total_arms, n_per_arm, seed)
    return run_trial(roster, assignment, config, seed)


def swap_reachable(record, cset, structure):
    """Rows of ``cset`` that keep every supergroup's arm-0 head count, i.e. within-group swaps."""
    base = record.assignment.arm_of
    keep = np.ones(len(cset), dtype=bool)
    for k in range(structure.n_supergroups):
        members = structure.supergroup_of == k
        keep &= (cset.arm_of[:, members] == 0).sum(axis=1) == (base[members] == 0).sum()
    return keep


@pytest.fixture
def make_record():
    return handmade_record


ACCEPTANCE_LINES = []


def verdict(criterion, ok, detail):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
