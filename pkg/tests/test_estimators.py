import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rctperm.errors import ConfigError, DataError, UnsupportedError
from rctperm.estimators import (CounterfactualSet, build_swap_structure, enumerate_assignments, enumerate_counterfactuals,
                                estimate_propensities, eval_ipw, eval_permuted_general,
                                eval_permuted_indexed, eval_raw, exact_propensities,
                                is_observable_counterfactual, mean_eval_over, replay_actions,
                                thresholds_for)
from rctperm.model import Assignment, TrialRecord

from conftest import handmade_record, random_trial, swap_reachable
from rctperm.sim import TrialConfig, run_trial


def test_raw_sums_rewards_per_arm():
    states = [[1, 1, 0], [1, 0, 0], [0, 1, 1], [1, 1, 1]]
    actions = [[0, 0], [0, 0], [0, 0], [0, 0]]
    rep = eval_raw(handmade_record(states, actions, [0, 1, 0, 1], (0, 0)))
    assert rep.eval_per_arm == (3.0, 2.0)
    assert rep.delta == -1.0


def test_enumerate_assignments_counts():
    assert enumerate_assignments((2, 2)).shape == (6, 4)
    assert enumerate_assignments((2, 2, 2)).shape == (90, 6)
    rows = {tuple(r) for r in enumerate_assignments((1, 2))}
    assert rows == {(0, 1, 1), (1, 0, 1), (1, 1, 0)}


def test_observed_assignment_is_always_a_counterfactual():
    rec = random_trial(0, 3, 3)
    assert is_observable_counterfactual(rec, rec.assignment)
    assert rec.assignment in enumerate_counterfactuals(rec)


def test_control_vs_control_keeps_every_assignment():
    states = [[1, 1], [1, 0], [0, 1], [0, 0]]
    rec = handmade_record(states, [[0]] * 4, [0, 1, 0, 1], (0, 0))
    cset = enumerate_counterfactuals(rec)
    assert len(cset) == 6
    rep = eval_permuted_general(rec)
    assert rep.delta == 0.0
    assert rep.eval_per_arm == (1.0, 1.0)


def _opposed_greedy():
    # arm 0 ranks by [4, 3, 2, 1], arm 1 by [1, 2, 3, 4]; one treatment each
    idx_a = np.array([[4.0], [3.0], [2.0], [1.0]])
    idx_b = idx_a[::-1].copy()
    states = [[1, 1], [1, 0], [0, 1], [1, 1]]
    return handmade_record(states, [[1], [0], [1], [0]], [0, 1, 1, 0], (1, 1),
                           indices={"a": idx_a, "b": idx_b}, policy_ids=("a", "b"))


def test_unique_counterfactual_reduces_to_raw():
    rec = _opposed_greedy()
    cset = enumerate_counterfactuals(rec)
    assert len(cset) == 1
    assert eval_permuted_general(rec).eval_per_arm == eval_raw(rec).eval_per_arm


def test_replay_matches_hand_computation():
    rec = _opposed_greedy()
    # arm 0 = {2, 3}: policy a picks 2; arm 1 = {0, 1}: policy b picks 1
    out = replay_actions(rec, np.array([[1, 1, 0, 0]]))
    assert out[0, :, 0].tolist() == [0, 1, 1, 0]
    assert not is_observable_counterfactual(rec, Assignment([1, 1, 0, 0], (2, 2)))


def test_thresholds_are_min_treated_index_or_inf():
    rec = _opposed_greedy()
    tau = thresholds_for(rec, rec.assignment.arm_of)[0]
    assert tau[:, 0].tolist() == [4.0, 3.0]
    control = handmade_record([[1, 1], [1, 1]], [[0], [0]], [0, 1], (0, 0))
    assert np.isinf(thresholds_for(control, control.assignment.arm_of)).all()


def test_enumeration_cap():
    rec = random_trial(1, 5, 2)
    with pytest.raises(UnsupportedError, match="capped"):
        enumerate_counterfactuals(rec, cap=8)


def test_control_structure_is_one_swappable_group():
    # rewards 2 and 4 pool into the representative 3
    states = [[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]]
    rec = handmade_record(states, [[0] * 4] * 2, [0, 1], (0, 0))
    s = build_swap_structure(rec)
    assert s.lam.tolist() == [1, 1]
    assert s.n_supergroups == 1
    assert s.representative_rewards.tolist() == [3.0]
    assert eval_permuted_indexed(rec).eval_per_arm == (3.0, 3.0)


def test_tied_threshold_blocks_swaps():
    # each arm treats its only member, whose index equals the arm's threshold
    idx = np.array([[1.0], [2.0]])
    rec = handmade_record([[1, 0], [1, 1]], [[1], [1]], [0, 1], (1, 1), indices={"g": idx}, policy_ids=("g", "g"))
    s = build_swap_structure(rec)
    assert s.lam.tolist() == [0, 0]
    assert eval_permuted_indexed(rec).eval_per_arm == eval_raw(rec).eval_per_arm


def test_singleton_swap_groups_equal_raw():
    rec = _opposed_greedy()
    s = build_swap_structure(rec)
    # thresholds are 4 and 3: agent 1 (indices 3, 2) is below both, agent 3 (1, 4) straddles them
    assert s.lam.tolist() == [0, 1, 0, 0]
    assert [g.tolist() for g in s.groups if g.size] == [[1]]
    assert eval_permuted_indexed(rec).eval_per_arm == eval_raw(rec).eval_per_arm


def test_indexed_estimator_needs_two_arms():
    rec = random_trial(3, 2, 2, kinds=("Greedy", "Greedy", "Control"), budgets=(1, 1, 0), total_arms=3)
    with pytest.raises(UnsupportedError):
        eval_permuted_indexed(rec)


def test_missing_indices_without_specs():
    rec = handmade_record([[1, 1], [1, 1]], [[1], [0]], [0, 1], (1, 0), indices={})
    with pytest.raises(DataError):
        eval_permuted_indexed(rec)


def test_missing_indices_are_recomputed_from_specs():
    rec = random_trial(4, 3, 3)
    stripped = TrialRecord(rec.meta, rec.roster, rec.assignment, rec.states, rec.actions, {})
    assert eval_permuted_indexed(stripped).eval_per_arm == pytest.approx(eval_permuted_indexed(rec).eval_per_arm)


trials = st.tuples(st.integers(0, 100_000), st.integers(1, 4), st.integers(1, 3),
                   st.sampled_from([("Greedy", "Whittle"), ("Greedy", "Control"), ("RoundRobin", "Greedy"),
                                    ("Greedy", "Greedy"), ("Control", "Control")]))


@settings(max_examples=40)
@given(trials)
def test_indexed_matches_swap_reachable_enumeration(params):
    seed, n_per_arm, horizon, kinds = params
    rec = random_trial(seed, n_per_arm, horizon, kinds=kinds)
    cset = enumerate_counterfactuals(rec, restrict_thresholds=True)
    keep = swap_reachable(rec, cset, build_swap_structure(rec))
    brute = mean_eval_over(rec, CounterfactualSet(cset.arm_of[keep], cset.arm_sizes))
    assert eval_permuted_indexed(rec).eval_per_arm == pytest.approx(tuple(brute), abs=1e-9)


@settings(max_examples=40)
@given(st.integers(0, 100_000), st.integers(1, 6),
       st.sampled_from([("Greedy", "Whittle"), ("Greedy", "Control"), ("RoundRobin", "Greedy")]))
def test_single_step_threshold_set_is_exactly_the_swaps(seed, n_per_arm, kinds):
    rec = random_trial(seed, n_per_arm, 1, kinds=kinds)
    cset = enumerate_counterfactuals(rec, restrict_thresholds=True)
    assert swap_reachable(rec, cset, build_swap_structure(rec)).all()
    assert eval_permuted_indexed(rec).eval_per_arm == pytest.approx(tuple(mean_eval_over(rec, cset)), abs=1e-9)


def test_threshold_set_can_exceed_the_swaps_over_several_steps():
    # two swappable agents treated at different steps trade places with one treated at both and
    # one never treated: per-step counts, actions and thresholds all survive the exchange
    rec = random_trial(63, 8, 2, kinds=("Whittle", "Greedy"))
    cset = enumerate_counterfactuals(rec, restrict_thresholds=True)
    keep = swap_reachable(rec, cset, build_swap_structure(rec))
    assert (len(cset), int(keep.sum())) == (100, 40)
    row = cset.arm_of[~keep][0]
    cfg = TrialConfig(2, 8, rec.meta.budgets, 2, rec.meta.policies, rec.meta.policy_ids)
    again = run_trial(rec.roster, Assignment(row, (8, 8)), cfg, rec.meta.seed)
    assert np.array_equal(again.states, rec.states) and np.array_equal(again.actions, rec.actions)
    assert np.array_equal(thresholds_for(again, row), thresholds_for(rec, rec.assignment.arm_of))
    full_mean = mean_eval_over(rec, cset)
    assert np.abs(np.array(eval_permuted_indexed(rec).eval_per_arm) - full_mean).max() > 1.0


@settings(max_examples=40)
@given(trials)
def test_indexed_estimate_is_invariant_within_its_cell(params):
    seed, n_per_arm, horizon, kinds = params
    rec = random_trial(seed, n_per_arm, horizon, kinds=kinds)
    base = eval_permuted_indexed(rec).eval_per_arm
    for other in enumerate_counterfactuals(rec, restrict_thresholds=True).assignments:
        moved = TrialRecord(rec.meta, rec.roster, other, rec.states, rec.actions, rec.indices)
        assert eval_permuted_indexed(moved).eval_per_arm == pytest.approx(base, abs=1e-9)


@settings(max_examples=40)
@given(trials)
def test_counterfactual_sets_are_nested_and_conserve_reward(params):
    seed, n_per_arm, horizon, kinds = params
    rec = random_trial(seed, n_per_arm, horizon, kinds=kinds)
    full = enumerate_counterfactuals(rec)
    restricted = enumerate_counterfactuals(rec, restrict_thresholds=True)
    assert 1 <= len(restricted) <= len(full)
    assert all(a in full for a in restricted.assignments)
    total = rec.rewards().sum()
    assert sum(eval_permuted_general(rec).eval_per_arm) == pytest.approx(total)
    assert sum(eval_permuted_indexed(rec).eval_per_arm) == pytest.approx(total)


# -- IPW ----------------------------------------------------------------------

def _single_step(indices, actions, arm_of, budgets, policy_ids, rewards):
    states = [[1, r] for r in rewards]
    return handmade_record(states, [[a] for a in actions], arm_of, budgets,
                           indices={k: np.asarray(v, float)[:, None] for k, v in indices.items()},
                           policy_ids=policy_ids)


def test_saturated_budget_trims_to_upper_bound():
    rec = _single_step({"g": [1, 2, 3, 4]}, [1, 1, 1, 1], [0, 0, 1, 1], (2, 2), ("g", "g"), [1, 0, 1, 1])
    assert estimate_propensities(rec, 0, 200).tolist() == [0.99] * 4


def test_top_agent_is_always_treated():
    rec = _single_step({"g": [9, 2, 3, 4]}, [1, 0, 0, 1], [0, 0, 1, 1], (1, 1), ("g", "g"), [1, 0, 1, 1])
    p = estimate_propensities(rec, 0, 500)
    assert p[0] == 0.99
    assert exact_propensities(rec, 0)[0] == 1.0


def test_identical_policies_give_pooled_mean_exactly():
    rec = random_trial(8, 5, 1, kinds=("Whittle", "Whittle"), budgets=(2, 2))
    rep = eval_ipw(rec, n_resamples=300)
    pooled = rec.rewards().sum() / 2
    assert rep.eval_per_arm == (pooled, pooled)
    assert rep.diagnostics["min_weight"] == rep.diagnostics["max_weight"] == 1.0


@settings(max_examples=30)
@given(st.integers(0, 100_000), st.integers(2, 6))
def test_trimmed_weights_are_bounded(seed, n_per_arm):
    rec = random_trial(seed, n_per_arm, 1, kinds=("Greedy", "RoundRobin"))
    d = eval_ipw(rec, n_resamples=100, resample_seed=seed).diagnostics
    assert 0.01 / 0.99 - 1e-12 <= d["min_weight"] <= d["max_weight"] <= 99 + 1e-9


def test_ipw_needs_single_step():
    rec = random_trial(1, 3, 10)
    with pytest.raises(UnsupportedError, match="IPW requires T=1"):
        eval_ipw(rec)


def test_ipw_rejects_zero_resamples():
    rec = random_trial(1, 3, 1)
    with pytest.raises(ConfigError):
        eval_ipw(rec, n_resamples=0)


def test_ipw_per_arm_needs_target():
    rec = random_trial(1, 3, 1)
    with pytest.raises(ConfigError):
        eval_ipw(rec, per_arm=True)
    rep = eval_ipw(rec, target_arm=1, per_arm=True, n_resamples=50)
    assert rep.kind == "ipw_per_arm"
    assert sum(rep.eval_per_arm) / 2 == pytest.approx(eval_ipw(rec, target_arm=1, n_resamples=50).eval_per_arm[0])


def _brute_propensities(rec, arm):
    n, size, budget = rec.n_agents, rec.meta.n_per_arm, rec.meta.budgets[arm]
    idx = rec.indices[rec.meta.policy_ids[arm]][:, 0]
    out = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        hits = total = 0
        for comp in itertools.combinations(others, size - 1):
            group = sorted([i, *comp], key=lambda j: (-idx[j], j))
            treated = i in group[:budget]
            hits += treated == bool(rec.actions[i, 0])
            total += 1
        out.append(hits / total)
    return np.array(out)


@pytest.mark.parametrize("seed", range(5))
def test_exact_propensities_match_companion_enumeration(seed):
    rec = random_trial(seed, 3, 1, kinds=("Greedy", "RoundRobin"))
    for arm in range(2):
        np.testing.assert_allclose(exact_propensities(rec, arm), _brute_propensities(rec, arm), atol=1e-15)


def test_resampled_propensities_approach_exact():
    rec = random_trial(3, 4, 1, kinds=("Greedy", "Whittle"))
    est = estimate_propensities(rec, 0, 20_000, trim=None)
    np.testing.assert_allclose(est, exact_propensities(rec, 0), atol=0.02)
