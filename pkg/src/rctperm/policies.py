"""Index-based allocation policies.

Every policy scores each agent from that agent's own features and history
only, then treats the top-B scorers of an arm. Ties are broken by lower
agent id.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .model import AgentSpec, TransitionModel
from .rng import STREAM_CONTROL_INDEX, hash_uniform

KINDS = ("Greedy", "Whittle", "RoundRobin", "Control", "TypeTarget")

WHITTLE_BRACKET = 2.0
WHITTLE_VI_TOL = 1e-9
WHITTLE_VI_CAP = 100_000
_BRACKET_LIMIT = 1e4
TYPE_TARGET_EPS = 1e-9


@dataclass(frozen=True)
class IndexPolicySpec:
    kind: str
    beta: float = 0.95
    target_type: Optional[int] = None
    tol: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.tol > 0.0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if self.kind == "TypeTarget" and self.target_type is None:
            raise ConfigError("TypeTarget policy needs target_type")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "beta": self.beta, "tol": self.tol}
        if self.target_type is not None:
            out["target_type"] = self.target_type
        return out

    @classmethod
    def from_dict(cls, data) -> "IndexPolicySpec":
        return cls(
            kind=data["kind"],
            beta=data.get("beta", 0.95),
            target_type=data.get("target_type"),
            tol=data.get("tol", 1e-6),
        )


# -- Whittle index -----------------------------------------------------------

def _subsidized_advantage(p, states, lam, beta, v0):
    """Q(active) - Q(passive) at ``states`` after value iteration.

    ``p`` has shape (k, 2, 2) indexed [problem, state, action]; ``lam`` and
    ``states`` have shape (k,). ``v0`` is a (k, 2) warm start.
    """
    r = np.array([0.0, 1.0])
    v = v0
    lam_col = lam[:, None]
    for _ in range(WHITTLE_VI_CAP):
        ev = p * v[:, 1, None, None] + (1.0 - p) * v[:, 0, None, None]
        q_pass = r + lam_col + beta * ev[:, :, 0]
        q_act = r + beta * ev[:, :, 1]
        v_new = np.maximum(q_pass, q_act)
        if np.max(np.abs(v_new - v)) < WHITTLE_VI_TOL:
            v = v_new
            break
        v = v_new
    else:
        raise NumericError("value iteration did not converge", cap=WHITTLE_VI_CAP, beta=beta)
    ev = p * v[:, 1, None, None] + (1.0 - p) * v[:, 0, None, None]
    rows = np.arange(len(states))
    q_pass = states + lam + beta * ev[rows, states, 0]
    q_act = states + beta * ev[rows, states, 1]
    return q_act - q_pass, v


def whittle_indices(p, states, beta=0.95, tol=1e-6):
    """Vectorised Whittle index by bisection on the passive subsidy.

    Parameters
    ----------
    p : array, shape (k, 2, 2)
        Estimated probability of moving to state 1, indexed [problem, state, action].
    states : array of int, shape (k,)
        State at which each index is evaluated.
    """
    p = np.asarray(p, dtype=np.float64)
    states = np.asarray(states, dtype=np.int64)
    k = len(states)
    lo = np.full(k, -WHITTLE_BRACKET)
    hi = np.full(k, WHITTLE_BRACKET)
    v = np.zeros((k, 2))
    # widen the bracket until active is preferred at lo and passive at hi
    while True:
        g_lo, _ = _subsidized_advantage(p, states, lo, beta, v)
        g_hi, _ = _subsidized_advantage(p, states, hi, beta, v)
        bad_lo, bad_hi = g_lo < 0, g_hi > 0
        if not (bad_lo.any() or bad_hi.any()):
            break
        if max(np.max(hi), -np.min(lo)) > _BRACKET_LIMIT:
            raise NumericError("no subsidy bracket found", lo=float(lo.min()), hi=float(hi.max()))
        lo = np.where(bad_lo, 2.0 * lo, lo)
        hi = np.where(bad_hi, 2.0 * hi, hi)
    # a problem stops once its own bracket is narrow enough, so its result
    # does not depend on which other problems share the batch
    while True:
        open_ = hi - lo > tol
        if not open_.any():
            break
        mid = 0.5 * (lo + hi)
        g, v = _subsidized_advantage(p, states, mid, beta, v)
        active_better = g > 0
        lo = np.where(open_ & active_better, mid, lo)
        hi = np.where(open_ & ~active_better, mid, hi)
    return 0.5 * (lo + hi)


def whittle_index(model: TransitionModel, state: int, beta: float = 0.95, tol: float = 1e-6) -> float:
    """Passive subsidy at which both actions are equally good in ``state``."""
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"beta must lie in (0, 1), got {beta}")
    if not tol > 0.0:
        raise ConfigError(f"tol must be positive, got {tol}")
    return float(whittle_indices(model.as_array()[None], np.array([state]), beta, tol)[0])


# -- scalar index functions ---------------------------------------------------

def greedy_index(model: TransitionModel, state: int) -> float:
    """Myopic gain in the chance of being in state 1 next step."""
    return model.p_next_one(state, 1) - model.p_next_one(state, 0)


def control_index(agent_id: int, t: int) -> float:
    return float(hash_uniform(0, STREAM_CONTROL_INDEX, agent_id, t)[0])


def round_robin_index(agent_id: int, action_history: Sequence[int], t: int, arm_size: int) -> float:
    """Priority ``arm_size - agent_id`` pushed down by ``arm_size`` per past treatment."""
    return float(arm_size - agent_id - arm_size * int(np.sum(action_history)))


def type_target_index(agent: AgentSpec, target_type: int, max_id: int) -> float:
    hit = 1.0 if agent.group == target_type else 0.0
    return hit + TYPE_TARGET_EPS * (max_id - agent.id)


def compute_index(spec: IndexPolicySpec, agent: AgentSpec, own_state_history, own_action_history,
                  t: int, roster_size: Optional[int] = None) -> float:
    """Index of ``agent`` at timestep ``t`` (1-based) from its own history.

    ``own_state_history`` holds s_0..s_{t-1}; ``own_action_history`` holds
    a_1..a_{t-1}. ``roster_size`` sets the round-robin period and the
    TypeTarget tie-break scale and is required for those two kinds.
    """
    states = list(own_state_history)
    actions = list(own_action_history)
    if len(states) != t or len(actions) != t - 1:
        raise ConfigError(f"history lengths {len(states)}/{len(actions)} inconsistent with t={t}")
    if roster_size is None and spec.kind in ("RoundRobin", "TypeTarget"):
        raise ConfigError(f"{spec.kind} index needs roster_size")
    size = roster_size
    current = int(states[-1])
    if spec.kind == "Greedy":
        return greedy_index(agent.estimated_model, current)
    if spec.kind == "Whittle":
        return whittle_index(agent.estimated_model, current, spec.beta, spec.tol)
    if spec.kind == "Control":
        return control_index(agent.id, t)
    if spec.kind == "RoundRobin":
        return round_robin_index(agent.id, actions, t, size)
    if spec.kind == "TypeTarget":
        return type_target_index(agent, spec.target_type, size - 1)
    raise ConfigError(f"unknown policy kind {spec.kind!r}")


# -- allocation ---------------------------------------------------------------

def top_b(ids: np.ndarray, values: np.ndarray, budget: int) -> np.ndarray:
    """Boolean mask of the ``budget`` largest values, lower id winning ties."""
    if budget < 0:
        raise ConfigError(f"budget must be non-negative, got {budget}")
    mask = np.zeros(len(ids), dtype=bool)
    if budget and len(ids):
        order = np.lexsort((ids, -np.asarray(values)))
        mask[order[:budget]] = True
    return mask


def allocate(indices_at_t, budget: int) -> list:
    """Binary action list for ``[(agent_id, index), ...]`` in input order."""
    if budget < 0:
        raise ConfigError(f"budget must be non-negative, got {budget}")
    if not indices_at_t:
        return []
    ids = np.array([i for i, _ in indices_at_t], dtype=np.int64)
    values = np.array([v for _, v in indices_at_t], dtype=np.float64)
    return top_b(ids, values, budget).astype(int).tolist()


# -- batch evaluation used by the simulator -----------------------------------

class RosterArrays:
    """Column view of a roster for vectorised index evaluation."""

    def __init__(self, roster: Sequence[AgentSpec]):
        self.roster = tuple(roster)
        self.ids = np.array([a.id for a in roster], dtype=np.int64)
        self.groups = np.array([a.group for a in roster], dtype=np.int64)
        self.size = len(roster)
        est = np.array([a.observable_features[:4] for a in roster], dtype=np.float64).reshape(-1, 4)
        # [agent, state, action]; feature order is pass_01, pass_11, act_01, act_11
        self.p_hat = np.stack([est[:, [0, 2]], est[:, [1, 3]]], axis=1)
        self._whittle = {}

    def whittle_table(self, beta: float, tol: float) -> np.ndarray:
        """(agents, 2) Whittle index per state, computed once per unique model."""
        key = (beta, tol)
        if key not in self._whittle:
            flat = self.p_hat.reshape(self.size, 4)
            uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
            inverse = np.asarray(inverse).reshape(-1)
            pu = uniq.reshape(-1, 2, 2)
            k = len(uniq)
            both = whittle_indices(np.concatenate([pu, pu]), np.repeat([0, 1], k), beta, tol)
            table = np.stack([both[:k], both[k:]], axis=1)
            self._whittle[key] = table[inverse]
        return self._whittle[key]


def batch_indices(spec: IndexPolicySpec, arrays: RosterArrays, current_states: np.ndarray,
                  treated_counts: np.ndarray, t: int) -> np.ndarray:
    """Index of every agent at timestep ``t`` given current states and past treatment counts."""
    rows = np.arange(arrays.size)
    s = np.asarray(current_states, dtype=np.int64)
    if spec.kind == "Greedy":
        return arrays.p_hat[rows, s, 1] - arrays.p_hat[rows, s, 0]
    if spec.kind == "Whittle":
        return arrays.whittle_table(spec.beta, spec.tol)[rows, s]
    if spec.kind == "Control":
        return hash_uniform(0, STREAM_CONTROL_INDEX, arrays.ids, t)
    if spec.kind == "RoundRobin":
        n = arrays.size
        return (n - arrays.ids - n * np.asarray(treated_counts)).astype(np.float64)
    if spec.kind == "TypeTarget":
        hit = (arrays.groups == spec.target_type).astype(np.float64)
        return hit + TYPE_TARGET_EPS * (arrays.size - 1 - arrays.ids)
    raise ConfigError(f"unknown policy kind {spec.kind!r}")
