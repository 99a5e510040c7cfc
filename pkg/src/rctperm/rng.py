"""Counter-based uniform draws keyed by (seed, stream, agent id, timestep).

Each draw is a pure function of its key, so results do not depend on the
order in which agents or trials are processed.
"""
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

STREAM_TRANSITION = 1
STREAM_CONTROL_INDEX = 2
STREAM_INITIAL_STATE = 3


def _mix(x):
    # splitmix64 finalizer; uint64 array arithmetic wraps silently
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def _u64(value):
    return np.atleast_1d(np.asarray(value, dtype=np.int64)).astype(np.uint64)


def hash_uniform(seed, stream, ids, ts):
    """Uniform floats in [0, 1) for each broadcast (id, t) pair.

    ``seed`` and ``stream`` are scalars; ``ids`` and ``ts`` broadcast against
    each other. Values are exact functions of the key.
    """
    ids, ts = np.broadcast_arrays(_u64(ids), _u64(ts))
    h = _mix(_u64(seed & 0x7FFFFFFFFFFFFFFF) + _GOLDEN)
    h = _mix(h ^ (_u64(stream) * _GOLDEN))
    h = _mix(h ^ (ids + _GOLDEN))
    h = _mix(h ^ (ts * _M1 + _GOLDEN))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
