"""JSON file formats for trial records and estimate reports."""
from __future__ import annotations

import gzip
import io
import json
import math
from pathlib import Path

import jsonschema
import numpy as np

from .errors import DataError
from .model import AgentSpec, Assignment, EstimateReport, TrialMeta, TrialRecord
from .policies import IndexPolicySpec

_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_BIT = {"enum": [0, 1]}

TRIAL_RECORD_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "TrialRecord",
    "type": "object",
    "additionalProperties": False,
    "required": ["meta", "roster", "assignment", "states", "actions"],
    "properties": {
        "meta": {
            "type": "object",
            "additionalProperties": False,
            "required": ["arms", "n_per_arm", "budgets", "horizon", "policy_ids"],
            "properties": {
                "arms": {"type": "integer", "minimum": 1},
                "n_per_arm": {"type": "integer", "minimum": 0},
                "budgets": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "horizon": {"type": "integer", "minimum": 1},
                "seed": {"type": ["integer", "null"]},
                "policy_ids": {"type": "array", "items": {"type": "string"}},
                "policies": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["kind"],
                        "properties": {
                            "kind": {"enum": ["Greedy", "Whittle", "RoundRobin", "Control", "TypeTarget"]},
                            "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                            "tol": {"type": "number", "exclusiveMinimum": 0},
                            "target_type": {"type": "integer"},
                        },
                    },
                },
            },
        },
        "roster": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "observable_features", "true_model"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "observable_features": {"type": "array", "items": {"type": "number"}, "minItems": 4},
                    "true_model": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["p_pass_01", "p_pass_11", "p_act_01", "p_act_11"],
                        "properties": {k: _PROB for k in ("p_pass_01", "p_pass_11", "p_act_01", "p_act_11")},
                    },
                    "initial_state": _BIT,
                    "group": {"type": "integer"},
                },
            },
        },
        "assignment": {
            "type": "object",
            "additionalProperties": False,
            "required": ["arm_of", "arm_sizes"],
            "properties": {
                "arm_of": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "arm_sizes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
        "states": {"type": "array", "items": {"type": "array", "items": _BIT}},
        "actions": {"type": "array", "items": {"type": "array", "items": _BIT}},
        "indices": {
            "type": "object",
            "additionalProperties": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        },
    },
}

ESTIMATE_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EstimateReport",
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "eval_per_arm", "delta", "diagnostics"],
    "properties": {
        "kind": {"type": "string"},
        "eval_per_arm": {"type": "array", "items": {"type": "number"}},
        "delta": {"type": ["number", "null"]},
        "diagnostics": {"type": "object"},
    },
}


def jsonable(value):
    """Convert numpy values to plain JSON types; non-finite floats become None."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def dumps(obj) -> str:
    # json writes floats with repr, the shortest string that round-trips exactly
    return json.dumps(jsonable(obj), separators=(",", ":"), allow_nan=False) + "\n"


def write_text(path, text: str) -> None:
    path = Path(path)
    data = text.encode("utf-8")
    if path.suffix == ".gz":
        buf = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(data)
        data = buf.getvalue()
    path.write_bytes(data)


def read_text(path) -> str:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data.decode("utf-8")


def _location(error) -> str:
    out = ""
    for part in error.absolute_path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def validate_schema(document, schema) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(document), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        first = errors[0]
        raise DataError(f"{_location(first)}: {first.message}")


def record_to_dict(record: TrialRecord) -> dict:
    meta = record.meta
    out = {
        "meta": {
            "arms": meta.arms,
            "n_per_arm": meta.n_per_arm,
            "budgets": list(meta.budgets),
            "horizon": meta.horizon,
            "seed": meta.seed,
            "policy_ids": list(meta.policy_ids),
        },
        "roster": [agent.to_dict() for agent in record.roster],
        "assignment": {"arm_of": record.assignment.arm_of.tolist(),
                       "arm_sizes": list(record.assignment.arm_sizes)},
        "states": record.states.tolist(),
        "actions": record.actions.tolist(),
        "indices": {pid: mat.tolist() for pid, mat in record.indices.items()},
    }
    if meta.policies:
        out["meta"]["policies"] = [p.to_dict() for p in meta.policies]
    return out


def _matrix(rows, name, width, dtype):
    if any(len(r) != width for r in rows):
        bad = next(i for i, r in enumerate(rows) if len(r) != width)
        raise DataError(f"{name}[{bad}] has {len(rows[bad])} entries, expected {width}")
    return np.array(rows, dtype=dtype).reshape(len(rows), width)


def record_from_dict(doc) -> TrialRecord:
    validate_schema(doc, TRIAL_RECORD_SCHEMA)
    m = doc["meta"]
    try:
        policies = tuple(IndexPolicySpec.from_dict(p) for p in m.get("policies", []))
        meta = TrialMeta(m["arms"], m["n_per_arm"], tuple(m["budgets"]), m["horizon"], m.get("seed"),
                         tuple(m["policy_ids"]), policies)
        roster = tuple(AgentSpec.from_dict(a) for a in doc["roster"])
        assignment = Assignment(doc["assignment"]["arm_of"], tuple(doc["assignment"]["arm_sizes"]))
    except DataError:
        raise
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    T = meta.horizon
    states = _matrix(doc["states"], "states", T + 1, np.uint8)
    actions = _matrix(doc["actions"], "actions", T, np.uint8)
    indices = {pid: _matrix(rows, f"indices[{pid!r}]", T, np.float64)
               for pid, rows in doc.get("indices", {}).items()}
    return TrialRecord(meta, roster, assignment, states, actions, indices)


def save_trial_record(record: TrialRecord, path) -> None:
    write_text(path, dumps(record_to_dict(record)))


def load_trial_record(path) -> TrialRecord:
    try:
        doc = json.loads(read_text(path))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from exc
    return record_from_dict(doc)


def report_to_dict(report: EstimateReport) -> dict:
    return jsonable(report.to_dict())


def save_report(report: EstimateReport, path) -> None:
    write_text(path, dumps(report_to_dict(report)))


def load_report(path) -> EstimateReport:
    doc = json.loads(read_text(path))
    validate_schema(doc, ESTIMATE_REPORT_SCHEMA)
    return EstimateReport(doc["kind"], doc["eval_per_arm"], doc["delta"], doc["diagnostics"])
