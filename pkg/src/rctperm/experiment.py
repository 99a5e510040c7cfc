"""Monte Carlo trial harness, sample variance and n-value."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, InsufficientDataError, NumericError, RctPermError
from .estimators import (DEFAULT_RESAMPLES, ENUMERATION_CAP, TRIM, eval_ipw, eval_permuted_general,
                         eval_permuted_indexed, eval_raw)
from .model import Assignment
from .policies import RosterArrays
from .sim import CohortConfig, TrialConfig, generate_cohort, run_trial, sample_assignment

ESTIMATORS = ("raw", "permuted", "permuted_general", "ipw", "partition")
BOOTSTRAP_REPS = 4000


def sample_variance(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise InsufficientDataError(f"sample variance needs at least 2 values, got {values.size}")
    return float(np.var(values, ddof=1))


def n_value(var_raw: float, var_perm: float, mode: str = "analytic", raw_samples=None,
            seed: int = 0, reps: int = BOOTSTRAP_REPS, max_n: int = 100_000) -> int:
    """Smallest number of averaged raw trials whose variance reaches ``var_perm``.

    ``analytic`` uses var_raw / n; ``simulated`` bootstraps means of n draws
    from ``raw_samples`` and measures their sample variance.
    """
    if not var_perm > 0:
        raise NumericError("n-value needs a positive permuted variance", var_perm=var_perm)
    if mode == "analytic":
        n = max(1, math.ceil(var_raw / var_perm))
        # guard against ceil rounding up an exact ratio
        while n > 1 and var_raw / (n - 1) <= var_perm:
            n -= 1
        return n
    if mode != "simulated":
        raise ConfigError(f"unknown n-value mode {mode!r}")
    if raw_samples is None or len(raw_samples) < 2:
        raise InsufficientDataError("simulated n-value needs at least 2 raw samples")
    raw = np.asarray(raw_samples, dtype=np.float64)
    for n in range(1, max_n + 1):
        rng = np.random.default_rng([seed, n])
        picks = rng.integers(0, raw.size, size=(reps, n))
        if sample_variance(raw[picks].mean(axis=1)) <= var_perm:
            return n
    raise NumericError("simulated n-value exceeded the search limit", max_n=max_n)


@dataclass(frozen=True)
class ExperimentConfig:
    cohort: CohortConfig
    trial: TrialConfig
    estimators: tuple = ("raw", "permuted")
    n_trials: int = 100
    master_seed: int = 0
    fixed_cohort: bool = False
    enumeration_cap: int = ENUMERATION_CAP
    n_resamples: int = DEFAULT_RESAMPLES
    resample_seed: int = 0
    trim: Optional[tuple] = TRIM
    partition_samples: int = 200
    bootstrap_reps: int = BOOTSTRAP_REPS

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ConfigError(f"unknown estimators {unknown}; expected a subset of {ESTIMATORS}")
        if not self.estimators:
            raise ConfigError("at least one estimator is required")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")
        if self.cohort.size != self.trial.roster_size:
            raise ConfigError(f"cohort produces {self.cohort.size} agents but the trial needs "
                              f"{self.trial.arms} x {self.trial.n_per_arm} = {self.trial.roster_size}")


def trial_seeds(master_seed: int, trial: int) -> tuple:
    """(cohort, assignment, transition) seeds for one trial."""
    state = np.random.SeedSequence([master_seed, trial]).generate_state(3, dtype=np.uint32)
    return tuple(int(s) for s in state)


def partition_expectation(roster, config: TrialConfig, seed: int, samples: int, sample_seed: int,
                          arrays=None) -> np.ndarray:
    """Mean per-arm Eval over random assignments sharing one set of transition draws.

    A diagnostic rather than an estimator: it re-runs the simulator.
    """
    arrays = arrays or RosterArrays(roster)
    total = np.zeros(config.arms)
    for k in range(samples):
        a = sample_assignment(len(roster), config.arms, config.n_per_arm, [sample_seed, k])
        rec = run_trial(roster, a, config, seed, arrays)
        r = rec.rewards()
        total += [r[a.arm_of == m].sum() for m in range(config.arms)]
    return total / samples


def _apply(name: str, record, cfg: ExperimentConfig, roster, seeds, arrays):
    if name == "raw":
        return eval_raw(record).eval_per_arm
    if name == "permuted":
        return eval_permuted_indexed(record).eval_per_arm
    if name == "permuted_general":
        return eval_permuted_general(record, cfg.enumeration_cap).eval_per_arm
    if name == "ipw":
        return eval_ipw(record, None, cfg.n_resamples, cfg.resample_seed, cfg.trim).eval_per_arm
    return tuple(partition_expectation(roster, cfg.trial, seeds[2], cfg.partition_samples, seeds[1], arrays))


def run_one_trial(cfg: ExperimentConfig, trial: int, cohort=None) -> list:
    """Rows ``(trial, seed, estimator, evals, error)`` for one trial index."""
    seeds = trial_seeds(cfg.master_seed, trial)
    roster = cohort if cohort is not None else generate_cohort(cfg.cohort, seeds[0])
    arrays = RosterArrays(roster)
    assignment = sample_assignment(roster, cfg.trial.arms, cfg.trial.n_per_arm, seeds[1])
    record = run_trial(roster, assignment, cfg.trial, seeds[2], arrays)
    rows = []
    for name in cfg.estimators:
        try:
            rows.append((trial, seeds[2], name, tuple(float(v) for v in _apply(name, record, cfg, roster, seeds, arrays)), ""))
        except RctPermError as exc:
            rows.append((trial, seeds[2], name, (), f"{type(exc).__name__}: {exc}"))
    return rows


def _fixed_cohort(cfg: ExperimentConfig):
    if not cfg.fixed_cohort:
        return None
    return generate_cohort(cfg.cohort, int(np.random.SeedSequence([cfg.master_seed]).generate_state(1)[0]))


def _worker(args):
    cfg, trial, cohort = args
    return run_one_trial(cfg, trial, cohort)


@dataclass
class ExperimentTable:
    rows: list
    estimators: tuple
    arms: int
    summary: dict = field(default_factory=dict)

    def deltas(self, estimator: str) -> np.ndarray:
        return np.array([ev[1] - ev[0] for _, _, name, ev, err in self.rows
                         if name == estimator and not err and len(ev) >= 2])

    def evals(self, estimator: str) -> np.ndarray:
        return np.array([ev for _, _, name, ev, err in self.rows if name == estimator and not err])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["trial", "seed", "estimator"] + [f"eval_{m}" for m in range(self.arms)] + ["delta", "error"])
        for trial, seed, name, ev, err in self.rows:
            if err:
                writer.writerow([trial, seed, name] + [""] * self.arms + ["", err])
            else:
                delta = repr(ev[1] - ev[0]) if len(ev) >= 2 else ""
                writer.writerow([trial, seed, name] + [repr(v) for v in ev] + [delta, ""])
        return buf.getvalue()


def summarize(table: ExperimentTable, bootstrap_reps: int = BOOTSTRAP_REPS, seed: int = 0) -> dict:
    out = {}
    raw_var = None
    if "raw" in table.estimators:
        d = table.deltas("raw")
        raw_var = sample_variance(d) if d.size >= 2 else None
    for name in table.estimators:
        d = table.deltas(name)
        ev = table.evals(name)
        entry = {"n_ok": int(d.size), "n_errors": sum(1 for r in table.rows if r[2] == name and r[4])}
        if ev.size:
            entry["mean_eval"] = ev.mean(axis=0).tolist()
        if d.size:
            entry["mean_delta"] = float(d.mean())
        if d.size >= 2:
            var = sample_variance(d)
            entry["var_delta"] = var
            entry["se_delta"] = math.sqrt(var / d.size)
            if raw_var is not None and name != "raw":
                entry["var_ratio_to_raw"] = var / raw_var if raw_var > 0 else None
                if var > 0:
                    entry["n_value_analytic"] = n_value(raw_var, var, "analytic")
                    entry["n_value_simulated"] = n_value(raw_var, var, "simulated", table.deltas("raw"),
                                                         seed, bootstrap_reps)
        out[name] = entry
    return out


def run_mc_experiment(cfg: ExperimentConfig, workers: int = 1) -> ExperimentTable:
    """Run ``cfg.n_trials`` independent trials and apply every estimator to each.

    Output is identical for any ``workers`` count: trials are keyed by index
    and results are gathered in index order.
    """
    cohort = _fixed_cohort(cfg)
    jobs = [(cfg, i, cohort) for i in range(cfg.n_trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_worker, jobs, chunksize=max(1, cfg.n_trials // (4 * workers))))
    else:
        chunks = [_worker(job) for job in jobs]
    rows = [row for chunk in chunks for row in chunk]
    table = ExperimentTable(rows, cfg.estimators, cfg.trial.arms)
    table.summary = summarize(table, cfg.bootstrap_reps, cfg.master_seed)
    return table
