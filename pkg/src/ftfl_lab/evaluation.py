"""Run records and the aggregate statistics used to compare algorithms."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRIC_COLUMNS = ("step", "eval_return", "q_mean", "reward_bias", "variance_diag", "alpha", "critic_loss")
AGGREGATE_COLUMNS = ("algo", "env", "iqm", "ci_low", "ci_high", "pct_of_sac")


def _trim(n: int) -> int:
    return n // 4


def iqm(values) -> float:
    """Interquartile mean: sort, drop ``floor(n/4)`` from each end, average."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("iqm of an empty list")
    k = _trim(x.size)
    return float(x[k:x.size - k].mean())


def _iqm_rows(samples: np.ndarray) -> np.ndarray:
    s = np.sort(samples, axis=1)
    k = _trim(s.shape[1])
    return s[:, k:s.shape[1] - k].mean(axis=1)


def bootstrap_ci(values, n_resamples: int = 2000, level: float = 0.95, rng: np.random.Generator | None = None):
    """Percentile bootstrap interval for the IQM."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("bootstrap_ci needs at least two values")
    rng = np.random.default_rng(0) if rng is None else rng
    stats = _iqm_rows(x[rng.integers(0, x.size, size=(n_resamples, x.size))])
    tail = 100.0 * (1.0 - level) / 2.0
    low = float(np.percentile(stats, tail, method="lower"))
    high = float(np.percentile(stats, 100.0 - tail, method="higher"))
    return low, high


def percent_of_baseline(x: float, baseline: float) -> float:
    if abs(baseline) < 1e-9:
        raise ZeroDivisionError("baseline is zero; percent of baseline is undefined")
    return 100.0 * x / baseline


def critic_probe(agent, states, rng: np.random.Generator) -> float:
    """Mean over states of ``min(Q1, Q2)(s, a)`` with ``a`` drawn from the actor."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ValueError("critic probe needs at least one state")
    a, _ = agent.actor_sample(states, rng)
    return float(agent.q_values(states, a).min(axis=0).mean())


@dataclass
class RunRecord:
    algo: str
    env: str
    seed: int
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    @property
    def steps(self) -> np.ndarray:
        return self.column("step")

    def append(self, row: dict) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("record steps must be strictly increasing")
        self.rows.append(row)


def final_performance(record: RunRecord, window: int = 10) -> float:
    returns = record.column("eval_return")
    if window < 1 or returns.size < window:
        raise ValueError(f"need {window} evaluation points, record has {returns.size}")
    return iqm(returns[-window:])


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


class MetricsWriter:
    """Appends metric rows to a CSV and flushes each one (partial runs survive)."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(",".join(METRIC_COLUMNS) + "\n")
        self._fh.flush()

    def write(self, row: dict) -> None:
        self._fh.write(",".join(format_value(row[c]) for c in METRIC_COLUMNS) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_run_name(stem: str) -> tuple[str, str, int]:
    """``<algo>_<env>_s<seed>`` -> parts; env names may contain underscores."""
    algo, _, rest = stem.partition("_")
    env, _, seed = rest.rpartition("_s")
    if not algo or not env or not seed.isdigit():
        raise ValueError(f"not a run file name: {stem!r}")
    return algo, env, int(seed)


def read_metrics_csv(path) -> RunRecord:
    path = Path(path)
    algo, env, seed = parse_run_name(path.stem)
    record = RunRecord(algo, env, seed)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for raw in reader:
            row = {k: float(v) for k, v in raw.items()}
            row["step"] = int(row["step"])
            record.append(row)
    return record


@dataclass
class AggregateRow:
    algo: str
    env: str
    iqm: float
    ci_low: float
    ci_high: float
    pct_of_sac: float


def aggregate(records: list[RunRecord], window: int = 10, n_resamples: int = 2000,
              rng: np.random.Generator | None = None) -> list[AggregateRow]:
    """Final-window IQM across seeds per (algo, env), with CI and percent of SAC."""
    rng = np.random.default_rng(0) if rng is None else rng
    groups: dict[tuple[str, str], list[float]] = {}
    for rec in records:
        groups.setdefault((rec.algo, rec.env), []).append(final_performance(rec, window))
    centre = {key: iqm(vals) for key, vals in groups.items()}
    out = []
    for (algo, env), vals in sorted(groups.items()):
        m = centre[(algo, env)]
        if len(vals) >= 2:
            low, high = bootstrap_ci(vals, n_resamples, 0.95, rng)
            low, high = min(low, m), max(high, m)
        else:
            low = high = m
        base = centre.get(("sac", env))
        pct = percent_of_baseline(m, base) if base is not None and abs(base) >= 1e-9 else float("nan")
        out.append(AggregateRow(algo, env, m, low, high, pct))
    return out


def write_aggregate_csv(path, rows: list[AggregateRow]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(AGGREGATE_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join([r.algo, r.env] + [format_value(getattr(r, c)) for c in AGGREGATE_COLUMNS[2:]]) + "\n")


CONTACT_COLUMNS = ("variant", "ftfl_iqm", "sac_iqm", "gap")


def contact_gap_report(rows: list[AggregateRow], env: str = "contact_hopper_lite") -> list[dict]:
    """SAC-minus-FTFL gap with and without the contact channel.

    ``gap`` is how far FTFL trails SAC; a smaller gap without the contact
    signal means the discontinuous channel was hurting the model.
    """
    by = {(r.algo, r.env): r.iqm for r in rows}
    out = []
    for variant, name in (("contact", env), ("no-contact", f"{env}-nocontact")):
        f, s = by.get(("ftfl", name), float("nan")), by.get(("sac", name), float("nan"))
        out.append({"variant": variant, "ftfl_iqm": f, "sac_iqm": s, "gap": s - f})
    return out
