"""Point-estimate metrics, posterior summaries and convergence tracking.

Metrics are computed in the reporting parameterization ``(h, F, c, b)``:
the sampled ``log_c`` column is exponentiated before it is summarized.
"""

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import CalibrationError, ConfigurationError

log = logging.getLogger(__name__)

SCORE_FLOOR = -50.0
METRIC_COLUMNS = ("method", "budget", "param", "ae", "score", "seed", "excluded", "wall_time_s")


class UndefinedScoreError(CalibrationError, ValueError):
    """The log score needs a positive posterior sd."""


def _report_names(names):
    return tuple("c" if n == "log_c" else n for n in names)


def report_values(theta, names):
    """Copy of ``theta`` with any ``log_c`` column exponentiated."""
    out = np.array(theta, dtype=float, copy=True)
    for i, n in enumerate(names):
        if n == "log_c":
            out[..., i] = np.exp(out[..., i])
    return out


def summarize(samples):
    """Per-parameter posterior mean and sd in the reporting parameterization.

    Returns
    -------
    dict
        ``{name: (mean, sd)}`` in column order, with ``log_c`` reported as ``c``.
        ``sd`` uses ``ddof=1``.
    """
    if samples.n < 2:
        raise ConfigurationError("summarize needs at least two samples")
    vals = report_values(samples.theta, samples.names)
    mean = vals.mean(axis=0)
    sd = vals.std(axis=0, ddof=1)
    return {n: (float(m), float(s)) for n, m, s in zip(_report_names(samples.names), mean, sd)}


def ae(y, mu):
    """Absolute error ``|y - mu|``."""
    return abs(float(y) - float(mu))


def log_score(y, mu, sigma):
    """Proper log score ``-log(sigma^2) - (y - mu)^2 / sigma^2``; larger is better."""
    sigma = float(sigma)
    if not sigma > 0:
        raise UndefinedScoreError(f"log score undefined for sd {sigma}")
    return -math.log(sigma**2) - (float(y) - float(mu)) ** 2 / sigma**2


@dataclass
class MetricRow:
    method: str
    budget: int
    param: str
    ae: float
    score: float
    seed: int
    excluded: bool = False
    wall_time_s: float = 0.0

    def __post_init__(self):
        self.budget, self.seed = int(self.budget), int(self.seed)
        self.ae, self.score, self.wall_time_s = float(self.ae), float(self.score), float(self.wall_time_s)
        if isinstance(self.excluded, str):
            self.excluded = self.excluded.strip().lower() == "true"
        if self.ae < 0:
            raise ConfigurationError("AE must be non-negative")


def metric_rows(samples, truth, method, budget, seed, wall_time_s=0.0):
    """One :class:`MetricRow` per parameter.

    ``truth`` is in the sampled parameterization (``log_c``, not ``c``).
    Rows whose score is undefined or below -50 are flagged ``excluded``.
    """
    summary = summarize(samples)
    truth = report_values(np.asarray(truth, float), samples.names)
    rows = []
    for (name, (mu, sd)), y in zip(summary.items(), truth):
        try:
            score = log_score(y, mu, sd)
        except UndefinedScoreError:
            score = float("nan")
        excluded = not (np.isfinite(score) and score >= SCORE_FLOOR)
        rows.append(MetricRow(method, budget, name, ae(y, mu), score, seed, excluded, wall_time_s))
    return rows


def write_metrics_csv(rows, path, append=False):
    """Write rows with the fixed column order; a header is written for new files."""
    new = not (append and os.path.exists(path) and os.path.getsize(path) > 0)
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if new:
            writer.writeheader()
        for r in rows:
            d = asdict(r)
            d["ae"], d["score"], d["wall_time_s"] = repr(r.ae), repr(r.score), repr(r.wall_time_s)
            writer.writerow(d)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [MetricRow(**{f.name: row[f.name] for f in fields(MetricRow)}) for row in csv.DictReader(fh)]


def convergence_track(runner, checkpoints, truth, method, seed=0):
    """Metric rows at each evaluation budget in ``checkpoints``.

    Parameters
    ----------
    runner : callable
        ``runner(budget, seed) -> PosteriorSamples``. If it also has a
        ``with_snapshots(budget, checkpoints, seed)`` method returning
        ``{budget: PosteriorSamples}``, one run covers every checkpoint.
    checkpoints : iterable of int
    truth : array_like
    method : str
    seed : int

    Returns
    -------
    rows : list of MetricRow
        ``4 * len(checkpoints)`` rows for the Lorenz parameters.
    events : list of str
    """
    checkpoints = sorted(set(int(b) for b in checkpoints))
    if not checkpoints:
        raise ConfigurationError("no convergence checkpoints")
    rows, events = [], []
    snaps = None
    if hasattr(runner, "with_snapshots"):
        t0 = time.perf_counter()
        snaps = runner.with_snapshots(max(checkpoints), checkpoints, seed)
        elapsed = time.perf_counter() - t0
        missing = [b for b in checkpoints if b not in snaps]
        if missing:
            events.append(f"snapshots missing for budgets {missing}; fresh runs used")
    else:
        events.append("method cannot checkpoint; fresh run per budget with a shared seed")
    for b in checkpoints:
        if snaps is not None and b in snaps:
            post, wall = snaps[b], elapsed
        else:
            t0 = time.perf_counter()
            post = runner(b, seed)
            wall = time.perf_counter() - t0
        rows.extend(metric_rows(post, truth, method, b, seed, wall))
    return rows, events
