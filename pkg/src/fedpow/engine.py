"""FedAvg with partial participation.

Each round: resolve the available pool, select clients, broadcast the global
model, run ``tau`` local SGD steps per selected client, aggregate, record.
Randomness is derived from ``(seed, round, purpose, ...)`` so results do not
depend on how the local updates are scheduled across threads.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .selection import (
    AvailabilityModel,
    SelectionConfig,
    SelectionState,
    format_ids,
    parse_ids,
    report_round_loss,
    select,
)

logger = logging.getLogger(__name__)

# purpose tags for derived random streams
_AVAIL, _SELECT, _LOCAL = 0, 1, 2

METRICS_COLUMNS = ("round", "t", "global_loss", "eval_metric", "selected_ids", "lr")


class DivergenceError(RuntimeError):
    def __init__(self, round_index, client, message="non-finite model parameters"):
        self.round_index = round_index
        self.client = client
        where = f"round {round_index}" + ("" if client is None else f", client {client}")
        super().__init__(f"{message} ({where})")


@dataclass(frozen=True)
class LRSchedule:
    """Learning-rate schedule.

    fixed:    eta
    decaying: beta / (t + gamma), t = global local-iteration index
    step:     eta * factor**(number of milestones <= round)
    """

    kind: str = "fixed"
    eta: float = 0.01
    beta: float | None = None
    gamma: float | None = None
    milestones: tuple = ()
    factor: float = 0.5

    def __post_init__(self):
        if self.kind not in ("fixed", "decaying", "step"):
            raise ValueError(f"unknown learning-rate schedule {self.kind!r}")
        if self.kind == "decaying":
            if not (self.beta and self.beta > 0 and self.gamma and self.gamma > 0):
                raise ValueError("decaying schedule needs beta > 0 and gamma > 0")
        elif self.eta <= 0:
            raise ValueError("eta must be positive")
        object.__setattr__(self, "milestones", tuple(sorted(int(r) for r in self.milestones)))

    @classmethod
    def theorem(cls, L, mu):
        """eta_t = 1 / (mu (t + 4L/mu))."""
        return cls(kind="decaying", beta=1.0 / mu, gamma=4.0 * L / mu)

    def __call__(self, t, round_index):
        if self.kind == "fixed":
            return self.eta
        if self.kind == "decaying":
            return self.beta / (t + self.gamma)
        n = sum(1 for r in self.milestones if round_index >= r)
        return self.eta * self.factor ** n


@dataclass(frozen=True)
class RunConfig:
    task: object
    selection: SelectionConfig
    tau: int = 1
    rounds: int = 1
    batch_size: int | None = None
    lr: LRSchedule = field(default_factory=LRSchedule)
    aggregation: str = "simple"
    availability: AvailabilityModel = field(default_factory=AvailabilityModel)
    seed: int = 0
    w0: np.ndarray | None = None
    eval_fn: object = None
    threads: int = 1

    def __post_init__(self):
        if self.tau < 1 or self.rounds < 1:
            raise ValueError("tau and rounds must be >= 1")
        if self.aggregation not in ("simple", "weighted"):
            raise ValueError("aggregation must be 'simple' or 'weighted'")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.selection.check(self.task.n_clients)


@dataclass
class RoundRecord:
    round: int
    t: int
    selected: tuple
    global_loss: float
    lr: float
    reported_losses: tuple = ()
    eval_metric: float | None = None


def stream(seed, *key):
    return np.random.default_rng([int(seed), *map(int, key)])


def local_sgd(w_start, task, k, tau, schedule, batch_size, rng, t0=0, round_index=0):
    """Run ``tau`` SGD steps on client ``k``.

    Returns the final local model and the mean of the per-step mini-batch
    losses (each evaluated at the iterate the step starts from).
    """
    w = np.array(w_start, dtype=float)
    if w.shape != (task.dim,):
        raise ValueError(f"model has shape {w.shape}, task expects ({task.dim},)")
    total = 0.0
    for step in range(tau):
        eta = schedule(t0 + step, round_index)
        with np.errstate(over="ignore", invalid="ignore"):
            g, batch_loss = task.stochastic_gradient(k, w, batch_size, rng)
            w = w - eta * g
        total += batch_loss
        if not np.all(np.isfinite(w)):
            raise DivergenceError(round_index, k)
    return w, total / tau


def aggregate(models, weights=None):
    models = [np.asarray(m, dtype=float) for m in models]
    if not models:
        raise ValueError("nothing to aggregate")
    if len({m.shape for m in models}) != 1:
        raise ValueError("models differ in dimension")
    stack = np.stack(models)
    if weights is None:
        return stack.mean(axis=0)
    q = np.asarray(weights, dtype=float)
    if q.shape != (len(models),):
        raise ValueError("need one weight per model")
    if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights must be nonnegative and sum to 1 (sum={q.sum():.12g})")
    return q @ stack


def averaging_weights(p, selected, m):
    """q_k = p_k K / m for the selected clients."""
    p = np.asarray(p, dtype=float)
    return p[np.asarray(selected)] * len(p) / m


def run_training(config, callback=None):
    task = config.task
    K, tau = task.n_clients, config.tau
    sel = config.selection
    w = np.zeros(task.dim) if config.w0 is None else np.array(config.w0, dtype=float)
    state = SelectionState.initial(K) if sel.kind == "rpow_d" else None
    pool_exec = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    records = []
    try:
        for r in range(config.rounds):
            t0 = r * tau
            pool = config.availability.pool(r, K, stream(config.seed, r, _AVAIL))
            selected = select(sel, task, w, pool, stream(config.seed, r, _SELECT), state)

            jobs = []
            copies = {}
            for k in selected:
                c = copies.get(k, 0)
                copies[k] = c + 1
                jobs.append((int(k), c))

            def work(job, w=w, t0=t0, r=r):
                k, c = job
                return local_sgd(w, task, k, tau, config.lr, config.batch_size,
                                 stream(config.seed, r, _LOCAL, k, c), t0=t0, round_index=r)

            results = list(pool_exec.map(work, jobs)) if pool_exec else [work(j) for j in jobs]
            models = [res[0] for res in results]
            weights = None
            if config.aggregation == "weighted":
                weights = averaging_weights(task.p, selected, sel.m)
            w = aggregate(models, weights)

            reported = tuple(float(res[1]) for res in results)
            if state is not None:
                for (k, _), loss in zip(jobs, reported):
                    report_round_loss(state, k, loss)

            gl = task.global_loss(w)
            if not np.isfinite(gl):
                raise DivergenceError(r, None, "global loss is not finite")
            rec = RoundRecord(
                round=r, t=t0 + tau, selected=tuple(int(k) for k in selected),
                global_loss=gl, lr=float(config.lr(t0, r)), reported_losses=reported,
                eval_metric=None if config.eval_fn is None else float(config.eval_fn(w)),
            )
            records.append(rec)
            # a callback returning True ends training after this round
            if callback is not None and callback(rec, w) is True:
                break
    finally:
        if pool_exec:
            pool_exec.shutdown()
    return records


def rounds_to_target(records, target, metric="global_loss"):
    """First 0-based round index meeting the target, or None.

    ``global_loss`` means loss <= target; ``eval`` means eval_metric >= target.
    """
    if not records:
        raise ValueError("no records")
    for rec in records:
        if metric == "global_loss" and rec.global_loss <= target:
            return rec.round
        if metric == "eval" and rec.eval_metric is not None and rec.eval_metric >= target:
            return rec.round
    return None


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_metrics(records, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for rec in records:
            writer.writerow([rec.round, rec.t, _fmt(rec.global_loss), _fmt(rec.eval_metric),
                             format_ids(rec.selected), _fmt(rec.lr)])


def read_metrics(path):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(METRICS_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for row in reader:
            out.append(RoundRecord(
                round=int(row["round"]), t=int(row["t"]),
                selected=tuple(parse_ids(row["selected_ids"])),
                global_loss=float(row["global_loss"]), lr=float(row["lr"]),
                eval_metric=float(row["eval_metric"]) if row["eval_metric"] else None,
            ))
        return out


def write_summary(summary, path):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
