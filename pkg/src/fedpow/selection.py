"""Client selection: unbiased random sampling and the power-of-choice family.

Strategies
----------
rand    m draws proportional to p_k (with or without replacement)
pow_d   d candidates proportional to p_k without replacement, keep the m with
        the largest exact local loss at the global model
cpow_d  as pow_d, scoring each candidate with one mini-batch loss estimate
rpow_d  as pow_d, scoring with the last loss each client reported while
        training (+inf until a client has reported once)

All selectors return a sorted integer array of client ids. Ties in the loss
ranking are broken uniformly at random with the caller's generator.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("rand", "pow_d", "cpow_d", "rpow_d")
POW_KINDS = ("pow_d", "cpow_d", "rpow_d")


class SelectionError(ValueError):
    """The candidate pool cannot satisfy the requested selection."""


@dataclass(frozen=True)
class SelectionConfig:
    kind: str
    m: int
    d: int | None = None
    replacement: bool = True
    estimate_batch_size: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown selection kind {self.kind!r}; expected one of {KINDS}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.kind in POW_KINDS:
            if self.d is None or self.d < self.m:
                raise ValueError(f"{self.kind} needs a candidate count d >= m (got d={self.d}, m={self.m})")
        if self.estimate_batch_size is not None and self.estimate_batch_size < 1:
            raise ValueError("estimate_batch_size must be >= 1")

    def check(self, n_clients):
        if self.kind in POW_KINDS and self.d > n_clients:
            raise ValueError(f"d={self.d} exceeds the number of clients K={n_clients}")
        if (self.kind != "rand" or not self.replacement) and self.m > n_clients:
            raise ValueError(f"cannot select m={self.m} distinct clients out of K={n_clients}")

    @property
    def label(self):
        if self.kind == "rand":
            return "rand" if self.replacement else "rand_norep"
        return f"{self.kind}{self.d}"


@dataclass
class SelectionState:
    """Latest loss reported by each client; +inf until it first reports."""

    last_reported_loss: np.ndarray

    @classmethod
    def initial(cls, n_clients):
        return cls(np.full(n_clients, np.inf))


def report_round_loss(state, k, accumulated_avg_loss):
    state.last_reported_loss[k] = float(accumulated_avg_loss)


@dataclass(frozen=True)
class AvailabilityModel:
    """Which clients may be selected in a given round.

    ``alternating_groups`` splits clients into two fixed halves by index
    (the first ceil(K/2) and the rest), activates half ``round % 2`` and then
    removes ``floor(exclusion_fraction * group_size)`` of its members
    uniformly at random.
    """

    mode: str = "always_on"
    exclusion_fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in ("always_on", "alternating_groups"):
            raise ValueError(f"unknown availability mode {self.mode!r}")
        if not 0.0 <= self.exclusion_fraction < 1.0:
            raise ValueError("exclusion_fraction must be in [0, 1)")

    def groups(self, n_clients):
        half = (n_clients + 1) // 2
        return np.arange(half), np.arange(half, n_clients)

    def pool(self, round_index, n_clients, rng):
        if self.mode == "always_on":
            return np.arange(n_clients)
        group = self.groups(n_clients)[round_index % 2]
        n_out = int(np.floor(self.exclusion_fraction * len(group)))
        if n_out == 0:
            return group
        keep = np.sort(rng.choice(len(group), size=len(group) - n_out, replace=False))
        return group[keep]


# ---------------------------------------------------------------------------
# Sampling primitives
# ---------------------------------------------------------------------------


def _pool_weights(p, pool):
    pool = np.arange(len(p)) if pool is None else np.asarray(pool, dtype=int)
    if pool.size == 0:
        raise SelectionError("no clients are available")
    w = np.asarray(p, dtype=float)[pool]
    if w.sum() <= 0:
        raise SelectionError("available clients carry zero total data fraction")
    return pool, w / w.sum()


def sequential_sample(weights, n, rng):
    """Draw ``n`` distinct indices one at a time, renormalizing after each."""
    w = np.array(weights, dtype=float)
    if n > np.count_nonzero(w):
        raise SelectionError(f"cannot draw {n} distinct items from {np.count_nonzero(w)} with nonzero weight")
    out = np.empty(n, dtype=int)
    for i in range(n):
        j = rng.choice(len(w), p=w / w.sum())
        out[i] = j
        w[j] = 0.0
    return out


def exponential_keys(weights, rng, size=None):
    """Keys whose top-d order is a weighted sample without replacement.

    ``log(U) / w_k`` ranks items exactly as successive renormalized draws do
    (Efraimidis-Spirakis); zero-weight items get ``-inf``.
    """
    w = np.asarray(weights, dtype=float)
    shape = w.shape if size is None else (size,) + w.shape
    u = 1.0 - rng.random(shape)
    with np.errstate(divide="ignore"):
        return np.where(w > 0, np.log(u) / np.where(w > 0, w, 1.0), -np.inf)


def top_m(scores, m, rng):
    """Positions of the ``m`` largest scores, ties broken uniformly at random."""
    scores = np.asarray(scores, dtype=float)
    if np.isnan(scores).any():
        raise ValueError("loss scores must not be NaN")
    order = np.lexsort((rng.random(scores.shape[0]), -scores))
    return order[:m]


def _candidates(p, d, pool, rng):
    pool, w = _pool_weights(p, pool)
    n_avail = np.count_nonzero(w)
    if d > n_avail:
        warnings.warn(f"candidate count d={d} exceeds the {n_avail} available clients; using d={n_avail}",
                      RuntimeWarning, stacklevel=3)
        d = n_avail
    keys = exponential_keys(w, rng)
    return pool[np.argsort(-keys, kind="stable")[:d]]


def _pick(candidates, scores, m, rng):
    if m > len(candidates):
        raise SelectionError(f"cannot select m={m} clients from {len(candidates)} candidates")
    return np.sort(candidates[top_m(scores, m, rng)])


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------


def select_rand(p, m, replacement, pool, rng):
    pool, w = _pool_weights(p, pool)
    if replacement:
        return np.sort(pool[rng.choice(len(pool), size=m, p=w)])
    if m > np.count_nonzero(w):
        raise SelectionError(f"cannot select m={m} distinct clients from a pool of {np.count_nonzero(w)}")
    return np.sort(pool[sequential_sample(w, m, rng)])


def select_pow_d(task, w_global, config, pool, rng):
    cand = _candidates(task.p, config.d, pool, rng)
    scores = np.array([task.loss(k, w_global) for k in cand])
    return _pick(cand, scores, config.m, rng)


def select_cpow_d(task, w_global, config, pool, rng):
    cand = _candidates(task.p, config.d, pool, rng)
    b = config.estimate_batch_size
    scores = np.array([task.estimate_loss(k, w_global, b, rng) for k in cand])
    return _pick(cand, scores, config.m, rng)


def select_rpow_d(state, p, config, pool, rng):
    cand = _candidates(p, config.d, pool, rng)
    return _pick(cand, state.last_reported_loss[cand], config.m, rng)


def select(config, task, w_global, pool, rng, state=None):
    if config.kind == "rand":
        return select_rand(task.p, config.m, config.replacement, pool, rng)
    if config.kind == "pow_d":
        return select_pow_d(task, w_global, config, pool, rng)
    if config.kind == "cpow_d":
        return select_cpow_d(task, w_global, config, pool, rng)
    if state is None:
        raise ValueError("rpow_d needs a SelectionState")
    return select_rpow_d(state, task.p, config, pool, rng)


def sample_selection_counts(config, p, scores, n_draws, rng):
    """Vectorized selection over ``n_draws`` independent rounds.

    ``scores`` are the per-client ranking values (local losses at the
    selection model); they are ignored for ``rand``. Returns an integer
    matrix ``counts[draw, k]`` with row sums equal to ``m``.
    """
    p = np.asarray(p, dtype=float)
    K = p.shape[0]
    m = config.m
    rows = np.arange(n_draws)[:, None]
    counts = np.zeros((n_draws, K), dtype=np.int32)
    if config.kind == "rand" and config.replacement:
        picks = rng.choice(K, size=(n_draws, m), p=p)
        np.add.at(counts, (np.broadcast_to(rows, picks.shape), picks), 1)
        return counts
    if config.kind == "rpow_d":
        raise ValueError("rpow_d selection depends on training history, not on a model")
    d = m if config.kind == "rand" else config.d
    if d >= np.count_nonzero(p):
        cand = np.broadcast_to(np.flatnonzero(p), (n_draws, np.count_nonzero(p)))
    else:
        keys = exponential_keys(p, rng, size=n_draws)
        cand = np.argpartition(-keys, d - 1, axis=1)[:, :d]
    if config.kind == "rand":
        counts[np.broadcast_to(rows, cand.shape), cand] = 1
        return counts
    # rank losses densely so a uniform jitter in [0, 0.5) only reorders ties
    scores = np.asarray(scores, dtype=float)
    _, dense = np.unique(scores, return_inverse=True)
    key = dense[cand] + 0.5 * rng.random(cand.shape)
    chosen = np.take_along_axis(cand, np.argsort(-key, axis=1)[:, :m], axis=1)
    counts[np.broadcast_to(rows, chosen.shape), chosen] = 1
    return counts


# ---------------------------------------------------------------------------
# Selection history
# ---------------------------------------------------------------------------


def frequency_profile(history, n_clients=None):
    """Fraction of all selections that went to each client."""
    if len(history) == 0:
        raise ValueError("history is empty")
    flat = np.concatenate([np.asarray(s, dtype=int).ravel() for s in history])
    if n_clients is None:
        n_clients = int(flat.max()) + 1 if flat.size else 0
    counts = np.bincount(flat, minlength=n_clients).astype(float)
    return counts / counts.sum()


def format_ids(ids):
    return ";".join(str(int(k)) for k in ids)


def parse_ids(text):
    text = text.strip()
    return [int(v) for v in text.split(";")] if text else []


def write_selection_history(history, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "selected_ids"])
        for r, ids in enumerate(history):
            writer.writerow([r, format_ids(ids)])


def read_selection_history(path):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "selected_ids" not in reader.fieldnames:
            raise ValueError(f"{path}: no selected_ids column")
        return [parse_ids(row["selected_ids"]) for row in reader]
