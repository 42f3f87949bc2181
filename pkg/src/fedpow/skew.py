"""Local-global objective gap, selection skew and error-bound evaluation.

Selection skew of a strategy at (w, w'):

    rho(w, w') = E_S[ (1/m) sum_{k in S(w)} (F_k(w') - F_k*) ] / (F(w') - sum_k p_k F_k*)

The expectation is estimated by Monte Carlo over independent selections. A
grid estimate takes the minimum (rho_bar) over model pairs and the maximum
(rho_tilde) over selection models with w' fixed at the global optimum.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .selection import sample_selection_counts, select_cpow_d

logger = logging.getLogger(__name__)

DENOM_TOL = 1e-12
LOGISTIC_L2 = 1e-4


@dataclass(frozen=True)
class TheoryParams:
    L: float
    mu: float
    G: float
    sigma: float
    tau: int = 1
    m: int = 1

    def __post_init__(self):
        if not self.mu > 0 or self.L < self.mu:
            raise ValueError(f"need L >= mu > 0 (L={self.L}, mu={self.mu})")
        if self.G < 0 or self.sigma < 0:
            raise ValueError("G and sigma must be nonnegative")
        if self.tau < 1 or self.m < 1:
            raise ValueError("tau and m must be >= 1")


@dataclass(frozen=True)
class BoundInputs:
    params: TheoryParams
    gap: float
    rho_bar: float
    rho_tilde: float
    init_dist_sq: float
    init_gap: float | None = None

    def __post_init__(self):
        if self.gap < 0 or self.init_dist_sq < 0 or self.rho_tilde < 0:
            raise ValueError("gap, rho_tilde and initial distance must be nonnegative")
        if not self.rho_bar > 0:
            raise ValueError("rho_bar must be positive")
        if self.init_gap is not None and self.init_gap < 0:
            raise ValueError("initial optimality gap must be nonnegative")


@dataclass(frozen=True)
class BoundTerms:
    vanishing: float
    bias: float
    total: float


@dataclass(frozen=True)
class GridSpec:
    """Model sets for the rho_bar / rho_tilde search.

    Uniform samples from the box ``center +/- half_width`` plus the global
    and local optima. ``pairing="diagonal"`` evaluates rho(w, w) over the
    set; ``"product"`` evaluates every (w, w') pair with an independently
    sampled w' set.
    """

    n_samples: int = 1000
    pairing: str = "diagonal"
    half_width: float | None = None
    width_factor: float = 3.0
    include_optima: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.pairing not in ("diagonal", "product"):
            raise ValueError("pairing must be 'diagonal' or 'product'")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")


@dataclass
class SkewEstimate:
    rho_bar: float
    rho_tilde: float
    gamma: float
    grid: GridSpec
    monte_carlo_draws: int
    skipped_points: int = 0
    center: list = field(default_factory=list)
    half_width: float = 0.0
    n_points: int = 0

    @property
    def ratio(self):
        return self.rho_tilde / self.rho_bar

    def to_dict(self):
        out = asdict(self)
        out["rho_tilde_over_rho_bar"] = self.ratio
        return out


# ---------------------------------------------------------------------------
# Reference quantities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Reference:
    objective: object
    w_star: np.ndarray
    local_optima: np.ndarray
    local_min: np.ndarray
    gap: float


def _reference(task):
    if task.kind == "quadratic":
        objective = task
        w_star, local, _ = task.optima()
    else:
        objective = task.with_l2(LOGISTIC_L2)
        w_star, local, _ = task.optima(l2=LOGISTIC_L2)
    local_min = np.array([objective.loss(k, local[k]) for k in range(task.n_clients)])
    gap = float(task.p @ (objective.local_losses(w_star) - local_min))
    if gap < -1e-9:
        raise RuntimeError(f"negative local-global gap {gap:.3g}: optimizer did not reach the optima")
    return _Reference(objective, w_star, local, local_min, max(gap, 0.0))


def local_global_gap(task):
    """Gamma = F* - sum_k p_k F_k*.

    Logistic tasks use the ridge-regularized objectives (l2=1e-4) for both
    F and every F_k.
    """
    return _reference(task).gap


def excess_losses(ref, w):
    return ref.objective.local_losses(w) - ref.local_min


# ---------------------------------------------------------------------------
# Selection distribution
# ---------------------------------------------------------------------------


def selection_counts(config, task, w, draws, rng):
    """``counts[draw, k]``: times client k is chosen in each simulated round."""
    if config.kind == "cpow_d" and task.kind != "quadratic":
        counts = np.zeros((draws, task.n_clients), dtype=np.int32)
        for i in range(draws):
            np.add.at(counts[i], select_cpow_d(task, w, config, None, rng), 1)
        return counts
    scores = task.local_losses(w) if config.kind in ("pow_d", "cpow_d") else None
    return sample_selection_counts(config, task.p, scores, draws, rng)


def _coefficients(counts, m, weights):
    # per-draw weight on each client's excess loss
    if weights is None:
        return counts / m
    return counts * np.asarray(weights, dtype=float)[None, :]


def selection_skew_at(config, task, w, w_prime, draws=10000, rng=None, weights=None,
                      return_stderr=False, _ref=None):
    """Monte-Carlo selection skew rho(S(pi, w), w').

    ``weights`` switches the numerator to the q-weighted form
    sum_{k in S} q_k (F_k(w') - F_k*).
    """
    rng = np.random.default_rng(rng)
    ref = _ref or _reference(task)
    ex = excess_losses(ref, w_prime)
    denom = float(task.p @ ex)
    if denom < DENOM_TOL:
        raise ValueError("degenerate skew denominator: F(w') equals sum_k p_k F_k*")
    coef = _coefficients(selection_counts(config, task, w, draws, rng), config.m, weights)
    per_draw = coef @ ex / denom
    rho = float(per_draw.mean())
    if return_stderr:
        return rho, float(per_draw.std(ddof=1) / np.sqrt(draws)) if draws > 1 else 0.0
    return rho


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


def build_grid(task, grid, rng, ref=None):
    ref = ref or _reference(task)
    center = ref.w_star
    if grid.half_width is not None:
        hw = float(grid.half_width)
    else:
        spread = float(np.max(np.linalg.norm(ref.local_optima - center, axis=1)))
        hw = grid.width_factor * spread if spread > 0 else 1.0
    pts = center + rng.uniform(-hw, hw, (grid.n_samples, task.dim))
    if grid.include_optima:
        pts = np.vstack([pts, center[None, :], ref.local_optima])
    return pts, hw


def estimate_rho_bounds(config, task, grid=None, draws=10000, rng=None, weights=None):
    """Grid estimate of rho_bar (min) and rho_tilde (max at w' = w*)."""
    grid = grid or GridSpec()
    rng = np.random.default_rng(grid.seed if rng is None else rng)
    ref = _reference(task)
    W, hw = build_grid(task, grid, rng, ref)
    if len(W) == 0:
        raise ValueError("empty grid")

    coef = np.array([
        _coefficients(selection_counts(config, task, w, draws, rng),
                      config.m, weights).mean(axis=0)
        for w in W
    ])

    if grid.pairing == "diagonal":
        ex = np.array([excess_losses(ref, w) for w in W])
        denom = ex @ task.p
        ok = denom >= DENOM_TOL
        rho = np.einsum("ik,ik->i", coef[ok], ex[ok]) / denom[ok]
        skipped = int((~ok).sum())
    else:
        Wp, _ = build_grid(task, grid, rng, ref)
        ex = np.array([excess_losses(ref, w) for w in Wp])
        denom = ex @ task.p
        ok = denom >= DENOM_TOL
        rho = (coef @ ex[ok].T) / denom[ok][None, :]
        skipped = int((~ok).sum())
    if rho.size == 0:
        raise ValueError("every grid point has a degenerate skew denominator")
    rho_bar = float(rho.min())

    if ref.gap >= DENOM_TOL:
        ex_star = excess_losses(ref, ref.w_star)
        rho_tilde = float((coef @ ex_star).max() / ref.gap)
    else:
        # gap = 0: approach w* along the sampled directions instead
        near = ref.w_star + 1e-3 * (W - ref.w_star)
        ex_near = np.array([excess_losses(ref, w) for w in near])
        d_near = ex_near @ task.p
        ok_near = d_near >= DENOM_TOL
        if not ok_near.any():
            rho_tilde = rho_bar
        else:
            rho_tilde = float(((coef @ ex_near[ok_near].T) / d_near[ok_near]).max())
    if rho_bar > rho_tilde:
        raise RuntimeError(f"grid estimate violates rho_bar <= rho_tilde ({rho_bar} > {rho_tilde})")
    return SkewEstimate(
        rho_bar=rho_bar, rho_tilde=rho_tilde, gamma=ref.gap, grid=grid,
        monte_carlo_draws=draws, skipped_points=skipped,
        center=[float(v) for v in ref.w_star], half_width=hw, n_points=len(W),
    )


# ---------------------------------------------------------------------------
# Error bounds
# ---------------------------------------------------------------------------


def theorem1_bound(inputs, T):
    """Decaying-rate bound with eta_t = 1/(mu (t + gamma)), gamma = 4L/mu."""
    P = inputs.params
    L, mu = P.L, P.mu
    gamma = 4.0 * L / mu
    noise = 32.0 * P.tau ** 2 * P.G ** 2 + P.sigma ** 2 / P.m
    bracket = (4.0 * L * noise / (3.0 * mu ** 2 * inputs.rho_bar)
               + 8.0 * L ** 2 * inputs.gap / mu ** 2
               + L * gamma * inputs.init_dist_sq / 2.0)
    vanishing = bracket / (T + gamma)
    bias = 8.0 * L * inputs.gap / (3.0 * mu) * (inputs.rho_tilde / inputs.rho_bar - 1.0)
    return BoundTerms(vanishing, bias, vanishing + bias)


def fixed_lr_cap(inputs):
    B = 1.0 + 3.0 * inputs.rho_bar / 8.0
    return min(1.0 / (2.0 * inputs.params.mu * B), 1.0 / (4.0 * inputs.params.L))


def theorem2_bound(inputs, eta, T):
    """Fixed-rate bound; needs ``inputs.init_gap`` = F(w0) - F*."""
    if eta <= 0 or eta > fixed_lr_cap(inputs) * (1 + 1e-12):
        raise ValueError(f"eta={eta} outside (0, {fixed_lr_cap(inputs):.6g}]")
    if inputs.init_gap is None:
        raise ValueError("the fixed-rate bound needs the initial optimality gap F(w0) - F*")
    P = inputs.params
    L, mu, rb, rt, gap = P.L, P.mu, inputs.rho_bar, inputs.rho_tilde, inputs.gap
    noise = 32.0 * P.tau ** 2 * P.G ** 2 + P.sigma ** 2 / P.m + 6.0 * rb * L * gap
    contraction = 1.0 - eta * mu * (1.0 + 3.0 * rb / 8.0)
    offset = 4.0 * (eta * noise + 2.0 * gap * (rt - rb)) / (8.0 + 3.0 * rb)
    vanishing = L / mu * contraction ** T * (inputs.init_gap - offset)
    bias = 4.0 * L * eta * noise / (mu * (8.0 + 3.0 * rb)) + 8.0 * L * gap * (rt - rb) / (mu * (8.0 + 3.0 * rb))
    return BoundTerms(vanishing, bias, vanishing + bias)


def estimate_theory_params(task, tau=1, m=1, trajectory=None, slack=0.1):
    """L, mu, sigma in closed form for the quadratic task; G from a trajectory.

    G is ``(1 + slack)`` times the largest local gradient norm seen at the
    trajectory points (default: the origin, w* and every local optimum).
    Quadratic gradients are unbounded globally, so G only covers the
    region the trajectory visits.
    """
    if task.kind != "quadratic":
        raise ValueError(f"theory constants are only available for quadratic tasks, not {task.kind!r}")
    if trajectory is None:
        w_star, local, _ = task.optima()
        trajectory = np.vstack([np.zeros(task.dim), w_star, local])
    G = 0.0
    for w in np.atleast_2d(np.asarray(trajectory, dtype=float)):
        grads = task.h[:, None] * w[None, :] - task.e
        G = max(G, float(np.sqrt(np.einsum("kj,kj->k", grads, grads).max())))
    return TheoryParams(L=float(task.h.max()), mu=float(task.h.min()), G=(1.0 + slack) * G,
                        sigma=0.0, tau=tau, m=m)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_skew_report(entries, path):
    """``entries``: mapping label -> SkewEstimate (or dict)."""
    data = {k: (v.to_dict() if isinstance(v, SkewEstimate) else v) for k, v in entries.items()}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def bound_table(inputs, Ts, eta=None):
    rows = []
    for T in Ts:
        b = theorem1_bound(inputs, T)
        rows.append(("theorem1", int(T), b.vanishing, b.bias, b.total))
    if eta is not None:
        for T in Ts:
            b = theorem2_bound(inputs, eta, T)
            rows.append(("theorem2", int(T), b.vanishing, b.bias, b.total))
    return rows


def write_bound_table(rows, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["theorem", "T", "vanishing", "bias", "total"])
        for name, T, v, b, tot in rows:
            writer.writerow([name, T, repr(float(v)), repr(float(b)), repr(float(tot))])
