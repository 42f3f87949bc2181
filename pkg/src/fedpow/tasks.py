"""Federated objectives: a strongly convex quadratic family and multinomial
logistic regression on Synthetic(alpha, beta) data.

Both task types share a duck-typed surface used by the engine, the selection
strategies and the skew analysis:

    kind, n_clients, dim, p
    loss(k, w), gradient(k, w), local_losses(w)
    global_loss(w), global_gradient(w)
    stochastic_gradient(k, w, batch_size, rng) -> (grad, batch_loss)
    estimate_loss(k, w, batch_size, rng)
    optima() -> (w_star, local_optima, F_star)
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

N_CLASSES = 10
N_FEATURES = 60
MIN_CLIENT_SAMPLES = 50


class DimensionError(ValueError):
    """A parameter vector does not match the task dimension."""


def _as_param(w, dim):
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.shape[0] != dim:
        raise DimensionError(f"expected a vector of length {dim}, got shape {w.shape}")
    return w


def _check_fractions(p):
    p = np.array(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("data fractions must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("data fractions must be nonnegative and sum to 1")
    return p


def power_law_fractions(n_clients, a, rng):
    """Data fractions from the density a*x**(a-1) on (0, 1], normalized.

    Draws use the inverse CDF ``u**(1/a)``; ``1 - random()`` keeps u in (0, 1].
    """
    if a <= 0:
        raise ValueError("power-law exponent must be positive")
    x = (1.0 - rng.random(n_clients)) ** (1.0 / a)
    return x / x.sum()


# ---------------------------------------------------------------------------
# Quadratic task
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadraticTask:
    """F_k(w) = 0.5 w'H_k w - e_k'w + 0.5 e_k'H_k^{-1}e_k with H_k = h_k I."""

    h: np.ndarray
    e: np.ndarray
    p: np.ndarray
    kind: str = field(default="quadratic", init=False)

    def __post_init__(self):
        h = np.array(self.h, dtype=float)
        e = np.atleast_2d(np.array(self.e, dtype=float))
        p = _check_fractions(self.p)
        if h.ndim != 1 or np.any(h <= 0):
            raise ValueError("curvatures h_k must be a vector of positive reals")
        if e.shape[0] != h.shape[0] or p.shape[0] != h.shape[0]:
            raise ValueError("h, e and p must agree on the number of clients")
        for name, val in (("h", h), ("e", e), ("p", p)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_clients(self):
        return self.h.shape[0]

    @property
    def dim(self):
        return self.e.shape[1]

    @property
    def local_optima(self):
        return self.e / self.h[:, None]

    def loss(self, k, w):
        w = _as_param(w, self.dim)
        r = w - self.e[k] / self.h[k]
        return 0.5 * self.h[k] * float(r @ r)

    def gradient(self, k, w):
        w = _as_param(w, self.dim)
        return self.h[k] * w - self.e[k]

    def local_losses(self, w):
        w = _as_param(w, self.dim)
        r = w[None, :] - self.local_optima
        return 0.5 * self.h * np.einsum("kj,kj->k", r, r)

    def global_loss(self, w):
        return float(self.p @ self.local_losses(w))

    def global_gradient(self, w):
        w = _as_param(w, self.dim)
        return (self.p @ self.h) * w - self.p @ self.e

    def stochastic_gradient(self, k, w, batch_size=None, rng=None):
        # sample-free objective: the "mini-batch" is the whole objective
        return self.gradient(k, w), self.loss(k, w)

    def estimate_loss(self, k, w, batch_size=None, rng=None):
        return self.loss(k, w)

    def optima(self):
        local = self.local_optima
        w_star = (self.p @ self.e) / (self.p @ self.h)
        return w_star, local, self.global_loss(w_star)


def generate_quadratic(n_clients, dim, power_law_a=3.0, seed=0):
    """Random quadratic task.

    Draw order from ``default_rng(seed)``: h ~ U(1, 20) (K values), then
    u ~ U(0, 1) (K x v) with e_k = h_k * u_k so the local optimum is u_k,
    then the power-law fractions.
    """
    if n_clients < 1 or dim < 1:
        raise ValueError("n_clients and dim must be >= 1")
    if power_law_a <= 0:
        raise ValueError("power_law_a must be positive")
    rng = np.random.default_rng(seed)
    h = rng.uniform(1.0, 20.0, n_clients)
    e = h[:, None] * rng.uniform(0.0, 1.0, (n_clients, dim))
    p = power_law_fractions(n_clients, power_law_a, rng)
    return QuadraticTask(h=h, e=e, p=p)


# ---------------------------------------------------------------------------
# Synthetic(alpha, beta) logistic regression
# ---------------------------------------------------------------------------


def _unpack(w, n_features, n_classes):
    W = w[: n_features * n_classes].reshape(n_classes, n_features)
    b = w[n_features * n_classes :]
    return W, b


def _softmax_xent(X, y, W, b):
    logits = X @ W.T + b
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(len(y)), y]))
    probs = np.exp(logits - lse[:, None])
    return loss, probs


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    """Per-client (X_k, y_k) for a softmax classifier (10 classes on R^60 by default).

    Parameters are flattened as ``concat(W.ravel(), b)`` with W of shape
    (n_classes, n_features). ``l2`` adds 0.5*l2*||w||^2 to every F_k (and so
    to F); it is zero for training and set for optimum computations.
    """

    X: tuple
    y: tuple
    alpha: float | None = None
    beta: float | None = None
    seed: int | None = None
    l2: float = 0.0
    latents: dict | None = None
    n_classes: int = N_CLASSES
    kind: str = field(default="logistic", init=False)

    def __post_init__(self):
        X = tuple(np.array(x, dtype=float) for x in self.X)
        y = tuple(np.array(v, dtype=np.int64) for v in self.y)
        if len(X) == 0 or len(X) != len(y):
            raise ValueError("need one (X, y) pair per client")
        for k, (xk, yk) in enumerate(zip(X, y)):
            if xk.ndim != 2 or xk.shape[0] == 0 or xk.shape[0] != yk.shape[0]:
                raise ValueError(f"client {k} has an empty or malformed dataset")
            if not np.all(np.isfinite(xk)):
                raise ValueError(f"client {k} has non-finite features")
            if yk.min() < 0 or yk.max() >= self.n_classes:
                raise ValueError(f"client {k} has labels outside 0..{self.n_classes - 1}")
            xk.setflags(write=False)
            yk.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n_clients(self):
        return len(self.X)

    @property
    def n_features(self):
        return self.X[0].shape[1]

    @property
    def dim(self):
        return self.n_classes * (self.n_features + 1)

    @property
    def sizes(self):
        return np.array([len(v) for v in self.y])

    @property
    def p(self):
        s = self.sizes
        return s / s.sum()

    def with_l2(self, l2):
        return SyntheticDataset(
            X=self.X, y=self.y, alpha=self.alpha, beta=self.beta,
            seed=self.seed, l2=l2, latents=self.latents, n_classes=self.n_classes,
        )

    def _loss_grad(self, k, w, idx=None):
        w = _as_param(w, self.dim)
        X, y = self.X[k], self.y[k]
        if idx is not None:
            X, y = X[idx], y[idx]
        W, b = _unpack(w, self.n_features, self.n_classes)
        loss, probs = _softmax_xent(X, y, W, b)
        probs[np.arange(len(y)), y] -= 1.0
        probs /= len(y)
        grad = np.concatenate([(probs.T @ X).ravel(), probs.sum(axis=0)])
        if self.l2:
            loss += 0.5 * self.l2 * float(w @ w)
            grad = grad + self.l2 * w
        return loss, grad

    def loss(self, k, w):
        return self._loss_grad(k, w)[0]

    def gradient(self, k, w):
        return self._loss_grad(k, w)[1]

    def local_losses(self, w):
        return np.array([self.loss(k, w) for k in range(self.n_clients)])

    def global_loss(self, w):
        return float(self.p @ self.local_losses(w))

    def global_gradient(self, w):
        return sum(pk * self.gradient(k, w) for k, pk in enumerate(self.p))

    def _batch(self, k, batch_size, rng):
        n = len(self.y[k])
        if batch_size is None or batch_size >= n:
            return None
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return rng.choice(n, size=batch_size, replace=False)

    def stochastic_gradient(self, k, w, batch_size, rng):
        """Mean gradient and loss over a uniform mini-batch (no replacement)."""
        loss, grad = self._loss_grad(k, w, self._batch(k, batch_size, rng))
        return grad, loss

    def estimate_loss(self, k, w, batch_size, rng):
        return self._loss_grad(k, w, self._batch(k, batch_size, rng))[0]

    def predict_proba(self, w, X):
        W, b = _unpack(_as_param(w, self.dim), self.n_features, self.n_classes)
        logits = np.asarray(X, dtype=float) @ W.T + b
        return np.exp(logits - logsumexp(logits, axis=1)[:, None])

    def optima(self, l2=1e-4, gtol=1e-8):
        """Regularized global and local minimizers.

        Without the ridge term a locally separable client has no finite
        minimizer, so ``l2`` applies to every F_k and to F alike.
        """
        task = self.with_l2(l2)
        w0 = np.zeros(self.dim)

        def solve(fun):
            res = minimize(fun, w0, jac=True, method="L-BFGS-B",
                           options={"gtol": gtol, "ftol": 0.0, "maxiter": 20000, "maxcor": 30})
            gnorm = np.linalg.norm(fun(res.x)[1])
            if not np.isfinite(res.fun) or gnorm > max(1e3 * gtol, 1e-6):
                raise RuntimeError(f"optimizer failed to converge (|grad|={gnorm:.3g}): {res.message}")
            return res.x

        local = np.array([solve(lambda w, k=k: task._loss_grad(k, w))
                          for k in range(self.n_clients)])

        def global_fun(w):
            parts = [task._loss_grad(k, w) for k in range(task.n_clients)]
            p = task.p
            return (sum(pk * f for pk, (f, _) in zip(p, parts)),
                    sum(pk * g for pk, (_, g) in zip(p, parts)))

        w_star = solve(global_fun)
        return w_star, local, task.global_loss(w_star)


def logistic_loss(dataset, k, w):
    return dataset.loss(k, w)


def logistic_stochastic_gradient(dataset, k, w, batch_size, rng):
    return dataset.stochastic_gradient(k, w, batch_size, rng)[0]


def generate_synthetic(alpha=1.0, beta=1.0, n_clients=30, power_law_a=3.0,
                       seed=0, total_samples=10000):
    """Synthetic(alpha, beta) federated classification data.

    Per client k: u_k ~ N(0, alpha), B_k ~ N(0, beta) (standard deviations);
    W_k, b_k entries ~ N(u_k, 1); feature mean v_k entries ~ N(B_k, 1);
    x ~ N(v_k, diag(j**-1.2)); y = argmax(W_k x + b_k). Client sizes are
    ``max(50, floor(total_samples * f_k))`` with f_k power-law fractions.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    if total_samples < 1:
        raise ValueError("total_samples must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.normal(0.0, alpha, n_clients)
    B = rng.normal(0.0, beta, n_clients)
    frac = power_law_fractions(n_clients, power_law_a, rng)
    sizes = np.maximum(MIN_CLIENT_SAMPLES, np.floor(total_samples * frac).astype(int))
    feat_std = np.arange(1, N_FEATURES + 1, dtype=float) ** (-1.2 / 2)

    X, y = [], []
    for k in range(n_clients):
        v = rng.normal(B[k], 1.0, N_FEATURES)
        W = rng.normal(u[k], 1.0, (N_CLASSES, N_FEATURES))
        b = rng.normal(u[k], 1.0, N_CLASSES)
        xk = v + feat_std * rng.standard_normal((sizes[k], N_FEATURES))
        X.append(xk)
        y.append(np.argmax(xk @ W.T + b, axis=1))
    return SyntheticDataset(X=tuple(X), y=tuple(y), alpha=alpha, beta=beta,
                            seed=seed, latents={"u": u, "B": B})


def export_dataset(dataset, path):
    """Write one JSON object per sample: ``{"client", "label", "features"}``.

    A leading ``{"meta": ...}`` line carries the generator parameters.
    """
    path = Path(path)
    with path.open("w") as fh:
        meta = {"alpha": dataset.alpha, "beta": dataset.beta, "seed": dataset.seed,
                "n_clients": dataset.n_clients, "n_classes": dataset.n_classes}
        fh.write(json.dumps({"meta": meta}) + "\n")
        for k in range(dataset.n_clients):
            for x, label in zip(dataset.X[k], dataset.y[k]):
                rec = {"client": k, "label": int(label), "features": [float(v) for v in x]}
                fh.write(json.dumps(rec) + "\n")


def import_dataset(path):
    meta = {}
    rows = {}
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "meta" in rec:
                meta = rec["meta"]
                continue
            rows.setdefault(int(rec["client"]), []).append((rec["features"], rec["label"]))
    n = max(meta.get("n_clients") or 0, max(rows) + 1 if rows else 0)
    if set(rows) != set(range(n)):
        raise ValueError("every client must have at least one sample")
    X = tuple(np.array([r[0] for r in rows[k]], dtype=float) for k in range(n))
    y = tuple(np.array([r[1] for r in rows[k]], dtype=np.int64) for k in range(n))
    return SyntheticDataset(X=X, y=y, alpha=meta.get("alpha"), beta=meta.get("beta"),
                            seed=meta.get("seed"), n_classes=meta.get("n_classes", N_CLASSES))
