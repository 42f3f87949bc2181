"""scikit-learn style wrappers.

``FedAvgClassifier`` trains a softmax classifier with FedAvg over clients
given by a ``groups`` vector, so the selection strategies plug into
pipelines, ``clone`` and parameter searches. ``SelectionSkewEstimator``
fits the skew statistics of a strategy on a task.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .engine import LRSchedule, RunConfig, run_training
from .selection import SelectionConfig
from .skew import GridSpec, estimate_rho_bounds
from .tasks import SyntheticDataset


def _selection_config(est):
    d = est.d if est.selection != "rand" else None
    return SelectionConfig(kind=est.selection, m=est.m, d=d, replacement=est.replacement,
                           estimate_batch_size=est.estimate_batch_size)


class FedAvgClassifier(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by federated averaging.

    Parameters
    ----------
    selection : {"rand", "pow_d", "cpow_d", "rpow_d"}
    m : int
        Clients per round.
    d : int or None
        Candidate set size for the power-of-choice strategies.
    tau : int
        Local SGD steps per round.
    rounds : int
    batch_size : int or None
        Local mini-batch size; None uses each client's full data.
    eta : float
        Initial learning rate.
    lr_milestones : tuple of int
        Rounds at which the learning rate is halved.
    aggregation : {"simple", "weighted"}
    replacement : bool
        Sample with replacement under ``selection="rand"``.
    estimate_batch_size : int or None
        Mini-batch size of the cpow_d loss estimate.
    random_state : int
    """

    def __init__(self, selection="rand", m=3, d=None, tau=30, rounds=100, batch_size=50,
                 eta=0.05, lr_milestones=(), aggregation="simple", replacement=True,
                 estimate_batch_size=None, random_state=0):
        self.selection = selection
        self.m = m
        self.d = d
        self.tau = tau
        self.rounds = rounds
        self.batch_size = batch_size
        self.eta = eta
        self.lr_milestones = lr_milestones
        self.aggregation = aggregation
        self.replacement = replacement
        self.estimate_batch_size = estimate_batch_size
        self.random_state = random_state

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        if groups is None:
            raise ValueError("FedAvgClassifier.fit needs a groups vector assigning samples to clients")
        groups = np.asarray(groups)
        if groups.shape != (X.shape[0],):
            raise ValueError("groups must have one entry per sample")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        clients = np.unique(groups)
        data = SyntheticDataset(
            X=tuple(X[groups == g] for g in clients),
            y=tuple(y_enc[groups == g] for g in clients),
            n_classes=len(self.classes_),
        )
        schedule = LRSchedule(kind="step" if self.lr_milestones else "fixed", eta=self.eta,
                              milestones=tuple(self.lr_milestones))
        weights = {}

        def keep(rec, w):
            weights["w"] = w

        self.history_ = run_training(RunConfig(
            task=data, selection=_selection_config(self), tau=self.tau, rounds=self.rounds,
            batch_size=self.batch_size, lr=schedule, aggregation=self.aggregation,
            seed=self.random_state,
        ), callback=keep)
        w = weights["w"]
        n_feat = X.shape[1]
        self.coef_ = w[: n_feat * len(self.classes_)].reshape(len(self.classes_), n_feat)
        self.intercept_ = w[n_feat * len(self.classes_):]
        self.n_features_in_ = n_feat
        self.clients_ = clients
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self)
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class SelectionSkewEstimator(BaseEstimator):
    """Grid estimate of rho_bar, rho_tilde and Gamma for one strategy.

    ``fit`` takes a task object (quadratic or synthetic logistic) in place of
    a feature matrix.
    """

    def __init__(self, selection="pow_d", m=3, d=None, replacement=True, draws=10000,
                 n_grid=1000, pairing="diagonal", random_state=0):
        self.selection = selection
        self.m = m
        self.d = d
        self.replacement = replacement
        self.draws = draws
        self.n_grid = n_grid
        self.pairing = pairing
        self.random_state = random_state

    def fit(self, task, y=None):
        cfg = SelectionConfig(kind=self.selection, m=self.m,
                              d=self.d if self.selection != "rand" else None,
                              replacement=self.replacement)
        cfg.check(task.n_clients)
        grid = GridSpec(n_samples=self.n_grid, pairing=self.pairing, seed=self.random_state)
        self.estimate_ = estimate_rho_bounds(cfg, task, grid=grid, draws=self.draws)
        self.rho_bar_ = self.estimate_.rho_bar
        self.rho_tilde_ = self.estimate_.rho_tilde
        self.gamma_ = self.estimate_.gamma
        return self
