"""Inductive (split) conformal prediction with absolute-residual scores."""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import inn as innm
from . import net as nn
from ._validation import (
    InvalidInputError,
    check_batch,
    check_open_unit,
    check_targets,
    check_vector,
)
from .guarantee import CoverageStats
from .explore import label

TAG_CP_EVAL = 7


@dataclass
class SplitDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_cal: np.ndarray
    y_cal: np.ndarray
    train_index: np.ndarray
    cal_index: np.ndarray


def split(X, y, cal_fraction=0.5, seed=0):
    """Seeded shuffle, then the first ``round(n * cal_fraction)`` go to calibration."""
    X = check_batch(X)
    y = check_targets(y, X.shape[0])
    n = X.shape[0]
    if n < 2:
        raise InvalidInputError("need at least 2 samples to split")
    cal_fraction = check_open_unit(cal_fraction, "cal_fraction")
    n_cal = min(max(int(round(n * cal_fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    cal_idx = np.sort(perm[:n_cal])
    train_idx = np.sort(perm[n_cal:])
    return SplitDataset(X[train_idx], y[train_idx], X[cal_idx], y[cal_idx], train_idx, cal_idx)


def conformal_quantile(scores, alpha):
    """The ceil((n+1)(1-alpha))-th smallest score, or +inf if that rank exceeds n."""
    scores = np.sort(np.asarray(scores, dtype=float))
    n = scores.shape[0]
    if n == 0:
        raise InvalidInputError("empty calibration set")
    # guard against (n+1)(1-alpha) landing a hair above an integer
    rank = math.ceil((n + 1) * (1.0 - alpha) - 1e-9)
    if rank > n:
        return math.inf
    return float(scores[max(rank, 1) - 1])


def _predict(model, X):
    if isinstance(model, nn.Network):
        return nn._forward_cache(model, X)[-1][:, 0]
    if isinstance(model, innm.ImpreciseNet):
        return innm.member_outputs(model, X)[0]
    return np.asarray(model(X), dtype=float)


@dataclass
class CalibratedPredictor:
    model: object
    q: float
    alpha_cp: float
    n_cal: int

    @property
    def input_dim(self):
        return getattr(self.model, "input_dim", None)

    def predict(self, X):
        return _predict(self.model, check_batch(X, self.input_dim))


def calibrate(model, X_cal, y_cal, alpha_cp=0.05):
    X_cal = check_batch(X_cal)
    y_cal = check_targets(y_cal, X_cal.shape[0])
    if X_cal.shape[0] == 0:
        raise InvalidInputError("empty calibration set")
    alpha_cp = check_open_unit(alpha_cp, "alpha_cp")
    scores = np.abs(y_cal - _predict(model, X_cal))
    return CalibratedPredictor(model, conformal_quantile(scores, alpha_cp), alpha_cp,
                               X_cal.shape[0])


def predict_region(pred, x):
    """``(f(x) - q, f(x) + q)``; an infinite ``q`` gives the whole real line."""
    x = check_vector(x, pred.input_dim)
    f = float(pred.predict(x[None, :])[0])
    return f - pred.q, f + pred.q


def region_stats(pred, X, y, mode):
    f = pred.predict(X)
    covered = np.abs(y - f) <= pred.q
    width = 2.0 * pred.q
    return CoverageStats(
        mode=mode, method="icp", n=int(X.shape[0]),
        coverage=float(covered.mean()),
        lower_bound_coverage=float("nan"),
        mean_width=width, median_width=width,
        raw_coverage=float(covered.mean()),
        records={"X": X, "y": y, "f": f, "covered": covered},
    )


def cp_coverage_eval(pred, oracle, sampler, n_test, rng, mode="custom", workers=1):
    """Fraction of fresh labelled draws ``sampler(n_test, rng)`` inside the region."""
    X = np.asarray(sampler(n_test, rng), dtype=float)
    seed = int(rng.integers(2**62))
    y = label(oracle, X, seed, 0, workers, tag=TAG_CP_EVAL)
    return region_stats(pred, X, y, mode)


def fit_point_regressor(X, y, hidden_widths=(50, 50), cfg=None, input_box=None):
    """Squared-error regressor as a one-member ImpreciseNet.

    With a single member both envelopes coincide, the width penalty cancels
    and the interval loss is exactly the squared error.
    """
    cfg = cfg or innm.TrainConfig()
    spec = nn.NetworkSpec(X.shape[1], tuple(hidden_widths))
    offset = scale = None
    if input_box is not None:
        offset, scale = input_box.center, np.where(input_box.width > 0, input_box.width / 2.0, 1.0)
    model = innm.init_inn(spec, 1, cfg.seed, offset, scale)
    model, _ = innm.train(model, X, y, cfg)
    return model


class SplitConformalRegressor(RegressorMixin, BaseEstimator):
    """Neural point regressor with split-conformal prediction intervals.

    Parameters
    ----------
    alpha : float, default=0.05
        Target miscoverage.
    cal_fraction : float, default=0.5
    hidden_widths, epochs, batch_size, learning_rate :
        Settings of the underlying network and its training.
    input_box : Box or None
        Rescales inputs to [-1, 1]^d before the network.
    random_state : int, default=0
    """

    def __init__(self, alpha=0.05, cal_fraction=0.5, hidden_widths=(50, 50), epochs=100,
                 batch_size=64, learning_rate=1e-3, input_box=None, random_state=0):
        self.alpha = alpha
        self.cal_fraction = cal_fraction
        self.hidden_widths = hidden_widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.input_box = input_box
        self.random_state = random_state

    def fit(self, X, y):
        parts = split(X, y, self.cal_fraction, self.random_state)
        cfg = innm.TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                               lr=self.learning_rate, seed=self.random_state)
        model = fit_point_regressor(parts.X_train, parts.y_train, self.hidden_widths, cfg,
                                    self.input_box)
        self.predictor_ = calibrate(model, parts.X_cal, parts.y_cal, self.alpha)
        self.split_ = parts
        self.n_features_in_ = parts.X_train.shape[1]
        return self

    @property
    def quantile_(self):
        return self.predictor_.q

    def predict(self, X):
        check_is_fitted(self, "predictor_")
        return self.predictor_.predict(X)

    def predict_interval(self, X):
        """Shape (n, 2) array of region endpoints."""
        f = self.predict(X)
        q = self.predictor_.q
        return np.column_stack([f - q, f + q])
