"""Imprecise neural networks: an ensemble whose pointwise min/max are the
lower and upper envelopes of the regression target.

The ensemble is trained jointly on the interval loss

    mean_s  max(y - upper, 0)^2 + max(lower - y, 0)^2 + beta * (upper - lower)

where the subgradient of each envelope term is routed to the member that
attains it (lowest index on ties).
"""

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import net as nn
from ._validation import (
    InvalidInputError,
    check_batch,
    check_positive,
    check_targets,
    check_vector,
)

INN_FORMAT = "robust-verify-inn/1"


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, message="non-finite loss"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {message}")


@dataclass(frozen=True, eq=False)
class ImpreciseNet:
    """k networks with a shared spec, plus an optional input normaliser.

    When ``input_offset``/``input_scale`` are set, members see
    ``(x - input_offset) / input_scale`` rather than ``x``.
    """

    members: tuple
    input_offset: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise InvalidInputError("an ImpreciseNet needs at least one member")
        if any(m.spec != members[0].spec for m in members):
            raise InvalidInputError("all members must share the same NetworkSpec")
        object.__setattr__(self, "members", members)
        if (self.input_offset is None) != (self.input_scale is None):
            raise InvalidInputError("input_offset and input_scale must be given together")
        if self.input_offset is not None:
            d = members[0].input_dim
            offset = check_vector(self.input_offset, d, "input_offset")
            scale = check_vector(self.input_scale, d, "input_scale")
            if np.any(scale <= 0):
                raise InvalidInputError("input_scale must be positive")
            object.__setattr__(self, "input_offset", offset)
            object.__setattr__(self, "input_scale", scale)

    @property
    def k(self):
        return len(self.members)

    @property
    def spec(self):
        return self.members[0].spec

    @property
    def input_dim(self):
        return self.spec.input_dim

    @property
    def normalized(self):
        return self.input_offset is not None

    def normalize(self, X):
        if not self.normalized:
            return X
        return (X - self.input_offset) / self.input_scale

    def __eq__(self, other):
        if not isinstance(other, ImpreciseNet):
            return NotImplemented
        same_norm = (
            (not self.normalized and not other.normalized)
            or (
                self.normalized
                and other.normalized
                and np.array_equal(self.input_offset, other.input_offset)
                and np.array_equal(self.input_scale, other.input_scale)
            )
        )
        return same_norm and self.members == other.members

    __hash__ = None


def member_outputs(inn, X):
    """Outputs of every member on a batch; shape (k, n)."""
    Z = inn.normalize(np.asarray(X, dtype=float))
    return np.stack([nn._forward_cache(m, Z)[-1][:, 0] for m in inn.members])


def phi_bounds_batch(inn, X):
    X = check_batch(X, inn.input_dim)
    F = member_outputs(inn, X)
    return F.min(axis=0), F.max(axis=0)


def phi_bounds(inn, x):
    """``(min_i f_i(x), max_i f_i(x))``."""
    x = check_vector(x, inn.input_dim)
    F = member_outputs(inn, x[None, :])[:, 0]
    return float(F.min()), float(F.max())


def uncertainty_batch(inn, X):
    lo, hi = phi_bounds_batch(inn, X)
    return hi - lo


def uncertainty(inn, x):
    lo, hi = phi_bounds(inn, x)
    return hi - lo


def _check_data(inn, X, y):
    X = check_batch(X, inn.input_dim)
    if X.shape[0] == 0:
        raise InvalidInputError("empty batch")
    return X, check_targets(y, X.shape[0])


def _loss_terms(F, y, beta):
    upper = F.max(axis=0)
    lower = F.min(axis=0)
    over = np.maximum(y - upper, 0.0)
    under = np.maximum(lower - y, 0.0)
    per_sample = over**2 + under**2 + beta * (upper - lower)
    return per_sample, over, under


def interval_loss(inn, X, y, beta):
    X, y = _check_data(inn, X, y)
    beta = check_positive(beta, "beta")
    per_sample, _, _ = _loss_terms(member_outputs(inn, X), y, beta)
    return float(per_sample.mean())


def _member_upstreams(F, y, beta):
    """Per-member d(loss)/d(f_i) for each sample, before batch averaging."""
    k, n = F.shape
    upper_idx = F.argmax(axis=0)
    lower_idx = F.argmin(axis=0)
    cols = np.arange(n)
    over = np.maximum(y - F[upper_idx, cols], 0.0)
    under = np.maximum(F[lower_idx, cols] - y, 0.0)
    up = np.zeros((k, n))
    np.add.at(up, (upper_idx, cols), -2.0 * over + beta)
    np.add.at(up, (lower_idx, cols), 2.0 * under - beta)
    return up


def interval_loss_grads(inn, X, y, beta):
    """Batch-mean gradients of :func:`interval_loss`, one per member."""
    X, y = _check_data(inn, X, y)
    beta = check_positive(beta, "beta")
    Z = inn.normalize(X)
    caches = [nn._forward_cache(m, Z) for m in inn.members]
    F = np.stack([c[-1][:, 0] for c in caches])
    up = _member_upstreams(F, y, beta) / X.shape[0]
    return [nn._backward_cached(m, Z, c, u) for m, c, u in zip(inn.members, caches, up)]


def stationarity_residuals(inn, X, y, beta):
    """``|mean(max(y-upper,0)) - beta/2|`` and the same for the lower hinge.

    Both vanish at a stationary point of the interval loss.
    """
    X, y = _check_data(inn, X, y)
    lo, hi = phi_bounds_batch(inn, X)
    over = np.maximum(y - hi, 0.0).mean()
    under = np.maximum(lo - y, 0.0).mean()
    return float(abs(over - beta / 2.0)), float(abs(under - beta / 2.0))


@dataclass
class TrainConfig:
    beta: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    warm_start: bool = True

    def __post_init__(self):
        check_positive(self.beta, "beta")
        check_positive(self.epochs, "epochs", integer=True)
        check_positive(self.batch_size, "batch_size", integer=True)
        check_positive(self.lr, "lr")


def derive_seed(*keys):
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def init_inn(spec, k, seed, input_offset=None, input_scale=None):
    members = tuple(nn.init_random(spec, derive_seed(seed, i)) for i in range(k))
    return ImpreciseNet(members, input_offset, input_scale)


def train(inn, X, y, cfg):
    """Mini-batch Adam on the interval loss.

    Returns the trained ImpreciseNet and the per-epoch mean loss (measured on
    each mini-batch before its update).
    """
    X, y = _check_data(inn, X, y)
    if not cfg.warm_start:
        inn = init_inn(inn.spec, inn.k, derive_seed(cfg.seed, 1), inn.input_offset, inn.input_scale)
    Z = inn.normalize(X)
    members = list(inn.members)
    states = [
        nn.OptimizerState.for_network(m, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) for m in members
    ]
    rng = np.random.default_rng(derive_seed(cfg.seed, 0))
    n = X.shape[0]
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            Zb, yb = Z[idx], y[idx]
            caches = [nn._forward_cache(m, Zb) for m in members]
            F = np.stack([c[-1][:, 0] for c in caches])
            per_sample, _, _ = _loss_terms(F, yb, cfg.beta)
            total += per_sample.sum()
            up = _member_upstreams(F, yb, cfg.beta) / len(idx)
            for i, (m, c) in enumerate(zip(members, caches)):
                g = nn._backward_cached(m, Zb, c, up[i])
                try:
                    members[i], states[i] = nn.optimizer_step(m, g, states[i])
                except InvalidInputError as exc:
                    raise TrainingDivergedError(epoch, str(exc)) from exc
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(epoch)
        trace.append(float(mean_loss))
    return ImpreciseNet(tuple(members), inn.input_offset, inn.input_scale), trace


def to_dict(inn):
    obj = {
        "format": INN_FORMAT,
        "k": inn.k,
        "members": [nn.to_dict(m) for m in inn.members],
    }
    if inn.normalized:
        obj["normalizer"] = {"offset": inn.input_offset.tolist(), "scale": inn.input_scale.tolist()}
    return obj


def from_dict(obj):
    try:
        if obj.get("format") != INN_FORMAT:
            raise nn.NetworkParseError(f"unsupported format {obj.get('format')!r}")
        members = tuple(nn.from_dict(m) for m in obj["members"])
        if len(members) != int(obj["k"]):
            raise nn.NetworkParseError(f"k={obj['k']} but {len(members)} members")
        norm = obj.get("normalizer")
        if norm is None:
            return ImpreciseNet(members)
        return ImpreciseNet(members, np.array(norm["offset"]), np.array(norm["scale"]))
    except nn.NetworkParseError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise nn.NetworkParseError(f"invalid INN object: {exc}") from exc


def save(inn, path):
    with open(path, "w") as fh:
        json.dump(to_dict(inn), fh, separators=(",", ":"))


def load(path):
    """Load an INN file; a single-network file loads as a 1-member INN."""
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        obj = json.loads(data.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise nn.NetworkParseError(exc.msg, exc.pos) from exc
    if isinstance(obj, dict) and obj.get("format") == nn.NET_FORMAT:
        return ImpreciseNet((nn.from_dict(obj),))
    if not isinstance(obj, dict):
        raise nn.NetworkParseError("top-level value must be an object", 0)
    return from_dict(obj)


class ImpreciseNetRegressor(RegressorMixin, BaseEstimator):
    """Interval regressor backed by an :class:`ImpreciseNet`.

    Parameters
    ----------
    n_members : int, default=3
        Ensemble size k.
    hidden_widths : tuple of int, default=(50, 50)
    beta : float, default=1e-3
        Weight of the envelope-width penalty.
    epochs, batch_size, learning_rate :
        Adam mini-batch training settings.
    input_box : Box, tuple (lo, hi) or None
        When given, inputs are rescaled so that the box maps to [-1, 1]^d.
    warm_start : bool, default=False
        Continue from the current ensemble on repeated ``fit`` calls.
    random_state : int, default=0

    Attributes
    ----------
    inn_ : ImpreciseNet
    loss_trace_ : list of float
    n_features_in_ : int
    """

    def __init__(self, n_members=3, hidden_widths=(50, 50), beta=1e-3, epochs=100,
                 batch_size=64, learning_rate=1e-3, input_box=None, warm_start=False,
                 random_state=0):
        self.n_members = n_members
        self.hidden_widths = hidden_widths
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.input_box = input_box
        self.warm_start = warm_start
        self.random_state = random_state

    def _normalizer(self, d):
        if self.input_box is None:
            return None, None
        box = self.input_box
        lo, hi = (box.lo, box.hi) if hasattr(box, "lo") else box
        lo = check_vector(lo, d, "input_box lo")
        hi = check_vector(hi, d, "input_box hi")
        scale = (hi - lo) / 2.0
        scale[scale <= 0] = 1.0
        return (lo + hi) / 2.0, scale

    def fit(self, X, y):
        X = check_batch(X)
        y = check_targets(y, X.shape[0])
        d = X.shape[1]
        cfg = TrainConfig(beta=self.beta, epochs=self.epochs, batch_size=self.batch_size,
                          lr=self.learning_rate, seed=self.random_state, warm_start=True)
        if not (self.warm_start and hasattr(self, "inn_")):
            spec = nn.NetworkSpec(d, tuple(self.hidden_widths))
            self.inn_ = init_inn(spec, self.n_members, self.random_state, *self._normalizer(d))
        self.inn_, self.loss_trace_ = train(self.inn_, X, y, cfg)
        self.n_features_in_ = d
        return self

    def predict_bounds(self, X):
        """Lower and upper envelopes, each of shape (n,)."""
        check_is_fitted(self, "inn_")
        return phi_bounds_batch(self.inn_, X)

    def predict(self, X):
        """Envelope midpoint."""
        lo, hi = self.predict_bounds(X)
        return (lo + hi) / 2.0

    def uncertainty(self, X):
        lo, hi = self.predict_bounds(X)
        return hi - lo

    def predict_interval(self, X, lam=20.0):
        """Envelopes widened by ``lam * beta``; shape (n, 2)."""
        lo, hi = self.predict_bounds(X)
        pad = lam * self.beta
        return np.column_stack([lo - pad, hi + pad])
