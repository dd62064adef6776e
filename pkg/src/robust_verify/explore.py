"""Uncertainty-guided active learning of an imprecise network surrogate.

Each round asks the verifier for the input where the ensemble disagrees most,
samples a box around it, labels the samples with the oracle and retrains.
The boxes visited form the explored region.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from sklearn.base import BaseEstimator

from . import inn as innm
from . import net as nn
from ._validation import InvalidInputError, check_positive, check_vector
from .verify import BnbConfig, Box, maximize_uncertainty

logger = logging.getLogger(__name__)

# RNG stream tags; every random draw is keyed by (seed, tag, ...)
TAG_CENTER, TAG_SAMPLE, TAG_LABEL, TAG_TRAIN, TAG_INIT = 1, 2, 3, 4, 5


class PerformanceOracle(Protocol):
    input_box: Box

    def evaluate(self, x0, rng=None) -> float: ...


class ExplorationError(RuntimeError):
    def __init__(self, iteration, cause):
        self.iteration = iteration
        super().__init__(f"active learning failed at iteration {iteration}: {cause}")


@dataclass
class ExploredRegion:
    boxes: list = field(default_factory=list)

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def contains(self, x, atol=0.0):
        return any(b.contains(x, atol) for b in self.boxes)

    def to_json(self):
        return json.dumps([b.to_dict() for b in self.boxes])

    @classmethod
    def from_json(cls, text):
        return cls([Box.from_dict(b) for b in json.loads(text)])


@dataclass
class ExploreConfig:
    M: int = 20
    N: int = 200
    delta: float = 0.05
    k: int = 3
    hidden_widths: tuple = (50, 50)
    beta: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    warm_start: bool = True
    normalize: bool = True
    tolerance: float = 1e-4
    max_nodes: int = 200_000
    local_search_starts: int = 4
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if int(self.M) < 0:
            raise InvalidInputError("M must be >= 0")
        check_positive(self.N, "N", integer=True)
        check_positive(self.delta, "delta")
        check_positive(self.k, "k", integer=True)
        check_positive(self.workers, "workers", integer=True)

    def train_config(self, iteration):
        return innm.TrainConfig(beta=self.beta, epochs=self.epochs, batch_size=self.batch_size,
                                lr=self.lr, seed=innm.derive_seed(self.seed, TAG_TRAIN, iteration),
                                warm_start=self.warm_start if iteration > 0 else True)

    def bnb_config(self, iteration):
        return BnbConfig(tolerance=self.tolerance, max_nodes=self.max_nodes,
                         local_search_starts=self.local_search_starts,
                         seed=innm.derive_seed(self.seed, TAG_SAMPLE, iteration, 1))


@dataclass
class ExplorationResult:
    inn: innm.ImpreciseNet
    region: ExploredRegion
    X: np.ndarray
    y: np.ndarray
    trace: list


def delta_ball(center, delta, X0):
    """L-infinity ball of half-width ``delta * range`` per dimension, clipped to X0."""
    center = check_vector(center, X0.dim, "center")
    if not X0.contains(center):
        raise InvalidInputError("center lies outside X0")
    half = delta * X0.width
    return Box(np.maximum(center - half, X0.lo), np.minimum(center + half, X0.hi))


def sample_uniform(box, n, rng):
    check_positive(n, "n", integer=True)
    return rng.uniform(box.lo, box.hi, size=(n, box.dim))


def substream(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def label(oracle, X, seed, round_index, workers=1, tag=TAG_LABEL):
    """Oracle labels; sample ``i`` uses its own stream keyed by
    ``(seed, tag, round_index, i)`` so results do not depend on scheduling."""
    def one(i):
        return float(oracle.evaluate(X[i], substream(seed, tag, round_index, i)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            y = list(pool.map(one, range(X.shape[0])))
    else:
        y = [one(i) for i in range(X.shape[0])]
    y = np.array(y)
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("oracle returned a non-finite value")
    return y


def active_learn(oracle, cfg):
    """Run ``cfg.M`` rounds of uncertainty-guided exploration.

    Round 0 trains a fresh ensemble on ``N`` samples from the box around a
    random centre of X0. Every later round maximises the ensemble's
    uncertainty over X0, samples ``N`` points from the box around the
    maximiser and retrains on everything collected so far.
    """
    X0 = oracle.input_box
    if np.any(X0.width <= 0):
        raise InvalidInputError("oracle input box is degenerate")
    d = X0.dim
    spec = nn.NetworkSpec(d, tuple(cfg.hidden_widths))
    offset, scale = (X0.center, X0.width / 2.0) if cfg.normalize else (None, None)

    center = substream(cfg.seed, TAG_CENTER).uniform(X0.lo, X0.hi)
    box = delta_ball(center, cfg.delta, X0)
    region = ExploredRegion([box])
    X = sample_uniform(box, cfg.N, substream(cfg.seed, TAG_SAMPLE, 0))
    y = label(oracle, X, cfg.seed, 0, cfg.workers)
    model = innm.init_inn(spec, cfg.k, innm.derive_seed(cfg.seed, TAG_INIT), offset, scale)
    try:
        model, losses = innm.train(model, X, y, cfg.train_config(0))
    except Exception as exc:
        raise ExplorationError(0, exc) from exc
    trace = [{"iteration": 0, "x_star": center.tolist(), "box": box.to_dict(),
              "u_lo": None, "u_hi": None, "certified": None, "nodes_expanded": 0,
              "epoch_losses": losses}]

    for it in range(1, cfg.M + 1):
        t0 = time.perf_counter()
        try:
            opt = maximize_uncertainty(model, X0, cfg.bnb_config(it))
            x_star = X0.clip(opt.witness)
            box = delta_ball(x_star, cfg.delta, X0)
            Xn = sample_uniform(box, cfg.N, substream(cfg.seed, TAG_SAMPLE, it))
            yn = label(oracle, Xn, cfg.seed, it, cfg.workers)
            region.boxes.append(box)
            X = np.vstack([X, Xn])
            y = np.concatenate([y, yn])
            model, losses = innm.train(model, X, y, cfg.train_config(it))
        except Exception as exc:
            raise ExplorationError(it, exc) from exc
        trace.append({"iteration": it, "x_star": x_star.tolist(), "box": box.to_dict(),
                      "u_lo": opt.value_lo, "u_hi": opt.value_hi, "certified": opt.certified,
                      "nodes_expanded": opt.nodes_expanded, "epoch_losses": losses,
                      "wall_time_s": time.perf_counter() - t0})
        logger.info("round %d: U*=%.4g (certified=%s, %d nodes), final loss %.4g",
                    it, opt.value_lo, opt.certified, opt.nodes_expanded, losses[-1])
    return ExplorationResult(model, region, X, y, trace)


def write_dataset_csv(path, X, y):
    d = X.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join([f"x{i}" for i in range(d)] + ["y"]) + "\n")
        for row, target in zip(X, y):
            fh.write(",".join(repr(float(v)) for v in (*row, target)) + "\n")


def read_dataset_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1], data[:, -1]


def write_trace_jsonl(path, trace):
    with open(path, "w") as fh:
        for record in trace:
            fh.write(json.dumps(record) + "\n")


class UncertaintyExplorer(BaseEstimator):
    """Estimator wrapper around :func:`active_learn`.

    ``fit`` takes an oracle instead of a labelled dataset.

    Attributes
    ----------
    inn_, region_, X_, y_, trace_
    """

    def __init__(self, M=20, N=200, delta=0.05, k=3, hidden_widths=(50, 50), beta=1e-3,
                 epochs=100, batch_size=64, learning_rate=1e-3, warm_start=True,
                 tolerance=1e-4, max_nodes=200_000, random_state=0):
        self.M = M
        self.N = N
        self.delta = delta
        self.k = k
        self.hidden_widths = hidden_widths
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warm_start = warm_start
        self.tolerance = tolerance
        self.max_nodes = max_nodes
        self.random_state = random_state

    def fit(self, oracle, y=None):
        cfg = ExploreConfig(M=self.M, N=self.N, delta=self.delta, k=self.k,
                            hidden_widths=tuple(self.hidden_widths), beta=self.beta,
                            epochs=self.epochs, batch_size=self.batch_size,
                            lr=self.learning_rate, warm_start=self.warm_start,
                            tolerance=self.tolerance, max_nodes=self.max_nodes,
                            seed=self.random_state)
        res = active_learn(oracle, cfg)
        self.inn_, self.region_, self.X_, self.y_, self.trace_ = (
            res.inn, res.region, res.X, res.y, res.trace)
        return self
