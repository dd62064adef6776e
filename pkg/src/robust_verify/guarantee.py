"""Performance lower bounds and the family of input distributions they hold over.

The bound is ``epsilon = Phi_l - lam * beta`` where ``Phi_l`` is the certified
minimum of the lower envelope over every explored box. The family is the
alpha-contamination ``(1 - alpha) P_mix + alpha Q`` of a mixture of uniforms
over the explored boxes; its upper probability of an event A is
``(1 - alpha) P_mix(A) + alpha``.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import inn as innm
from ._validation import InvalidInputError, check_open_unit, check_positive
from .explore import label
from .verify import BnbConfig, Box, minimize_phi_lower

UNIFORM, VOLUME = "uniform", "volume"
MIXTURE, CONTAMINATED, AMBIENT_UNIFORM = "mixture", "contaminated", "ambient_uniform"
MODES = (MIXTURE, CONTAMINATED, AMBIENT_UNIFORM)
TAG_EVAL = 6

COVERAGE_COLUMNS = ("env", "beta", "lambda", "mode", "method", "coverage",
                    "lower_bound_coverage", "mean_width", "median_width")


@dataclass
class MixtureOfUniforms:
    boxes: list
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.boxes) == 0 or len(self.boxes) != self.weights.shape[0]:
            raise InvalidInputError("need one weight per box and at least one box")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise InvalidInputError("weights must be non-negative and sum to 1")
        if any(b.volume <= 0 for b in self.boxes):
            raise InvalidInputError("mixture boxes must have positive volume")

    def prob(self, event):
        """Exact probability of the box ``event``."""
        fracs = [b.intersection_volume(event) / b.volume for b in self.boxes]
        if all(f == 1.0 for f in fracs):
            return 1.0
        return float(np.dot(self.weights, fracs))


@dataclass
class ContaminatedFamily:
    """``{(1 - alpha) mixture + alpha Q}``; Q defaults to uniform on ``ambient``."""

    mixture: MixtureOfUniforms
    alpha: float
    ambient: Box

    def __post_init__(self):
        check_open_unit(self.alpha, "alpha")


def build_family(region, weight_scheme=UNIFORM, alpha=0.05, X0=None):
    boxes = list(region)
    if not boxes:
        raise InvalidInputError("explored region is empty")
    if X0 is None:
        raise InvalidInputError("X0 is required")
    alpha = check_open_unit(alpha, "alpha")
    if weight_scheme == UNIFORM:
        weights = np.full(len(boxes), 1.0 / len(boxes))
    elif weight_scheme == VOLUME:
        vols = np.array([b.volume for b in boxes])
        if np.any(vols <= 0):
            raise InvalidInputError("VOLUME weighting needs boxes of positive volume")
        weights = vols / vols.sum()
    else:
        raise InvalidInputError(f"unknown weight scheme {weight_scheme!r}")
    return ContaminatedFamily(MixtureOfUniforms(boxes, weights), alpha, X0)


def _uniform_in(lo, hi, rng, n):
    return lo + rng.random((n, lo.shape[-1])) * (hi - lo)


def sample_family(family, n, rng, mode=MIXTURE):
    """Draw ``n`` inputs from one member of the family.

    MIXTURE: box j with probability gamma_j, then uniform inside it.
    CONTAMINATED: ambient uniform with probability alpha, else MIXTURE.
    AMBIENT_UNIFORM: uniform over the whole input box.
    """
    n = check_positive(n, "n", integer=True)
    amb = family.ambient
    if mode == AMBIENT_UNIFORM:
        return _uniform_in(amb.lo, amb.hi, rng, n)
    if mode not in (MIXTURE, CONTAMINATED):
        raise InvalidInputError(f"unknown sampling mode {mode!r}")
    mix = family.mixture
    lo = np.array([b.lo for b in mix.boxes])
    hi = np.array([b.hi for b in mix.boxes])
    j = rng.choice(len(mix.boxes), size=n, p=mix.weights)
    X = _uniform_in(lo[j], hi[j], rng, n)
    if mode == CONTAMINATED:
        swap = rng.random(n) < family.alpha
        X[swap] = _uniform_in(amb.lo, amb.hi, rng, int(swap.sum()))
    return X


def upper_prob(family, event):
    """Upper probability of a box event over the contaminated family."""
    amb = family.ambient
    lo = np.maximum(event.lo, amb.lo)
    hi = np.maximum(np.minimum(event.hi, amb.hi), lo)
    p_mix = family.mixture.prob(Box(lo, hi))
    # written so that p_mix == 1 gives exactly 1
    return 1.0 - (1.0 - family.alpha) * (1.0 - p_mix)


@dataclass
class GuaranteeReport:
    epsilon: float
    phi_l: float
    lam: float
    beta: float
    per_box: list
    certified: list
    alpha: float = None
    weight_scheme: str = None

    @property
    def confidence(self):
        return 1.0 - 1.0 / self.lam

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "phi_l": self.phi_l,
            "lambda": self.lam,
            "beta": self.beta,
            "confidence": self.confidence,
            "alpha": self.alpha,
            "weight_scheme": self.weight_scheme,
            "all_certified": all(self.certified),
            "per_box": self.per_box,
        }


def performance_lower_bound(inn, region, lam, beta, cfg=None, workers=1):
    """Certified lower bound ``Phi_l - lam * beta`` on the explored region.

    ``Phi_l`` uses the sound end (``value_lo``) of every per-box enclosure, so
    the bound stays conservative when a box is not certified.
    """
    lam = check_positive(lam, "lambda")
    beta = check_positive(beta, "beta")
    boxes = list(region)
    if not boxes:
        raise InvalidInputError("explored region is empty")
    cfg = cfg or BnbConfig()

    def solve(box):
        return minimize_phi_lower(inn, box, cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            opts = list(pool.map(solve, boxes))
    else:
        opts = [solve(b) for b in boxes]
    phi_l = min(o.value_lo for o in opts)
    return GuaranteeReport(
        epsilon=phi_l - lam * beta,
        phi_l=phi_l,
        lam=lam,
        beta=beta,
        per_box=[o.to_dict("min_phi_lower", b) for o, b in zip(opts, boxes)],
        certified=[o.certified for o in opts],
    )


def inflated_interval_batch(inn, X, lam, beta):
    lo, hi = innm.phi_bounds_batch(inn, X)
    pad = lam * beta
    return lo - pad, hi + pad


def inflated_interval(inn, x, lam, beta):
    """``(lower(x) - lam*beta, upper(x) + lam*beta)``."""
    lo, hi = innm.phi_bounds(inn, x)
    pad = lam * beta
    return lo - pad, hi + pad


@dataclass
class CoverageStats:
    mode: str
    method: str
    n: int
    coverage: float
    lower_bound_coverage: float
    mean_width: float
    median_width: float
    raw_coverage: float = float("nan")
    records: dict = field(default=None, repr=False)

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "mode", "method", "n", "coverage", "lower_bound_coverage",
            "mean_width", "median_width", "raw_coverage")}

    def row(self, env, beta, lam):
        return {"env": env, "beta": beta, "lambda": lam, "mode": self.mode,
                "method": self.method, "coverage": self.coverage,
                "lower_bound_coverage": self.lower_bound_coverage,
                "mean_width": self.mean_width, "median_width": self.median_width}


def draw_labeled(oracle, family, n_test, rng, mode, workers=1):
    """Test inputs from ``mode`` and their oracle labels."""
    X = sample_family(family, n_test, rng, mode)
    seed = int(rng.integers(2**62))
    return X, label(oracle, X, seed, 0, workers, tag=TAG_EVAL)


def coverage_eval(inn, oracle, family, lam, beta, n_test, rng, mode=MIXTURE,
                  epsilon=None, workers=1):
    """Empirical coverage of the inflated intervals and of ``y >= epsilon``.

    ``raw_coverage`` is the same fraction for the uninflated envelopes.
    """
    X, y = draw_labeled(oracle, family, n_test, rng, mode, workers)
    return interval_stats(inn, X, y, lam, beta, mode, epsilon)


def interval_stats(inn, X, y, lam, beta, mode, epsilon=None):
    lo, hi = innm.phi_bounds_batch(inn, X)
    pad = lam * beta
    ilo, ihi = lo - pad, hi + pad
    covered = (y >= ilo) & (y <= ihi)
    width = ihi - ilo
    lb = float("nan") if epsilon is None else float(np.mean(y >= epsilon))
    return CoverageStats(
        mode=mode, method="inn", n=int(X.shape[0]),
        coverage=float(covered.mean()),
        lower_bound_coverage=lb,
        mean_width=float(width.mean()),
        median_width=float(np.median(width)),
        raw_coverage=float(np.mean((y >= lo) & (y <= hi))),
        records={"X": X, "y": y, "lo": ilo, "hi": ihi, "covered": covered},
    )


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def format_coverage_csv(rows):
    lines = [",".join(COVERAGE_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in COVERAGE_COLUMNS))
    return "\n".join(lines) + "\n"
