"""Certified global optimisation of ReLU networks and INN envelopes over boxes.

Best-first branch-and-bound on the input domain. Each node is bounded by
interval bound propagation; when every hidden ReLU of a member is stable on a
node, the member is affine there and its optimum over the node is computed
exactly at a box corner, which closes the node.
"""

import heapq
import time
from dataclasses import dataclass

import numpy as np

from . import net as nn
from ._validation import InvalidInputError, check_positive, check_vector

# relative slack added to bounds to absorb floating-point rounding
_ROUND_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = check_vector(self.lo, name="lo")
        hi = check_vector(self.hi, lo.shape[0], name="hi")
        if np.any(lo > hi):
            raise InvalidInputError("box has lo > hi in some dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.shape[0]

    @property
    def width(self):
        return self.hi - self.lo

    @property
    def center(self):
        return (self.lo + self.hi) / 2.0

    @property
    def volume(self):
        return float(np.prod(self.width))

    def contains(self, x, atol=0.0):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - atol) and np.all(x <= self.hi + atol))

    def contains_box(self, other, atol=0.0):
        return bool(np.all(other.lo >= self.lo - atol) and np.all(other.hi <= self.hi + atol))

    def intersection_volume(self, other):
        overlap = np.minimum(self.hi, other.hi) - np.maximum(self.lo, other.lo)
        return float(np.prod(np.clip(overlap, 0.0, None)))

    def clip(self, x):
        return np.clip(x, self.lo, self.hi)

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    __hash__ = None

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, obj):
        return cls(np.array(obj["lo"], dtype=float), np.array(obj["hi"], dtype=float))


@dataclass
class BnbConfig:
    tolerance: float = 1e-4
    max_nodes: int = 200_000
    local_search_starts: int = 4
    local_search_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        check_positive(self.tolerance, "tolerance")
        check_positive(self.max_nodes, "max_nodes", integer=True)
        check_positive(self.local_search_starts, "local_search_starts", integer=True)


@dataclass
class CertifiedOptimum:
    """Enclosure ``[value_lo, value_hi]`` of a global optimum.

    ``witness`` attains the incumbent: ``value_lo`` for a maximisation,
    ``value_hi`` for a minimisation.
    """

    value_lo: float
    value_hi: float
    witness: np.ndarray
    certified: bool
    nodes_expanded: int
    wall_time: float
    sense: str = "max"

    @property
    def gap(self):
        return self.value_hi - self.value_lo

    def to_dict(self, problem=None, box=None):
        out = {
            "problem": problem,
            "box": box.to_dict() if box is not None else None,
            "value_lo": self.value_lo,
            "value_hi": self.value_hi,
            "witness": np.asarray(self.witness).tolist(),
            "certified": self.certified,
            "nodes_expanded": self.nodes_expanded,
            "wall_time_s": self.wall_time,
        }
        return out


def _check_box(box, dim):
    if not isinstance(box, Box):
        box = Box(*box)
    if box.dim != dim:
        raise InvalidInputError(f"box has dimension {box.dim}, network expects {dim}")
    return box


def ibp_bounds(net, box):
    """Interval bounds on ``forward(net, x)`` over every ``x`` in ``box``."""
    box = _check_box(box, net.input_dim)
    lo, hi, _ = _MemberBounder(net).propagate(box.lo, box.hi)
    return lo, hi


class _MemberBounder:
    """IBP plus exact affine collapse for one network."""

    def __init__(self, net):
        self.net = net
        self.w_pos = [np.maximum(w, 0.0) for w in net.weights]
        self.w_neg = [np.minimum(w, 0.0) for w in net.weights]

    def propagate(self, lo, hi):
        """Return (out_lo, out_hi, masks); ``masks`` is None unless every
        hidden ReLU is stable on the box."""
        l, u = lo, hi
        masks = []
        last = self.net.n_layers - 1
        for i, b in enumerate(self.net.biases):
            zl = self.w_pos[i] @ l + self.w_neg[i] @ u + b
            zu = self.w_pos[i] @ u + self.w_neg[i] @ l + b
            if i == last:
                return float(zl[0]), float(zu[0]), masks
            if masks is not None:
                active = zl >= 0.0
                if np.all(active | (zu <= 0.0)):
                    masks.append(active)
                else:
                    masks = None
            l = np.maximum(zl, 0.0)
            u = np.maximum(zu, 0.0)
        raise AssertionError("unreachable")

    def affine(self, masks):
        """``(a, c)`` with ``f(x) = a @ x + c`` under the given activation pattern."""
        ws, bs = self.net.weights, self.net.biases
        A = ws[0]
        c = bs[0]
        for i, m in enumerate(masks):
            A = ws[i + 1] @ (A * m[:, None])
            c = ws[i + 1] @ (c * m) + bs[i + 1]
        return A[0], float(c[0])

    def info(self, lo, hi):
        out_lo, out_hi, masks = self.propagate(lo, hi)
        if masks is None:
            return out_lo, out_hi, None
        a, c = self.affine(masks)
        x_max = np.where(a > 0, hi, lo)
        x_min = np.where(a > 0, lo, hi)
        return a @ x_min + c, a @ x_max + c, (a, c, x_min, x_max)


def _slack(v):
    return _ROUND_SLACK * (1.0 + abs(v))


class _EnvelopeProblem:
    """Maximisation of an envelope objective built from member networks.

    kind = "upper":  max_i f_i
    kind = "negmin": -min_i f_i
    kind = "unc":    max_i f_i - min_j f_j
    """

    def __init__(self, members, kind):
        self.members = list(members)
        self.bounders = [_MemberBounder(m) for m in self.members]
        self.kind = kind

    def values_and_grads(self, X):
        caches = [nn._forward_cache(m, X) for m in self.members]
        F = np.stack([c[-1][:, 0] for c in caches])
        cols = np.arange(X.shape[0])
        i_max = F.argmax(axis=0)
        i_min = F.argmin(axis=0)
        G = np.stack([nn.input_gradients(m, X) for m in self.members])
        if self.kind == "upper":
            return F[i_max, cols], G[i_max, cols]
        if self.kind == "negmin":
            return -F[i_min, cols], -G[i_min, cols]
        return F[i_max, cols] - F[i_min, cols], G[i_max, cols] - G[i_min, cols]

    def values(self, X):
        F = np.stack([nn._forward_cache(m, X)[-1][:, 0] for m in self.members])
        if self.kind == "upper":
            return F.max(axis=0)
        if self.kind == "negmin":
            return -F.min(axis=0)
        return F.max(axis=0) - F.min(axis=0)

    def bound(self, lo, hi):
        """Upper bound of the objective on the box, and a witness when the
        bound is attained exactly."""
        infos = [b.info(lo, hi) for b in self.bounders]
        if self.kind == "upper":
            cands = [(i_hi, ex[3] if ex else None) for _, i_hi, ex in infos]
        elif self.kind == "negmin":
            cands = [(-i_lo, ex[2] if ex else None) for i_lo, _, ex in infos]
        else:
            cands = self._pair_bounds(infos, lo, hi)
        best = max(range(len(cands)), key=lambda j: cands[j][0])
        ub, witness = cands[best]
        return ub + _slack(ub), witness

    def _pair_bounds(self, infos, lo, hi):
        k = len(infos)
        if k == 1:
            return [(0.0, (lo + hi) / 2.0)]
        cands = []
        for i in range(k):
            for j in range(k):
                if i == j:
                    continue
                ei, ej = infos[i][2], infos[j][2]
                if ei is not None and ej is not None:
                    a = ei[0] - ej[0]
                    x = np.where(a > 0, hi, lo)
                    cands.append((a @ x + (ei[1] - ej[1]), x))
                else:
                    cands.append((infos[i][1] - infos[j][0], None))
        return cands


def local_search(objective, box, starts=4, seed=0, steps=200):
    """Projected gradient ascent from the box centre and ``starts`` random points.

    ``objective(X)`` must return ``(values, grads)`` for a batch ``X``. Moves are
    along the normalised gradient; a start's step is halved whenever its move
    does not improve the value. Returns ``(x_best, value_best)``.
    """
    rng = np.random.default_rng(seed)
    d = box.dim
    P = np.vstack([box.center[None, :], rng.uniform(box.lo, box.hi, size=(starts, d))])
    v, g = objective(P)
    v = np.asarray(v, dtype=float).copy()
    g = np.asarray(g, dtype=float).copy()
    widths = box.width[box.width > 0]
    if widths.size:
        step = np.full(P.shape[0], 0.1 * widths.min())
        for _ in range(steps):
            norms = np.linalg.norm(g, axis=1)
            safe = np.where(norms > 0, norms, 1.0)
            cand = np.clip(P + (step / safe)[:, None] * g, box.lo, box.hi)
            vc, gc = objective(cand)
            better = vc > v
            P[better] = cand[better]
            v[better] = vc[better]
            g[better] = gc[better]
            step[~better] *= 0.5
    best = int(np.argmax(v))
    return P[best].copy(), float(v[best])


def _branch_and_bound(problem, lo, hi, cfg):
    t0 = time.perf_counter()
    tol = cfg.tolerance
    root_width = hi - lo
    inv_root = np.where(root_width > 0, 1.0 / np.where(root_width > 0, root_width, 1.0), 0.0)

    inc_x, inc_v = local_search(problem.values_and_grads, Box(lo, hi),
                                cfg.local_search_starts, cfg.seed, cfg.local_search_steps)
    closed_hi = -np.inf
    counter = 0
    heap = []

    def offer(x):
        nonlocal inc_x, inc_v
        v = float(problem.values(x[None, :])[0])
        if v > inc_v:
            inc_x, inc_v = x.copy(), v

    def consider(nlo, nhi):
        nonlocal closed_hi, counter
        ub, witness = problem.bound(nlo, nhi)
        if witness is not None:
            offer(witness)
            closed_hi = max(closed_hi, ub)
        elif ub <= inc_v + tol:
            closed_hi = max(closed_hi, ub)
        else:
            heapq.heappush(heap, (-ub, counter, nlo, nhi))
            counter += 1

    consider(lo, hi)
    nodes = 0
    while heap:
        top = -heap[0][0]
        if top <= inc_v + tol or nodes >= cfg.max_nodes:
            break
        neg_ub, _, nlo, nhi = heapq.heappop(heap)
        nodes += 1
        offer((nlo + nhi) / 2.0)
        scaled = (nhi - nlo) * inv_root
        dim = int(np.argmax(scaled))
        if scaled[dim] <= 0.0:
            closed_hi = max(closed_hi, -neg_ub)
            continue
        mid = (nlo[dim] + nhi[dim]) / 2.0
        left_hi = nhi.copy()
        left_hi[dim] = mid
        right_lo = nlo.copy()
        right_lo[dim] = mid
        consider(nlo, left_hi)
        consider(right_lo, nhi)

    value_hi = max(inc_v, closed_hi, -heap[0][0] if heap else -np.inf)
    return CertifiedOptimum(
        value_lo=inc_v,
        value_hi=float(value_hi),
        witness=inc_x,
        certified=bool(value_hi - inc_v <= tol),
        nodes_expanded=nodes,
        wall_time=time.perf_counter() - t0,
    )


def _as_minimum(opt):
    return CertifiedOptimum(-opt.value_hi, -opt.value_lo, opt.witness, opt.certified,
                            opt.nodes_expanded, opt.wall_time, "min")


def _solve(members, kind, box, cfg, offset=None, scale=None):
    """Run B&B in member coordinates; ``offset``/``scale`` map x -> z."""
    cfg = cfg or BnbConfig()
    if offset is None:
        opt = _branch_and_bound(_EnvelopeProblem(members, kind), box.lo.copy(), box.hi.copy(), cfg)
    else:
        zlo = (box.lo - offset) / scale
        zhi = (box.hi - offset) / scale
        opt = _branch_and_bound(_EnvelopeProblem(members, kind), zlo, zhi, cfg)
        opt.witness = box.clip(opt.witness * scale + offset)
    return _as_minimum(opt) if kind == "negmin" else opt


def maximize_net(net, box, cfg=None):
    box = _check_box(box, net.input_dim)
    return _solve([net], "upper", box, cfg)


def minimize_net(net, box, cfg=None):
    box = _check_box(box, net.input_dim)
    return _solve([net], "negmin", box, cfg)


def _inn_solve(inn, kind, box, cfg):
    box = _check_box(box, inn.input_dim)
    return _solve(inn.members, kind, box, cfg, inn.input_offset, inn.input_scale)


def maximize_uncertainty(inn, box, cfg=None):
    """Certified maximum of ``max_i f_i(x) - min_j f_j(x)`` over the box."""
    return _inn_solve(inn, "unc", box, cfg)


def minimize_phi_lower(inn, box, cfg=None):
    """Certified minimum of the lower envelope ``min_i f_i(x)`` over the box."""
    return _inn_solve(inn, "negmin", box, cfg)


def maximize_phi_upper(inn, box, cfg=None):
    return _inn_solve(inn, "upper", box, cfg)
