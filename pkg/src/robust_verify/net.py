"""Minimal feedforward ReLU regressor.

Hidden layers use ReLU, the output layer is linear so the surrogate can take
negative values. Networks are immutable: training goes through
:func:`optimizer_step`, which returns a new :class:`Network`.
"""

import json
from dataclasses import dataclass

import numpy as np

from ._validation import InvalidInputError, check_batch, check_vector

NET_FORMAT = "robust-verify-net/1"


class NetworkParseError(ValueError):
    """Malformed model file. ``offset`` is the byte position when known."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_widths: tuple
    output_dim: int = 1
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.hidden_widths)
        object.__setattr__(self, "hidden_widths", widths)
        if int(self.input_dim) < 1:
            raise InvalidInputError("input_dim must be >= 1")
        if not widths or min(widths) < 1:
            raise InvalidInputError("hidden_widths must be a non-empty list of positive ints")
        if self.output_dim != 1:
            raise InvalidInputError("only scalar outputs (output_dim=1) are supported")
        if self.activation != "relu":
            raise InvalidInputError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Network:
    """Feedforward ReLU network; ``weights[l]`` has shape (out, in)."""

    spec: NetworkSpec
    weights: tuple
    biases: tuple

    def __post_init__(self):
        weights = tuple(_frozen(w) for w in self.weights)
        biases = tuple(_frozen(b) for b in self.biases)
        dims = self.spec.layer_dims
        if len(weights) != len(dims) - 1 or len(biases) != len(weights):
            raise InvalidInputError("layer count does not match spec")
        for l, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise InvalidInputError(
                    f"layer {l}: got W{w.shape}, b{b.shape}; "
                    f"expected W({dims[l + 1]}, {dims[l]}), b({dims[l + 1]},)"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidInputError(f"layer {l} has non-finite parameters")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def input_dim(self):
        return self.spec.input_dim

    @property
    def n_layers(self):
        return len(self.weights)

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (
            self.spec == other.spec
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    __hash__ = None


@dataclass
class Gradients:
    """Gradients of a scalar with respect to every parameter and the input.

    For :func:`backward_batch`, parameter gradients are summed over the batch
    and ``input_gradient`` holds one row per sample.
    """

    weights: list
    biases: list
    input_gradient: np.ndarray

    @classmethod
    def zeros_like(cls, net):
        return cls(
            [np.zeros_like(w) for w in net.weights],
            [np.zeros_like(b) for b in net.biases],
            np.zeros(net.input_dim),
        )

    def scaled(self, factor):
        return Gradients(
            [w * factor for w in self.weights],
            [b * factor for b in self.biases],
            self.input_gradient * factor,
        )


@dataclass
class OptimizerState:
    """Adam moment accumulators and hyperparameters."""

    m_weights: list
    m_biases: list
    v_weights: list
    v_biases: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        z = lambda arrs: [np.zeros_like(a) for a in arrs]  # noqa: E731
        return cls(z(net.weights), z(net.biases), z(net.weights), z(net.biases),
                   0, lr, beta1, beta2, eps)


def init_random(spec, seed):
    """He-initialised network: N(0, 2/fan_in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Network(spec, tuple(weights), tuple(biases))


def _forward_cache(net, X):
    """Pre-activations of every layer for a batch ``X`` of shape (n, d)."""
    pre = []
    h = X
    last = net.n_layers - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if l == last else np.maximum(z, 0.0)
    return pre


def forward_batch(net, X):
    """Evaluate the network on each row of ``X``; returns shape (n,)."""
    X = check_batch(X, net.input_dim)
    return _forward_cache(net, X)[-1][:, 0]


def forward(net, x):
    x = check_vector(x, net.input_dim)
    return float(_forward_cache(net, x[None, :])[-1][0, 0])


def pre_activations(net, x):
    """Hidden-layer pre-activations at a single input, one array per layer."""
    x = check_vector(x, net.input_dim)
    return [z[0] for z in _forward_cache(net, x[None, :])[:-1]]


def backward_batch(net, X, upstream):
    """Reverse-mode gradients of ``sum_s upstream[s] * f(X[s])``.

    The ReLU subgradient at exactly zero is taken as zero.
    """
    X = check_batch(X, net.input_dim)
    upstream = np.asarray(upstream, dtype=float).reshape(-1)
    if upstream.shape[0] != X.shape[0]:
        raise InvalidInputError("upstream must have one entry per sample")
    return _backward_cached(net, X, _forward_cache(net, X), upstream)


def _backward_cached(net, X, pre, upstream):
    n_layers = net.n_layers
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = upstream[:, None]
    for l in range(n_layers - 1, -1, -1):
        inp = X if l == 0 else np.maximum(pre[l - 1], 0.0)
        gw[l] = delta.T @ inp
        gb[l] = delta.sum(axis=0)
        delta = delta @ net.weights[l]
        if l > 0:
            delta = delta * (pre[l - 1] > 0.0)
    return Gradients(gw, gb, delta)


def backward(net, x, upstream=1.0):
    x = check_vector(x, net.input_dim)
    g = backward_batch(net, x[None, :], [float(upstream)])
    g.input_gradient = g.input_gradient[0]
    return g


def input_gradients(net, X):
    """Gradient of f with respect to the input at each row of ``X``."""
    X = np.asarray(X, dtype=float)
    pre = _forward_cache(net, X)
    delta = np.ones((X.shape[0], 1))
    for l in range(net.n_layers - 1, -1, -1):
        delta = delta @ net.weights[l]
        if l > 0:
            delta = delta * (pre[l - 1] > 0.0)
    return delta


def optimizer_step(net, grads, state):
    """One Adam update with bias correction; returns ``(net, state)``."""
    pairs = list(zip(net.weights, grads.weights)) + list(zip(net.biases, grads.biases))
    for p, g in pairs:
        if np.shape(g) != p.shape:
            raise InvalidInputError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    def update(params, gs, ms, vs):
        new_p, new_m, new_v = [], [], []
        for p, g, m, v in zip(params, gs, ms, vs):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
            new_m.append(m)
            new_v.append(v)
        return new_p, new_m, new_v

    w, mw, vw = update(net.weights, grads.weights, state.m_weights, state.v_weights)
    b, mb, vb = update(net.biases, grads.biases, state.m_biases, state.v_biases)
    new_state = OptimizerState(mw, mb, vw, vb, t, state.lr, b1, b2, state.eps)
    return Network(net.spec, tuple(w), tuple(b)), new_state


def to_dict(net):
    return {
        "format": NET_FORMAT,
        "spec": net.spec.to_dict(),
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(net.weights, net.biases)],
    }


def from_dict(obj):
    """Build a Network from its JSON object form (see :func:`to_dict`)."""
    try:
        if obj.get("format") != NET_FORMAT:
            raise NetworkParseError(f"unsupported format {obj.get('format')!r}")
        s = obj["spec"]
        spec = NetworkSpec(
            int(s["input_dim"]),
            tuple(s["hidden_widths"]),
            int(s.get("output_dim", 1)),
            s.get("activation", "relu"),
        )
        layers = obj["layers"]
        return Network(
            spec,
            tuple(np.array(layer["w"], dtype=float) for layer in layers),
            tuple(np.array(layer["b"], dtype=float) for layer in layers),
        )
    except NetworkParseError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise NetworkParseError(f"invalid network object: {exc}") from exc


def serialize(net):
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(to_dict(net), separators=(",", ":")).encode("utf-8")


def deserialize(data):
    if isinstance(data, (bytes, bytearray)):
        try:
            text = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise NetworkParseError("payload is not UTF-8", exc.start) from exc
    else:
        text = data
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise NetworkParseError(exc.msg, offset) from exc
    if not isinstance(obj, dict):
        raise NetworkParseError("top-level value must be an object", 0)
    return from_dict(obj)
