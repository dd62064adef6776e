"""Black-box performance oracles.

Every oracle maps an initial condition ``x0`` (plus an RNG stream for process
noise) to a scalar score. Closed-loop environments score a trajectory by its
mean per-step reward, with rewards clipped to [0, 1].
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import InvalidInputError, check_vector
from .verify import Box


@dataclass
class EnvConfig:
    horizon: int
    dt: float
    noise_scale: float = 0.1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise InvalidInputError("horizon must be >= 1")
        if not self.dt > 0:
            raise InvalidInputError("dt must be positive")
        if self.noise_scale < 0:
            raise InvalidInputError("noise_scale must be non-negative")


@dataclass
class Trajectory:
    states: np.ndarray   # (T+1, state_dim)
    rewards: np.ndarray  # (T,)

    def to_csv(self, path):
        T = len(self.rewards)
        d = self.states.shape[1]
        with open(path, "w") as fh:
            fh.write(",".join(["t"] + [f"s{i}" for i in range(d)] + ["reward"]) + "\n")
            for t in range(T + 1):
                r = repr(float(self.rewards[t - 1])) if t > 0 else ""
                fh.write(",".join([str(t)] + [repr(float(v)) for v in self.states[t]] + [r]) + "\n")


def _check_x0(x0, box, name):
    x0 = check_vector(x0, box.dim, "x0")
    if not box.contains(x0):
        raise InvalidInputError(f"x0={x0.tolist()} lies outside the {name} input box")
    return x0


def _noise(rng, scale):
    if scale == 0.0 or rng is None:
        return 0.0
    return rng.uniform(-scale, scale)


WATER_TANKS_BOX = Box(np.array([0.5, 0.5]), np.array([9.5, 9.5]))
WATER_TANKS_DEFAULTS = {
    "inflow": 2.0,      # pump flow when on
    "transfer": 0.5,    # tank 1 -> tank 2 flow per unit level1
    "drain": 0.5,       # tank 2 outflow per unit level2
    "pump_on_below": 4.0,
    "pump_off_above": 6.0,
    "target": 5.0,
    "capacity": 10.0,
}


def water_tanks_config(**overrides):
    params = dict(WATER_TANKS_DEFAULTS)
    params.update(overrides.pop("params", {}))
    return EnvConfig(**{"horizon": 50, "dt": 0.1, "noise_scale": 0.1, **overrides}, params=params)


def water_tanks(x0, cfg=None, rng=None):
    """Two cascaded tanks with a hysteresis pump on tank 1.

    The pump starts on iff level1 is below the midpoint of the hysteresis
    band. Reward is ``1 - |level2 - target| / target`` clipped to [0, 1].
    """
    cfg = cfg or water_tanks_config()
    p = cfg.params
    l1, l2 = _check_x0(x0, WATER_TANKS_BOX, "water_tanks")
    cap = p["capacity"]
    pump = l1 < (p["pump_on_below"] + p["pump_off_above"]) / 2.0
    states = np.empty((cfg.horizon + 1, 2))
    rewards = np.empty(cfg.horizon)
    states[0] = (l1, l2)
    for t in range(cfg.horizon):
        if l1 < p["pump_on_below"]:
            pump = True
        elif l1 > p["pump_off_above"]:
            pump = False
        inflow = (p["inflow"] + _noise(rng, cfg.noise_scale)) if pump else 0.0
        transfer = p["transfer"] * l1
        l1 = min(max(l1 + cfg.dt * (inflow - transfer), 0.0), cap)
        l2 = min(max(l2 + cfg.dt * (transfer - p["drain"] * l2), 0.0), cap)
        states[t + 1] = (l1, l2)
        rewards[t] = min(max(1.0 - abs(l2 - p["target"]) / p["target"], 0.0), 1.0)
    return float(rewards.mean()), Trajectory(states, rewards)


PENDULUM_BOX = Box(np.array([-math.pi, -2.0]), np.array([math.pi, 2.0]))
PENDULUM_DEFAULTS = {
    "gravity": 9.81,
    "length": 1.0,
    "mass": 1.0,
    "damping": 0.1,
    "max_torque": 5.0,
    "kp": 20.0,
    "kd": 5.0,
    "energy_gain": 1.0,
    "capture_angle": 0.6,
}


def pendulum_config(**overrides):
    params = dict(PENDULUM_DEFAULTS)
    params.update(overrides.pop("params", {}))
    return EnvConfig(**{"horizon": 100, "dt": 0.05, "noise_scale": 0.1, **overrides}, params=params)


def _wrap(theta):
    return math.atan2(math.sin(theta), math.cos(theta))


def pendulum(x0, cfg=None, rng=None):
    """Damped pendulum, angle measured from upright, under an energy-pumping
    swing-up law that hands over to PD control near the top.

    Reward ``(1 + cos theta) / 2``. The controller is odd in the state, so
    with noise off the score is symmetric under ``x0 -> -x0``.
    """
    cfg = cfg or pendulum_config()
    p = cfg.params
    theta, omega = _check_x0(x0, PENDULUM_BOX, "pendulum")
    g, L, m = p["gravity"], p["length"], p["mass"]
    inertia = m * L * L
    states = np.empty((cfg.horizon + 1, 2))
    rewards = np.empty(cfg.horizon)
    states[0] = (theta, omega)
    for t in range(cfg.horizon):
        err = _wrap(theta)
        if abs(err) < p["capture_angle"]:
            u = -p["kp"] * err - p["kd"] * omega
        else:
            # energy zero at upright rest; pump towards it
            energy = 0.5 * inertia * omega * omega - m * g * L * (1.0 - math.cos(theta))
            u = -p["energy_gain"] * energy * omega
        u = max(-p["max_torque"], min(p["max_torque"], u)) + _noise(rng, cfg.noise_scale)
        alpha = (m * g * L * math.sin(theta) - p["damping"] * omega + u) / inertia
        omega = omega + cfg.dt * alpha
        theta = theta + cfg.dt * omega
        states[t + 1] = (theta, omega)
        rewards[t] = (1.0 + math.cos(theta)) / 2.0
    return float(rewards.mean()), Trajectory(states, rewards)


QUAD_CENTER = np.array([0.3, -0.2])
QUAD12_CENTER = np.linspace(-0.5, 0.5, 12)

ANALYTIC_BOXES = {
    "SINE2D": Box(np.array([-1.0, -1.0]), np.array([1.0, 1.0])),
    "HAT1D": Box(np.array([0.0]), np.array([1.0])),
    "QUAD": Box(np.array([-1.0, -1.0]), np.array([1.0, 1.0])),
    "QUAD12": Box(-np.ones(12), np.ones(12)),
}


def analytic_oracle(name, x):
    """Closed-form test functions.

    SINE2D  sin(3 x1) cos(2 x2) on [-1, 1]^2
    HAT1D   min(x, 1 - x) on [0, 1]; max 0.5 at 0.5
    QUAD    -||x - c||^2 with c = (0.3, -0.2); max 0 at c
    QUAD12  -||x - c||^2 + 0.1 sum_i cos(pi (x_i - c_i)) on [-1, 1]^12 with
            c evenly spaced in [-0.5, 0.5]; both terms peak at c, max 1.2
    """
    name = name.upper()
    if name not in ANALYTIC_BOXES:
        raise InvalidInputError(f"unknown analytic oracle {name!r}")
    box = ANALYTIC_BOXES[name]
    x = _check_x0(x, box, name)
    if name == "SINE2D":
        return float(math.sin(3.0 * x[0]) * math.cos(2.0 * x[1]))
    if name == "HAT1D":
        return float(min(x[0], 1.0 - x[0]))
    if name == "QUAD":
        return float(-np.sum((x - QUAD_CENTER) ** 2))
    diff = x - QUAD12_CENTER
    return float(-np.sum(diff**2) + 0.1 * np.sum(np.cos(math.pi * diff)))


ANALYTIC_OPTIMA = {"HAT1D": 0.5, "QUAD": 0.0, "QUAD12": 1.2}


class Oracle:
    """A named performance function over an input box.

    ``evaluate(x0, rng)`` returns a scalar; ``rng`` drives process noise and
    may be None for noiseless evaluation. ``label_noise`` adds uniform noise
    of that half-width to analytic oracles.
    """

    def __init__(self, name, input_box, fn, cfg=None, label_noise=0.0):
        self.name = name
        self.input_box = input_box
        self._fn = fn
        self.cfg = cfg
        self.label_noise = label_noise

    def evaluate(self, x0, rng=None):
        if self.cfg is not None:
            return self._fn(x0, self.cfg, rng)[0]
        y = self._fn(x0)
        if self.label_noise and rng is not None:
            y += rng.uniform(-self.label_noise, self.label_noise)
        return y

    def rollout(self, x0, rng=None):
        if self.cfg is None:
            raise InvalidInputError(f"{self.name} has no trajectory")
        return self._fn(x0, self.cfg, rng)[1]

    def __repr__(self):
        return f"Oracle({self.name!r})"


def _analytic(name):
    def make(label_noise=0.0, **_):
        return Oracle(name.lower(), ANALYTIC_BOXES[name],
                      lambda x: analytic_oracle(name, x), label_noise=label_noise)
    return make


ENVIRONMENTS = {
    "water_tanks": lambda **kw: Oracle("water_tanks", WATER_TANKS_BOX, water_tanks,
                                       water_tanks_config(**kw)),
    "pendulum": lambda **kw: Oracle("pendulum", PENDULUM_BOX, pendulum, pendulum_config(**kw)),
    "sine2d": _analytic("SINE2D"),
    "hat1d": _analytic("HAT1D"),
    "quad": _analytic("QUAD"),
    "quad12": _analytic("QUAD12"),
}


def make_oracle(name, **options):
    """Look up an oracle by registry name; ``options`` go to its config."""
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}"
        ) from None
    return factory(**options)
