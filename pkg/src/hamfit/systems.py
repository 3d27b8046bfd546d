"""The nine benchmark systems: closed-form energies, fields, and generators.

Short names follow the usual convention: P/S/HH are conservative, DP/DS/UD
add Rayleigh damping with coefficient gamma, and WP/FS/DE add an external
force on the momentum channel on top of damping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Union

import numpy as np

from .core import DynamicsClass, ObservedDataset, PhaseState
from .odeint import IntegrationConfig, IntegrationError, integrate


@dataclass(frozen=True)
class LinearRamp:
    """F(t) = v * t (a steadily growing push)."""

    v: float


@dataclass(frozen=True)
class SineProduct:
    """F(t) = F0 * sin(omega t) * sin(2 omega t)."""

    F0: float
    omega: float


@dataclass(frozen=True)
class ConstantForce:
    """F(t) = F_ext."""

    F_ext: float


ForcingSpec = Union[LinearRamp, SineProduct, ConstantForce]


def forcing_value(forcing: ForcingSpec, t):
    if isinstance(forcing, LinearRamp):
        return forcing.v * t
    if isinstance(forcing, SineProduct):
        return forcing.F0 * np.sin(forcing.omega * t) * np.sin(2.0 * forcing.omega * t)
    if isinstance(forcing, ConstantForce):
        return forcing.F_ext * np.ones_like(np.asarray(t, dtype=np.float64))
    raise TypeError(f"unknown forcing {type(forcing).__name__}")


_PENDULUMS = ("P", "DP", "WP")
_SPRINGS = ("S", "DS", "FS")
_DUFFINGS = ("UD", "DE")
_CLASS_BY_NAME = {
    "P": DynamicsClass.CONSERVATIVE,
    "S": DynamicsClass.CONSERVATIVE,
    "HH": DynamicsClass.CONSERVATIVE,
    "DP": DynamicsClass.DISSIPATIVE,
    "DS": DynamicsClass.DISSIPATIVE,
    "UD": DynamicsClass.DISSIPATIVE,
    "WP": DynamicsClass.PORT,
    "FS": DynamicsClass.PORT,
    "DE": DynamicsClass.PORT,
}

LONG_NAMES = {
    "P": "single_pendulum",
    "S": "mass_spring",
    "HH": "henon_heiles",
    "DP": "damped_pendulum",
    "DS": "damped_spring",
    "UD": "unforced_duffing",
    "WP": "windy_pendulum",
    "FS": "forced_spring",
    "DE": "forced_duffing",
}


@dataclass(frozen=True)
class SystemSpec:
    """One benchmark system with its physical constants.

    ``constants`` carries the closed-form parameters (m, g, l, k, alpha,
    beta) plus the damping coefficient gamma for non-conservative systems.
    """

    name: str
    dynamics_class: DynamicsClass
    d: int
    constants: Mapping[str, float]
    forcing: ForcingSpec | None = None

    def __post_init__(self) -> None:
        if self.name not in _CLASS_BY_NAME:
            raise ValueError(f"unknown system {self.name!r}; expected one of {sorted(_CLASS_BY_NAME)}")
        expected = _CLASS_BY_NAME[self.name]
        if DynamicsClass(self.dynamics_class) is not expected:
            raise ValueError(
                f"system {self.name} is {expected.value}, not {DynamicsClass(self.dynamics_class).value}"
            )
        expected_d = 2 if self.name == "HH" else 1
        if self.d != expected_d:
            raise ValueError(f"system {self.name} has d = {expected_d}, got {self.d}")
        object.__setattr__(self, "constants", MappingProxyType(dict(self.constants)))
        object.__setattr__(self, "dynamics_class", DynamicsClass(self.dynamics_class))
        if self.dynamics_class.has_dissipation:
            if "gamma" not in self.constants:
                raise ValueError(f"system {self.name} needs a 'gamma' constant")
            if self.constants["gamma"] < 0:
                raise ValueError("gamma must be non-negative")
        elif "gamma" in self.constants:
            raise ValueError(f"conservative system {self.name} must not carry gamma")
        if self.dynamics_class.has_forcing != (self.forcing is not None):
            raise ValueError(
                f"system {self.name}: forcing must be present exactly for port systems"
            )


def _flat(x) -> np.ndarray:
    if isinstance(x, PhaseState):
        return x.x
    return np.asarray(x, dtype=np.float64)


def true_hamiltonian(spec: SystemSpec, x) -> np.ndarray:
    """Closed-form H(x). Accepts a PhaseState or an array (..., 2d)."""
    x = _flat(x)
    d = spec.d
    q, p = x[..., :d], x[..., d:]
    c = spec.constants
    if spec.name in _PENDULUMS:
        m, g, l = c["m"], c["g"], c["l"]
        return p[..., 0] ** 2 / (2.0 * m * l**2) - m * g * l * np.cos(q[..., 0])
    if spec.name in _SPRINGS:
        m, k = c["m"], c["k"]
        return 0.5 * k * q[..., 0] ** 2 + p[..., 0] ** 2 / (2.0 * m)
    if spec.name in _DUFFINGS:
        m = c.get("m", 1.0)
        alpha, beta = c["alpha"], c["beta"]
        return p[..., 0] ** 2 / (2.0 * m) + alpha * q[..., 0] ** 2 / 2.0 + beta * q[..., 0] ** 4 / 4.0
    # Henon-Heiles, fixed unit coefficients
    return (
        0.5 * (p[..., 0] ** 2 + p[..., 1] ** 2)
        + 0.5 * (q[..., 0] ** 2 + q[..., 1] ** 2)
        + q[..., 0] ** 2 * q[..., 1]
        - q[..., 1] ** 3 / 3.0
    )


def true_grad_hamiltonian(spec: SystemSpec, x) -> np.ndarray:
    """Analytic gradient (dH/dq, dH/dp), shape (..., 2d)."""
    x = _flat(x)
    d = spec.d
    q, p = x[..., :d], x[..., d:]
    c = spec.constants
    if spec.name in _PENDULUMS:
        m, g, l = c["m"], c["g"], c["l"]
        dq = m * g * l * np.sin(q[..., 0])
        dp = p[..., 0] / (m * l**2)
        return np.stack([dq, dp], axis=-1)
    if spec.name in _SPRINGS:
        m, k = c["m"], c["k"]
        return np.stack([k * q[..., 0], p[..., 0] / m], axis=-1)
    if spec.name in _DUFFINGS:
        m = c.get("m", 1.0)
        alpha, beta = c["alpha"], c["beta"]
        dq = alpha * q[..., 0] + beta * q[..., 0] ** 3
        return np.stack([dq, p[..., 0] / m], axis=-1)
    dq1 = q[..., 0] + 2.0 * q[..., 0] * q[..., 1]
    dq2 = q[..., 1] + q[..., 0] ** 2 - q[..., 1] ** 2
    return np.stack([dq1, dq2, p[..., 0], p[..., 1]], axis=-1)


def true_vector_field(spec: SystemSpec, x, t: float = 0.0) -> np.ndarray:
    """[dq/dt; dp/dt] = (J + D) grad H + [0; F(t)], shape (..., 2d)."""
    x = _flat(x)
    d = spec.d
    grad = true_grad_hamiltonian(spec, x)
    gq, gp = grad[..., :d], grad[..., d:]
    qdot = gp
    pdot = -gq
    if spec.dynamics_class.has_dissipation:
        pdot = pdot - spec.constants["gamma"] * gp
    if spec.forcing is not None:
        f = np.broadcast_to(forcing_value(spec.forcing, t), pdot[..., :1].shape[:-1])
        pdot = pdot.copy()
        pdot[..., 0] = pdot[..., 0] + f
    return np.concatenate([qdot, pdot], axis=-1)


@dataclass(frozen=True)
class GenerationConfig:
    """How many trajectories to draw and how to observe them.

    ``steps`` counts grid samples including t = 0; the grid is uniform over
    [0, t_end]. Initial states are drawn from N(0, init_scale^2 I). The
    reference integrator takes ``substeps`` RK4 steps inside each interval.
    """

    trajectories: int = 100
    steps: int = 100
    t_end: float = 10.0
    noise_sigma: float = 0.1
    init_scale: float = 1.0
    seed: int = 0
    substeps: int = 10

    def __post_init__(self) -> None:
        if self.trajectories < 0:
            raise ValueError("trajectories must be non-negative")
        if self.steps < 2:
            raise ValueError("steps must be at least 2")
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be at least 1")


class GenerationError(RuntimeError):
    """Ground-truth integration failed for some trajectory."""


def generate_dataset(spec: SystemSpec, gen: GenerationConfig) -> ObservedDataset:
    """Simulate noisy trajectories of ``spec``.

    Each trajectory gets its own RNG stream derived from (seed, index), so
    the result is reproducible regardless of generation order.
    """
    times = np.linspace(0.0, gen.t_end, gen.steps)
    cfg = IntegrationConfig(substeps=gen.substeps)

    def field(x, t):
        return true_vector_field(spec, x, t)

    # One RNG stream per trajectory, consumed in a fixed order (x0, then
    # noise), so results do not depend on how the integration is batched.
    streams = [
        np.random.default_rng(np.random.SeedSequence(entropy=gen.seed, spawn_key=(i,)))
        for i in range(gen.trajectories)
    ]
    x0s = [rng.normal(0.0, gen.init_scale, size=2 * spec.d) for rng in streams]
    if x0s:
        try:
            xs = integrate(field, np.stack(x0s), times, cfg)
        except IntegrationError as e:
            which = e.bad_rows if e.bad_rows else "unknown"
            raise GenerationError(f"trajectories {which} diverged: {e}") from e
        states = xs.transpose(1, 0, 2)  # (J, I, 2d) -> (I, J, 2d)
        states = states + np.stack(
            [rng.normal(0.0, gen.noise_sigma, size=states.shape[1:]) for rng in streams]
        )
    else:
        states = np.zeros((0, gen.steps, 2 * spec.d))
    return ObservedDataset(
        times=times,
        states=states,
        system_name=spec.name,
        dynamics_class=spec.dynamics_class,
        noise_sigma_true=gen.noise_sigma,
        seed=gen.seed,
        d=spec.d,
    )


def _spec(name: str, constants: dict, forcing: ForcingSpec | None = None) -> SystemSpec:
    return SystemSpec(
        name=name,
        dynamics_class=_CLASS_BY_NAME[name],
        d=2 if name == "HH" else 1,
        constants=constants,
        forcing=forcing,
    )


_PENDULUM_CONSTS = {"m": 1.0, "g": 9.81, "l": 1.0}
_SPRING_CONSTS = {"m": 1.0, "k": 1.0}

PRESETS: dict[str, SystemSpec] = {
    "P": _spec("P", dict(_PENDULUM_CONSTS)),
    "S": _spec("S", dict(_SPRING_CONSTS)),
    "HH": _spec("HH", {}),
    "DP": _spec("DP", dict(_PENDULUM_CONSTS, gamma=0.1)),
    "DS": _spec("DS", dict(_SPRING_CONSTS, gamma=0.1)),
    "UD": _spec("UD", {"m": 1.0, "alpha": -1.0, "beta": 1.0, "gamma": 0.3}),
    "WP": _spec("WP", dict(_PENDULUM_CONSTS, gamma=0.1), LinearRamp(v=0.1)),
    "FS": _spec("FS", dict(_SPRING_CONSTS, gamma=0.1), SineProduct(F0=0.1, omega=1.0)),
    "DE": _spec("DE", {"m": 1.0, "alpha": -1.0, "beta": 1.0, "gamma": 0.1}, ConstantForce(F_ext=0.39)),
}

_BY_LONG_NAME = {long: short for short, long in LONG_NAMES.items()}


def preset(name: str) -> SystemSpec:
    """Look up a benchmark system by short code (DP) or long name (damped_pendulum)."""
    key = name if name in PRESETS else _BY_LONG_NAME.get(name.lower(), name)
    if key not in PRESETS:
        raise ValueError(
            f"unknown system {name!r}; expected one of {sorted(PRESETS)} "
            f"or {sorted(_BY_LONG_NAME)}"
        )
    return PRESETS[key]


def preset_generation(name: str, seed: int = 0) -> GenerationConfig:
    """Default data configuration for a benchmark system (100 x 100 over [0, 10])."""
    spec = preset(name)
    noise = 0.01 if spec.name == "WP" else 0.1
    return GenerationConfig(noise_sigma=noise, seed=seed)
