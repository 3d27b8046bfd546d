"""Phase-space containers, canonical structure matrices, and dataset files.

States are stored as flat arrays x = [q; p] of length 2d. The classes here
are thin immutable views over numpy arrays; everything heavier (surrogates,
integration, losses) lives in the torch-based modules.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DynamicsClass(str, Enum):
    """Which structural family a model or dataset belongs to."""

    CONSERVATIVE = "conservative"
    DISSIPATIVE = "dissipative"
    PORT = "port"

    @property
    def has_dissipation(self) -> bool:
        return self is not DynamicsClass.CONSERVATIVE

    @property
    def has_forcing(self) -> bool:
        return self is DynamicsClass.PORT


class DatasetFormatError(ValueError):
    """Raised when a dataset file fails schema or shape validation."""


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


def _require_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class PhaseState:
    """A single phase-space point, stored flat as x = [q; p]."""

    x: np.ndarray

    def __post_init__(self) -> None:
        x = _as_readonly(np.asarray(self.x, dtype=np.float64))
        if x.ndim != 1 or x.size < 2 or x.size % 2 != 0:
            raise ValueError(f"state must be a flat length-2d vector, got shape {x.shape}")
        _require_finite(x, "state")
        object.__setattr__(self, "x", x)

    @classmethod
    def from_qp(cls, q: Sequence[float], p: Sequence[float]) -> PhaseState:
        q = np.asarray(q, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if q.shape != p.shape or q.ndim != 1:
            raise ValueError(f"q and p must be equal-length vectors, got {q.shape} and {p.shape}")
        return cls(np.concatenate([q, p]))

    @property
    def d(self) -> int:
        return self.x.size // 2

    @property
    def q(self) -> np.ndarray:
        return self.x[: self.d]

    @property
    def p(self) -> np.ndarray:
        return self.x[self.d :]


@dataclass(frozen=True)
class Trajectory:
    """Time-stamped states on a strictly increasing grid.

    ``xs`` has shape (J, 2d); ``states`` exposes the same data as PhaseState
    views for callers that want one point at a time.
    """

    times: np.ndarray
    xs: np.ndarray

    def __post_init__(self) -> None:
        times = _as_readonly(np.asarray(self.times, dtype=np.float64))
        xs = _as_readonly(np.asarray(self.xs, dtype=np.float64))
        if times.ndim != 1 or times.size < 1:
            raise ValueError(f"times must be a non-empty vector, got shape {times.shape}")
        if xs.ndim != 2 or xs.shape[0] != times.size:
            raise ValueError(
                f"states must have shape (J, 2d) with J = {times.size}, got {xs.shape}"
            )
        if xs.shape[1] < 2 or xs.shape[1] % 2 != 0:
            raise ValueError(f"state dimension must be even and positive, got {xs.shape[1]}")
        _require_finite(times, "times")
        _require_finite(xs, "states")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "xs", xs)

    @classmethod
    def from_states(cls, times: Sequence[float], states: Iterable[PhaseState]) -> Trajectory:
        xs = np.stack([s.x for s in states])
        return cls(np.asarray(times, dtype=np.float64), xs)

    @property
    def d(self) -> int:
        return self.xs.shape[1] // 2

    @property
    def states(self) -> list[PhaseState]:
        return [PhaseState(row) for row in self.xs]

    def __len__(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class ObservedDataset:
    """A collection of noisy trajectories sharing one time grid.

    ``states`` has shape (I, J, 2d). ``d`` is stored explicitly so that empty
    datasets (I = 0) still carry their dimension.
    """

    times: np.ndarray
    states: np.ndarray
    system_name: str
    dynamics_class: DynamicsClass
    noise_sigma_true: float
    seed: int
    d: int = field(default=-1)

    def __post_init__(self) -> None:
        times = _as_readonly(np.asarray(self.times, dtype=np.float64))
        states = np.asarray(self.states, dtype=np.float64)
        if times.ndim != 1 or times.size < 1:
            raise ValueError(f"times must be a non-empty vector, got shape {times.shape}")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("times must be strictly increasing")
        _require_finite(times, "times")
        d = self.d
        if states.size == 0:
            if d <= 0:
                raise ValueError("an empty dataset needs an explicit positive d")
            states = states.reshape(0, times.size, 2 * d)
        else:
            if states.ndim != 3 or states.shape[1] != times.size:
                raise ValueError(
                    f"states must have shape (I, J, 2d) with J = {times.size}, got {states.shape}"
                )
            if states.shape[2] % 2 != 0 or states.shape[2] == 0:
                raise ValueError(f"state dimension must be even and positive, got {states.shape[2]}")
            inferred = states.shape[2] // 2
            if d > 0 and d != inferred:
                raise ValueError(f"declared d = {d} but states carry d = {inferred}")
            d = inferred
            _require_finite(states, "states")
        if self.noise_sigma_true < 0:
            raise ValueError("noise_sigma_true must be non-negative")
        DynamicsClass(self.dynamics_class)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", _as_readonly(states))
        object.__setattr__(self, "dynamics_class", DynamicsClass(self.dynamics_class))
        object.__setattr__(self, "d", d)

    @classmethod
    def from_trajectories(
        cls,
        trajectories: Sequence[Trajectory],
        system_name: str,
        dynamics_class: DynamicsClass,
        noise_sigma_true: float,
        seed: int,
        times: Sequence[float] | None = None,
        d: int | None = None,
    ) -> ObservedDataset:
        if not trajectories:
            if times is None or d is None:
                raise ValueError("empty datasets need explicit times and d")
            return cls(
                np.asarray(times, dtype=np.float64),
                np.zeros((0, len(times), 2 * d)),
                system_name,
                dynamics_class,
                noise_sigma_true,
                seed,
                d=d,
            )
        ref = trajectories[0]
        for k, tr in enumerate(trajectories):
            if tr.d != ref.d:
                raise ValueError(f"trajectory {k} has d = {tr.d}, expected {ref.d}")
            if tr.times.shape != ref.times.shape or not np.array_equal(tr.times, ref.times):
                raise ValueError(f"trajectory {k} uses a different time grid")
        return cls(
            ref.times,
            np.stack([tr.xs for tr in trajectories]),
            system_name,
            dynamics_class,
            noise_sigma_true,
            seed,
        )

    @property
    def n_trajectories(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.size

    @property
    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(self.times, xs) for xs in self.states]

    def __len__(self) -> int:
        return self.n_trajectories


def make_J(d: int) -> np.ndarray:
    """Canonical symplectic matrix [[0, I], [-I, 0]] of size 2d x 2d."""
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise ValueError(f"d must be a positive integer, got {d!r}")
    J = np.zeros((2 * d, 2 * d))
    J[:d, d:] = np.eye(d)
    J[d:, :d] = -np.eye(d)
    return J


def make_D(eta: Sequence[float]) -> np.ndarray:
    """Dissipation matrix diag(0, ..., 0, -eta_1^2, ..., -eta_d^2)."""
    eta = np.asarray(eta, dtype=np.float64)
    if eta.ndim != 1 or eta.size < 1:
        raise ValueError(f"eta must be a length-d vector, got shape {eta.shape}")
    _require_finite(eta, "eta")
    return np.diag(np.concatenate([np.zeros(eta.size), -(eta**2)]))


# --- serialization -----------------------------------------------------------
#
# Floats are written with 17 significant digits so files round-trip
# bit-exactly. json.dump would use repr (also exact) but the fixed-width form
# keeps the file format independent of the writing interpreter, so the writer
# below emits the document itself.


def format_float_17g(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x!r}")
    return format(float(x), ".17g")


def dumps_json_17g(obj: object, indent: int | None = None) -> str:
    """Serialize nested dict/list/str/int/float data with .17g floats."""
    pieces: list[str] = []
    _emit_json(obj, pieces, indent, 0)
    return "".join(pieces)


def _emit_json(obj: object, out: list[str], indent: int | None, depth: int) -> None:
    pad = "" if indent is None else "\n" + " " * (indent * (depth + 1))
    end_pad = "" if indent is None else "\n" + " " * (indent * depth)
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{")
        for i, (key, val) in enumerate(obj.items()):
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be strings, got {type(key).__name__}")
            out.append(("," if i else "") + pad)
            out.append(json.dumps(key))
            out.append(": ")
            _emit_json(val, out, indent, depth + 1)
        out.append(end_pad + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if len(items) == 0:
            out.append("[]")
            return
        out.append("[")
        for i, val in enumerate(items):
            out.append(("," if i else "") + pad)
            _emit_json(val, out, indent, depth + 1)
        out.append(end_pad + "]")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float_17g(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif obj is None:
        out.append("null")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dataset_write(path: str | Path, dataset: ObservedDataset) -> None:
    """Write a dataset to JSON; round-trips bit-exactly through dataset_read."""
    doc = {
        "system": dataset.system_name,
        "class": dataset.dynamics_class.value,
        "d": dataset.d,
        "noise_sigma": float(dataset.noise_sigma_true),
        "seed": int(dataset.seed),
        "times": dataset.times,
        "trajectories": dataset.states,
    }
    Path(path).write_text(dumps_json_17g(doc, indent=1) + "\n")


_DATASET_FIELDS = ("system", "class", "d", "noise_sigma", "seed", "times", "trajectories")


def dataset_read(path: str | Path) -> ObservedDataset:
    """Read a dataset JSON file, validating schema and shapes."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(
            f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    if not isinstance(doc, dict):
        raise DatasetFormatError(f"{path}: expected a JSON object at the top level")
    for name in _DATASET_FIELDS:
        if name not in doc:
            raise DatasetFormatError(f"{path}: missing field '{name}'")
    try:
        klass = DynamicsClass(doc["class"])
    except ValueError:
        raise DatasetFormatError(
            f"{path}: field 'class' must be one of "
            f"{[c.value for c in DynamicsClass]}, found {doc['class']!r}"
        ) from None
    d = doc["d"]
    if not isinstance(d, int) or d < 1:
        raise DatasetFormatError(f"{path}: field 'd' must be a positive integer, found {d!r}")
    times = np.asarray(doc["times"], dtype=np.float64)
    trajs = doc["trajectories"]
    if not isinstance(trajs, list):
        raise DatasetFormatError(f"{path}: field 'trajectories' must be a list")
    for i, tr in enumerate(trajs):
        if len(tr) != times.size:
            raise DatasetFormatError(
                f"{path}: trajectory {i} has {len(tr)} states, expected {times.size}"
            )
        for j, state in enumerate(tr):
            if len(state) != 2 * d:
                raise DatasetFormatError(
                    f"{path}: trajectory {i}, state {j} has length {len(state)}, "
                    f"expected 2d = {2 * d}"
                )
    states = (
        np.asarray(trajs, dtype=np.float64)
        if trajs
        else np.zeros((0, times.size, 2 * d))
    )
    try:
        return ObservedDataset(
            times=times,
            states=states,
            system_name=str(doc["system"]),
            dynamics_class=klass,
            noise_sigma_true=float(doc["noise_sigma"]),
            seed=int(doc["seed"]),
            d=d,
        )
    except ValueError as e:
        raise DatasetFormatError(f"{path}: {e}") from e


def dataset_to_csv(path: str | Path, dataset: ObservedDataset) -> None:
    """Flat CSV export (traj_id, t, q_1..q_d, p_1..p_d) for plotting."""
    d = dataset.d
    header = ["traj_id", "t"] + [f"q_{k + 1}" for k in range(d)] + [f"p_{k + 1}" for k in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n_trajectories):
            for j, t in enumerate(dataset.times):
                row = [i, format_float_17g(t)]
                row += [format_float_17g(v) for v in dataset.states[i, j]]
                writer.writerow(row)
