"""Fixed-step RK4 integration, usable with numpy arrays or torch tensors.

The integrator is written with plain arithmetic so the same code path serves
ground-truth generation (numpy) and training (torch). With torch inputs,
reverse-mode gradients flow through every recorded stage, which is exactly
the discrete adjoint of the scheme.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

Array = "np.ndarray | torch.Tensor"


@dataclass(frozen=True)
class IntegrationConfig:
    """Step control: ``substeps`` RK4 steps are taken inside each grid interval."""

    substeps: int = 1
    method: str = "rk4"

    def __post_init__(self) -> None:
        if not isinstance(self.substeps, int) or self.substeps < 1:
            raise ValueError(f"substeps must be a positive integer, got {self.substeps!r}")
        if self.method != "rk4":
            raise ValueError(f"unknown method {self.method!r}; only 'rk4' is implemented")


class IntegrationError(RuntimeError):
    """A stage evaluation produced non-finite values.

    ``t`` is the time of the step being taken, ``stage`` is the RK4 stage
    index (1..4), and ``bad_rows`` lists offending leading-dimension indices
    when the state is batched.
    """

    def __init__(self, t: float, stage: int, bad_rows: list[int] | None = None):
        self.t = float(t)
        self.stage = stage
        self.bad_rows = bad_rows
        where = f" (batch rows {bad_rows})" if bad_rows else ""
        super().__init__(f"non-finite value at t = {self.t:g}, RK4 stage {stage}{where}")


def _check_finite(k, t: float, stage: int) -> None:
    if isinstance(k, torch.Tensor):
        finite = torch.isfinite(k)
        if bool(finite.all()):
            return
        bad = None
        if k.ndim >= 2:
            mask = ~finite.reshape(k.shape[0], -1).all(dim=1)
            bad = torch.nonzero(mask).flatten().tolist()
    else:
        k = np.asarray(k)
        finite = np.isfinite(k)
        if finite.all():
            return
        bad = None
        if k.ndim >= 2:
            mask = ~finite.reshape(k.shape[0], -1).all(axis=1)
            bad = np.nonzero(mask)[0].tolist()
    raise IntegrationError(t, stage, bad)


def _axpy(x, k, a: float):
    """x + a * k in one kernel when x is a tensor."""
    if isinstance(x, torch.Tensor):
        return torch.add(x, k, alpha=a)
    return x + a * k


def rk4_step(field: Callable, x, t: float, h: float):
    """One classical RK4 step of size h from (x, t)."""
    k1 = field(x, t)
    _check_finite(k1, t, 1)
    k2 = field(_axpy(x, k1, 0.5 * h), t + 0.5 * h)
    _check_finite(k2, t, 2)
    k3 = field(_axpy(x, k2, 0.5 * h), t + 0.5 * h)
    _check_finite(k3, t, 3)
    k4 = field(_axpy(x, k3, h), t + h)
    _check_finite(k4, t, 4)
    if isinstance(x, torch.Tensor):
        acc = torch.add(k2, k3)
        acc = torch.add(k1, acc, alpha=2.0)
        acc = torch.add(acc, k4)
        return torch.add(x, acc, alpha=h / 6.0)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(field: Callable, x0, times: Sequence[float], cfg: IntegrationConfig | None = None):
    """Integrate dx/dt = field(x, t) through every grid point in ``times``.

    Returns the stacked states with shape (J, *x0.shape); states[0] is x0
    itself. ``x0`` may carry leading batch dimensions, in which case the
    field is evaluated on the whole batch at once.
    """
    cfg = cfg or IntegrationConfig()
    times = np.asarray(
        times.detach().cpu().numpy() if isinstance(times, torch.Tensor) else times,
        dtype=np.float64,
    )
    if times.ndim != 1 or times.size < 1:
        raise ValueError(f"times must be a non-empty vector, got shape {times.shape}")
    if times.size > 1 and not np.all(np.diff(times) > 0):
        raise ValueError("times must be strictly increasing")
    states = [x0]
    x = x0
    for j in range(times.size - 1):
        t0, t1 = float(times[j]), float(times[j + 1])
        h = (t1 - t0) / cfg.substeps
        t = t0
        for _ in range(cfg.substeps):
            x = rk4_step(field, x, t, h)
            t += h
        states.append(x)
    if isinstance(x0, torch.Tensor):
        return torch.stack(states)
    return np.stack(states)
