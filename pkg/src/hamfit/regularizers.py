"""Physics-informed penalties and structural identity diagnostics.

All three penalties act on the learned surrogate only, never on ground
truth: energy drift is measured along conservative re-rollouts of the
training batch, phase-space volume is probed with a random box flowed
under the conservative field, and the Lyapunov penalty discourages energy
growth and negative energies along the full-dynamics rollouts.

The residual functions at the bottom check the structural identities that
an exact generalized Hamiltonian model satisfies pointwise; they are
diagnostics, not losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .odeint import IntegrationConfig, integrate
from .surrogate import (
    DTYPE,
    ModelParams,
    SurrogateSample,
    forcing_eval,
    grad_hamiltonian,
    hamiltonian,
    hess_pp_hamiltonian,
    make_field,
    vector_field,
)


@dataclass(frozen=True)
class VolumeProbe:
    """A rectangular region, sample points, and probe times for volume checks.

    ``tau`` is the smooth-indicator temperature as a fraction of each box
    width. ``points`` has shape (N, 2d); lo < hi componentwise.
    """

    lo: torch.Tensor
    hi: torch.Tensor
    points: torch.Tensor
    t_samples: tuple[float, ...]
    tau: float = 0.05

    def __post_init__(self) -> None:
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ValueError("lo and hi must be equal-shape vectors")
        if bool((self.lo >= self.hi).any()):
            raise ValueError("probe box must satisfy lo < hi componentwise")
        if self.points.ndim != 2 or self.points.shape[1] != self.lo.shape[0]:
            raise ValueError(
                f"points must have shape (N, {self.lo.shape[0]}), got {tuple(self.points.shape)}"
            )
        if self.points.shape[0] < 1:
            raise ValueError("the probe needs at least one point")
        if not self.t_samples or any(t <= 0 for t in self.t_samples):
            raise ValueError("t_samples must be positive times")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def sample_volume_probe(
    bounds_lo: torch.Tensor,
    bounds_hi: torch.Tensor,
    horizon: float,
    generator: torch.Generator | None = None,
    n_points: int = 256,
    n_times: int = 4,
    frac_range: tuple[float, float] = (0.1, 0.5),
    tau: float = 0.05,
) -> VolumeProbe:
    """Draw a random probe inside the data bounding box.

    The box covers a uniform fraction of each dimension in ``frac_range``
    and is placed uniformly at random; the points fill the whole data box;
    probe times are continuous uniform draws from (0, horizon].
    """
    bounds_lo = torch.as_tensor(bounds_lo, dtype=DTYPE)
    bounds_hi = torch.as_tensor(bounds_hi, dtype=DTYPE)
    n = bounds_lo.shape[0]
    width = bounds_hi - bounds_lo
    frac = frac_range[0] + (frac_range[1] - frac_range[0]) * torch.rand(
        n, dtype=DTYPE, generator=generator
    )
    box_w = frac * width
    lo = bounds_lo + torch.rand(n, dtype=DTYPE, generator=generator) * (width - box_w)
    points = bounds_lo + torch.rand(n_points, n, dtype=DTYPE, generator=generator) * width
    u = torch.rand(n_times, dtype=DTYPE, generator=generator)
    t_samples = tuple(sorted((float(horizon) * (1.0 - ui.item()) for ui in u)))
    return VolumeProbe(lo=lo, hi=lo + box_w, points=points, t_samples=t_samples, tau=tau)


def smooth_indicator(probe: VolumeProbe, x: torch.Tensor) -> torch.Tensor:
    """Product of per-dimension sigmoids approaching the box indicator as tau -> 0."""
    temp = probe.tau * (probe.hi - probe.lo)
    left = torch.sigmoid((x - probe.lo) / temp)
    right = torch.sigmoid((probe.hi - x) / temp)
    return (left * right).prod(dim=-1)


def hard_indicator(probe: VolumeProbe, x: torch.Tensor) -> torch.Tensor:
    inside = (x >= probe.lo) & (x <= probe.hi)
    return inside.all(dim=-1).to(DTYPE)


def conservative_rollouts(
    params: ModelParams,
    samples: Sequence[SurrogateSample],
    x0s: Sequence[torch.Tensor],
    times: torch.Tensor,
    cfg: IntegrationConfig | None = None,
) -> list[torch.Tensor]:
    """Re-integrate each sampled surrogate under its pure symplectic flow."""
    out = []
    for sample, x0 in zip(samples, x0s):
        field = make_field(params, sample, conservative_only=True)
        out.append(integrate(field, x0, times, cfg))
    return out


def energy_loss(
    samples: Sequence[SurrogateSample], rollouts: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Mean squared drift of H along conservative rollouts.

    For each realization and trajectory, every later point is compared to
    the initial energy; the result is averaged over all such comparisons.
    Length-1 rollouts contribute nothing.
    """
    terms = []
    count = 0
    for sample, states in zip(samples, rollouts):
        h = hamiltonian(sample, states)  # (J, ...) batch dims after time
        if h.shape[0] < 2:
            continue
        drift = h[1:] - h[0].unsqueeze(0)
        terms.append((drift**2).sum())
        count += drift.numel()
    if count == 0:
        return torch.zeros((), dtype=DTYPE)
    return torch.stack(terms).sum() / count


def volume_loss(
    params: ModelParams,
    samples: Sequence[SurrogateSample],
    probe: VolumeProbe,
    cfg: IntegrationConfig | None = None,
    hard: bool = False,
    mean_mode: bool = False,
    step_hint: float = 0.1,
) -> torch.Tensor:
    """Squared mismatch of probe-box occupancy before and after the flow.

    The points flow under the conservative part of each sampled surrogate,
    visiting the probe times in order. The default statistic is
    ((sum_n s(x_n) - s(rho_t(x_n)))^2) / N averaged over realizations and
    probe times; ``mean_mode`` replaces the squared sum with the mean of
    squared per-point differences. ``hard`` switches to the 0/1 indicator
    (useful for reporting, not differentiable).
    """
    indicator = hard_indicator if hard else smooth_indicator
    n = probe.points.shape[0]
    losses = []
    for sample in samples:
        if sample.w.ndim > 2:
            # per-trajectory weight draws are i.i.d., and the probe points are
            # not trajectory-aligned, so flow them under one of the draws
            sample = SurrogateSample(w=sample.w[0], omega=sample.omega)
        field = make_field(params, sample, conservative_only=True)
        s0 = indicator(probe, probe.points)
        x = probe.points
        prev_t = 0.0
        for t in probe.t_samples:
            span = t - prev_t
            substeps = max(1, math.ceil(span / step_hint))
            seg_cfg = IntegrationConfig(substeps=substeps * (cfg.substeps if cfg else 1))
            x = integrate(field, x, torch.tensor([prev_t, t], dtype=DTYPE), seg_cfg)[-1]
            st = indicator(probe, x)
            diff = s0 - st
            if mean_mode:
                losses.append((diff**2).mean())
            else:
                losses.append(diff.sum() ** 2 / n)
            prev_t = t
    return torch.stack(losses).mean()


@dataclass(frozen=True)
class LyapunovConfig:
    """Inner weights of the two stability penalties.

    ``lambda_11`` scales the positive part of dH/dt (off by default, the
    dissipative structure already enforces decay), ``lambda_12`` scales the
    positive part of -H, and ``alpha`` is an optional exponential decay
    margin inside the derivative term.
    """

    lambda_11: float = 0.0
    lambda_12: float = 1.0
    alpha: float = 0.0

    def __post_init__(self) -> None:
        if self.lambda_11 < 0 or self.lambda_12 < 0 or self.alpha < 0:
            raise ValueError("Lyapunov weights must be non-negative")


def lyapunov_loss(
    samples: Sequence[SurrogateSample],
    rollouts: Sequence[torch.Tensor],
    cfg: LyapunovConfig,
    dt: float,
) -> torch.Tensor:
    """Penalty for growing or negative surrogate energy along rollouts.

    sum over realizations, trajectories, and grid points of
    lambda_11 relu((H_{j+1} - H_j)/dt + alpha H_j) + lambda_12 relu(-H_j),
    normalized by the number of grid points.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    total = torch.zeros((), dtype=DTYPE)
    count = 0
    for sample, states in zip(samples, rollouts):
        h = hamiltonian(sample, states)  # (J, ...)
        count += h.numel()
        if cfg.lambda_11 > 0 and h.shape[0] > 1:
            rate = (h[1:] - h[:-1]) / dt + cfg.alpha * h[:-1]
            total = total + cfg.lambda_11 * torch.relu(rate).sum()
        if cfg.lambda_12 > 0:
            total = total + cfg.lambda_12 * torch.relu(-h).sum()
    if count == 0:
        return torch.zeros((), dtype=DTYPE)
    return total / count


# --- structural identities ----------------------------------------------------


def dissipation_energy_residual(
    params: ModelParams, sample: SurrogateSample, x: torch.Tensor
) -> torch.Tensor:
    """dH/dt + sum_i (eta_i dH/dp_i)^2 along the unforced flow, shape (...).

    Exactly zero in exact arithmetic for conservative and dissipative
    models; for port models this residual isolates the dissipative part by
    leaving the forcing out.
    """
    grad = grad_hamiltonian(sample, x)
    d = params.d
    gq, gp = grad[..., :d], grad[..., d:]
    qdot = gp
    pdot = -gq
    if params.eta is not None:
        pdot = pdot - (params.eta**2) * gp
    dh_dt = (gq * qdot).sum(dim=-1) + (gp * pdot).sum(dim=-1)
    if params.eta is None:
        return dh_dt
    return dh_dt + ((params.eta * gp) ** 2).sum(dim=-1)


def port_energy_residual(
    params: ModelParams, sample: SurrogateSample, x: torch.Tensor, t
) -> torch.Tensor:
    """dH/dt + sum_i (eta_i dH/dp_i)^2 - grad H . F(t) along the forced flow."""
    if params.forcing is None:
        raise ValueError("port_energy_residual needs a port model")
    grad = grad_hamiltonian(sample, x)
    f = vector_field(params, sample, x, t)
    power_in = (grad * forcing_eval(params.forcing, t)).sum(dim=-1)
    d = params.d
    gp = grad[..., d:]
    return (grad * f).sum(dim=-1) + ((params.eta * gp) ** 2).sum(dim=-1) - power_in


def divergence_residual(
    params: ModelParams,
    sample: SurrogateSample,
    x: torch.Tensor,
    t: float = 0.0,
    fd_step: float = 1e-6,
) -> torch.Tensor:
    """div f(x) + sum_i eta_i^2 d^2H/dp_i^2, with the divergence from central differences.

    The analytic correction uses the momentum curvature of the surrogate;
    the residual is finite-difference limited rather than exactly zero.
    """
    n = x.shape[-1]
    div = torch.zeros(x.shape[:-1], dtype=DTYPE)
    for k in range(n):
        step = torch.zeros(n, dtype=DTYPE)
        step[k] = fd_step
        f_plus = vector_field(params, sample, x + step, t)
        f_minus = vector_field(params, sample, x - step, t)
        div = div + (f_plus[..., k] - f_minus[..., k]) / (2.0 * fd_step)
    if params.eta is None:
        return div
    hess = hess_pp_hamiltonian(sample, x)
    return div + ((params.eta**2) * hess).sum(dim=-1)
