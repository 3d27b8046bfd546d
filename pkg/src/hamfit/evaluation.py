"""Test-time rollouts, phase maps, and the volume-preservation diagnostic.

Evaluation uses the mean model: weights at their posterior means and one
fixed frequency draw scaled by the learned length-scales. The draw is
seeded so reports are reproducible; pass explicit noise to pin it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from shapely.geometry import Polygon

from .core import ObservedDataset
from .elbo import dataset_tensors
from .odeint import IntegrationConfig, integrate
from .surrogate import (
    DTYPE,
    ModelParams,
    SurrogateSample,
    checkpoint_hash,
    hamiltonian,
    base_frequency_noise,
    make_field,
    sample_posterior,
)
from .systems import SystemSpec, true_hamiltonian


def mean_model_sample(
    params: ModelParams,
    eval_seed: int = 0,
    omega_noise: torch.Tensor | None = None,
) -> SurrogateSample:
    """The deterministic surrogate used for reporting: w = b, omega from a
    fixed standard-normal draw scaled by Lambda^{-1/2}."""
    M, n = params.rff.M, params.rff.state_dim
    if omega_noise is None:
        omega_noise = base_frequency_noise(M, n, seed=eval_seed)
    zero_w = torch.zeros(M, 2, dtype=DTYPE)
    return sample_posterior(params.rff, zero_w, omega_noise)


@dataclass(frozen=True)
class EvalReport:
    """Per-trajectory mean squared errors plus summary statistics."""

    per_trajectory: tuple[float, ...]
    mean: float
    std: float
    metadata: dict


def evaluate_mse(
    params: ModelParams,
    dataset: ObservedDataset,
    cfg: IntegrationConfig | None = None,
    eval_seed: int = 0,
    ensemble_samples: int = 0,
    omega_noise: torch.Tensor | None = None,
) -> EvalReport:
    """Roll the model out from each first observation and score against the data.

    The error is the mean over grid points and state components of the
    squared deviation. With ``ensemble_samples`` > 0, that many posterior
    draws are rolled out and their trajectories averaged before scoring.
    """
    if dataset.n_trajectories < 1:
        raise ValueError("cannot evaluate on an empty dataset")
    if dataset.d != params.d:
        raise ValueError(f"model has d = {params.d}, dataset has d = {dataset.d}")
    times, ys = dataset_tensors(dataset)
    x0 = ys[:, 0, :]
    with torch.no_grad():
        if ensemble_samples > 0:
            gen = torch.Generator().manual_seed(eval_seed)
            preds = []
            for _ in range(ensemble_samples):
                noise_w = torch.randn(params.rff.M, 2, dtype=DTYPE, generator=gen)
                noise_om = torch.randn(
                    params.rff.M, params.rff.state_dim, dtype=DTYPE, generator=gen
                )
                sample = sample_posterior(params.rff, noise_w, noise_om)
                states = integrate(make_field(params, sample), x0, times, cfg)
                preds.append(states)
            pred = torch.stack(preds).mean(dim=0)
        else:
            sample = mean_model_sample(params, eval_seed=eval_seed, omega_noise=omega_noise)
            pred = integrate(make_field(params, sample), x0, times, cfg)
    err = ((pred.permute(1, 0, 2) - ys) ** 2).mean(dim=(1, 2))  # (I,)
    per_traj = tuple(float(e) for e in err)
    return EvalReport(
        per_trajectory=per_traj,
        mean=float(np.mean(per_traj)),
        std=float(np.std(per_traj)),
        metadata={
            "system": dataset.system_name,
            "seed": dataset.seed,
            "config_hash": checkpoint_hash(params),
        },
    )


@dataclass(frozen=True)
class PhaseMapGrid:
    """Learned and true energies on a (q, p) grid, gauge-aligned.

    The surrogate energy is only identified up to an additive constant, so
    both surfaces are centered to mean zero before differencing.
    """

    q_values: np.ndarray
    p_values: np.ndarray
    h_learned: np.ndarray
    h_true: np.ndarray
    error: np.ndarray


def phase_map(
    params: ModelParams,
    spec: SystemSpec,
    bounds: tuple[tuple[float, float], tuple[float, float]],
    resolution: int = 50,
    eval_seed: int = 0,
    slice_rest: tuple[float, ...] | None = None,
    omega_noise: torch.Tensor | None = None,
) -> PhaseMapGrid:
    """Energy surface over a (q_1, p_1) window.

    For d > 1 the remaining coordinates are held at ``slice_rest``
    (defaults to zeros), giving a planar slice through the surface.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    (q_lo, q_hi), (p_lo, p_hi) = bounds
    if not (q_lo < q_hi and p_lo < p_hi):
        raise ValueError("bounds must satisfy lo < hi")
    if spec.d != params.d:
        raise ValueError("system and model dimensions differ")
    d = params.d
    qs = np.linspace(q_lo, q_hi, resolution)
    ps = np.linspace(p_lo, p_hi, resolution)
    qq, pp = np.meshgrid(qs, ps, indexing="ij")
    rest = slice_rest if slice_rest is not None else (0.0,) * (2 * d - 2)
    if len(rest) != 2 * d - 2:
        raise ValueError(f"slice_rest must fix {2 * d - 2} coordinates")
    grid = np.zeros((resolution, resolution, 2 * d))
    grid[..., 0] = qq
    grid[..., d] = pp
    for k in range(1, d):
        grid[..., k] = rest[k - 1]
        grid[..., d + k] = rest[d - 1 + k - 1]
    sample = mean_model_sample(params, eval_seed=eval_seed, omega_noise=omega_noise)
    with torch.no_grad():
        h_learned = hamiltonian(sample, torch.as_tensor(grid, dtype=DTYPE)).numpy()
    h_true = true_hamiltonian(spec, grid)
    error = (h_learned - h_learned.mean()) - (h_true - h_true.mean())
    return PhaseMapGrid(
        q_values=qs, p_values=ps, h_learned=h_learned, h_true=h_true, error=error
    )


@dataclass(frozen=True)
class VolumeDiagnostic:
    """Area ratios of an advected boundary circle under a 2-D flow."""

    times: tuple[float, ...]
    area_ratios: tuple[float, ...]
    self_intersecting: tuple[bool, ...]


def shoelace_area(points: np.ndarray) -> float:
    """Unsigned polygon area; points has shape (K, 2), vertices in order."""
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def volume_diagnostic_field(
    field,
    times,
    center: tuple[float, float] = (2.0, -2.0),
    radius: float = 0.2,
    boundary_points: int = 256,
    step: float = 0.01,
) -> VolumeDiagnostic:
    """Advect a circle under an arbitrary 2-D field and track its area.

    The boundary is a polygon with ``boundary_points`` vertices; its area
    at each requested time is computed by the shoelace formula and divided
    by the initial area. A self-intersection flag is reported per time so
    degenerate polygons are visible in the output.
    """
    times = [float(t) for t in times]
    if any(t < 0 for t in times) or times != sorted(times):
        raise ValueError("times must be non-negative and ascending")
    if radius <= 0 or boundary_points < 3:
        raise ValueError("need a positive radius and at least 3 boundary points")
    theta = np.linspace(0.0, 2.0 * np.pi, boundary_points, endpoint=False)
    circle = np.stack(
        [center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta)], axis=-1
    )
    pts = torch.as_tensor(circle, dtype=DTYPE)
    area0 = shoelace_area(circle)
    ratios, flags = [], []
    prev_t = 0.0
    current = pts
    with torch.no_grad():
        for t in times:
            if t > prev_t:
                substeps = max(1, int(np.ceil((t - prev_t) / step)))
                current = integrate(
                    field,
                    current,
                    torch.tensor([prev_t, t], dtype=DTYPE),
                    IntegrationConfig(substeps=substeps),
                )[-1]
                prev_t = t
            poly = current.numpy()
            ratios.append(shoelace_area(poly) / area0)
            flags.append(not Polygon(poly).is_simple)
    return VolumeDiagnostic(
        times=tuple(times), area_ratios=tuple(ratios), self_intersecting=tuple(flags)
    )


def volume_diagnostic(
    params: ModelParams,
    times,
    center: tuple[float, float] = (2.0, -2.0),
    radius: float = 0.2,
    boundary_points: int = 256,
    step: float = 0.01,
    eval_seed: int = 0,
    omega_noise: torch.Tensor | None = None,
) -> VolumeDiagnostic:
    """Volume diagnostic of the learned conservative flow (d = 1 models).

    Dissipation and forcing are switched off, so an ideal model keeps every
    ratio at exactly 1.
    """
    if params.d != 1:
        raise ValueError("the circle diagnostic is defined for d = 1 models")
    sample = mean_model_sample(params, eval_seed=eval_seed, omega_noise=omega_noise)
    field = make_field(params, sample, conservative_only=True)
    return volume_diagnostic_field(
        field,
        times,
        center=center,
        radius=radius,
        boundary_points=boundary_points,
        step=step,
    )
