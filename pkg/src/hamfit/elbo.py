"""Evidence lower bound for trajectories rolled out from sampled dynamics.

The negative ELBO decomposes into a Gaussian observation term plus two KL
penalties, one for the feature weights and one for the per-trajectory
initial states:

    neg_elbo = nll + kl_w + kl_x0

The observation term compares every grid point, including the initial one
(whose prediction is the sampled initial state itself), against the data.
A variant for known observation noise drops the initial-state KL and the
sigma-dependent constant; at sigma_true = 0 the data term degenerates to a
plain mean squared error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import ObservedDataset
from .odeint import IntegrationConfig, IntegrationError, integrate
from .surrogate import DTYPE, ModelParams, RFFParams, SurrogateSample, make_field, sample_posterior, _leaf


@dataclass
class InitPosterior:
    """Variational Gaussians over the initial states, one row per trajectory.

    mu and log_sigma both have shape (I, 2d); q(x_i0) = N(mu_i, diag(sigma_i^2)).
    """

    mu: torch.Tensor
    log_sigma: torch.Tensor

    def __post_init__(self) -> None:
        if self.mu.shape != self.log_sigma.shape or self.mu.ndim != 2:
            raise ValueError(
                f"mu and log_sigma must share shape (I, 2d), got "
                f"{tuple(self.mu.shape)} and {tuple(self.log_sigma.shape)}"
            )

    @classmethod
    def from_dataset(
        cls, dataset: ObservedDataset, init_sigma: float = 0.1, requires_grad: bool = True
    ) -> InitPosterior:
        """Means start at the first observations, scales at ``init_sigma``."""
        mu = _leaf(torch.as_tensor(dataset.states[:, 0, :].copy(), dtype=DTYPE), requires_grad)
        log_sigma = _leaf(
            math.log(init_sigma) * torch.ones_like(mu, requires_grad=False), requires_grad
        )
        return cls(mu=mu, log_sigma=log_sigma)

    @property
    def n_trajectories(self) -> int:
        return self.mu.shape[0]

    def parameters(self) -> dict[str, torch.Tensor]:
        return {"init.mu": self.mu, "init.log_sigma": self.log_sigma}


@dataclass(frozen=True)
class ELBOEstimate:
    """The three loss pieces; all differentiable 0-dim tensors."""

    nll: torch.Tensor
    kl_w: torch.Tensor
    kl_x0: torch.Tensor

    @property
    def neg_elbo(self) -> torch.Tensor:
        return self.nll + self.kl_w + self.kl_x0


def kl_weights(rff: RFFParams) -> torch.Tensor:
    """KL( prod_m N(b_m, C_m) || prod_m N(0, sigma0^2 I_2) ), closed form.

    Per basis: (tr C_m + |b_m|^2) / (2 sigma0^2) - 1 + ln sigma0^2
    - (1/2) ln det C_m, with C_m = L_m L_m^T.
    """
    L = rff.sqrt_c
    diag_prod = L[:, 0, 0] * L[:, 1, 1]
    det_c = diag_prod**2
    if bool((det_c <= 0).any()):
        bad = torch.nonzero(det_c <= 0).flatten().tolist()
        raise ValueError(f"singular covariance factor at basis indices {bad}")
    tr_c = (L**2).sum(dim=(1, 2))
    sq_b = (rff.b**2).sum(dim=1)
    sigma0_sq = torch.exp(2.0 * rff.log_sigma0)
    per_basis = 0.5 * ((tr_c + sq_b) / sigma0_sq - 2.0 + 4.0 * rff.log_sigma0 - torch.log(det_c))
    return per_basis.sum()


def kl_init(mu: torch.Tensor, log_sigma: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """KL( N(mu, diag sigma^2) || N(0, a^2 I) ) per trajectory, shape (...).

    mu and log_sigma carry the state dimension last; the caller sums over
    trajectories.
    """
    a = torch.as_tensor(a, dtype=DTYPE) if not isinstance(a, torch.Tensor) else a
    log_a = torch.log(a)
    var_ratio = torch.exp(2.0 * (log_sigma - log_a))
    per_dim = 0.5 * (var_ratio + (mu / a) ** 2 - 1.0) + (log_a - log_sigma)
    return per_dim.sum(dim=-1)


def gaussian_nll(y: torch.Tensor, x: torch.Tensor, sigma) -> torch.Tensor:
    """-log N(y | x, sigma^2 I) for states in the trailing dimension.

    Returns shape (...): n/2 ln(2 pi sigma^2) + |y - x|^2 / (2 sigma^2)
    with n the state dimension.
    """
    sigma = torch.as_tensor(sigma, dtype=DTYPE) if not isinstance(sigma, torch.Tensor) else sigma
    if bool((sigma <= 0).any()):
        raise ValueError("sigma must be positive")
    n = y.shape[-1]
    sq = ((y - x) ** 2).sum(dim=-1)
    return 0.5 * n * torch.log(2.0 * math.pi * sigma**2) + sq / (2.0 * sigma**2)


@dataclass(frozen=True)
class ElboNoise:
    """Frozen standard-normal draws for one reparameterized ELBO evaluation.

    Shapes: noise_w (N_x, M, 2), or (N_x, I, M, 2) when each trajectory gets
    its own weight draw; noise_omega (N_x, M, 2d); noise_x0 (N_x, I, 2d).
    Freezing these makes the estimate a deterministic,
    finite-difference-checkable function of the parameters.
    """

    noise_w: torch.Tensor
    noise_omega: torch.Tensor
    noise_x0: torch.Tensor

    @classmethod
    def draw(
        cls,
        n_samples: int,
        M: int,
        d: int,
        n_trajectories: int,
        generator: torch.Generator | None = None,
        share_omega: bool = True,
        omega_eps: torch.Tensor | None = None,
        antithetic: bool = False,
        per_trajectory: bool = False,
    ) -> ElboNoise:
        """Draw fresh noise; with share_omega one frequency draw serves all samples.

        ``omega_eps`` (M, 2d) substitutes a caller-held frequency draw for a
        fresh one, leaving the weight and initial-state streams untouched.

        ``antithetic`` pairs each weight and initial-state draw with its
        negation (n_samples must be even). The estimate stays unbiased, and
        the odd-order part of the sampling noise cancels from the gradient,
        which matters a lot when single draws steer entire rollouts.

        ``per_trajectory`` gives every trajectory an independent weight draw
        instead of one draw steering the whole batch. The estimate is
        unbiased either way, but the independent draws average the sampling
        noise across the batch, so the gradient stays informative even while
        the weight posterior is wide.
        """
        if n_samples < 1:
            raise ValueError("n_samples must be positive")
        if antithetic and n_samples % 2 != 0:
            raise ValueError("antithetic draws need an even n_samples")
        half = n_samples // 2 if antithetic else n_samples
        w_shape = (half, n_trajectories, M, 2) if per_trajectory else (half, M, 2)
        noise_w = torch.randn(*w_shape, dtype=DTYPE, generator=generator)
        if omega_eps is not None:
            if omega_eps.shape != (M, 2 * d):
                raise ValueError(
                    f"omega_eps must have shape ({M}, {2 * d}), got {tuple(omega_eps.shape)}"
                )
            noise_omega = omega_eps.expand(n_samples, M, 2 * d).clone()
        elif share_omega:
            one = torch.randn(M, 2 * d, dtype=DTYPE, generator=generator)
            noise_omega = one.expand(n_samples, M, 2 * d).clone()
        else:
            noise_omega = torch.randn(n_samples, M, 2 * d, dtype=DTYPE, generator=generator)
        noise_x0 = torch.randn(half, n_trajectories, 2 * d, dtype=DTYPE, generator=generator)
        if antithetic:
            noise_w = torch.cat([noise_w, -noise_w])
            noise_x0 = torch.cat([noise_x0, -noise_x0])
        return cls(noise_w=noise_w, noise_omega=noise_omega, noise_x0=noise_x0)

    @property
    def n_samples(self) -> int:
        return self.noise_w.shape[0]


@dataclass(frozen=True)
class KnownNoise:
    """Ground-truth observation noise and initial-state scale, when available."""

    sigma_true: float
    a_true: float = 1.0

    def __post_init__(self) -> None:
        if self.sigma_true < 0:
            raise ValueError("sigma_true must be non-negative")
        if self.a_true <= 0:
            raise ValueError("a_true must be positive")


@dataclass
class ElboRollouts:
    """Per-sample internals kept around so regularizers can reuse them."""

    samples: list[SurrogateSample]
    x0: list[torch.Tensor]      # each (B, 2d)
    states: list[torch.Tensor]  # each (J, B, 2d), full-dynamics rollouts


def dataset_tensors(dataset: ObservedDataset) -> tuple[torch.Tensor, torch.Tensor]:
    """Time grid (J,) and observations (I, J, 2d) as float64 tensors."""
    times = torch.as_tensor(dataset.times.copy(), dtype=DTYPE)
    ys = torch.as_tensor(dataset.states.copy(), dtype=DTYPE)
    return times, ys


def elbo_components(
    times: torch.Tensor,
    ys: torch.Tensor,
    params: ModelParams,
    posts: InitPosterior,
    noise: ElboNoise,
    cfg: IntegrationConfig | None = None,
    known: KnownNoise | None = None,
    batch_idx: torch.Tensor | None = None,
) -> tuple[ELBOEstimate, ElboRollouts]:
    """Monte Carlo negative ELBO plus the rollouts it produced.

    With ``batch_idx`` only the selected trajectories enter, and their data
    and initial-state terms are rescaled by I/B so the estimate stays
    unbiased for the full objective. With ``known`` the noise-prior variant
    is computed instead (fixed sigma, constant dropped, no initial-state KL).
    """
    n_total = ys.shape[0]
    if batch_idx is not None:
        ys = ys[batch_idx]
        if ys.shape[0] == 0:
            raise ValueError("cannot evaluate the objective on an empty batch")
        mu = posts.mu[batch_idx]
        log_sigma_init = posts.log_sigma[batch_idx]
        scale = n_total / ys.shape[0]
    else:
        if n_total == 0:
            raise ValueError("cannot evaluate the objective on an empty batch")
        mu, log_sigma_init = posts.mu, posts.log_sigma
        scale = 1.0

    n_state = ys.shape[-1]
    samples: list[SurrogateSample] = []
    x0s: list[torch.Tensor] = []
    rollouts: list[torch.Tensor] = []
    nll_terms = []
    for k in range(noise.n_samples):
        eps_w = noise.noise_w[k]
        eps_x0 = noise.noise_x0[k]
        if batch_idx is not None:
            eps_x0 = eps_x0[batch_idx]
            if eps_w.ndim == 3:  # per-trajectory draws follow the batch
                eps_w = eps_w[batch_idx]
        sample = sample_posterior(params.rff, eps_w, noise.noise_omega[k])
        x0 = mu + torch.exp(log_sigma_init) * eps_x0
        field = make_field(params, sample)
        try:
            states = integrate(field, x0, times, cfg)  # (J, B, 2d)
        except IntegrationError as e:
            rows = e.bad_rows
            if rows is not None and batch_idx is not None:
                rows = [int(batch_idx[r]) for r in rows]
            raise IntegrationError(e.t, e.stage, rows) from e
        pred = states.permute(1, 0, 2)  # (B, J, 2d)
        diff_sq = ((ys - pred) ** 2).sum(dim=-1)  # (B, J)
        if known is None:
            const = 0.5 * n_state * torch.log(2.0 * math.pi * params.sigma**2)
            nll_k = scale * (const + diff_sq / (2.0 * params.sigma**2)).sum()
        elif known.sigma_true > 0:
            nll_k = scale * diff_sq.sum() / (2.0 * known.sigma_true**2)
        else:
            # the MSE form is already a batch mean, so no rescaling
            nll_k = diff_sq.mean() / n_state
        nll_terms.append(nll_k)
        samples.append(sample)
        x0s.append(x0)
        rollouts.append(states)

    nll = torch.stack(nll_terms).mean()
    kl_w = kl_weights(params.rff)
    if known is None:
        kl_x0 = scale * kl_init(mu, log_sigma_init, params.a).sum()
    else:
        kl_x0 = torch.zeros((), dtype=DTYPE)
    est = ELBOEstimate(nll=nll, kl_w=kl_w, kl_x0=kl_x0)
    return est, ElboRollouts(samples=samples, x0=x0s, states=rollouts)


def elbo_estimate(
    dataset: ObservedDataset,
    params: ModelParams,
    posts: InitPosterior,
    noise: ElboNoise,
    cfg: IntegrationConfig | None = None,
) -> ELBOEstimate:
    """Negative ELBO of a dataset under the current parameters."""
    times, ys = dataset_tensors(dataset)
    est, _ = elbo_components(times, ys, params, posts, noise, cfg)
    return est


def elbo_noise_prior(
    dataset: ObservedDataset,
    params: ModelParams,
    posts: InitPosterior,
    known: KnownNoise,
    noise: ElboNoise,
    cfg: IntegrationConfig | None = None,
) -> ELBOEstimate:
    """Noise-prior objective: sigma and a pinned to known values.

    The sigma constant and the initial-state KL disappear; sigma and a stop
    being parameters. At sigma_true = 0 the data term is the plain MSE.
    """
    times, ys = dataset_tensors(dataset)
    est, _ = elbo_components(times, ys, params, posts, noise, cfg, known=known)
    return est
