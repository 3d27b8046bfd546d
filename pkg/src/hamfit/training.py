"""The training loop: ELBO descent with balanced physics penalties.

One epoch draws fresh reparameterization noise and a fresh volume probe,
evaluates the negative ELBO together with whichever penalties are enabled,
and takes one optimizer step in the selected balance mode. Random draws
happen unconditionally so that disabling a term does not shift the RNG
stream; a run with a term disabled is bit-compatible with the same run at
zero weight.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .balancing import (
    AdamState,
    LossVector,
    MTAdamState,
    Weights,
    gda_update,
    total_loss,
    upgrad_aggregate,
)
from .core import DynamicsClass, ObservedDataset
from .elbo import (
    ELBOEstimate,
    ElboNoise,
    InitPosterior,
    KnownNoise,
    dataset_tensors,
    elbo_components,
)
from .odeint import IntegrationConfig, IntegrationError
from .regularizers import (
    LyapunovConfig,
    VolumeProbe,
    conservative_rollouts,
    energy_loss,
    lyapunov_loss,
    sample_volume_probe,
    volume_loss,
)
from .surrogate import DTYPE, ModelParams, base_frequency_noise, checkpoint_dict

logger = logging.getLogger(__name__)

BALANCE_MODES = ("equal", "gda", "gda-adam", "mtadam", "jd", "jd2")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that shapes one training run.

    ``batch_size`` of None means full-batch epochs. ``horizon`` truncates
    the time grid. With ``noise_prior`` the observation noise is pinned to
    ``sigma_true`` (taken from the dataset when left None) and sigma and a
    drop out of the parameter set.

    ``omega_draws`` picks the frequency noise scheme. "fixed" (default)
    keeps the canonical base draw for the whole run, so each posterior-mean
    coefficient stays attached to one basis function and the mean model at
    evaluation time is the model that was trained. "epoch" redraws the base
    noise every epoch (shared across Monte Carlo samples) and "sample"
    redraws it per sample; under both, the coefficient indices are
    exchangeable across epochs, which in practice drives the means toward a
    common value and caps what the surrogate can express, so they are kept
    only for variance experiments.

    ``weight_draws`` picks how weight noise is shared within an epoch.
    "shared" (default) steers the whole batch with one draw per Monte Carlo
    sample; "trajectory" gives every trajectory an independent draw, which
    averages the sampling noise across the batch and survives a wide weight
    posterior, at no extra rollout cost. With the concentrated posterior
    init the two are indistinguishable in practice.
    """

    epochs: int = 5000
    lr: float = 1e-3
    lr_lambda: float = 1e-3
    n_bases: int = 100
    n_mc_samples: int = 1
    batch_size: int | None = None
    horizon: float | None = None
    balance: str = "equal"
    dynamics_class: DynamicsClass | None = None
    use_lyapunov: bool = True
    use_energy: bool = True
    use_volume: bool = True
    initial_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_prior: bool = False
    sigma_true: float | None = None
    a_true: float = 1.0
    seed: int = 0
    substeps: int = 1
    forcing_hidden: int = 100
    init_sigma_obs: float = 0.1
    omega_draws: str = "fixed"
    weight_draws: str = "shared"
    antithetic: bool = False
    volume_points: int = 256
    volume_times: int = 4
    volume_tau: float = 0.05
    volume_mean_mode: bool = False
    lyapunov: LyapunovConfig = field(default_factory=LyapunovConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.lr <= 0 or self.lr_lambda <= 0:
            raise ValueError("learning rates must be positive")
        if self.n_bases < 1 or self.n_mc_samples < 1:
            raise ValueError("n_bases and n_mc_samples must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive when given")
        if self.balance not in BALANCE_MODES:
            raise ValueError(f"balance must be one of {BALANCE_MODES}, got {self.balance!r}")
        if self.omega_draws not in ("fixed", "epoch", "sample"):
            raise ValueError(
                f"omega_draws must be 'fixed', 'epoch' or 'sample', got {self.omega_draws!r}"
            )
        if self.weight_draws not in ("trajectory", "shared"):
            raise ValueError(
                f"weight_draws must be 'trajectory' or 'shared', got {self.weight_draws!r}"
            )
        if self.antithetic and self.n_mc_samples % 2 != 0:
            raise ValueError("antithetic sampling needs an even n_mc_samples")
        if self.noise_prior and self.sigma_true is not None and self.sigma_true < 0:
            raise ValueError("sigma_true must be non-negative")
        if self.volume_points < 1 or self.volume_times < 1:
            raise ValueError("volume probe needs at least one point and one time")

    @property
    def active_terms(self) -> tuple[bool, bool, bool]:
        return (self.use_lyapunov, self.use_energy, self.use_volume)


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the epoch and the last good checkpoint."""

    def __init__(self, epoch: int, checkpoint: dict | None, cause: str = ""):
        self.epoch = epoch
        self.checkpoint = checkpoint
        msg = f"training diverged at epoch {epoch}"
        if cause:
            msg += f": {cause}"
        super().__init__(msg)


@dataclass
class TrainResult:
    params: ModelParams
    init_posterior: InitPosterior
    weights: Weights
    loss_history: list[dict[str, float]]
    lambda_history: list[tuple[float, float, float]]
    config: TrainConfig


def param_groups(
    params: ModelParams, posts: InitPosterior, noise_prior: bool = False
) -> dict[str, list[str]]:
    """Named parameter groups, keyed the way the balancers expect them.

    The grouping separates parameters by the loss terms that can reach
    them; with a noise prior the observation-noise and init-prior scales
    are not parameters at all.
    """
    groups = {
        "rff_posterior": ["rff.b", "rff.sqrt_c_raw", "rff.log_sigma0"],
        "lambda": ["rff.log_lambda"],
        "init_state": ["init.mu", "init.log_sigma"],
    }
    if not noise_prior:
        groups["a"] = ["log_a"]
        groups["sigma"] = ["log_sigma"]
    if params.eta is not None:
        groups["eta"] = ["eta"]
    if params.forcing is not None:
        groups["vartheta"] = ["forcing.w1", "forcing.b1", "forcing.w2", "forcing.b2"]
    return groups


def active_parameters(
    params: ModelParams, posts: InitPosterior, noise_prior: bool = False
) -> dict[str, torch.Tensor]:
    out = dict(params.parameters())
    out.update(posts.parameters())
    if noise_prior:
        out.pop("log_a")
        out.pop("log_sigma")
    return out


def data_bounds(dataset: ObservedDataset) -> tuple[torch.Tensor, torch.Tensor]:
    """Componentwise bounding box of all observed states."""
    flat = dataset.states.reshape(-1, 2 * dataset.d)
    lo = torch.as_tensor(flat.min(axis=0), dtype=DTYPE)
    hi = torch.as_tensor(flat.max(axis=0), dtype=DTYPE)
    span = hi - lo
    pad = torch.where(span > 0, torch.zeros_like(span), torch.ones_like(span) * 1e-3)
    return lo - pad, hi + pad


def compute_losses(
    times: torch.Tensor,
    ys: torch.Tensor,
    params: ModelParams,
    posts: InitPosterior,
    noise: ElboNoise,
    probe: VolumeProbe | None,
    cfg: TrainConfig,
    batch_idx: torch.Tensor | None = None,
) -> tuple[LossVector, ELBOEstimate]:
    """All four loss terms under frozen noise; deterministic given inputs.

    Disabled terms are skipped entirely and enter the LossVector as exact
    zeros. Conservative re-rollouts reuse the ELBO batch's realizations and
    sampled initial states.
    """
    int_cfg = IntegrationConfig(substeps=cfg.substeps)
    known = None
    if cfg.noise_prior:
        if cfg.sigma_true is None:
            raise ValueError("noise_prior training needs sigma_true")
        known = KnownNoise(sigma_true=cfg.sigma_true, a_true=cfg.a_true)
    est, internals = elbo_components(
        times, ys, params, posts, noise, int_cfg, known=known, batch_idx=batch_idx
    )
    zero = torch.zeros((), dtype=DTYPE)
    lyap = zero
    if cfg.use_lyapunov:
        dt = float(times[1] - times[0]) if times.shape[0] > 1 else 1.0
        lyap = lyapunov_loss(internals.samples, internals.states, cfg.lyapunov, dt)
    energy = zero
    if cfg.use_energy:
        rollouts = conservative_rollouts(params, internals.samples, internals.x0, times, int_cfg)
        energy = energy_loss(internals.samples, rollouts)
    vol = zero
    if cfg.use_volume:
        if probe is None:
            raise ValueError("volume term enabled but no probe given")
        vol = volume_loss(
            params,
            internals.samples,
            probe,
            int_cfg,
            mean_mode=cfg.volume_mean_mode,
        )
    return LossVector(neg_elbo=est.neg_elbo, lyapunov=lyap, energy=energy, volume=vol), est


def _per_term_grads(
    terms: list[torch.Tensor], leaves: dict[str, torch.Tensor]
) -> list[dict[str, torch.Tensor | None]]:
    names = list(leaves)
    tensors = [leaves[n] for n in names]
    out = []
    for k, term in enumerate(terms):
        if term.grad_fn is None:
            out.append({n: None for n in names})
            continue
        grads = torch.autograd.grad(
            term, tensors, retain_graph=(k < len(terms) - 1), allow_unused=True
        )
        out.append(dict(zip(names, grads)))
    return out


def _flatten_grads(
    grads: dict[str, torch.Tensor | None], leaves: dict[str, torch.Tensor]
) -> np.ndarray:
    pieces = []
    for name, p in leaves.items():
        g = grads.get(name)
        pieces.append(
            np.zeros(p.numel()) if g is None else g.detach().numpy().reshape(-1)
        )
    return np.concatenate(pieces)


def _unflatten(vec: np.ndarray, leaves: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    out = {}
    offset = 0
    for name, p in leaves.items():
        n = p.numel()
        out[name] = torch.as_tensor(vec[offset : offset + n], dtype=DTYPE).reshape(p.shape)
        offset += n
    return out


def train(dataset: ObservedDataset, cfg: TrainConfig) -> TrainResult:
    """Fit a surrogate to a dataset; deterministic given cfg.seed."""
    if dataset.n_trajectories < 1:
        raise ValueError("cannot train on an empty dataset")
    klass = DynamicsClass(cfg.dynamics_class) if cfg.dynamics_class else dataset.dynamics_class
    if cfg.dynamics_class is not None and klass is not dataset.dynamics_class:
        raise ValueError(
            f"config asks for a {klass.value} model but the dataset is "
            f"{dataset.dynamics_class.value}"
        )
    if cfg.noise_prior and cfg.sigma_true is None:
        cfg = dataclasses.replace(cfg, sigma_true=dataset.noise_sigma_true)

    times, ys = dataset_tensors(dataset)
    if cfg.horizon is not None:
        keep = int((dataset.times <= cfg.horizon + 1e-12).sum())
        if keep < 2:
            raise ValueError("horizon keeps fewer than two grid points")
        times, ys = times[:keep], ys[:, :keep]

    gen = torch.Generator().manual_seed(cfg.seed)
    params = ModelParams.init(
        klass,
        dataset.d,
        M=cfg.n_bases,
        forcing_hidden=cfg.forcing_hidden,
        generator=gen,
    )
    posts = InitPosterior.from_dataset(dataset, init_sigma=cfg.init_sigma_obs)
    leaves = active_parameters(params, posts, noise_prior=cfg.noise_prior)
    groups = param_groups(params, posts, noise_prior=cfg.noise_prior)

    adam = AdamState(lr=cfg.lr)
    mtadam = MTAdamState(lr=cfg.lr) if cfg.balance == "mtadam" else None
    lam_adam = AdamState(lr=cfg.lr_lambda) if cfg.balance == "gda-adam" else None
    weights = Weights(*cfg.initial_weights)

    lo, hi = data_bounds(dataset)
    probe_horizon = float(times[-1])
    n_traj = ys.shape[0]
    batch = cfg.batch_size if cfg.batch_size and cfg.batch_size < n_traj else None

    loss_history: list[dict[str, float]] = []
    lambda_history: list[tuple[float, float, float]] = []
    last_good: dict | None = None

    omega_eps = None
    if cfg.omega_draws == "fixed":
        omega_eps = base_frequency_noise(cfg.n_bases, 2 * dataset.d)

    for epoch in range(cfg.epochs):
        # unconditional draws keep the stream independent of term flags
        noise = ElboNoise.draw(
            cfg.n_mc_samples,
            cfg.n_bases,
            dataset.d,
            n_traj,
            generator=gen,
            share_omega=cfg.omega_draws != "sample",
            omega_eps=omega_eps,
            antithetic=cfg.antithetic,
            per_trajectory=cfg.weight_draws == "trajectory",
        )
        probe = sample_volume_probe(
            lo,
            hi,
            probe_horizon,
            generator=gen,
            n_points=cfg.volume_points,
            n_times=cfg.volume_times,
            tau=cfg.volume_tau,
        )
        batch_idx = (
            torch.randperm(n_traj, generator=gen)[:batch] if batch is not None else None
        )
        try:
            lv, est = compute_losses(times, ys, params, posts, noise, probe, cfg, batch_idx)
        except (ValueError, IntegrationError) as e:
            raise TrainingDivergedError(epoch, last_good, cause=str(e)) from e
        last_good = checkpoint_dict(params)

        if cfg.balance in ("equal", "gda", "gda-adam"):
            masked = Weights(
                weights.lambda1 if cfg.use_lyapunov else 0.0,
                weights.lambda2 if cfg.use_energy else 0.0,
                weights.lambda3 if cfg.use_volume else 0.0,
            )
            total = total_loss(lv, masked)
            grads = torch.autograd.grad(
                total, list(leaves.values()), allow_unused=True
            )
            adam.step(leaves, dict(zip(leaves, grads)))
            if cfg.balance in ("gda", "gda-adam"):
                weights = gda_update(
                    weights,
                    lv,
                    lr2=cfg.lr_lambda,
                    adam_state=lam_adam,
                    active=cfg.active_terms,
                )
        else:
            if cfg.balance == "jd2":
                terms = [est.nll, est.kl_w, est.kl_x0]
            else:
                terms = [lv.neg_elbo]
            for flag, term in zip(cfg.active_terms, lv.penalties()):
                if flag:
                    terms.append(term)
            per_term = _per_term_grads(terms, leaves)
            if cfg.balance == "mtadam":
                mtadam.step(groups, leaves, per_term)
            else:
                jac = np.stack([_flatten_grads(g, leaves) for g in per_term])
                u = upgrad_aggregate(jac)
                adam.step(leaves, _unflatten(u, leaves))

        total_val = float(total_loss(lv, weights).detach()) if cfg.balance in (
            "equal",
            "gda",
            "gda-adam",
        ) else float(sum(t.detach() for t in terms))
        loss_history.append(
            {
                "epoch": epoch,
                "nll": float(est.nll.detach()),
                "kl_w": float(est.kl_w.detach()),
                "kl_x0": float(est.kl_x0.detach()),
                "neg_elbo": float(est.neg_elbo.detach()),
                "lyapunov": float(lv.lyapunov.detach()),
                "energy": float(lv.energy.detach()),
                "volume": float(lv.volume.detach()),
                "total": total_val,
                "lambda1": weights.lambda1,
                "lambda2": weights.lambda2,
                "lambda3": weights.lambda3,
            }
        )
        lambda_history.append(weights.as_tuple())
        for p in leaves.values():
            if not bool(torch.isfinite(p).all()):
                raise TrainingDivergedError(
                    epoch, last_good, cause="parameters went non-finite after the update"
                )

    return TrainResult(
        params=params,
        init_posterior=posts,
        weights=weights,
        loss_history=loss_history,
        lambda_history=lambda_history,
        config=cfg,
    )


def ablation_config(token: str, base: TrainConfig) -> TrainConfig:
    """Resolve an ablation token like 'noreg', 'equal', 'gda_E', 'equal_LV'.

    The part before the underscore picks the balance mode; the letters
    after it select which penalties stay on (L = Lyapunov, E = energy,
    V = volume). No underscore means all three.
    """
    if token == "noreg":
        return dataclasses.replace(
            base, balance="equal", use_lyapunov=False, use_energy=False, use_volume=False
        )
    mode, _, subset = token.partition("_")
    if mode not in BALANCE_MODES:
        raise ValueError(f"unknown ablation token {token!r}")
    if subset and any(c not in "ELV" for c in subset):
        raise ValueError(f"ablation subset must use letters E, L, V, got {subset!r}")
    if not subset:
        return dataclasses.replace(
            base, balance=mode, use_lyapunov=True, use_energy=True, use_volume=True
        )
    return dataclasses.replace(
        base,
        balance=mode,
        use_lyapunov="L" in subset,
        use_energy="E" in subset,
        use_volume="V" in subset,
    )


def ablation_runner(
    train_dataset: ObservedDataset,
    test_dataset: ObservedDataset,
    tokens: list[str],
    base: TrainConfig,
    seeds: list[int] | None = None,
    eval_seed: int = 0,
) -> list[dict]:
    """Train one model per (token, seed) and score it on the test set."""
    from .evaluation import evaluate_mse

    seeds = seeds if seeds is not None else [base.seed]
    rows = []
    for token in tokens:
        for seed in seeds:
            cfg = dataclasses.replace(ablation_config(token, base), seed=seed)
            result = train(train_dataset, cfg)
            report = evaluate_mse(result.params, test_dataset, eval_seed=eval_seed)
            rows.append(
                {
                    "config": token,
                    "seed": seed,
                    "mse_mean": report.mean,
                    "mse_std": report.std,
                    "lambda1": result.weights.lambda1,
                    "lambda2": result.weights.lambda2,
                    "lambda3": result.weights.lambda3,
                }
            )
            logger.info(
                "ablation %s seed %d: mse %.6f +/- %.6f", token, seed, report.mean, report.std
            )
    return rows
