"""hamfit: generalized Hamiltonian dynamics from noisy trajectories.

The model is a random-Fourier-feature surrogate of the energy with a
Gaussian posterior over its weights, rolled out through a differentiable
RK4 integrator and trained by stochastic variational inference with
physics-informed penalties (energy drift, volume distortion, Lyapunov
stability) under several multi-term balancing schemes.
"""

from .balancing import (
    AdamState,
    LossVector,
    MTAdamState,
    Weights,
    adam_step,
    gda_update,
    mtadam_step,
    total_loss,
    upgrad_aggregate,
)
from .core import (
    DatasetFormatError,
    DynamicsClass,
    ObservedDataset,
    PhaseState,
    Trajectory,
    dataset_read,
    dataset_to_csv,
    dataset_write,
    make_D,
    make_J,
)
from .elbo import (
    ELBOEstimate,
    ElboNoise,
    InitPosterior,
    KnownNoise,
    elbo_estimate,
    elbo_noise_prior,
    gaussian_nll,
    kl_init,
    kl_weights,
)
from .evaluation import (
    EvalReport,
    PhaseMapGrid,
    VolumeDiagnostic,
    evaluate_mse,
    mean_model_sample,
    phase_map,
    volume_diagnostic,
)
from .odeint import IntegrationConfig, IntegrationError, integrate, rk4_step
from .regularizers import (
    LyapunovConfig,
    VolumeProbe,
    conservative_rollouts,
    dissipation_energy_residual,
    divergence_residual,
    energy_loss,
    lyapunov_loss,
    port_energy_residual,
    sample_volume_probe,
    volume_loss,
)
from .surrogate import (
    ForcingNet,
    ModelParams,
    RFFParams,
    SurrogateSample,
    features,
    forcing_eval,
    grad_features,
    grad_hamiltonian,
    hamiltonian,
    hess_pp_hamiltonian,
    load_checkpoint,
    make_field,
    sample_posterior,
    save_checkpoint,
    vector_field,
)
from .systems import (
    GenerationConfig,
    SystemSpec,
    generate_dataset,
    preset,
    preset_generation,
    true_hamiltonian,
    true_vector_field,
)
from .training import (
    TrainConfig,
    TrainingDivergedError,
    TrainResult,
    ablation_runner,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
