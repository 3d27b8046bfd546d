"""Stochastic random-Fourier-feature surrogate for the Hamiltonian.

The energy is H(x) = sum_m w_m . phi_m(x) with feature pairs
phi_m(x) = [cos(omega_m . x), sin(omega_m . x)]. Per basis, the weights
carry a Gaussian posterior w_m ~ N(b_m, C_m) with C_m = L_m L_m^T for a
lower-triangular factor L_m, against the prior N(0, sigma0^2 I). The
frequencies are omega_m = Lambda^{-1/2} eps with eps standard normal, so
the diagonal precision Lambda is a learned spectral length-scale.

Positivity-constrained scalars (sigma0, Lambda, a, sigma) are stored as
logs so optimization stays unconstrained; the exposed properties return
the constrained values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch

from .core import DynamicsClass, dumps_json_17g

DTYPE = torch.float64


class CheckpointFormatError(ValueError):
    """Raised when a model file fails schema validation."""


def _leaf(data, requires_grad: bool = True) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE).clone().detach()
    t.requires_grad_(requires_grad)
    return t


@dataclass
class RFFParams:
    """Variational parameters of the feature-weight posterior.

    b:          (M, 2) posterior means
    sqrt_c_raw: (M, 2, 2) unconstrained factors; only the lower triangle is
                used, so gradients never touch the upper entries
    log_sigma0: () prior scale, log
    log_lambda: (2d,) frequency precision diagonal, log
    """

    b: torch.Tensor
    sqrt_c_raw: torch.Tensor
    log_sigma0: torch.Tensor
    log_lambda: torch.Tensor

    def __post_init__(self) -> None:
        if self.b.ndim != 2 or self.b.shape[1] != 2:
            raise ValueError(f"b must have shape (M, 2), got {tuple(self.b.shape)}")
        M = self.b.shape[0]
        if self.sqrt_c_raw.shape != (M, 2, 2):
            raise ValueError(
                f"sqrt_c_raw must have shape ({M}, 2, 2), got {tuple(self.sqrt_c_raw.shape)}"
            )
        if self.log_sigma0.ndim != 0:
            raise ValueError("log_sigma0 must be a scalar")
        if self.log_lambda.ndim != 1 or self.log_lambda.shape[0] % 2 != 0:
            raise ValueError(f"log_lambda must have shape (2d,), got {tuple(self.log_lambda.shape)}")
        for name in ("b", "sqrt_c_raw", "log_sigma0", "log_lambda"):
            if not bool(torch.isfinite(getattr(self, name)).all()):
                raise ValueError(f"{name} contains non-finite values")

    @classmethod
    def init(
        cls,
        M: int,
        d: int,
        sigma0: float = 1.0,
        c_scale: float = 1e-3,
        requires_grad: bool = True,
    ) -> RFFParams:
        """Fresh parameters: b = 0, sqrt(C) = c_scale I, Lambda = I.

        The posterior starts concentrated (c_scale well below the prior
        scale sigma0) rather than at the prior itself: with C = sigma0^2 I
        the M sampled weights inject O(sqrt(M)) noise into every sampled
        Hamiltonian, and shrinking that away costs thousands of optimizer
        steps before the means see a usable signal.
        """
        if M < 1 or d < 1:
            raise ValueError("M and d must be positive")
        if c_scale <= 0:
            raise ValueError("c_scale must be positive")
        eye = torch.eye(2, dtype=DTYPE).expand(M, 2, 2)
        return cls(
            b=_leaf(torch.zeros(M, 2, dtype=DTYPE), requires_grad),
            sqrt_c_raw=_leaf(c_scale * eye, requires_grad),
            log_sigma0=_leaf(torch.log(torch.as_tensor(sigma0, dtype=DTYPE)), requires_grad),
            log_lambda=_leaf(torch.zeros(2 * d, dtype=DTYPE), requires_grad),
        )

    @property
    def M(self) -> int:
        return self.b.shape[0]

    @property
    def state_dim(self) -> int:
        return self.log_lambda.shape[0]

    @property
    def sigma0(self) -> torch.Tensor:
        return torch.exp(self.log_sigma0)

    @property
    def Lambda_diag(self) -> torch.Tensor:
        return torch.exp(self.log_lambda)

    @property
    def sqrt_c(self) -> torch.Tensor:
        return torch.tril(self.sqrt_c_raw)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {
            "b": self.b,
            "sqrt_c_raw": self.sqrt_c_raw,
            "log_sigma0": self.log_sigma0,
            "log_lambda": self.log_lambda,
        }


@dataclass(frozen=True)
class SurrogateSample:
    """One realization (w, omega) of the stochastic surrogate.

    w may carry leading batch dimensions (one independent draw per
    trajectory); omega is always shared across the batch.
    """

    w: torch.Tensor      # (..., M, 2)
    omega: torch.Tensor  # (M, 2d)

    def __post_init__(self) -> None:
        if self.w.ndim < 2 or self.w.shape[-1] != 2:
            raise ValueError(f"w must have trailing shape (M, 2), got {tuple(self.w.shape)}")
        if self.omega.ndim != 2 or self.omega.shape[0] != self.w.shape[-2]:
            raise ValueError(
                f"omega must have shape (M, 2d) with M = {self.w.shape[-2]}, "
                f"got {tuple(self.omega.shape)}"
            )


def base_frequency_noise(M: int, state_dim: int, seed: int = 0) -> torch.Tensor:
    """The canonical standard-normal draw behind the frequencies.

    Training (in its default fixed-frequency mode) and mean-model evaluation
    both scale this same draw by Lambda^{-1/2}, so a checkpoint alone pins
    the basis functions; nothing extra needs to be stored.
    """
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(M, state_dim, dtype=DTYPE, generator=gen)


def sample_posterior(
    params: RFFParams, noise_w: torch.Tensor, noise_omega: torch.Tensor
) -> SurrogateSample:
    """Reparameterized draw: w = b + sqrt(C) eps_w, omega = Lambda^{-1/2} eps_omega.

    noise_w may carry leading batch dimensions (for example one independent
    weight draw per trajectory); the resulting w broadcasts against
    row-aligned states everywhere downstream.
    """
    noise_w = torch.as_tensor(noise_w, dtype=DTYPE)
    noise_omega = torch.as_tensor(noise_omega, dtype=DTYPE)
    if noise_w.shape[-2:] != (params.M, 2):
        raise ValueError(
            f"noise_w must have trailing shape ({params.M}, 2), got {tuple(noise_w.shape)}"
        )
    if noise_omega.shape != (params.M, params.state_dim):
        raise ValueError(
            f"noise_omega must have shape ({params.M}, {params.state_dim}), "
            f"got {tuple(noise_omega.shape)}"
        )
    w = params.b + torch.einsum("mij,...mj->...mi", params.sqrt_c, noise_w)
    omega = noise_omega * torch.exp(-0.5 * params.log_lambda)[None, :]
    return SurrogateSample(w=w, omega=omega)


def features(omega: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """phi(x), shape (..., M, 2): cos and sin of the frequency projections."""
    proj = x @ omega.transpose(0, 1)  # (..., M)
    return torch.stack([torch.cos(proj), torch.sin(proj)], dim=-1)


def grad_features(omega: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """d phi / dx, shape (..., M, 2, 2d).

    Row 0 is -sin(omega . x) omega, row 1 is cos(omega . x) omega.
    """
    proj = x @ omega.transpose(0, 1)
    row_cos = -torch.sin(proj)[..., None] * omega  # (..., M, 2d)
    row_sin = torch.cos(proj)[..., None] * omega
    return torch.stack([row_cos, row_sin], dim=-2)


def hamiltonian(sample: SurrogateSample, x: torch.Tensor) -> torch.Tensor:
    """H(x) = sum_m w_m . phi_m(x); batched over leading dims of x and w."""
    phi = features(sample.omega, x)
    return torch.einsum("...mk,...mk->...", phi, sample.w)


class _FusedFieldFn(torch.autograd.Function):
    """coef(x) @ basis with a hand-written reverse pass.

    coef = w_1 cos(x omega^T) - w_0 sin(x omega^T), so with basis = omega this
    is grad H, and with basis = omega (J + D)^T it is the whole linear part of
    the vector field. The integrator calls this at every RK4 stage; the
    forward keeps its trig results around so the backward is pure matmuls.
    """

    @staticmethod
    def forward(ctx, x, w, omega, basis):
        proj = x @ omega.transpose(0, 1)  # (..., M)
        s = torch.sin(proj)
        c = torch.cos(proj)
        coef = torch.addcmul(w[..., 1] * c, s, w[..., 0], value=-1.0)
        ctx.save_for_backward(x, w, omega, basis, s, c, coef)
        return coef @ basis

    @staticmethod
    def backward(ctx, gbar):
        x, w, omega, basis, s, c, coef = ctx.saved_tensors
        need = ctx.needs_input_grad
        dcoef = gbar @ basis.transpose(0, 1)  # (..., M)
        # d coef / d proj = -(w_0 cos + w_1 sin); the sign lives in neg_sum
        neg_sum = torch.addcmul(w[..., 0] * c, s, w[..., 1]).neg_()
        dproj = dcoef * neg_sum
        dx = dproj @ omega if need[0] else None
        dw = None
        if need[1]:
            dw = torch.stack([-(s * dcoef), c * dcoef], dim=-1)  # (..., M, 2)
            while dw.ndim > w.ndim:
                dw = dw.sum(0)
        domega = None
        if need[2]:
            domega = dproj.reshape(-1, dproj.shape[-1]).transpose(0, 1) @ x.reshape(
                -1, x.shape[-1]
            )
        dbasis = None
        if need[3]:
            dbasis = coef.reshape(-1, coef.shape[-1]).transpose(0, 1) @ gbar.reshape(
                -1, gbar.shape[-1]
            )
        return dx, dw, domega, dbasis


def grad_hamiltonian(sample: SurrogateSample, x: torch.Tensor) -> torch.Tensor:
    """Analytic gradient of H, shape (..., 2d).

    Contracting w with the feature Jacobian collapses to a single
    cos/sin-weighted combination of the frequencies, so the full
    grad_features tensor is never materialized.
    """
    return _FusedFieldFn.apply(x, sample.w, sample.omega, sample.omega)


def structure_basis(
    params: ModelParams, sample: SurrogateSample, conservative_only: bool = False
) -> torch.Tensor:
    """omega (J + D)^T, the output basis that turns coef @ basis into the field.

    Folding the symplectic/dissipation structure into the contraction once per
    sample keeps the per-stage work down to a single fused evaluation.
    """
    d = params.d
    oq, op = sample.omega[:, :d], sample.omega[:, d:]
    if conservative_only or params.eta is None:
        pcols = -oq
    else:
        pcols = torch.addcmul(-oq, op, params.eta**2, value=-1.0)
    return torch.cat([op, pcols], dim=1)


def hess_pp_hamiltonian(sample: SurrogateSample, x: torch.Tensor) -> torch.Tensor:
    """Diagonal momentum curvatures d^2 H / dp_i^2, shape (..., d)."""
    d = sample.omega.shape[1] // 2
    proj = x @ sample.omega.transpose(0, 1)
    coeff = -(sample.w[..., 0] * torch.cos(proj) + sample.w[..., 1] * torch.sin(proj))
    return coeff @ (sample.omega[:, d:] ** 2)


@dataclass
class ForcingNet:
    """Time-dependent force on the momentum channels: one tanh hidden layer."""

    w1: torch.Tensor  # (hidden, 1)
    b1: torch.Tensor  # (hidden,)
    w2: torch.Tensor  # (d, hidden)
    b2: torch.Tensor  # (d,)

    def __post_init__(self) -> None:
        hidden = self.w1.shape[0]
        if self.w1.shape != (hidden, 1) or self.b1.shape != (hidden,):
            raise ValueError("w1/b1 shapes inconsistent")
        if self.w2.ndim != 2 or self.w2.shape[1] != hidden or self.b2.shape != (self.w2.shape[0],):
            raise ValueError("w2/b2 shapes inconsistent")

    @classmethod
    def init(
        cls,
        d: int,
        hidden: int = 100,
        scale: float = 0.01,
        generator: torch.Generator | None = None,
        requires_grad: bool = True,
    ) -> ForcingNet:
        def draw(*shape):
            return _leaf(
                scale * torch.randn(*shape, dtype=DTYPE, generator=generator), requires_grad
            )

        return cls(draw(hidden, 1), draw(hidden), draw(d, hidden), draw(d))

    @property
    def d(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> dict[str, torch.Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def forcing_eval(net: ForcingNet, t) -> torch.Tensor:
    """F(t) = [0; f(t)], shape (..., 2d); the position channels are exactly zero."""
    t = torch.as_tensor(t, dtype=DTYPE)
    squeeze = t.ndim == 0
    tb = t.reshape(-1, 1) if squeeze else t[..., None]
    h = torch.tanh(tb @ net.w1.transpose(0, 1) + net.b1)
    fp = h @ net.w2.transpose(0, 1) + net.b2  # (..., d)
    if squeeze:
        fp = fp.reshape(net.d)
    out = torch.cat([torch.zeros_like(fp), fp], dim=-1)
    return out


@dataclass
class ModelParams:
    """Everything learnable, grouped by role.

    eta exists exactly for dissipative and port models; the forcing net
    exists exactly for port models. a is the initial-state prior scale and
    sigma the observation noise scale, both stored as logs.
    """

    dynamics_class: DynamicsClass
    d: int
    rff: RFFParams
    log_a: torch.Tensor
    log_sigma: torch.Tensor
    eta: torch.Tensor | None = None
    forcing: ForcingNet | None = None

    def __post_init__(self) -> None:
        self.dynamics_class = DynamicsClass(self.dynamics_class)
        if self.rff.state_dim != 2 * self.d:
            raise ValueError(
                f"rff covers state dim {self.rff.state_dim}, expected {2 * self.d}"
            )
        if self.dynamics_class.has_dissipation != (self.eta is not None):
            raise ValueError("eta must be present exactly for dissipative and port models")
        if self.dynamics_class.has_forcing != (self.forcing is not None):
            raise ValueError("forcing must be present exactly for port models")
        if self.eta is not None and self.eta.shape != (self.d,):
            raise ValueError(f"eta must have shape ({self.d},), got {tuple(self.eta.shape)}")
        if self.forcing is not None and self.forcing.d != self.d:
            raise ValueError("forcing net output dimension does not match d")

    @classmethod
    def init(
        cls,
        dynamics_class: DynamicsClass,
        d: int,
        M: int = 100,
        sigma0: float = 1.0,
        a: float = 1.0,
        sigma: float = 0.1,
        forcing_hidden: int = 100,
        generator: torch.Generator | None = None,
        requires_grad: bool = True,
    ) -> ModelParams:
        dynamics_class = DynamicsClass(dynamics_class)
        eta = None
        forcing = None
        if dynamics_class.has_dissipation:
            # not zero: damping enters as -eta^2, so the gradient at
            # eta = 0 vanishes and the parameter would never move
            eta = _leaf(torch.full((d,), 0.1, dtype=DTYPE), requires_grad)
        if dynamics_class.has_forcing:
            forcing = ForcingNet.init(
                d, hidden=forcing_hidden, generator=generator, requires_grad=requires_grad
            )
        return cls(
            dynamics_class=dynamics_class,
            d=d,
            rff=RFFParams.init(M, d, sigma0=sigma0, requires_grad=requires_grad),
            log_a=_leaf(torch.log(torch.as_tensor(a, dtype=DTYPE)), requires_grad),
            log_sigma=_leaf(torch.log(torch.as_tensor(sigma, dtype=DTYPE)), requires_grad),
            eta=eta,
            forcing=forcing,
        )

    @property
    def a(self) -> torch.Tensor:
        return torch.exp(self.log_a)

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    def parameters(self) -> dict[str, torch.Tensor]:
        out = {f"rff.{k}": v for k, v in self.rff.parameters().items()}
        out["log_a"] = self.log_a
        out["log_sigma"] = self.log_sigma
        if self.eta is not None:
            out["eta"] = self.eta
        if self.forcing is not None:
            out.update({f"forcing.{k}": v for k, v in self.forcing.parameters().items()})
        return out


def vector_field(
    params: ModelParams,
    sample: SurrogateSample,
    x: torch.Tensor,
    t,
    conservative_only: bool = False,
) -> torch.Tensor:
    """(J + D) grad H + F(t) evaluated at x, shape (..., 2d).

    With conservative_only the dissipation and forcing are dropped, leaving
    the pure symplectic flow of the same H.
    """
    basis = structure_basis(params, sample, conservative_only=conservative_only)
    out = _FusedFieldFn.apply(x, sample.w, sample.omega, basis)
    if not conservative_only and params.forcing is not None:
        out = out + forcing_eval(params.forcing, t)
    return out


def make_field(
    params: ModelParams, sample: SurrogateSample, conservative_only: bool = False
) -> Callable:
    """Bind (params, sample) into an (x, t) -> dx/dt callable for the integrator.

    The structure basis is built once here, outside the returned closure, so
    repeated stage evaluations share it (and gradient contributions from every
    stage accumulate into the same graph node).
    """
    basis = structure_basis(params, sample, conservative_only=conservative_only)
    w, omega = sample.w, sample.omega
    if conservative_only or params.forcing is None:

        def field(x, t):
            return _FusedFieldFn.apply(x, w, omega, basis)

    else:
        forcing = params.forcing

        def field(x, t):
            return _FusedFieldFn.apply(x, w, omega, basis) + forcing_eval(forcing, t)

    return field


# --- checkpoints --------------------------------------------------------------


def checkpoint_dict(params: ModelParams) -> dict:
    doc = {
        "class": params.dynamics_class.value,
        "d": params.d,
        "M": params.rff.M,
        "sigma0": float(params.rff.sigma0.detach()),
        "b": params.rff.b.detach().numpy(),
        "sqrtC": params.rff.sqrt_c.detach().numpy(),
        "Lambda_diag": params.rff.Lambda_diag.detach().numpy(),
        "a": float(params.a.detach()),
        "sigma": float(params.sigma.detach()),
    }
    if params.eta is not None:
        doc["eta"] = params.eta.detach().numpy()
    if params.forcing is not None:
        net = params.forcing
        doc["forcing"] = {
            "widths": [1, net.hidden, net.d],
            "weights": {
                "w1": net.w1.detach().numpy(),
                "b1": net.b1.detach().numpy(),
                "w2": net.w2.detach().numpy(),
                "b2": net.b2.detach().numpy(),
            },
        }
    return doc


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    Path(path).write_text(dumps_json_17g(checkpoint_dict(params), indent=1) + "\n")


def checkpoint_hash(params: ModelParams) -> str:
    """Short content hash of a model, used to tag evaluation reports."""
    text = dumps_json_17g(checkpoint_dict(params))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def load_checkpoint(path: str | Path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(
            f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    for name in ("class", "d", "M", "sigma0", "b", "sqrtC", "Lambda_diag", "a", "sigma"):
        if name not in doc:
            raise CheckpointFormatError(f"{path}: missing field '{name}'")
    try:
        klass = DynamicsClass(doc["class"])
        d, M = int(doc["d"]), int(doc["M"])
        if doc["sigma0"] <= 0 or doc["a"] <= 0 or doc["sigma"] <= 0:
            raise ValueError("sigma0, a, and sigma must be positive")
        lam = torch.as_tensor(doc["Lambda_diag"], dtype=DTYPE)
        if lam.shape != (2 * d,) or bool((lam <= 0).any()):
            raise ValueError(f"Lambda_diag must be {2 * d} positive values")
        b = torch.as_tensor(doc["b"], dtype=DTYPE)
        sqrt_c = torch.tril(torch.as_tensor(doc["sqrtC"], dtype=DTYPE))
        rff = RFFParams(
            b=_leaf(b),
            sqrt_c_raw=_leaf(sqrt_c),
            log_sigma0=_leaf(torch.log(torch.as_tensor(float(doc["sigma0"]), dtype=DTYPE))),
            log_lambda=_leaf(torch.log(lam)),
        )
        if rff.M != M:
            raise ValueError(f"b carries {rff.M} bases but M = {M}")
        eta = None
        if klass.has_dissipation:
            if "eta" not in doc:
                raise ValueError(f"{klass.value} checkpoint must carry eta")
            eta = _leaf(torch.as_tensor(doc["eta"], dtype=DTYPE))
        forcing = None
        if klass.has_forcing:
            if "forcing" not in doc:
                raise ValueError("port checkpoint must carry a forcing block")
            fdoc = doc["forcing"]
            weights = fdoc["weights"]
            forcing = ForcingNet(
                w1=_leaf(torch.as_tensor(weights["w1"], dtype=DTYPE)),
                b1=_leaf(torch.as_tensor(weights["b1"], dtype=DTYPE)),
                w2=_leaf(torch.as_tensor(weights["w2"], dtype=DTYPE)),
                b2=_leaf(torch.as_tensor(weights["b2"], dtype=DTYPE)),
            )
            if list(fdoc.get("widths", [])) != [1, forcing.hidden, forcing.d]:
                raise ValueError("forcing widths do not match the stored weights")
        return ModelParams(
            dynamics_class=klass,
            d=d,
            rff=rff,
            log_a=_leaf(torch.log(torch.as_tensor(float(doc["a"]), dtype=DTYPE))),
            log_sigma=_leaf(torch.log(torch.as_tensor(float(doc["sigma"]), dtype=DTYPE))),
            eta=eta,
            forcing=forcing,
        )
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: {e}") from e
