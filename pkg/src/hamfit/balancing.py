"""Multi-term loss combination and the optimizers that balance the terms.

Four families are supported, selected by the trainer:

* equal: fixed weights, one Adam descent on the weighted sum.
* gda / gda-adam: simultaneous descent on parameters and ascent on the
  penalty weights. Because the total is linear in the weights, the ascent
  gradient for each weight is just that term's value.
* mtadam: per parameter group, every term's gradient is rescaled so its
  moving-average magnitude matches the first (anchor) term's, the rescaled
  gradients are summed, and the sum goes through Adam moments.
* upgrad: each Jacobian row is projected onto the dual cone of all rows
  and the projections are averaged, giving an update that does not
  increase any individual term to first order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import nnls

from .surrogate import DTYPE

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossVector:
    """The four loss terms of one epoch; tensors stay differentiable."""

    neg_elbo: torch.Tensor
    lyapunov: torch.Tensor
    energy: torch.Tensor
    volume: torch.Tensor

    def __post_init__(self) -> None:
        for name in ("neg_elbo", "lyapunov", "energy", "volume"):
            val = getattr(self, name)
            t = torch.as_tensor(val, dtype=DTYPE)
            if not bool(torch.isfinite(t).all()):
                raise ValueError(f"loss term {name} is non-finite")
            if not isinstance(val, torch.Tensor):
                object.__setattr__(self, name, t)

    def penalties(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.lyapunov, self.energy, self.volume


@dataclass(frozen=True)
class Weights:
    """Outer penalty weights (lambda_1, lambda_2, lambda_3), non-negative."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)


def total_loss(lv: LossVector, w: Weights | tuple) -> torch.Tensor:
    """neg_elbo + lambda_1 lyapunov + lambda_2 energy + lambda_3 volume."""
    l1, l2, l3 = w.as_tuple() if isinstance(w, Weights) else w
    return lv.neg_elbo + l1 * lv.lyapunov + l2 * lv.energy + l3 * lv.volume


class AdamState:
    """Plain Adam over a named set of tensors, updated in place.

    Kept hand-written (it is a dozen lines) so the same moment bookkeeping
    can be reused verbatim by the MTAdam variant and the weight ascent.
    """

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}

    def step(self, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None]) -> None:
        self.step_count += 1
        t = self.step_count
        with torch.no_grad():
            for name, p in params.items():
                g = grads.get(name)
                if g is None:
                    g = torch.zeros_like(p)
                if name not in self.m:
                    self.m[name] = torch.zeros_like(p)
                    self.v[name] = torch.zeros_like(p)
                self.m[name].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                self.v[name].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                m_hat = self.m[name] / (1.0 - self.beta1**t)
                v_hat = self.v[name] / (1.0 - self.beta2**t)
                p.sub_(self.lr * m_hat / (v_hat.sqrt() + self.eps))


def adam_step(
    state: AdamState, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None]
) -> None:
    state.step(params, grads)


WEIGHT_CAP = 1e3


def gda_update(
    w: Weights,
    lv: LossVector,
    lr2: float = 1e-3,
    adam_state: AdamState | None = None,
    active: tuple[bool, bool, bool] = (True, True, True),
    cap: float = WEIGHT_CAP,
) -> Weights:
    """One ascent step on the penalty weights.

    Linearity of the total in the weights makes d total / d lambda_k equal
    to the k-th penalty value, so plain ascent is lambda += lr2 * value.
    With ``adam_state`` the ascent direction goes through Adam moments
    instead (the value enters negated, since Adam descends). Weights are
    clamped at zero and capped at ``cap``; inactive terms keep their weight.
    """
    values = [float(t.detach()) for t in lv.penalties()]
    current = list(w.as_tuple())
    if adam_state is None:
        proposed = [lam + lr2 * val for lam, val in zip(current, values)]
    else:
        lam_t = {
            f"lambda{k + 1}": torch.tensor(current[k], dtype=DTYPE) for k in range(3)
        }
        grads = {
            f"lambda{k + 1}": torch.tensor(-values[k], dtype=DTYPE) for k in range(3)
        }
        adam_state.step(lam_t, grads)
        proposed = [float(lam_t[f"lambda{k + 1}"]) for k in range(3)]
    out = []
    for k in range(3):
        if not active[k]:
            out.append(current[k])
            continue
        lam = min(max(proposed[k], 0.0), cap)
        if proposed[k] > cap:
            logger.warning("penalty weight lambda%d capped at %g", k + 1, cap)
        out.append(lam)
    return Weights(*out)


class MTAdamState:
    """Adam with per-group magnitude normalization across loss terms.

    For each parameter group, an exponential moving average of each term's
    gradient norm is tracked (bias-corrected like the Adam moments). Every
    term's gradient is scaled by anchor_norm / own_norm, the scaled
    gradients are summed, and the sum drives ordinary Adam moments. The
    first term in the list is the anchor, so a single-term call reduces to
    plain Adam.
    """

    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        beta3: float = 0.999,
        eps: float = 1e-8,
    ):
        self.adam = AdamState(lr=lr, betas=betas, eps=eps)
        self.beta3 = beta3
        self.eps = eps
        self.norm_ema: dict[tuple[str, int], float] = {}
        self.step_count = 0

    def _group_norm(self, grads: dict[str, torch.Tensor | None], members: list[str]) -> float:
        total = 0.0
        for name in members:
            g = grads.get(name)
            if g is not None:
                total += float((g**2).sum())
        return total**0.5

    def step(
        self,
        groups: dict[str, list[str]],
        params: dict[str, torch.Tensor],
        per_term_grads: list[dict[str, torch.Tensor | None]],
    ) -> None:
        if not per_term_grads:
            raise ValueError("need at least one loss term")
        self.step_count += 1
        correction = 1.0 - self.beta3**self.step_count
        combined: dict[str, torch.Tensor] = {}
        for gname, members in groups.items():
            norms = []
            for i, grads in enumerate(per_term_grads):
                key = (gname, i)
                raw = self._group_norm(grads, members)
                ema = self.norm_ema.get(key, 0.0)
                ema = self.beta3 * ema + (1.0 - self.beta3) * raw
                self.norm_ema[key] = ema
                norms.append(ema / correction)
            anchor = norms[0]
            for i, grads in enumerate(per_term_grads):
                scale = 1.0 if i == 0 else anchor / (norms[i] + self.eps)
                for name in members:
                    g = grads.get(name)
                    if g is None:
                        continue
                    scaled = scale * g
                    if name in combined:
                        combined[name] = combined[name] + scaled
                    else:
                        combined[name] = scaled
        group_members = [n for members in groups.values() for n in members]
        self.adam.step({n: params[n] for n in group_members}, combined)


def mtadam_step(
    state: MTAdamState,
    groups: dict[str, list[str]],
    params: dict[str, torch.Tensor],
    per_term_grads: list[dict[str, torch.Tensor | None]],
) -> None:
    state.step(groups, params, per_term_grads)


def _project_dual_cone(g: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Project g onto {u : rows @ u >= 0} via the NNLS dual.

    The projection is g + rows^T w* with w* = argmin_{w >= 0}
    |g + rows^T w|^2, a non-negative least squares problem.
    """
    w, _ = nnls(rows.T, -g)
    return g + rows.T @ w


def upgrad_aggregate(jacobian: np.ndarray | torch.Tensor) -> np.ndarray:
    """Mean of the dual-cone projections of the Jacobian rows.

    The result u satisfies <u, g_k> >= 0 up to solver tolerance for every
    row g_k, so no loss term increases to first order when stepping along
    -u. A zero Jacobian maps to zero.
    """
    jac = (
        jacobian.detach().cpu().numpy() if isinstance(jacobian, torch.Tensor) else np.asarray(jacobian)
    ).astype(np.float64)
    if jac.ndim != 2:
        raise ValueError(f"jacobian must be 2-D (terms x params), got shape {jac.shape}")
    if not np.all(np.isfinite(jac)):
        raise ValueError("jacobian contains non-finite values")
    if np.allclose(jac, 0.0):
        return np.zeros(jac.shape[1])
    projections = [_project_dual_cone(row, jac) for row in jac]
    return np.mean(projections, axis=0)
