"""Sharpness-aware gradient: ascend to the worst nearby point, descend from there.

The update direction is the loss gradient taken at x + e(x), where
e(x) = rho * g / ||g||_2 is the first-order solution of the inner maximization
of f over the rho-ball (the exact dual direction for the L2 norm). An optional
L2 penalty lambda * ||x||^2 contributes its gradient at x itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ParamVector, RngStream


class SamNonFiniteError(FloatingPointError):
    """Raised when a loss or gradient turns non-finite; records which pass."""

    def __init__(self, stage: str):
        super().__init__(f"non-finite value during SAM {stage} pass")
        self.stage = stage


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sam_perturbation(grad: ParamVector, rho: float) -> ParamVector:
    """rho-scaled unit vector along the gradient; zero gradient gives zero shift."""
    norm = grad.norm()
    if norm == 0.0:
        return ParamVector(np.zeros_like(grad.values), grad.layout)
    return grad * (rho / norm)


def _sam_eval(loss_and_grad_at, x: ParamVector, cfg: SamConfig):
    """(base_loss, base_grad, update_grad) with exactly two gradient evaluations."""
    base_loss, base_grad = loss_and_grad_at(x)
    if not (np.isfinite(base_loss) and np.all(np.isfinite(base_grad.values))):
        raise SamNonFiniteError("ascent")
    shift = sam_perturbation(base_grad, cfg.rho)
    pert_loss, pert_grad = loss_and_grad_at(x + shift)
    if not (np.isfinite(pert_loss) and np.all(np.isfinite(pert_grad.values))):
        raise SamNonFiniteError("descent")
    update = pert_grad
    if cfg.weight_decay != 0.0:
        update = update + (2.0 * cfg.weight_decay) * x
    return base_loss, base_grad, update


def sam_gradient(loss_and_grad_at, x: ParamVector, cfg: SamConfig) -> ParamVector:
    """Gradient at the perturbed point plus the penalty gradient at x.

    With rho=0 this is exactly the plain gradient (plus penalty); the
    second-order terms of the perturbed objective are dropped on purpose.
    """
    return _sam_eval(loss_and_grad_at, x, cfg)[2]


def sam_sharpness_gap(
    loss_and_grad_at,
    x: ParamVector,
    rho: float,
    probes: int,
    rng: RngStream,
) -> float:
    """Lower bound on max_{||e|| <= rho} f(x+e) - f(x).

    Candidates: x itself, the first-order ascent point, and ``probes`` random
    points on the rho-sphere. Including x keeps the gap non-negative.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if probes < 0:
        raise ValueError("probes must be non-negative")
    base_loss, base_grad = loss_and_grad_at(x)
    best = base_loss
    ascent = loss_and_grad_at(x + sam_perturbation(base_grad, rho))[0]
    if np.isfinite(ascent):
        best = max(best, ascent)
    for _ in range(probes):
        direction = rng.normal(size=x.size)
        norm = np.linalg.norm(direction)
        if norm == 0.0:
            continue
        candidate = loss_and_grad_at(ParamVector(x.values + rho * direction / norm, x.layout))[0]
        if np.isfinite(candidate):
            best = max(best, candidate)
    return float(best - base_loss)
