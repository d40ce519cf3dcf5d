"""Pairwise ranking probability and fidelity loss.

The probability that image x is perceived better than image y is modeled
from the two predicted scores as

    p_hat = Phi((q_x - q_y) / sqrt(2)),

with Phi the standard normal CDF (unit variance per score, hence the
sqrt(2) on the difference). The fidelity loss between a binary preference
label p and the model probability p_hat is

    loss = 1 - sqrt(p * p_hat) - sqrt((1 - p) * (1 - p_hat)),

which is bounded in [0, 1] and zero exactly at perfect agreement.

Scalar functions here use an erfc-based CDF so that both the probability
and its complement carry full relative precision; the loss near saturation
is computed from the complement directly instead of as 1 - sqrt(p_hat),
which would cancel catastrophically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import NonFiniteInput, ProbabilityOutOfRange

# Guard against infinite d(sqrt)/dp at saturated probabilities; applied in
# gradient denominators and in the torch training loss, never to the
# reported scalar loss value.
GRAD_EPS = 1e-12

_INV_TWO_SQRT_PI = 1.0 / (2.0 * math.sqrt(math.pi))


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise NonFiniteInput(f"non-finite score {v!r}")


def pair_probability(q_hat_x: float, q_hat_y: float) -> float:
    """Probability that x outranks y: Phi((q_hat_x - q_hat_y)/sqrt(2)).

    Phi(z) is evaluated as 0.5*erfc(-z/sqrt(2)), i.e. 0.5*erfc((q_y-q_x)/2),
    accurate to double precision over the whole real line.
    """
    _check_finite(q_hat_x, q_hat_y)
    return 0.5 * math.erfc((q_hat_y - q_hat_x) / 2.0)


def fidelity_loss(p: int, p_hat: float) -> float:
    """Fidelity loss between a binary label and a predicted probability."""
    if p not in (0, 1):
        raise ProbabilityOutOfRange(f"label must be 0 or 1, got {p!r}")
    if not (0.0 <= p_hat <= 1.0):
        raise ProbabilityOutOfRange(f"p_hat must lie in [0, 1], got {p_hat!r}")
    return 1.0 - math.sqrt(p * p_hat) - math.sqrt((1.0 - p) * (1.0 - p_hat))


@dataclass(frozen=True)
class PairLoss:
    loss: float
    grad_x: float  # d(loss)/d(q_hat_x); grad_y = -grad_x by construction
    grad_y: float


def pair_loss(q_hat_x: float, q_hat_y: float, label: int) -> PairLoss:
    """Composed loss with analytic gradients w.r.t. both scores.

    For label 1 the loss is 1 - sqrt(p_hat), computed as
    (1 - p_hat) / (1 + sqrt(p_hat)) with the complement taken straight
    from erfc, so values near zero keep full relative precision (label 0
    is the mirror image).
    """
    _check_finite(q_hat_x, q_hat_y)
    if label not in (0, 1):
        raise ProbabilityOutOfRange(f"label must be 0 or 1, got {label!r}")
    d = q_hat_x - q_hat_y
    prob = 0.5 * math.erfc(-d / 2.0)        # p_hat
    comp = 0.5 * math.erfc(d / 2.0)         # 1 - p_hat, full precision
    # d(p_hat)/d(q_hat_x) = normal_pdf(d/sqrt(2)) / sqrt(2)
    dprob_dx = math.exp(-d * d / 4.0) * _INV_TWO_SQRT_PI
    if label == 1:
        loss = comp / (1.0 + math.sqrt(prob))
        dloss_dprob = -0.5 / math.sqrt(max(prob, GRAD_EPS))
    else:
        loss = prob / (1.0 + math.sqrt(comp))
        dloss_dprob = 0.5 / math.sqrt(max(comp, GRAD_EPS))
    grad_x = dloss_dprob * dprob_dx
    return PairLoss(loss=loss, grad_x=grad_x, grad_y=-grad_x)


@dataclass(frozen=True)
class PairPrediction:
    """One scored pair: both scores, model probability, label, loss."""

    q_hat_x: float
    q_hat_y: float
    p_hat: float
    label: int
    loss: float


def evaluate_pair(q_hat_x: float, q_hat_y: float, label: int) -> PairPrediction:
    p_hat = pair_probability(q_hat_x, q_hat_y)
    return PairPrediction(
        q_hat_x=q_hat_x,
        q_hat_y=q_hat_y,
        p_hat=p_hat,
        label=label,
        loss=pair_loss(q_hat_x, q_hat_y, label).loss,
    )


class FidelityRankingLoss(torch.nn.Module):
    """Batch-mean fidelity loss over score pairs, differentiable in torch.

    Both probability tails come straight from erfc (never via 1 - p_hat,
    which cancels to exactly 0 in float32 at saturation) and are clamped
    at GRAD_EPS so gradients stay finite on saturated pairs.
    """

    def forward(
        self,
        scores_x: torch.Tensor,
        scores_y: torch.Tensor,
        labels: torch.Tensor,
    ) -> torch.Tensor:
        d = scores_x - scores_y
        p_hat = torch.clamp(0.5 * torch.erfc(-d / 2.0), min=GRAD_EPS)
        p_comp = torch.clamp(0.5 * torch.erfc(d / 2.0), min=GRAD_EPS)
        p = labels.to(p_hat.dtype)
        # p is binary, so sqrt(p * p_hat) == p * sqrt(p_hat); keeping the
        # label outside the sqrt avoids a 0/0 NaN in the backward pass.
        loss = 1.0 - p * torch.sqrt(p_hat) - (1.0 - p) * torch.sqrt(p_comp)
        return loss.mean()
