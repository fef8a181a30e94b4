"""Variational free energy: KL complexity cost plus categorical likelihood cost."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ContractError
from .layers import PriorSpec
from .tensor import Tensor
from .uncertainty import normalize

VAR_FLOOR = 1e-30
PROB_FLOOR = 1e-12


def kl_gaussian(params, prior=PriorSpec()):
    """Closed-form KL[N(mu, alpha mu^2) || N(prior.mean, prior.std^2)] summed over entries.

    The posterior variance is floored at 1e-30 before taking its log, so a
    weight with ``mu == 0`` contributes a large but finite amount.
    """
    var = T.clamp_min(params.variance(), VAR_FLOOR)
    prior_var = prior.std**2
    diff = params.mu - prior.mean if prior.mean else params.mu
    terms = (var + diff * diff) / (2.0 * prior_var) - 0.5 * T.log(var) + (0.5 * math.log(prior_var) - 0.5)
    return T.sum_(terms)


def nll_categorical(probs, labels):
    """Mean negative log-probability of the true labels (probabilities floored at 1e-12)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    if len(labels) != n:
        raise ContractError(f"{len(labels)} labels for {n} rows of probabilities")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    picked = probs[np.arange(n), labels]
    return -T.mean(T.log(T.clamp_min(picked, PROB_FLOOR)))


@dataclass(frozen=True)
class KLWeightSchedule:
    """Per-minibatch KL weights ``2^(M-i) / (2^M - 1)`` for i = 1..M.

    Evaluated as ``2^-i / (1 - 2^-M)`` so large M does not overflow.
    """

    M: int

    def __post_init__(self):
        if self.M < 1:
            raise ContractError(f"M must be >= 1, got {self.M}")

    def beta(self, i):
        if not 1 <= i <= self.M:
            raise ContractError(f"batch index {i} outside 1..{self.M}")
        return math.ldexp(1.0, -i) / -math.expm1(-self.M * math.log(2.0))

    def weights(self):
        return [self.beta(i) for i in range(1, self.M + 1)]


@dataclass
class LossBreakdown:
    """Scalars of one minibatch objective plus the graph node to differentiate.

    ``total = beta_i * kl / kl_scale + nll``; ``kl_scale`` is the number of
    training examples, which puts the complexity cost on the same per-example
    footing as the averaged likelihood cost.
    """

    nll: float
    kl: float
    beta_i: float
    total: float
    kl_scale: float = 1.0
    objective: Tensor = field(default=None, repr=False)


def free_energy(batch, model, schedule, i, S=10, noise=None, prior=PriorSpec(), kl_scale=1.0, normalizer="softplus_n"):
    """Minibatch free energy averaged over ``S`` stochastic forward passes.

    The S passes are evaluated as one stacked batch; each pass draws its own
    activation noise, so this equals averaging S separate passes.
    """
    if S < 1:
        raise ContractError(f"S must be >= 1, got {S}")
    images, labels = batch
    beta_i = schedule.beta(i)
    stacked = np.tile(images, (S, 1, 1, 1))
    logits = model.forward(stacked, noise=noise, stochastic=True)
    nll = nll_categorical(normalize(logits, normalizer), np.tile(labels, S))
    kl = model.kl(prior)
    objective = nll + kl * (beta_i / kl_scale)
    return LossBreakdown(
        nll=nll.item(),
        kl=kl.item(),
        beta_i=beta_i,
        total=objective.item(),
        kl_scale=kl_scale,
        objective=objective,
    )
