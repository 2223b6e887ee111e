"""One-parameter toy flow and closed-form targets.

Used by the gradient verification harness (and tests) where estimator laws
need Monte Carlo or analytic oracles: a scale map phi = exp(a) * z over a
standard normal prior, with normalized Gaussian targets. The variational
free energy is then

    F_q(a) = exp(2a) / (2 sigma^2) - a + log sigma - 1/2,
    dF/da  = exp(2a) / sigma^2 - 1,

minimized at a = log sigma, where q matches the target exactly.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

LOG_SQRT_2PI = 0.5 * float(np.log(2.0 * np.pi))


class GaussianPrior1D:
    def sample(self, batch, rng):
        z = Tensor(rng.standard_normal(batch))
        return z, self.log_prob(z).detach()

    def log_prob(self, z: Tensor) -> Tensor:
        return T.neg(z * z / 2.0) - LOG_SQRT_2PI


class ScaleFlow1D:
    """phi = exp(a) * z with a single parameter a; log J = a per sample."""

    def __init__(self, a=0.0):
        self.log_scale = T.parameter(np.array(float(a)))
        self.prior = GaussianPrior1D()
        self.params = nn.ParamRegistry()
        self.params.register("log_scale", self.log_scale)

    def forward(self, z, log_prob_z):
        phi = z * T.exp(self.log_scale)
        log_q = T.as_tensor(log_prob_z) - self.log_scale
        return phi, log_q

    def reverse(self, phi):
        z = phi * T.exp(T.neg(self.log_scale))
        log_q = self.prior.log_prob(z) - self.log_scale
        return z, log_q

    def sample(self, batch, rng):
        z, lp = self.prior.sample(batch, rng)
        return self.forward(z, lp)


def gaussian_action(sigma):
    """Normalized target N(0, sigma^2): S(phi) = phi^2/(2 sigma^2) + log(sigma
    sqrt(2 pi)), so log P = -S integrates to one and F_q is a true KL."""
    const = float(np.log(sigma)) + LOG_SQRT_2PI

    def action(phi: Tensor) -> Tensor:
        return phi * phi / (2.0 * sigma * sigma) + const

    return action


def free_energy_gradient(a, sigma):
    """Analytic dF_q/da for the scale flow against N(0, sigma^2)."""
    return float(np.exp(2 * a) / sigma**2 - 1.0)
