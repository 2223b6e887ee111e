"""Loss constructions for the two gradient estimators, plus diagnostics.

Both losses estimate the same variational free energy (the sample mean of
log q - log P over prior draws); they differ in what the backward pass
computes:

  * `reparam_loss` builds the gradient graph through the sampling map AND
    through the action, so its backward is the pathwise estimator.
  * `reinforce_loss` evaluates the flow and the action without gradients,
    forms the per-sample signal s_i = log q_i - log P_i, then rebuilds
    log q(phi) by running the inverse flow under gradient tracking; its
    backward is the score-function estimator with the in-batch mean of the
    signal as baseline. The action's derivative is never taken.

The score-function estimator carries a multiplicative (N-1)/N bias in
expectation relative to the pathwise one, and has exactly zero variance
when q matches the target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossOutput:
    loss: Tensor    # gradient-enabled scalar
    log_q: Tensor   # detached, [batch]
    log_p: Tensor   # detached, [batch]


def reparam_loss(z, log_prob_z, model, action) -> LossOutput:
    """Pathwise loss: mean(log q - log P) with the graph built through the
    forward flow and the action."""
    phi, log_q = model.forward(z, log_prob_z)
    log_p = T.neg(action(phi))
    loss = T.mean(log_q - log_p)
    return LossOutput(loss, log_q.detach(), log_p.detach())


def reinforce_loss(z, log_prob_z, model, action) -> LossOutput:
    """Score-function loss via the reverse flow.

    Phase 1 (no gradients): phi = flow(z), signal s = log q - log P.
    Phase 2 (gradients on): log q(phi) rebuilt by the inverse pass;
    loss = mean(log q(phi) * (s - mean(s))).
    """
    with T.no_grad():
        phi, log_q = model.forward(z, log_prob_z)
        log_p = T.neg(action(phi))
        signal = log_q.data - log_p.data
    _, log_q_phi = model.reverse(phi)
    centered = signal - signal.mean()
    loss = T.mean(log_q_phi * centered)
    return LossOutput(loss, log_q.detach(), log_p.detach())


LOSS_FUNCTIONS = {"rt": reparam_loss, "reinforce": reinforce_loss}


def _to_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def free_energy_estimate(log_q, log_p):
    """Sample mean and standard error of log q - log P."""
    s = _to_array(log_q) - _to_array(log_p)
    if s.size == 0:
        raise ValueError("free_energy_estimate: empty batch")
    stderr = float(s.std(ddof=1) / np.sqrt(s.size)) if s.size > 1 else 0.0
    return float(s.mean()), stderr


def ess(log_q, log_p) -> float:
    """Effective sample size in [0, 1] from unnormalized importance ratios
    w = P/q, computed with a max-shift so exponentials cannot overflow."""
    a = _to_array(log_p) - _to_array(log_q)
    if a.size == 0:
        raise ValueError("ess: empty batch")
    w = np.exp(a - a.max())
    return float(w.sum() ** 2 / (a.size * (w * w).sum()))
