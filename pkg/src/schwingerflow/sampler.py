"""Metropolized independent sampling with a trained flow as proposal.

Proposals are drawn in batches from the model (gradient-free), consumed
sequentially by the accept/reject step with probability

    min{1, exp[(log P' - log q') - (log P - log q)]}.

Rejected steps repeat the previous configuration exactly (observables are
cached, not recomputed). Observables are always evaluated in double
precision, whatever the sampling precision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import dirac
from . import tensor as T
from .gauge import LinkField
from .tensor import Tensor


@dataclass
class MISState:
    phi: object
    log_q: float
    log_p: float
    observables: tuple = ()


@dataclass
class ChainRecord:
    accepted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    log_q: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    condensate: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.accepted)


def acceptance_probability(log_q_new, log_p_new, log_q_old, log_p_old) -> float:
    """Metropolis-Hastings ratio for independent proposals, overflow-safe."""
    log_ratio = (log_p_new - log_q_new) - (log_p_old - log_q_old)
    if np.isnan(log_ratio):
        return 0.0
    return float(np.exp(min(0.0, log_ratio)))


def mis_step(state: MISState, proposal, log_p_fn, rng):
    """One accept/reject step; `proposal` is (phi, log_q). Returns the new
    state and the accept flag; on rejection the old state object is reused."""
    phi_new, log_q_new = proposal
    log_p_new = float(log_p_fn(phi_new))
    a = acceptance_probability(log_q_new, log_p_new, state.log_q, state.log_p)
    if rng.uniform() < a:
        return MISState(phi_new, float(log_q_new), log_p_new), True
    return state, False


def make_schwinger_observables(kappa):
    """(chiral condensate, topological sign) on a single configuration."""

    def observables(theta_config):
        U = LinkField(Tensor(np.asarray(theta_config, dtype=np.float64)[None]))
        cond = float(dirac.chiral_condensate(U, kappa)[0])
        sig = int(dirac.topo_sign(U, kappa)[0])
        return (cond, sig)

    return observables


def run_chain(model, action, n_steps, proposal_batch, rng,
              observables=None) -> ChainRecord:
    """Drive a MIS chain of `n_steps` recorded steps.

    The first proposal initializes the chain (not recorded). `action` is
    evaluated in double precision on gradient-free copies; `observables`
    maps a [2, L, L] angle array to (condensate, sigma) and defaults to
    NaN/0 when omitted.
    """
    rec_acc, rec_lq, rec_lp, rec_cond, rec_sig = [], [], [], [], []
    pool = []
    state = None

    def refill():
        with T.no_grad():
            phi, log_q = model.sample(proposal_batch, rng)
            theta64 = np.asarray(phi.theta.data, dtype=np.float64)
            log_p = T.neg(action(LinkField(Tensor(theta64)))).data
        for i in range(proposal_batch):
            pool.append((theta64[i], float(log_q.data[i]), float(log_p[i])))

    def measured(theta, lq, lp):
        obs = observables(theta) if observables is not None else (np.nan, 0)
        return MISState(theta, lq, lp, obs)

    n_recorded = 0
    while n_recorded < n_steps:
        if not pool:
            refill()
        theta, lq, lp = pool.pop(0)
        if state is None:
            state = measured(theta, lq, lp)
            continue
        new_state, accepted = mis_step(state, (theta, lq), lambda _: lp, rng)
        if accepted:
            state = measured(theta, lq, lp)
        rec_acc.append(accepted)
        rec_lq.append(state.log_q)
        rec_lp.append(state.log_p)
        rec_cond.append(state.observables[0])
        rec_sig.append(state.observables[1])
        n_recorded += 1

    return ChainRecord(
        accepted=np.asarray(rec_acc, dtype=bool),
        log_q=np.asarray(rec_lq),
        log_p=np.asarray(rec_lp),
        condensate=np.asarray(rec_cond),
        sigma=np.asarray(rec_sig, dtype=int),
    )


def acceptance_rate(rec: ChainRecord) -> float:
    if len(rec) == 0:
        raise ValueError("acceptance_rate: empty chain record")
    return float(rec.accepted.mean())


def integrated_autocorr(series, c=6.0):
    """Integrated autocorrelation time with automatic windowing.

    tau_int(W) = 1/2 + sum_{t<=W} rho(t); the window is the smallest t with
    t >= c * tau_int(t) (c = 6). Constant series return (0.5, 0) by
    convention. Requires at least 100 points.
    """
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    if n < 100:
        raise ValueError(f"integrated_autocorr: need >= 100 points, got {n}")
    x = x - x.mean()
    var = np.mean(x * x)
    if var == 0.0:
        return 0.5, 0
    # FFT autocovariance, unbiased normalization
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n]
    acov /= n - np.arange(n)
    rho = acov / acov[0]
    tau = 0.5
    for t in range(1, n):
        tau += rho[t]
        if t >= c * tau:
            return float(tau), t
    return float(tau), n - 1


def bridges(rec: ChainRecord, min_len=100):
    """Maximal runs of consecutive rejections longer than `min_len`,
    as (start index, length) pairs."""
    out = []
    run_start = None
    for i, acc in enumerate(rec.accepted):
        if not acc:
            if run_start is None:
                run_start = i
        else:
            if run_start is not None and i - run_start > min_len:
                out.append((run_start, i - run_start))
            run_start = None
    if run_start is not None and len(rec) - run_start > min_len:
        out.append((run_start, len(rec) - run_start))
    return out


def write_chain_csv(rec: ChainRecord, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "accepted", "log_q", "log_p", "condensate", "sigma"])
        for i in range(len(rec)):
            w.writerow([i, int(rec.accepted[i]), repr(float(rec.log_q[i])),
                        repr(float(rec.log_p[i])), repr(float(rec.condensate[i])),
                        int(rec.sigma[i])])


def read_chain_csv(path) -> ChainRecord:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            rows.append(row)
    return ChainRecord(
        accepted=np.array([bool(int(r["accepted"])) for r in rows]),
        log_q=np.array([float(r["log_q"]) for r in rows]),
        log_p=np.array([float(r["log_p"]) for r in rows]),
        condensate=np.array([float(r["condensate"]) for r in rows]),
        sigma=np.array([int(r["sigma"]) for r in rows]),
    )
