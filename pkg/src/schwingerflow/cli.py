"""Command-line driver: train | sample | check-grad | profile.

All randomness flows from the config seed through three named sub-streams
(init, prior, chain) spawned in that fixed order. Training accumulates
gradients over `n_batches` micro-batches of `batch_size` samples (the
effective batch), clips, then takes one optimizer step; metrics are written
per step and checkpoints at a configurable interval.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt
from . import dirac, estimators, flow, nn, sampler, toy
from . import tensor as T
from .config import RunConfig, load_config
from .errors import ConfigError, TrainingDiverged
from .estimators import LOSS_FUNCTIONS
from .gauge import LinkField
from .tensor import Tensor

METRIC_COLUMNS = ("step", "loss", "F_q_mean", "F_q_stderr", "ESS",
                  "grad_norm_preclip", "wall_time_s")


def rng_streams(seed):
    """Named child generators in a fixed spawn order."""
    init_ss, prior_ss, chain_ss = np.random.SeedSequence(seed).spawn(3)
    return {
        "init": np.random.default_rng(init_ss),
        "prior": np.random.default_rng(prior_ss),
        "chain": np.random.default_rng(chain_ss),
    }


def build_model(cfg: RunConfig, rng) -> flow.FlowModel:
    for d in cfg.dilations:
        if cfg.L < 2 * d + 1:
            raise ConfigError(
                f"dilation {d} needs L >= {2 * d + 1}, got L = {cfg.L}"
            )
    return flow.build_flow(
        cfg.L, n_layers=cfg.n_layers, n_knots=cfg.n_knots,
        hidden=cfg.hidden_channels, dilations=cfg.dilations, rng=rng,
        dtype=cfg.precision,
    )


def _metrics_row(values):
    return ",".join(
        str(values[0]) if i == 0 else repr(float(values[i]))
        for i in range(len(values))
    )


def _grad_norm(params):
    total = 0.0
    for _, p in params.named():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def train(cfg: RunConfig, resume=None, log=print):
    """Run the training loop; returns the metric rows as a list of tuples.

    `resume` is a checkpoint path; resuming reproduces the exact metric
    stream of an uninterrupted run under the determinism contract.
    """
    T.set_deterministic(cfg.deterministic)
    streams = rng_streams(cfg.seed)
    model = build_model(cfg, streams["init"])
    opt = nn.Adam(model.params, lr=cfg.learning_rate,
                  betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
    prior_rng = streams["prior"]
    start_step = 0
    if resume is not None:
        payload = ckpt.load_checkpoint(resume)
        ckpt.check_structure(payload, cfg)
        model.params.load_state_dict(payload["params"])
        opt.load_state_dict(payload["optimizer"])
        prior_rng.bit_generator.state = payload["rng_state"]
        start_step = payload["step"]

    action = dirac.make_schwinger_action(cfg.beta, cfg.kappa)
    loss_fn = LOSS_FUNCTIONS[cfg.estimator]

    os.makedirs(cfg.checkpoint_dir, exist_ok=True)

    def save(step):
        path = os.path.join(cfg.checkpoint_dir, f"step{step:08d}.ckpt")
        ckpt.save_checkpoint(path, cfg, step, model.params, opt,
                             prior_rng.bit_generator.state)
        return path

    if resume is None:
        save(start_step)

    metrics_f = open(cfg.metrics_path, "a" if resume is not None else "w")
    if resume is None:
        metrics_f.write(",".join(METRIC_COLUMNS) + "\n")

    rows = []
    try:
        for step in range(start_step, cfg.n_steps):
            t0 = time.perf_counter()
            model.params.zero_grad()
            log_qs, log_ps, losses = [], [], []
            for b in range(cfg.n_batches):
                z, log_prob_z = model.prior.sample(cfg.batch_size, prior_rng)
                out = loss_fn(z, log_prob_z, model, action)
                value = out.loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}, micro-batch {b}: "
                        f"loss={value}, log_q range "
                        f"[{out.log_q.data.min():.4g}, {out.log_q.data.max():.4g}], "
                        f"log_p range "
                        f"[{out.log_p.data.min():.4g}, {out.log_p.data.max():.4g}]"
                    )
                T.backward(out.loss / cfg.n_batches)
                losses.append(value)
                log_qs.append(out.log_q.data)
                log_ps.append(out.log_p.data)
            log_q = np.concatenate(log_qs)
            log_p = np.concatenate(log_ps)
            if cfg.clip_enabled:
                grad_norm = nn.clip_grad_norm(model.params, cfg.clip_norm)
            else:
                grad_norm = _grad_norm(model.params)
            opt.step()
            if cfg.lr_decay != 1.0:
                opt.lr *= cfg.lr_decay
            fq_mean, fq_err = estimators.free_energy_estimate(log_q, log_p)
            row = (step, float(np.mean(losses)), fq_mean, fq_err,
                   estimators.ess(log_q, log_p), grad_norm,
                   time.perf_counter() - t0)
            rows.append(row)
            metrics_f.write(_metrics_row(row) + "\n")
            metrics_f.flush()
            if step % 100 == 0 or step + 1 == cfg.n_steps:
                log(f"step {step:6d}  loss {row[1]:+.4e}  F_q {fq_mean:.3f}  "
                    f"ESS {row[4]:.4f}  |g| {grad_norm:.2f}  {row[6]:.2f}s")
            if (step + 1) % cfg.checkpoint_interval == 0 or step + 1 == cfg.n_steps:
                save(step + 1)
    finally:
        metrics_f.close()
    return rows


def sample(cfg: RunConfig, checkpoint_path, n_steps, out_csv, log=print):
    """Run a MIS chain from a checkpointed model; writes the per-step CSV and
    returns (record, summary dict)."""
    T.set_deterministic(cfg.deterministic)
    streams = rng_streams(cfg.seed)
    model = build_model(cfg, streams["init"])
    payload = ckpt.load_checkpoint(checkpoint_path)
    ckpt.check_structure(payload, cfg)
    model.params.load_state_dict(payload["params"])

    action = dirac.make_schwinger_action(cfg.beta, cfg.kappa)
    obs = sampler.make_schwinger_observables(cfg.kappa)
    rec = sampler.run_chain(model, action, n_steps, cfg.chain_batch,
                            streams["chain"], observables=obs)
    sampler.write_chain_csv(rec, out_csv)
    summary = {"n_steps": len(rec)}
    if len(rec):
        summary["acceptance"] = sampler.acceptance_rate(rec)
        if len(rec) >= 100:
            tau, window = sampler.integrated_autocorr(rec.condensate)
            summary["tau_int_condensate"] = tau
            summary["tau_window"] = window
        summary["bridges"] = sampler.bridges(rec)
    log(f"chain: {len(rec)} steps -> {out_csv}")
    for key, value in summary.items():
        if key != "n_steps":
            log(f"  {key}: {value}")
    return rec, summary


def _tiny_model(rng, n_knots=2, n_coupling=2, L=2):
    layers = []
    for i in range(n_coupling):
        active = np.zeros((L, L), dtype=bool)
        active[i % L, (i // L) % L] = True
        masks = flow.MaskSet(0, 1, active)
        raw = T.parameter(0.3 * rng.standard_normal((3 * n_knots - 1, L, L)))
        layers.append(flow.CouplingLayer(masks, flow.ConstConditioner(raw),
                                         n_knots))
    return flow.FlowModel(L, layers, flow.UniformLinkPrior(L, dtype="double"))


def check_grad(cfg: RunConfig, mc_batches=100_000, log=print):
    """Report-only verification of the gradient machinery: finite
    differences, the (N-1)/N expectation ratio, and the zero-variance point."""
    report = {}
    rng = np.random.default_rng(cfg.seed)

    # (a) finite-difference check of the pathwise loss, double precision
    model = _tiny_model(rng)
    action = dirac.make_schwinger_action(cfg.beta, cfg.kappa)
    theta = rng.uniform(0, 2 * np.pi, size=(4, 2, 2, 2))
    z = LinkField(Tensor(theta))
    lp = model.prior.log_prob(z)

    def loss_value():
        with T.no_grad():
            return estimators.reparam_loss(z, lp, model, action).loss.item()

    model.params.zero_grad()
    estimators.reparam_loss(z, lp, model, action).loss.backward()
    worst = 0.0
    eps = 1e-6
    for _, p in model.params.named():
        flat = p.data.reshape(-1)
        g = p.grad.reshape(-1)
        fd = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_value()
            flat[i] = orig - eps
            down = loss_value()
            flat[i] = orig
            fd[i] = (up - down) / (2 * eps)
        scale = max(np.max(np.abs(fd)), 1e-12)
        worst = max(worst, float(np.max(np.abs(g - fd)) / scale))
    report["fd_max_rel_err"] = worst
    report["fd_pass"] = worst < 1e-5
    log(f"[{'PASS' if report['fd_pass'] else 'FAIL'}] finite-difference "
        f"(double): max rel err {worst:.3e} (threshold 1e-5)")

    # (b) expectation ratio E[g_re] = (N-1)/N E[g_rt] on the 1-parameter toy
    N = 4
    tmodel = toy.ScaleFlow1D(a=0.3)
    taction = toy.gaussian_action(1.0)
    g_rt = np.empty(mc_batches)
    g_re = np.empty(mc_batches)
    for m in range(mc_batches):
        zt, lpt = tmodel.prior.sample(N, rng)
        tmodel.params.zero_grad()
        estimators.reparam_loss(zt, lpt, tmodel, taction).loss.backward()
        g_rt[m] = tmodel.log_scale.grad
        tmodel.params.zero_grad()
        estimators.reinforce_loss(zt, lpt, tmodel, taction).loss.backward()
        g_re[m] = tmodel.log_scale.grad
    D = g_re - (N - 1) / N * g_rt
    stderr = D.std(ddof=1) / np.sqrt(mc_batches)
    ratio = g_re.mean() / g_rt.mean()
    report["bias_ratio"] = float(ratio)
    report["bias_deviation_sigmas"] = float(abs(D.mean()) / stderr)
    report["bias_pass"] = abs(D.mean()) < 3 * stderr
    log(f"[{'PASS' if report['bias_pass'] else 'FAIL'}] bias ratio over "
        f"{mc_batches} batches (N={N}): ratio {ratio:.4f} vs {(N-1)/N}, "
        f"paired deviation {report['bias_deviation_sigmas']:.2f} sigma")

    # (c) zero variance at q = p (identity model, prior target)
    idm = flow.build_flow(4, n_layers=8, n_knots=cfg.n_knots, hidden=8,
                          dilations=(1, 1, 1), rng=rng, dtype="double")

    def prior_target(U):
        return Tensor(np.full(U.batch, 2 * 16 * np.log(2 * np.pi)))

    idm.params.zero_grad()
    zz, zlp = idm.prior.sample(8, rng)
    out = estimators.reinforce_loss(zz, zlp, idm, prior_target)
    out.loss.backward()
    gnorm = _grad_norm(idm.params)
    report["zero_variance_loss"] = out.loss.item()
    report["zero_variance_grad_norm"] = gnorm
    report["zero_variance_pass"] = abs(out.loss.item()) < 1e-12 and gnorm < 1e-12
    log(f"[{'PASS' if report['zero_variance_pass'] else 'FAIL'}] zero variance "
        f"at q = p: loss {out.loss.item():.3e}, grad norm {gnorm:.3e}")
    return report


def profile(cfg: RunConfig, log=print):
    """One loss evaluation plus timed backward per estimator and lattice
    size: graph node counts, top backward ops, saved-tensor memory, wall
    times."""
    T.set_deterministic(cfg.deterministic)
    results = {}
    for est in ("rt", "reinforce"):
        loss_fn = LOSS_FUNCTIONS[est]
        for L in cfg.profile_sizes:
            sub = RunConfig(**{**cfg.to_dict(), "L": L})
            streams = rng_streams(cfg.seed)
            model = build_model(sub, streams["init"])
            action = dirac.make_schwinger_action(cfg.beta, cfg.kappa)
            z, log_prob_z = model.prior.sample(cfg.profile_batch,
                                               streams["prior"])
            t0 = time.perf_counter()
            out = loss_fn(z, log_prob_z, model, action)
            loss_time = time.perf_counter() - t0
            t0 = time.perf_counter()
            out.loss.backward()
            back_time = time.perf_counter() - t0
            stats = T.graph_stats(out.loss)
            results[(est, L)] = {
                "node_count": stats.node_count,
                "saved_tensor_count": stats.saved_tensor_count,
                "saved_tensor_bytes": stats.saved_tensor_bytes,
                "loss_time_s": loss_time,
                "backward_time_s": back_time,
                "top_ops": [
                    (name, st.call_count, st.backward_time)
                    for name, st in stats.top_backward_ops(10)
                ],
            }
    lines = []
    for (est, L), r in results.items():
        lines.append(
            f"estimator={est} L={L} batch={cfg.profile_batch} "
            f"precision={cfg.precision}"
        )
        lines.append(
            f"  nodes={r['node_count']} saved_tensors={r['saved_tensor_count']} "
            f"saved_bytes={r['saved_tensor_bytes']}"
        )
        lines.append(
            f"  loss_time={r['loss_time_s']:.4f}s "
            f"backward_time={r['backward_time_s']:.4f}s"
        )
        lines.append("  top backward ops (name, calls, cumulative seconds):")
        for name, calls, secs in r["top_ops"]:
            lines.append(f"    {name:<16} {calls:>7} {secs:.6f}")
    text = "\n".join(lines)
    log(text)
    return results, text


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="schwingerflow",
        description="Normalizing-flow sampler for the 2D Schwinger model",
    )
    parser.add_argument("--config", required=True, help="run config file")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--precision", choices=("single", "double"),
                        help="override config precision")
    parser.add_argument("--deterministic", action="store_true",
                        help="request deterministic kernels")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    p_train.add_argument("--resume", help="checkpoint to resume from")

    p_sample = sub.add_parser("sample", help="run a MIS chain from a checkpoint")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--n-steps", type=int, required=True)
    p_sample.add_argument("--out", default="chain.csv")

    p_check = sub.add_parser("check-grad", help="gradient verification report")
    p_check.add_argument("--mc-batches", type=int, default=100_000)

    p_prof = sub.add_parser("profile", help="graph size/time/memory report")
    p_prof.add_argument("--out", help="write the report to this file")

    args = parser.parse_args(argv)
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision is not None:
        cfg.precision = args.precision
    if args.deterministic:
        cfg.deterministic = True
    cfg.validate()

    if args.command == "train":
        train(cfg, resume=args.resume)
    elif args.command == "sample":
        sample(cfg, args.checkpoint, args.n_steps, args.out)
    elif args.command == "check-grad":
        check_grad(cfg, mc_batches=args.mc_batches)
    elif args.command == "profile":
        _, text = profile(cfg)
        if args.out:
            with open(args.out, "w") as f:
                f.write(text + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
