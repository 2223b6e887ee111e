import numpy as np
import pytest

from schwingerflow import tensor as T


def finite_diff(f, params, eps=1e-6):
    """Central finite differences of a scalar function of leaf tensors.

    `f` is called with no arguments and must return a python float; the
    entries of each tensor in `params` are perturbed in place.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(approx, exact):
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    scale = max(np.max(np.abs(exact)), 1e-12)
    return np.max(np.abs(approx - exact)) / scale


def grad_check(build_loss, params, eps=1e-6, tol=1e-5):
    """Compare backward gradients of build_loss() against finite differences."""
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()

    def value():
        with T.no_grad():
            return build_loss().item()

    fd = finite_diff(value, params, eps=eps)
    errs = []
    for p, g_fd in zip(params, fd):
        assert p.grad is not None, "parameter received no gradient"
        errs.append(rel_err(p.grad, g_fd))
    worst = max(errs)
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol:.1e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
