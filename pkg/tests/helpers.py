"""Shared test utilities: finite-difference checking and scalarizers."""

import numpy as np

from alignlab import autodiff as ad


def finite_diff_check(build_loss, params, h=1e-5, rtol=1e-4, atol=1e-6):
    """Compare analytic grads of build_loss() against central differences."""
    ad.clear_tape()
    loss = build_loss()
    ad.backward(loss)
    for p in params:
        assert p.grad is not None, "parameter missing gradient"
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with ad.no_grad():
                flat[i] = orig + h
                up = float(build_loss().data)
                flat[i] = orig - h
                down = float(build_loss().data)
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * h)
        err = np.abs(analytic - numeric)
        tol = np.maximum(atol, rtol * np.maximum(np.abs(analytic), np.abs(numeric)))
        assert (err <= tol).all(), f"gradient mismatch: max err {err.max()}"
    ad.clear_tape()


def proj_loss(t, seed=0):
    """Random fixed projection of a tensor down to a scalar."""
    rng = np.random.default_rng(seed)
    r = ad.Tensor(rng.standard_normal(t.data.shape))
    return ad.sum_all(ad.mul(t, r))
