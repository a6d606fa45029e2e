"""Shared test utilities: the central finite-difference gradient oracle."""

import numpy as np


def jiggle_params(named_tensors, rng, scale=0.05, keep_zero_rows=("embedding", 0)):
    """Nudge parameters off exact relu kinks before finite-difference checks.

    Zero-initialized biases put all-PAD conv windows exactly at relu(0), where
    central differences and any valid subgradient legitimately disagree. The
    PAD embedding row stays zero (that is a contract, and with nonzero biases
    it no longer sits on a kink).
    """
    suffix, row = keep_zero_rows
    for name, t in named_tensors:
        t.values += rng.normal(scale=scale, size=t.values.shape)
        if name.endswith(suffix):
            t.values[row] = 0.0


def rel_err(a, b):
    """Elementwise |a-b| / max(1, |a|, |b|), reduced to the max."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def fd_gradient(f, tensor, h=1e-5, coords=None):
    """Central differences of scalar f() w.r.t. tensor.values.

    f must re-run the forward pass from current values. Returns (grad, stable)
    where stable marks coordinates whose h and h/2 estimates agree (kinks in
    relu/max make single coordinates unreliable; those are flagged False).
    """
    flat = tensor.values.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    grad = np.zeros(flat.size)
    stable = np.ones(flat.size, dtype=bool)

    def central(i, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        return (fp - fm) / (2.0 * step)

    for i in coords:
        g1 = central(i, h)
        g2 = central(i, h / 2.0)
        grad[i] = g2
        if rel_err(g1, g2) > 1e-5:
            stable[i] = False
    return grad.reshape(tensor.values.shape), stable.reshape(tensor.values.shape)


def check_grads(f, tensors, tol, h=1e-5, max_coords=None, rng=None):
    """Assert autodiff grads on each tensor match finite differences of f().

    Each tensor must already carry .grad from a backward pass. Returns the
    worst relative error over all checked (stable) coordinates.
    """
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "tensor has no gradient"
        n = t.values.size
        if max_coords is not None and n > max_coords:
            assert rng is not None
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        fd, stable = fd_gradient(f, t, h=h, coords=coords)
        ad = t.grad
        for i in np.atleast_1d(np.asarray(list(coords))):
            if not stable.reshape(-1)[i]:
                continue
            e = rel_err(ad.reshape(-1)[i], fd.reshape(-1)[i])
            worst = max(worst, e)
            assert e < tol, "grad mismatch at coord %d: ad=%r fd=%r (rel %g)" % (
                i, ad.reshape(-1)[i], fd.reshape(-1)[i], e)
    return worst
