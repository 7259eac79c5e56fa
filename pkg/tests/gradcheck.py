"""Central finite-difference gradient checks in float64."""

import numpy as np

from ctmae import autodiff as ad

# gradients below this magnitude are compared absolutely; float64 central
# differences at h = 1e-5 carry ~1e-11 rounding noise on O(1) losses
ABS_FLOOR = 1e-7


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), ABS_FLOOR)


def check_tensors(loss_fn, tensors, n_coords=240, h=1e-5, seed=0):
    """Compare backprop with central differences on random coordinates.

    ``tensors`` maps names to float64 leaf Tensors with ``requires_grad``;
    ``loss_fn()`` rebuilds the scalar loss from their current values.
    Returns the array of relative errors.
    """
    for t in tensors.values():
        t.grad = None
    ad.backward(loss_fn())
    rng = np.random.default_rng(seed)
    names = sorted(tensors)
    errs = []
    for i in range(n_coords):
        t = tensors[names[i % len(names)]]
        assert t.data.dtype == np.float64
        flat = t.data.reshape(-1)
        j = int(rng.integers(flat.size))
        analytic = 0.0 if t.grad is None else float(t.grad.reshape(-1)[j])
        orig = flat[j]
        flat[j] = orig + h
        fp = loss_fn().item()
        flat[j] = orig - h
        fm = loss_fn().item()
        flat[j] = orig
        errs.append(relative_error(analytic, (fp - fm) / (2 * h)))
    return np.asarray(errs)


def check_params(loss_fn, params, names, **kw):
    """Gradient check over named model parameters (params must be float64)."""
    params.set_trainable(names)
    return check_tensors(lambda: loss_fn(params), {n: params[n] for n in names}, **kw)


def passes(errs, tol=1e-4, frac=0.99, max_tol=1e-3):
    return len(errs) >= 200 and np.mean(errs < tol) >= frac and errs.max() < max_tol
