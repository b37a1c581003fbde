"""Shared finite-difference gradient checking for the test suite."""

import numpy as np

from vcforge import autodiff as ad


def _relative_errors(analytic, numeric, floor=1e-6):
    # the floor keeps structurally-zero gradients (e.g. a bias feeding an
    # instance norm) from being scored against finite-difference noise
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def fd_gradient(scalar_fn, x, step):
    return ad.finite_difference_gradient(scalar_fn, x, step)


def gradcheck(fn, arrays, step=1e-5, tol=1e-4):
    """Check every input's gradient against central differences at fp64.

    Coordinates that fail at the base step are re-measured with a 10x
    smaller one: a genuine gradient bug stays wrong, while a coordinate
    that merely sits within `step` of a ReLU/|.| kink leaves the kink
    window and converges.
    """
    worst = 0.0
    for which in range(len(arrays)):
        tensors = [ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
                   for a in arrays]
        loss = fn(*tensors)
        ad.backward(loss)
        analytic = tensors[which].grad

        def scalar(probe_array):
            probe = [ad.Tensor(np.asarray(a, dtype=np.float64)) for a in arrays]
            probe[which] = ad.Tensor(probe_array)
            return float(fn(*probe).data.reshape(-1)[0])

        numeric = fd_gradient(scalar, arrays[which], step)
        errors = _relative_errors(analytic, numeric)
        if (errors > tol).any():
            refined = fd_gradient(scalar, arrays[which], step / 10.0)
            errors = np.minimum(errors, _relative_errors(analytic, refined))
        worst = max(worst, float(errors.max()))
    assert worst <= tol, f"gradient mismatch: {worst:.3e}"
    return worst


def fd_single_coordinate(value_fn, flat_param, index, step=1e-5):
    """Central difference along one parameter coordinate, in place."""
    orig = flat_param[index]
    flat_param[index] = orig + step
    hi = value_fn()
    flat_param[index] = orig - step
    lo = value_fn()
    flat_param[index] = orig
    return (hi - lo) / (2.0 * step)
