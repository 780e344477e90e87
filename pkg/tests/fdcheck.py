"""Central finite-difference gradient oracle shared by the test modules.

The oracle never touches the tape: it re-runs a scalar-valued closure while
perturbing raw parameter buffers in place, so it is independent of the
backward rules it is used to check.
"""

import numpy as np


def numeric_grad(loss_fn, arrays, h=1e-5):
    """Central differences of `loss_fn()` w.r.t. each float64 array (in place)."""
    grads = []
    for arr in arrays:
        assert arr.dtype == np.float64, "finite differences need 64-bit buffers"
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = loss_fn()
            flat[i] = keep - h
            fm = loss_fn()
            flat[i] = keep
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7, label=""):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape, (
        f"{label}: grad shape {analytic.shape} != numeric {numeric.shape}"
    )
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    bad = err > atol + rtol * denom
    if bad.any():
        idx = np.unravel_index(np.argmax(err - rtol * denom), err.shape)
        raise AssertionError(
            f"{label}: gradient mismatch at {idx}: "
            f"analytic={analytic[idx]:.9g} numeric={numeric[idx]:.9g} "
            f"abs_err={err[idx]:.3g}"
        )
