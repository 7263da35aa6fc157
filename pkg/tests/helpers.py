"""Shared test utilities: independent oracles kept free of the code under test."""

import numpy as np


def central_difference(f, arrays, h=1e-5):
    """Gradient of scalar f(*arrays) w.r.t. each array by central differences.

    f must be a plain function of numpy arrays returning a float; it must
    not touch the autodiff tape, so the estimate stays an independent check.
    """
    grads = []
    for target in arrays:
        g = np.zeros_like(target, dtype=np.float64)
        flat = target.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def assert_close_to_fd(analytic, fd, rel=1e-4, abs_floor=1e-7):
    """Relative comparison with an absolute floor, elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    assert analytic.shape == fd.shape
    diff = np.abs(analytic - fd)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), abs_floor)
    bad = diff > np.maximum(rel * scale, abs_floor)
    assert not bad.any(), (
        f"gradient mismatch at {np.argwhere(bad)[0]}: "
        f"analytic={analytic[bad][0]}, fd={fd[bad][0]}"
    )


def loop_masked_metrics(pred, truth, epsilon=1e-5):
    """Naive loop-based masked RMSE/MAE/MAPE oracle."""
    se = 0.0
    ae = 0.0
    n_valid = 0
    pe = 0.0
    n_sig = 0
    masked = 0
    for p, y in zip(pred, truth):
        if y != y:  # NaN
            masked += 1
            continue
        n_valid += 1
        se += (p - y) ** 2
        ae += abs(p - y)
        if abs(y) >= epsilon:
            n_sig += 1
            pe += abs((y - p) / y)
    rmse = (se / n_valid) ** 0.5 if n_valid else 0.0
    mae = ae / n_valid if n_valid else 0.0
    mape = 100.0 * pe / n_sig if n_sig else None
    return rmse, mae, mape, masked
