"""Central finite-difference gradient oracle shared by the unit and acceptance suites."""
import numpy as np

from linefault.nn import PARAM_NAMES, ModelParams, NetConfig, batch_loss, forward, loss_and_gradients

H = 1e-5


def random_targets(rng, batch, m):
    Y = np.zeros((batch, m + 1))
    Y_hat = np.zeros((batch, m + 1))
    for b in range(batch):
        j = int(rng.integers(m + 1))
        Y[b, j] = 1.0
        if j < m:
            support = rng.choice([i for i in range(m) if i != j], size=int(rng.integers(1, 3)), replace=False)
            Y_hat[b, support] = 1.0 / len(support)
    return Y, Y_hat


def relative_error(a, b):
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def numeric_gradient(params, X, Y, Y_hat, eps, name, coords=None):
    arr = params.arrays[name]
    flat_idx = range(arr.size) if coords is None else coords
    out = np.zeros(len(flat_idx))
    for o, i in enumerate(flat_idx):
        idx = np.unravel_index(i, arr.shape)
        old = arr[idx]
        arr[idx] = old + H
        up = batch_loss(forward(params, X)[0], Y, Y_hat, eps)
        arr[idx] = old - H
        down = batch_loss(forward(params, X)[0], Y, Y_hat, eps)
        arr[idx] = old
        out[o] = (up - down) / (2 * H)
    return out


def worst_draw_error(rng, draws=100, config=None, batch=2, coords_per_param=None):
    """Maximum per-tensor relative error between analytic and numeric gradients over random draws."""
    cfg = config or NetConfig(5, 6, channels1=3, channels2=3, kernel=3, hidden=6)
    worst = 0.0
    for _ in range(draws):
        params = ModelParams.init(cfg, rng)
        for k in PARAM_NAMES:
            if k.endswith("_b"):
                params.arrays[k] = rng.normal(0, 0.1, params.arrays[k].shape)
        X = rng.normal(size=(batch, 2 * cfg.n))
        Y, Y_hat = random_targets(rng, batch, cfg.m)
        eps = float(rng.uniform())
        _, grads = loss_and_gradients(params, X, Y, Y_hat, eps)
        for name in PARAM_NAMES:
            size = params.arrays[name].size
            coords = None
            if coords_per_param is not None and size > coords_per_param:
                coords = sorted(rng.choice(size, coords_per_param, replace=False))
            num = numeric_gradient(params, X, Y, Y_hat, eps, name, coords)
            ana = grads[name].ravel() if coords is None else grads[name].ravel()[coords]
            worst = max(worst, relative_error(ana, num))
    return worst
