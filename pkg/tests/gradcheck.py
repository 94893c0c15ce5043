"""Central finite-difference oracle for Mlp.backward."""

import numpy as np


def probe_gradients(model, x, rng, probes=200, h=1e-6):
    """Max relative error between backward and central differences.

    The scalar loss is a fixed random projection of the output, so its
    output-gradient is that projection. Probes pick random (array, entry)
    pairs over all parameters.
    """
    w_out = rng.normal(size=model(x).shape)

    def loss():
        return float(np.sum(model(x) * w_out))

    _, cache = model.forward(x)
    grads, _ = model.backward(cache, w_out)
    params = model.params
    sizes = np.array([p.size for p in params])
    worst = 0.0
    for _ in range(probes):
        a = rng.choice(len(params), p=sizes / sizes.sum())
        idx = np.unravel_index(rng.integers(params[a].size), params[a].shape)
        old = params[a][idx]
        params[a][idx] = old + h
        up = loss()
        params[a][idx] = old - h
        down = loss()
        params[a][idx] = old
        num = (up - down) / (2 * h)
        ana = grads[a][idx]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def input_gradient_error(model, x, rng, h=1e-6):
    w_out = rng.normal(size=model(x).shape)
    _, cache = model.forward(x)
    _, g_in = model.backward(cache, w_out)
    worst = 0.0
    flat = x.reshape(-1)
    for k in rng.choice(flat.size, size=min(20, flat.size), replace=False):
        old = flat[k]
        flat[k] = old + h
        up = float(np.sum(model(x) * w_out))
        flat[k] = old - h
        down = float(np.sum(model(x) * w_out))
        flat[k] = old
        num = (up - down) / (2 * h)
        ana = g_in.reshape(-1)[k]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst
