"""Shared test helpers: oracles and finite-difference probes."""

import numpy as np

from smil import variational


def kl_by_quadrature(q_mean, q_std, p_mean, p_std, span=12.0, points=200001):
    """Numerical integration oracle for 1-D Gaussian KL."""
    lo = q_mean - span * q_std
    hi = q_mean + span * q_std
    x = np.linspace(lo, hi, points)
    log_q = -0.5 * ((x - q_mean) / q_std) ** 2 - np.log(q_std * np.sqrt(2 * np.pi))
    log_p = -0.5 * ((x - p_mean) / p_std) ** 2 - np.log(p_std * np.sqrt(2 * np.pi))
    return float(np.trapezoid(np.exp(log_q) * (log_q - log_p), x))


def finite_diff_subset(build_loss, params, coords, step=1e-5):
    """Max relative error between analytic gradients and central differences
    at selected parameter coordinates.

    build_loss() must rebuild the graph from the current parameter values
    and return a scalar tensor; coords is a list of (name, flat_index).
    """
    from smil.networks import zero_grads

    zero_grads(params)
    loss = build_loss()
    loss.backward()
    analytic = []
    for name, idx in coords:
        g = params[name].grad
        analytic.append(0.0 if g is None else float(g.reshape(-1)[idx]))
    zero_grads(params)

    worst = 0.0
    for (name, idx), a in zip(coords, analytic):
        flat = params[name].data.reshape(-1)
        original = flat[idx]
        flat[idx] = original + step
        f_plus = build_loss().item()
        flat[idx] = original - step
        f_minus = build_loss().item()
        flat[idx] = original
        numeric = (f_plus - f_minus) / (2 * step)
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst


def pick_coords(params, names, per_param, rng):
    coords = []
    for name in names:
        size = params[name].data.size
        take = min(per_param, size)
        for idx in rng.choice(size, size=take, replace=False):
            coords.append((name, int(idx)))
    return coords
