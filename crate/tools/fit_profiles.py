"""Fit 6-component circular Gaussian mixtures to the exponential and
de Vaucouleurs radial profiles on [0, 8] effective radii.

Prints Rust constant tables (amplitude, variance in units of r_e^2).
Amplitudes sum to one so each mixture is a unit-flux density.
"""
import numpy as np
from scipy.optimize import least_squares

PROFILES = {
    "EXP": (1.0, 1.678346990),
    "DEV": (4.0, 7.669249443),
}
K = 6
R_MAX = 8.0


def sersic(r, n, b):
    return np.exp(-b * (r ** (1.0 / n) - 1.0))


def mixture(r, amps, vars_):
    r = r[:, None]
    return np.sum(amps / (2 * np.pi * vars_) * np.exp(-0.5 * r * r / vars_), axis=1)


def unpack(p):
    logits, logv = p[:K], p[K:]
    w = np.exp(logits - logits.max())
    return w / w.sum(), np.exp(logv)


def fit(n, b):
    r = np.linspace(1e-4, R_MAX, 4000)
    prof = sersic(r, n, b)
    norm = np.trapezoid(2 * np.pi * r * prof, r)
    prof = prof / norm

    def resid(p):
        a, v = unpack(p)
        return np.sqrt(r) * (mixture(r, a, v) - prof) * r

    best = None
    for lo in (-6.0, -8.0, -10.0):
        p0 = np.concatenate([np.zeros(K), np.linspace(lo, 1.5, K)])
        sol = least_squares(resid, p0, method="lm", max_nfev=200000, xtol=1e-15, ftol=1e-15)
        if best is None or sol.cost < best.cost:
            best = sol
    a, v = unpack(best.x)
    order = np.argsort(v)
    return a[order], v[order], best.cost


for name, (n, b) in PROFILES.items():
    a, v, cost = fit(n, b)
    print(f"// {name}: residual cost {cost:.3e}")
    print(f"pub const {name}_AMP: [f64; 6] = [" + ", ".join(f"{x:.10e}" for x in a) + "];")
    print(f"pub const {name}_VAR: [f64; 6] = [" + ", ".join(f"{x:.10e}" for x in v) + "];")
