"""
Closed-form reference results for the linear-score Gaussian toy.

Written against plain numpy/math only; nothing here calls into src.
"""

import math

import numpy as np


def ode_solution(x0: np.ndarray, s: float, sigma_from: float, sigma_to: float) -> np.ndarray:
    """Probability-flow ODE solution for N(0, s^2) data: x scales by sqrt((s^2+sigma_to^2)/(s^2+sigma_from^2))."""
    return x0 * math.sqrt((s * s + sigma_to * sigma_to) / (s * s + sigma_from * sigma_from))


def clean_eps_variance(s: float, sigma: float) -> float:
    return sigma * sigma / (s * s + sigma * sigma)


def induced_conditional_variance(s: float, sigma: float, s_delta: float, rho: float) -> float:
    """
    Var(delta | eps_hat) for the JointGaussian injector.

    delta = rho s_delta / s_eps (eps - mu) + s_delta sqrt(1 - rho^2) z and eps_hat = eps + delta.
    """
    s_eps2 = clean_eps_variance(s, sigma)
    s_eps = math.sqrt(s_eps2)
    var_delta = s_delta * s_delta
    cov_delta_eps = rho * s_delta * s_eps
    var_hat = s_eps2 + var_delta + 2.0 * cov_delta_eps
    cov_hat = var_delta + cov_delta_eps
    return var_delta - cov_hat * cov_hat / var_hat


def euler_variance(sigmas, s: float, s_delta: float, c=None) -> float:
    """
    Final per-coordinate variance of Euler sampling on N(0, s^2) data with
    independent additive output noise (rho = 0) and drift factors c_i.

    v_{i+1} = v_i g_i^2 + (1 + c_i)^2 dsigma_i^2 s_delta^2,
    g_i = 1 + (1 + c_i) dsigma_i sigma_i / (s^2 + sigma_i^2), v_0 = s^2 + sigma_0^2.
    """
    sigmas = [float(v) for v in sigmas]
    steps = len(sigmas) - 1
    c = [0.0] * steps if c is None else [float(v) for v in c]
    v = s * s + sigmas[0] ** 2
    for i in range(steps):
        d = sigmas[i + 1] - sigmas[i]
        k = 1.0 + c[i]
        g = 1.0 + k * d * sigmas[i] / (s * s + sigmas[i] ** 2)
        v = v * g * g + k * k * d * d * s_delta * s_delta
    return v


def euler_factors(sigmas, V) -> list[float]:
    """c_i = |dsigma_i| / (2 sigma_i) V_i."""
    return [abs(sigmas[i + 1] - sigmas[i]) / (2.0 * sigmas[i]) * V[i] for i in range(len(sigmas) - 1)]


def finite_difference_score(log_density, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar log-density over every coordinate of one sample."""
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        up = flat.copy()
        down = flat.copy()
        up[j] += h
        down[j] -= h
        out[j] = (log_density(up.reshape(x.shape)) - log_density(down.reshape(x.shape))) / (2.0 * h)
    return grad
