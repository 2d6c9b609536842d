"""Scalar posteriors for the sparse core and visibility factors.

Core-tensor entries carry a Bernoulli-Gaussian prior: an atom at zero with
probability 1 - m and a circular Gaussian CN(0, v) with probability m.
Visibility entries are Bernoulli with a logit-scale weight gamma, so the
prior odds of "visible" are exp(gamma). Both posteriors against a Gaussian
pseudo-likelihood have closed forms; everything here is an element-wise
map, vectorized over arrays of any shape.

Support probabilities are always computed through the evidence *ratio* in
a form whose exponent is nonpositive, never by forming the two Gaussian
densities separately (their exponents overflow for confident likelihoods).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# floor on the support probability where the variance update divides by it
EPS_M = 1e-6

GAMMA_RULES = ("ratio", "logit")


@dataclass(frozen=True)
class BgPrior:
    """Bernoulli-Gaussian prior field: support probabilities and variances."""

    M: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        V = np.asarray(self.V, dtype=float)
        if M.shape != V.shape:
            raise ValueError("M and V must share a shape")
        if (M < 0).any() or (M > 1).any():
            raise ValueError("support probabilities must lie in [0, 1]")
        if (V <= 0).any():
            raise ValueError("prior variances must be positive")
        for name, arr in (("M", M), ("V", V)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class SnsPrior:
    """Bernoulli visibility prior on the spatial factor, logit scale."""

    gamma: np.ndarray

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float)
        if not np.isfinite(gamma).all():
            raise ValueError("gamma entries must be finite")
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)


def _check_positive(name, arr):
    if (np.asarray(arr) <= 0).any():
        raise ValueError(f"{name} must be positive")


def _support_probability(m, v, g_lik, e_lik):
    """P(entry active | Gaussian likelihood) for a BG(m, 0, v) prior.

    Uses pi = 1 / (1 + ((1-m)/m) * N0/N1) with
    N0/N1 = ((v+e)/e) * exp(-|g|^2 v / (e (v+e))), whose exponent is <= 0.
    Endpoints m = 0 and m = 1 are exact.
    """
    total = v + e_lik
    ratio = (total / e_lik) * np.exp(-np.abs(g_lik) ** 2 * v / (e_lik * total))
    m = np.asarray(m, dtype=float)
    safe_m = np.where(m > 0.0, m, 1.0)
    odds = (1.0 - m) / safe_m
    return np.where(m > 0.0, 1.0 / (1.0 + odds * ratio), 0.0)


def bg_posterior(m, v, g_lik, e_lik):
    """Moments of BG(m, 0, v) against the likelihood CN(g_lik, e_lik).

    Returns (mean, variance, support probability). The variance is formed
    as pi*cond_var + pi*(1-pi)*|cond_mean|^2, which is nonnegative in
    floating point, rather than by subtracting |mean|^2.
    """
    _check_positive("v", v)
    _check_positive("e_lik", e_lik)
    m_arr = np.asarray(m, dtype=float)
    if (m_arr < 0).any() or (m_arr > 1).any():
        raise ValueError("m must lie in [0, 1]")
    total = v + e_lik
    cond_mean = v * g_lik / total
    cond_var = v * e_lik / total
    pi = _support_probability(m_arr, v, g_lik, e_lik)
    mean = pi * cond_mean
    var = pi * cond_var + pi * (1.0 - pi) * np.abs(cond_mean) ** 2
    return mean, var, pi


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    flat = np.atleast_1d(x)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out[0] if x.ndim == 0 else out


def sns_posterior(a_lik, sigma_lik, a_ss, gamma):
    """Binary visibility posterior and the induced spatial-factor moments.

    Returns (s_hat, a_hat, sigma_post) with
    s_hat = sigmoid(gamma + (2 Re{conj(a_lik) a_ss} - |a_ss|^2) / sigma_lik),
    a_hat = a_ss * s_hat, sigma_post = |a_ss|^2 s_hat (1 - s_hat).
    """
    _check_positive("sigma_lik", sigma_lik)
    logit = gamma + (2.0 * np.real(np.conj(a_lik) * a_ss)
                     - np.abs(a_ss) ** 2) / sigma_lik
    s_hat = _sigmoid(logit)
    a_hat = a_ss * s_hat
    sigma_post = np.abs(a_ss) ** 2 * s_hat * (1.0 - s_hat)
    return s_hat, a_hat, sigma_post


def update_gamma(s_hat, rule: str = "ratio"):
    """M-step refresh of the visibility weights from posterior probabilities.

    The default rule is gamma = s / (1 + s). The "logit" alternative,
    gamma = ln(s / (1 - s)), is the stationary point of the normalized
    Bernoulli log-evidence; both are kept because they disagree and each
    has a claim to being the intended rule (see the module docstring note
    in `inference` on configuration).
    """
    s_hat = np.asarray(s_hat, dtype=float)
    if rule == "ratio":
        return s_hat / (1.0 + s_hat)
    if rule == "logit":
        s = np.clip(s_hat, 1e-12, 1.0 - 1e-12)
        return np.log(s / (1.0 - s))
    raise ValueError(f"unknown gamma rule {rule!r}; expected one of {GAMMA_RULES}")


def update_bg(M, V, g_lik, e_g_lik, g_hat, e_g_post, eps_m: float = EPS_M):
    """M-step refresh of the Bernoulli-Gaussian prior field.

    The new support probability is the evidence ratio R/(1+R) with
    R = [M CN(g_lik; 0, V + e_g_lik)] / [(1-M) CN(g_lik; 0, e_g_lik)],
    computed in the stable support-probability form. The new variance is
    (e_g_post + |g_hat|^2) / M_new with M_new floored at eps_m inside the
    division only.
    """
    _check_positive("V", V)
    _check_positive("e_g_lik", e_g_lik)
    M = np.asarray(M, dtype=float)
    if (M <= 0).any() or (M >= 1).any():
        raise ValueError("M must lie strictly inside (0, 1)")
    M_new = _support_probability(M, V, g_lik, e_g_lik)
    V_new = (e_g_post + np.abs(g_hat) ** 2) / np.maximum(M_new, eps_m)
    return M_new, V_new
