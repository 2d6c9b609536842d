"""Comparison predictors bracketing the main estimator.

`stale_csi` is the aging-unaware lower bound: it reuses the most recent
pilot slice for the whole horizon, scaled by a per-element Wiener factor
p / (p + sigma_z2) with the signal power p estimated from the slice
itself. Any temporal channel dynamics show up directly as its error.

`omp_prony` is a far-field model-based extrapolator. A Kronecker
angle-delay dictionary (planar wavefronts only, eta = 0) is matched to
the first pilot symbol by orthogonal matching pursuit; the selected taps
are then refit by least squares on every pilot symbol, each tap's
time series is summarized by a single complex pole (first-order Prony),
and the poles are advanced to the prediction instants. Wavefront
curvature and partial visibility are outside its model class, which is
the point of the comparison.

Both predictors are deterministic functions of their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .factor_matrices import steer_beam, steer_delay
from .tensor_core import Tensor

# Pole magnitudes a hair above 1 are tolerated (finite-sample wobble);
# anything beyond this is renormalized to the unit circle so the
# extrapolation cannot blow up over long horizons.
POLE_CLAMP = 1.05


@dataclass(frozen=True)
class BaselineResult:
    """Prediction tensor of one method plus optional per-slice error."""

    predicted: Tensor
    method: str
    nmse_per_horizon: np.ndarray | None = None


def per_horizon_nmse(predicted, truth) -> np.ndarray:
    """Slice-wise squared error ratio; inf where a truth slice is zero."""
    p = predicted.data if isinstance(predicted, Tensor) else np.asarray(predicted)
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    out = np.empty(p.shape[2])
    for j in range(p.shape[2]):
        den = np.linalg.norm(t[:, :, j]) ** 2
        num = np.linalg.norm(p[:, :, j] - t[:, :, j]) ** 2
        out[j] = num / den if den > 0.0 else math.inf
    return out


def stale_csi(Y, sigma_z2: float, horizon: int, truth=None) -> BaselineResult:
    """Repeat the denoised last pilot slice across the horizon."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if sigma_z2 < 0.0:
        raise ValueError("noise variance must be >= 0")
    Y_arr = Y.data if isinstance(Y, Tensor) else np.asarray(Y)
    last = Y_arr[:, :, -1]
    p_hat = max(float(np.mean(np.abs(last) ** 2)) - sigma_z2, 0.0)
    den = p_hat + sigma_z2
    scale = p_hat / den if den > 0.0 else 1.0
    pred = np.repeat((scale * last)[:, :, None], horizon, axis=2)
    result = Tensor(pred)
    nmse = per_horizon_nmse(result, truth) if truth is not None else None
    return BaselineResult(predicted=result, method="stale_csi",
                          nmse_per_horizon=nmse)


def _angle_delay_dictionary(cfg, k_be: int, k_de: int):
    """Steering banks on critically spaced far-field lattices."""
    phi = -1.0 + 2.0 * np.arange(k_be) / k_be
    tau = np.arange(k_de) / (cfg.N_sc * cfg.df_bar)
    A = np.stack([steer_beam(p, 0.0, cfg) for p in phi], axis=1)
    B = np.stack([steer_delay(t, cfg) for t in tau], axis=1)
    return A, B


def _prony_pole(series: np.ndarray) -> complex:
    """Least-squares one-step ratio of a complex time series."""
    if series.size < 2:
        return 1.0 + 0.0j
    den = float(np.sum(np.abs(series[:-1]) ** 2))
    if den == 0.0:
        return 0.0 + 0.0j
    z = complex(np.sum(series[1:] * np.conj(series[:-1])) / den)
    if abs(z) > POLE_CLAMP:
        z /= abs(z)
    return z


def omp_prony(Y, cfg, k_be: int | None = None, k_de: int | None = None,
              sparsity: int = 4, horizon: int = 1,
              truth=None) -> BaselineResult:
    """Sparse angle-delay fit of the first symbol, one pole per tap."""
    if sparsity < 1:
        raise ValueError("sparsity must be >= 1")
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    Y_arr = Y.data if isinstance(Y, Tensor) else np.asarray(Y)
    n_an, n_sc, n_sym = Y_arr.shape
    k_be = n_an if k_be is None else k_be
    k_de = n_sc if k_de is None else k_de
    A, B = _angle_delay_dictionary(cfg, k_be, k_de)

    # OMP on the first symbol. Correlations are computed in factored form
    # (A^H R conj(B)) so the full Kronecker dictionary is never built.
    y0 = Y_arr[:, :, 0].reshape(-1, order="F")
    resid = Y_arr[:, :, 0]
    support: list[tuple[int, int]] = []
    cols = np.empty((n_an * n_sc, 0), dtype=complex)
    taken = np.zeros((k_be, k_de), dtype=bool)
    for _ in range(sparsity):
        corr = np.abs(A.conj().T @ resid @ B.conj())
        corr[taken] = -1.0
        k, l = np.unravel_index(int(np.argmax(corr)), corr.shape)
        taken[k, l] = True
        support.append((k, l))
        atom = np.outer(A[:, k], B[:, l]).reshape(-1, order="F")
        cols = np.concatenate([cols, atom[:, None]], axis=1)
        coef, _, _, _ = np.linalg.lstsq(cols, y0, rcond=None)
        resid = (y0 - cols @ coef).reshape(n_an, n_sc, order="F")

    # Least-squares tap series on the frozen support, one column per symbol.
    Y_mat = Y_arr.reshape(n_an * n_sc, n_sym, order="F")
    taps, _, _, _ = np.linalg.lstsq(cols, Y_mat, rcond=None)

    # One pole and one amplitude per tap; extrapolate in pilot-symbol units.
    m = (n_sym - 1) + np.arange(1, horizon + 1) / cfg.N_IS
    tap_pred = np.zeros((len(support), horizon), dtype=complex)
    t_idx = np.arange(n_sym)
    for i in range(len(support)):
        z = _prony_pole(taps[i])
        powers = np.power(z, t_idx)
        den = float(np.sum(np.abs(powers) ** 2))
        amp = complex(np.sum(taps[i] * np.conj(powers)) / den) if den > 0 else 0.0
        tap_pred[i] = amp * np.power(z, m)

    pred = (cols @ tap_pred).reshape(n_an, n_sc, horizon, order="F")
    result = Tensor(pred)
    nmse = per_horizon_nmse(result, truth) if truth is not None else None
    return BaselineResult(predicted=result, method="omp_prony",
                          nmse_per_horizon=nmse)
