"""Parameterized factor matrices over uniform grids, with derivatives.

The three factor families map the beam, delay and Doppler grids into the
spatial, frequency and temporal domains:

    [a_ss(phi, eta)]_n = exp(j 2 pi (n-1) d [phi - (n-1) d eta] / lambda)
    [b(tau)]_n         = exp(-j 2 pi (n-1) df_bar tau)
    [c(nu)]_n          = exp(+j 2 pi (n-1) dt_bar nu)

with n starting at 1. The spatial column is a spatial chirp: `phi` is the
direction cosine and `eta` the wavefront-curvature slope (zero in the far
field). Visibility enters as an element-wise mask/probability S on the
spatial factor, A = A_ss * S.

Grids are uniform; refinement happens through per-column perturbations
(beam also carries a per-column slope), clamped to half a grid step so the
refined grid stays injective. All builders are pure functions of their
arguments; the returned containers are plain frozen dataclasses of numpy
arrays.

`cfg` arguments are SystemConfig instances (see channel_model); only the
derived spacings d, wavelength, df_bar, dt_bar and the counts are read.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def steer_beam(phi: float, eta: float, cfg) -> np.ndarray:
    """Spatial steering column; unit modulus, chirped when eta > 0."""
    n = np.arange(cfg.N_an)
    return np.exp(2j * np.pi * n * cfg.d * (phi - n * cfg.d * eta) / cfg.wavelength)


def steer_delay(tau: float, cfg) -> np.ndarray:
    """Frequency-domain steering column for one propagation delay."""
    n = np.arange(cfg.N_sc)
    return np.exp(-2j * np.pi * n * cfg.df_bar * tau)


def steer_doppler(nu: float, cfg) -> np.ndarray:
    """Temporal steering column over the pilot symbols of one frame."""
    n = np.arange(cfg.N_sym)
    return np.exp(2j * np.pi * n * cfg.dt_bar * nu)


def prediction_origin(cfg) -> float:
    """Time of the last pilot symbol; extrapolation starts there."""
    return (cfg.N_sym - 1) * cfg.dt_bar


def steer_doppler_pred(nu: float, t0: float, horizon: int, cfg) -> np.ndarray:
    """Temporal steering at the post-frame instants t0 + n_cp * dT."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    n_cp = np.arange(1, horizon + 1)
    return np.exp(2j * np.pi * (t0 + n_cp * cfg.dT) * nu)


@dataclass(frozen=True)
class GridSpec:
    """Uniform sampling grids for the beam, delay and Doppler domains."""

    phi_bar: np.ndarray
    tau_bar: np.ndarray
    nu_bar: np.ndarray

    def __post_init__(self):
        for name in ("phi_bar", "tau_bar", "nu_bar"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            if arr.ndim != 1 or arr.size < 1:
                raise ValueError(f"{name} must be a non-empty vector")
            if arr.size > 1 and not (np.diff(arr) > 0).all():
                raise ValueError(f"{name} must be strictly increasing")

    @property
    def K_be(self):
        return self.phi_bar.size

    @property
    def K_de(self):
        return self.tau_bar.size

    @property
    def K_do(self):
        return self.nu_bar.size

    @staticmethod
    def _half_step(grid):
        if grid.size < 2:
            return np.inf
        return float(grid[1] - grid[0]) / 2.0

    @property
    def phi_half_step(self):
        return self._half_step(self.phi_bar)

    @property
    def tau_half_step(self):
        return self._half_step(self.tau_bar)

    @property
    def nu_half_step(self):
        return self._half_step(self.nu_bar)


def make_grids(cfg, v_mt: float, K_be=None, K_de=None, K_do=None) -> GridSpec:
    """Default uniform grids: beam on [-1, 1], delay on [0, dT_cp], Doppler
    on [-nu_max, nu_max] with nu_max = v_mt * f_c / c.

    Defaults: K_be = N_an (Nyquist beam density for angle-only sampling),
    K_de = N_sc / 2 (CP coverage at half density), K_do = 2 * N_sym
    (oversampled because the frame is short).
    """
    K_be = cfg.N_an if K_be is None else int(K_be)
    K_de = max(cfg.N_sc // 2, 1) if K_de is None else int(K_de)
    K_do = 2 * cfg.N_sym if K_do is None else int(K_do)
    nu_max = v_mt * cfg.f_c / cfg.c
    if nu_max <= 0:
        raise ValueError("v_mt must be positive so the Doppler grid has extent")
    # Beam points are cell-centered: phi = -1 and phi = +1 are the same beam
    # at half-wavelength spacing, so an endpoint-inclusive lattice would carry
    # two identical steering columns and the dictionary would lose injectivity.
    # Cell-centering also makes the beam bank orthogonal when K_be = N_an.
    return GridSpec(
        phi_bar=-1.0 + (2.0 * np.arange(K_be) + 1.0) / K_be,
        tau_bar=np.linspace(0.0, cfg.dT_cp, K_de),
        nu_bar=np.linspace(-nu_max, nu_max, K_do),
    )


@dataclass(frozen=True)
class Perturbations:
    """Per-column grid refinements: offsets plus the beam-domain slope."""

    dphi: np.ndarray
    dtau: np.ndarray
    dnu: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        for name in ("dphi", "dtau", "dnu", "eta"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, K_be: int, K_de: int, K_do: int) -> "Perturbations":
        return cls(np.zeros(K_be), np.zeros(K_de), np.zeros(K_do), np.zeros(K_be))

    def clamped(self, grids: GridSpec, eta_max: float) -> "Perturbations":
        """Clip offsets to half a grid step and the slope to [0, eta_max]."""
        return Perturbations(
            dphi=np.clip(self.dphi, -grids.phi_half_step, grids.phi_half_step),
            dtau=np.clip(self.dtau, -grids.tau_half_step, grids.tau_half_step),
            dnu=np.clip(self.dnu, -grids.nu_half_step, grids.nu_half_step),
            eta=np.clip(self.eta, 0.0, eta_max),
        )


@dataclass(frozen=True)
class FactorSet:
    """Factor matrices at one evaluation point plus analytic derivatives.

    A_ss is the fully visible spatial factor; A = A_ss * S. The dotted
    matrices are entry-wise first derivatives with respect to the column's
    own parameter (phi, eta, tau, nu); the spatial derivatives carry the
    same S mask as A.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    A_ss: np.ndarray
    dA_phi: np.ndarray
    dA_eta: np.ndarray
    dB: np.ndarray
    dC: np.ndarray


def build_factors(grids: GridSpec, pert: Perturbations, S: np.ndarray, cfg) -> FactorSet:
    """Evaluate all factor matrices and derivatives at perturbed grid points."""
    S = np.asarray(S, dtype=float)
    if S.shape != (cfg.N_an, grids.K_be):
        raise ValueError(f"S must be {(cfg.N_an, grids.K_be)}, got {S.shape}")
    if (S < 0).any() or (S > 1).any():
        raise ValueError("S entries must lie in [0, 1]")
    if pert.dphi.size != grids.K_be or pert.eta.size != grids.K_be \
            or pert.dtau.size != grids.K_de or pert.dnu.size != grids.K_do:
        raise ValueError("perturbation sizes do not match grid counts")

    phi = grids.phi_bar + pert.dphi
    eta = pert.eta
    n_an = np.arange(cfg.N_an)[:, None]
    A_ss = np.exp(
        2j * np.pi * n_an * cfg.d * (phi[None, :] - n_an * cfg.d * eta[None, :])
        / cfg.wavelength
    )
    A = A_ss * S
    dA_phi = (2j * np.pi * cfg.d / cfg.wavelength) * n_an * A_ss * S
    dA_eta = (-2j * np.pi * cfg.d**2 / cfg.wavelength) * n_an**2 * A_ss * S

    tau = grids.tau_bar + pert.dtau
    n_sc = np.arange(cfg.N_sc)[:, None]
    B = np.exp(-2j * np.pi * n_sc * cfg.df_bar * tau[None, :])
    dB = (-2j * np.pi * cfg.df_bar) * n_sc * B

    nu = grids.nu_bar + pert.dnu
    n_sym = np.arange(cfg.N_sym)[:, None]
    C = np.exp(2j * np.pi * n_sym * cfg.dt_bar * nu[None, :])
    dC = (2j * np.pi * cfg.dt_bar) * n_sym * C

    return FactorSet(A=A, B=B, C=C, A_ss=A_ss, dA_phi=dA_phi, dA_eta=dA_eta,
                     dB=dB, dC=dC)


def doppler_pred_matrix(grids: GridSpec, dnu: np.ndarray, horizon: int, cfg) -> np.ndarray:
    """Prediction-time temporal factor: one extrapolating column per grid point."""
    t0 = prediction_origin(cfg)
    nu = grids.nu_bar + np.asarray(dnu, dtype=float)
    n_cp = np.arange(1, horizon + 1)[:, None]
    return np.exp(2j * np.pi * (t0 + n_cp * cfg.dT) * nu[None, :])
