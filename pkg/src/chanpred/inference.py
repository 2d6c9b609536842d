"""Bi-layer message-passing engine with EM hyperparameter learning.

The estimator alternates two layers. The E-step passes messages through a
linear mixing layer (frequency/time factor matrices map the space-delay-
Doppler tensor W to the observed space-frequency-time tensor H) and a
bilinear mixing layer (the spatial factor A, itself uncertain through the
visibility posterior, maps the sparse beam-delay-Doppler core G to W).
Scalar posteriors for G and the visibility masks come from `priors`. The
M-step refines the grid perturbations by solving small regularized
quadratic systems built from analytic factor derivatives, then refreshes
the sparsity and visibility priors.

Conventions shared by every line:

- Mode products and mode-k matricizations follow `tensor_core` semantics
  (1-based modes, first-index-fastest layout); equality with those ops is
  part of the test contract.
- Element-wise division and inversion floor divisor magnitudes at EPS_DIV.
- Every quantity that must stay a variance is floored at VAR_FLOOR; each
  clamped entry counts as one floor hit in the diagnostics.
- Residual precision tensors use the positive convention
  (prior_var - post_var) / prior_var^2 with the difference floored at
  RES_REL_FLOOR * prior_var. Undamped, posterior variances never exceed
  prior variances for these models; the relative floor also absorbs the
  inversions that damping across passes can produce.
- Damping forms a convex blend new = damp * candidate + (1 - damp) * old
  of every persistent field after each inner iteration, so damp = 0 keeps
  the state untouched and damp = 1 is the undamped recursion.

A trace dictionary can be passed through the E-step entry points; each
line's output is recorded under a stable key (TRACE_KEYS) for comparison
against an independent loop reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .factor_matrices import (
    FactorSet,
    GridSpec,
    Perturbations,
    build_factors,
    doppler_pred_matrix,
)
from .priors import (
    EPS_M,
    BgPrior,
    SnsPrior,
    bg_posterior,
    sns_posterior,
    update_bg,
    update_gamma,
)
from .tensor_core import EPS_DIV, Tensor

VAR_FLOOR = 1e-18
# Keeps the residual precision e_pri - e_post away from zero relative to
# e_pri.  Damping blends states from different passes, which can push the
# blended posterior variance above the blended prior variance; a hard zero
# there turns the downstream inversion into a 1/EPS_DIV spike that destroys
# the prior-variance learning.
RES_REL_FLOOR = 1e-3
# Outer-loop runaway watchdog: a pass whose observation fit exceeds the best
# seen by this factor is rolled back and the damping step halved (down to
# DAMP_MIN).
RESTART_FIT_RATIO = 10.0
# Second trigger for the same watchdog.  With more Doppler (or beam) atoms
# than observed symbols the dictionary has a null space on the pilot lattice,
# so core energy can blow up there without moving the observation fit at all.
# A pass whose core energy jumps past this multiple of the previous pass
# (plus a fraction of the data energy, so small absolute wobble near zero is
# ignored) is rolled back the same way.  Healthy passes stay two orders of
# magnitude under this line; runaways overshoot it on their first step.
RESTART_GROWTH_RATIO = 30.0
RESTART_ENERGY_FRAC = 0.1
# Repeated rollbacks with no new best fit in between mean the snapshot
# itself keeps relapsing: it was captured after the rot had started (prior
# variances poisoned while the fit still looked fine), so the loop discards
# the era and refits from scratch.  A snapshot that already explains most
# of the observation earns more patience than one that never fit anything:
# discarding deep progress costs far more than a few extra rollbacks.
# Each refit steps the damp down one rung from the configured value rather
# than compounding the rollback halvings, so a discarded era restarts with
# enough step left to converge in the remaining budget.
REINIT_SHALLOW_FIRES = 2
REINIT_DEEP_FIRES = 4
REINIT_FIT_GATE = 0.1
DAMP_MIN = 0.02

TRACE_KEYS = (
    "e_h_pri", "h_pri", "h_hat", "e_h_post", "e_h_res", "h_res",
    "e_w_lik", "w_lik",
    "e_w_plug", "w_pri", "e_w_pri", "w_hat", "e_w_post", "e_w_res", "w_res",
    "e_g_lik", "g_lik", "g_hat", "e_g_post",
    "sigma_a_lik", "a_lik", "s_hat", "a_hat", "sigma_a_post",
)


# ---- small ndarray helpers (tensor_core semantics, no wrapping) ----

def _mode_prod(arr, u, d):
    """Matrix u applied along mode d (1-based) of a dense ndarray."""
    return np.moveaxis(np.tensordot(u, arr, axes=(1, d - 1)), 0, d - 1)


def _matricize(arr, d):
    """Mode-d matricization, first remaining mode fastest."""
    return np.moveaxis(arr, d - 1, 0).reshape(arr.shape[d - 1], -1, order="F")


def _contract_except(x, y, d):
    """All-but-mode-d contraction X_(d) Y_(d)^T."""
    return _matricize(x, d) @ _matricize(y, d).T


def _div(num, den):
    mag = np.abs(den)
    return num / np.where(mag < EPS_DIV, EPS_DIV, den)


def _inv(arr):
    mag = np.abs(arr)
    return 1.0 / np.where(mag < EPS_DIV, EPS_DIV, arr)


@dataclass
class FloorCounter:
    """Counts variance entries clamped to VAR_FLOOR."""

    hits: int = 0


def _floor_var(arr, counter=None):
    below = arr < VAR_FLOOR
    n = int(np.count_nonzero(below))
    if n == 0:
        return arr
    if counter is not None:
        counter.hits += n
    return np.where(below, VAR_FLOOR, arr)


# ---- state and configuration containers ----

@dataclass
class InferenceState:
    """All persistent tensors of the bi-layer recursion.

    Shapes: h_* are (N_an, N_sc, N_sym); w_* are (N_an, K_de, K_do); g_*
    are (K_be, K_de, K_do); a_* and s_hat are (N_an, K_be).
    """

    h_hat: np.ndarray
    e_h_post: np.ndarray
    h_pri: np.ndarray
    e_h_pri: np.ndarray
    h_res: np.ndarray
    e_h_res: np.ndarray
    w_hat: np.ndarray
    e_w_post: np.ndarray
    w_pri: np.ndarray
    e_w_pri: np.ndarray
    w_lik: np.ndarray
    e_w_lik: np.ndarray
    w_res: np.ndarray
    e_w_res: np.ndarray
    g_hat: np.ndarray
    e_g_post: np.ndarray
    g_lik: np.ndarray
    e_g_lik: np.ndarray
    a_hat: np.ndarray
    sigma_a_post: np.ndarray
    a_lik: np.ndarray
    sigma_a_lik: np.ndarray
    s_hat: np.ndarray

    def blend(self, other: "InferenceState", weight: float) -> "InferenceState":
        """Convex combination weight*self + (1-weight)*other, field by field."""
        mixed = {
            f.name: weight * getattr(self, f.name)
            + (1.0 - weight) * getattr(other, f.name)
            for f in fields(self)
        }
        return InferenceState(**mixed)


@dataclass(frozen=True)
class Hyperparams:
    """Perturbations, prior fields, and the known noise variance."""

    pert: Perturbations
    bg: BgPrior
    sns: SnsPrior
    sigma_z2: float

    def __post_init__(self):
        if not self.sigma_z2 > 0:
            raise ValueError("sigma_z2 must be positive")


@dataclass(frozen=True)
class EmOptions:
    """Knobs of the EM loop; defaults follow the recursion's conventions.

    Two visibility-rate updates are available: the occupancy ratio
    (gamma_rule="ratio") and the logit stationary point ("logit"). They
    disagree, so the choice is explicit configuration rather than a code
    path to guess.
    eta_max bounds the curvature slope; callers that know the minimum
    scatterer range should pass 1 / (2 r_min).
    """

    T_M: int = 100
    T_E: int = 1
    damp: float = 0.5
    tol: float = 1e-6
    expand_at_previous: bool = True
    gamma_rule: str = "ratio"
    eta_max: float = math.inf
    ridge_scale: float = 1e-8
    trust_rel_tol: float = 1e-8
    trust_max_halvings: int = 30

    def __post_init__(self):
        if self.T_M < 0 or self.T_E < 1:
            raise ValueError("T_M must be >= 0 and T_E >= 1")
        if not 0.0 <= self.damp <= 1.0:
            raise ValueError("damp must lie in [0, 1]")


@dataclass
class IterationDiagnostics:
    """One outer EM iteration's health record."""

    iteration: int
    inner_iterations: int
    floor_hits: int
    rel_change: float
    fit: float
    j_tau: float
    j_nu: float
    j_phi_eta: float
    cond_tau: float
    cond_nu: float
    cond_phi_eta: float
    nmse_est: float | None = None
    nmse_pred: float | None = None


@dataclass
class EmDiagnostics:
    iterations: list
    converged: bool

    @property
    def floor_hits_total(self) -> int:
        return sum(row.floor_hits for row in self.iterations)


# ---- E-step ----

def linear_module(state: InferenceState, Y, sigma_z2, B, C,
                  counter: FloorCounter | None = None,
                  trace: dict | None = None) -> InferenceState:
    """Messages through the delay/Doppler mixing onto the observed tensor."""
    if sigma_z2 < 0:
        raise ValueError("sigma_z2 must be nonnegative")
    absB2 = np.abs(B) ** 2
    absC2 = np.abs(C) ** 2

    e_h_pri = _floor_var(
        _mode_prod(_mode_prod(state.e_w_post, absB2, 2), absC2, 3), counter)
    h_pri = (_mode_prod(_mode_prod(state.w_hat, B, 2), C, 3)
             - state.h_res * e_h_pri)
    total = e_h_pri + sigma_z2
    h_hat = _div(e_h_pri * Y + sigma_z2 * h_pri, total)
    e_h_post = _floor_var(_div(e_h_pri * sigma_z2, total), counter)
    e_h_res = _div(np.maximum(e_h_pri - e_h_post, RES_REL_FLOOR * e_h_pri),
                   e_h_pri ** 2)
    h_res = _div(h_hat - h_pri, e_h_pri)
    e_w_lik = _floor_var(
        _inv(_mode_prod(_mode_prod(e_h_res, absB2.T, 2), absC2.T, 3)), counter)
    w_lik = state.w_hat + e_w_lik * _mode_prod(
        _mode_prod(h_res, B.conj().T, 2), C.conj().T, 3)

    if trace is not None:
        trace.update(e_h_pri=e_h_pri, h_pri=h_pri, h_hat=h_hat,
                     e_h_post=e_h_post, e_h_res=e_h_res, h_res=h_res,
                     e_w_lik=e_w_lik, w_lik=w_lik)
    return replace(state, e_h_pri=e_h_pri, h_pri=h_pri, h_hat=h_hat,
                   e_h_post=e_h_post, e_h_res=e_h_res, h_res=h_res,
                   e_w_lik=e_w_lik, w_lik=w_lik)


def bilinear_module(state: InferenceState, A_ss, bg: BgPrior, gamma,
                    counter: FloorCounter | None = None,
                    trace: dict | None = None) -> InferenceState:
    """Messages through the uncertain spatial mixing onto the sparse core.

    The plug-in prior variance of W reads the incoming posterior variance
    of G from the previous pass (the recursion defines no separate prior
    variance for G at this point).
    """
    a_hat = state.a_hat
    absA2 = np.abs(a_hat) ** 2

    e_w_plug = (_mode_prod(state.e_g_post, absA2, 1)
                + _mode_prod(np.abs(state.g_hat) ** 2, state.sigma_a_post, 1))
    w_pri = _mode_prod(state.g_hat, a_hat, 1) - state.w_res * e_w_plug
    e_w_pri = _floor_var(
        e_w_plug + _mode_prod(state.e_g_post, state.sigma_a_post, 1), counter)

    total = e_w_pri + state.e_w_lik
    w_hat = _div(state.e_w_lik * w_pri + e_w_pri * state.w_lik, total)
    e_w_post = _floor_var(_div(e_w_pri * state.e_w_lik, total), counter)
    e_w_res = _div(np.maximum(e_w_pri - e_w_post, RES_REL_FLOOR * e_w_pri),
                   e_w_pri ** 2)
    w_res = _div(w_hat - w_pri, e_w_pri)

    e_g_lik = _floor_var(_inv(_mode_prod(e_w_res, absA2.T, 1)), counter)
    g_lik = (state.g_hat
             - state.g_hat * e_g_lik * _mode_prod(e_w_res, state.sigma_a_post.T, 1)
             + e_g_lik * _mode_prod(w_res, a_hat.conj().T, 1))
    g_hat, e_g_post, _ = bg_posterior(bg.M, bg.V, g_lik, e_g_lik)
    e_g_post = _floor_var(e_g_post, counter)

    sigma_a_lik = _floor_var(
        _inv(_contract_except(e_w_res, np.abs(g_hat) ** 2, 1)), counter)
    a_lik = (a_hat
             - a_hat * sigma_a_lik * _contract_except(e_w_res, e_g_post, 1)
             + sigma_a_lik * _contract_except(w_res, np.conj(g_hat), 1))
    s_hat, a_post, sigma_a_post = sns_posterior(a_lik, sigma_a_lik, A_ss, gamma)
    sigma_a_post = _floor_var(sigma_a_post, counter)

    if trace is not None:
        trace.update(e_w_plug=e_w_plug, w_pri=w_pri, e_w_pri=e_w_pri,
                     w_hat=w_hat, e_w_post=e_w_post, e_w_res=e_w_res,
                     w_res=w_res, e_g_lik=e_g_lik, g_lik=g_lik, g_hat=g_hat,
                     e_g_post=e_g_post, sigma_a_lik=sigma_a_lik, a_lik=a_lik,
                     s_hat=s_hat, a_hat=a_post, sigma_a_post=sigma_a_post)
    return replace(
        state, w_pri=w_pri, e_w_pri=e_w_pri, w_hat=w_hat, e_w_post=e_w_post,
        e_w_res=e_w_res, w_res=w_res, e_g_lik=e_g_lik, g_lik=g_lik,
        g_hat=g_hat, e_g_post=e_g_post, sigma_a_lik=sigma_a_lik, a_lik=a_lik,
        s_hat=s_hat, a_hat=a_post, sigma_a_post=sigma_a_post)


def e_step(state: InferenceState, Y, grids: GridSpec, cfg, hyper: Hyperparams,
           t_e: int = 1, damp: float = 0.5,
           counter: FloorCounter | None = None,
           trace: dict | None = None) -> InferenceState:
    """T_E damped passes of the two mixing modules under fixed hyperparameters."""
    if t_e < 1:
        raise ValueError("t_e must be >= 1")
    if not 0.0 <= damp <= 1.0:
        raise ValueError("damp must lie in [0, 1]")
    fs = build_factors(grids, hyper.pert, state.s_hat, cfg)
    Y = Y.data if isinstance(Y, Tensor) else np.asarray(Y)
    for _ in range(t_e):
        old = state
        state = linear_module(state, Y, hyper.sigma_z2, fs.B, fs.C,
                              counter, trace)
        state = bilinear_module(state, fs.A_ss, hyper.bg, hyper.sns.gamma,
                                counter, trace)
        if damp != 1.0:
            state = state.blend(old, damp)
    return state


# ---- M-step ----

def _solve_quadratic(Pi, mu, ridge_scale):
    """Minimize x' Re(Pi) x - 2 Re(mu)' x with a trace-scaled ridge.

    A non-finite system (possible when the posterior has diverged) yields
    a zero step and an infinite condition number instead of an exception;
    the trust check then keeps the previous perturbations.
    """
    P = np.real(Pi)
    m = np.real(mu)
    dim = P.shape[0]
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(m))):
        return np.zeros(dim), math.inf
    tr = float(np.trace(P))
    ridge = ridge_scale * (tr / dim if tr > 0 else 1.0)
    A = P + ridge * np.eye(dim)
    try:
        x = np.linalg.solve(A, m)
        cond = float(np.linalg.cond(A))
    except np.linalg.LinAlgError:
        return np.zeros(dim), math.inf
    if not np.all(np.isfinite(x)):
        return np.zeros(dim), cond if math.isfinite(cond) else math.inf
    return x, cond


def delay_quadratic(h_hat, w_hat, fs: FactorSet):
    """Quadratic model of the delay objective at the factor set's point."""
    w_tau = _mode_prod(w_hat, fs.C, 3)
    W2 = _matricize(w_tau, 2)
    R2 = _matricize(h_hat - _mode_prod(w_tau, fs.B, 2), 2)
    Pi = np.conj(fs.dB.conj().T @ fs.dB) * (W2 @ W2.conj().T)
    mu = np.einsum("kn,kn->k", np.conj(W2), fs.dB.conj().T @ R2)
    return Pi, mu


def doppler_quadratic(h_hat, w_hat, fs: FactorSet):
    """Quadratic model of the Doppler objective at the factor set's point."""
    w_nu = _mode_prod(w_hat, fs.B, 2)
    W3 = _matricize(w_nu, 3)
    R3 = _matricize(h_hat - _mode_prod(w_nu, fs.C, 3), 3)
    Pi = np.conj(fs.dC.conj().T @ fs.dC) * (W3 @ W3.conj().T)
    mu = np.einsum("kn,kn->k", np.conj(W3), fs.dC.conj().T @ R3)
    return Pi, mu


def beam_quadratic(w_hat, g_hat, fs: FactorSet):
    """Quadratic model of the joint angle/slope objective.

    The unknown is the stacked real vector [dphi; eta]; the aggregate
    derivative matrix concatenates both column families.
    """
    G1 = _matricize(g_hat, 1)
    R1 = _matricize(w_hat - _mode_prod(g_hat, fs.A, 1), 1)
    Adot = np.hstack([fs.dA_phi, fs.dA_eta])
    GG = G1 @ G1.conj().T
    Pi = np.conj(Adot.conj().T @ Adot) * np.tile(GG, (2, 2))
    G_stack = np.vstack([G1, G1])
    mu = np.einsum("kn,kn->k", np.conj(G_stack), Adot.conj().T @ R1)
    return Pi, mu


def _trust_step(j_fun, x0, cand, opts: EmOptions):
    """Halve the step toward the expansion point until J stops increasing."""
    j0 = j_fun(x0)
    x = cand
    for _ in range(opts.trust_max_halvings):
        jx = j_fun(x)
        if jx <= j0 * (1.0 + opts.trust_rel_tol):
            return x, jx
        x = x0 + 0.5 * (x - x0)
    return x0, j0


def m_step_perturbations(state: InferenceState, grids: GridSpec,
                         hyper: Hyperparams, cfg,
                         opts: EmOptions = EmOptions()):
    """Refresh grid perturbations by one damped quadratic step per block.

    Blocks run in the order delay, Doppler, angle/slope, each seeing the
    blocks already updated this call. The expansion point is the previous
    estimate by default; with expand_at_previous False the model is built
    at the unperturbed grid. Returns the new Perturbations plus a record
    of objective values and system condition numbers.
    """
    cur = hyper.pert
    h_hat, w_hat, g_hat, s_hat = state.h_hat, state.w_hat, state.g_hat, state.s_hat

    def factors(dphi, eta, dtau, dnu):
        return build_factors(grids, Perturbations(dphi, dtau, dnu, eta),
                             s_hat, cfg)

    expand = opts.expand_at_previous

    # delay block
    dtau0 = cur.dtau if expand else np.zeros_like(cur.dtau)
    fse = factors(cur.dphi, cur.eta, dtau0, cur.dnu)
    Pi, mu = delay_quadratic(h_hat, w_hat, fse)
    step, cond_tau = _solve_quadratic(Pi, mu, opts.ridge_scale)

    def j_tau(dtau):
        f = factors(cur.dphi, cur.eta, dtau, cur.dnu)
        fit = _mode_prod(_mode_prod(w_hat, f.B, 2), f.C, 3)
        return float(np.linalg.norm((h_hat - fit).ravel()) ** 2)

    half = grids.tau_half_step
    cand = np.clip(dtau0 + step, -half, half)
    dtau_new, j_tau_val = _trust_step(j_tau, dtau0, cand, opts)

    # Doppler block
    dnu0 = cur.dnu if expand else np.zeros_like(cur.dnu)
    fse = factors(cur.dphi, cur.eta, dtau_new, dnu0)
    Pi, mu = doppler_quadratic(h_hat, w_hat, fse)
    step, cond_nu = _solve_quadratic(Pi, mu, opts.ridge_scale)

    def j_nu(dnu):
        f = factors(cur.dphi, cur.eta, dtau_new, dnu)
        fit = _mode_prod(_mode_prod(w_hat, f.B, 2), f.C, 3)
        return float(np.linalg.norm((h_hat - fit).ravel()) ** 2)

    half = grids.nu_half_step
    cand = np.clip(dnu0 + step, -half, half)
    dnu_new, j_nu_val = _trust_step(j_nu, dnu0, cand, opts)

    # angle and slope block
    K = grids.K_be
    dphi0 = cur.dphi if expand else np.zeros_like(cur.dphi)
    eta0 = cur.eta if expand else np.zeros_like(cur.eta)
    fse = factors(dphi0, eta0, dtau_new, dnu_new)
    Pi, mu = beam_quadratic(w_hat, g_hat, fse)
    step, cond_be = _solve_quadratic(Pi, mu, opts.ridge_scale)

    def j_be(z):
        f = factors(z[:K], z[K:], dtau_new, dnu_new)
        fit = _mode_prod(g_hat, f.A, 1)
        return float(np.linalg.norm((w_hat - fit).ravel()) ** 2)

    half = grids.phi_half_step
    cand = np.concatenate([
        np.clip(dphi0 + step[:K], -half, half),
        np.clip(eta0 + step[K:], 0.0, opts.eta_max),
    ])
    z0 = np.concatenate([dphi0, eta0])
    z_new, j_be_val = _trust_step(j_be, z0, cand, opts)

    pert = Perturbations(dphi=z_new[:K], dtau=dtau_new, dnu=dnu_new,
                         eta=z_new[K:])
    record = dict(j_tau=j_tau_val, j_nu=j_nu_val, j_phi_eta=j_be_val,
                  cond_tau=cond_tau, cond_nu=cond_nu, cond_phi_eta=cond_be)
    return pert, record


def m_step_priors(state: InferenceState, hyper: Hyperparams,
                  opts: EmOptions = EmOptions()):
    """Refresh both prior fields from the current posterior quantities.

    Delegates to `priors`; the support probabilities are then clipped to
    the open interval the next update requires, with EPS_M as the margin.
    """
    M_new, V_new = update_bg(hyper.bg.M, hyper.bg.V, state.g_lik,
                             state.e_g_lik, state.g_hat, state.e_g_post)
    M_new = np.clip(M_new, EPS_M, 1.0 - EPS_M)
    gamma = update_gamma(state.s_hat, rule=opts.gamma_rule)
    return BgPrior(M=M_new, V=V_new), SnsPrior(gamma=gamma)


# ---- EM loop and prediction ----

def _nmse(est, ref):
    den = np.linalg.norm(np.asarray(ref).ravel()) ** 2
    if den == 0.0:
        return math.inf
    return float(np.linalg.norm((np.asarray(est) - np.asarray(ref)).ravel()) ** 2 / den)


def initial_hyperparams(Y, grids: GridSpec, sigma_z2: float,
                        m0: float = 0.1) -> Hyperparams:
    """Uninformative starting point scaled to the observed energy.

    The slab variance spreads the observed per-entry energy over the
    expected number of active core entries, using the mean grid count as
    the per-mode activity scale.
    """
    Y = Y.data if isinstance(Y, Tensor) else np.asarray(Y)
    n_an = Y.shape[0]
    k_avg = (grids.K_be + grids.K_de + grids.K_do) / 3.0
    v0 = float(np.linalg.norm(Y.ravel()) ** 2 / (Y.size * m0 * k_avg))
    shape = (grids.K_be, grids.K_de, grids.K_do)
    return Hyperparams(
        pert=Perturbations.zeros(grids.K_be, grids.K_de, grids.K_do),
        bg=BgPrior(M=np.full(shape, m0), V=np.full(shape, max(v0, VAR_FLOOR))),
        sns=SnsPrior(gamma=np.full((n_an, grids.K_be), 0.5)),
        sigma_z2=sigma_z2,
    )


def initial_state(Y, grids: GridSpec, cfg, hyper: Hyperparams) -> InferenceState:
    """Warm start: matched-filter back-projection for W, zero core, open masks."""
    Y = Y.data if isinstance(Y, Tensor) else np.asarray(Y)
    fs = build_factors(grids, hyper.pert, np.full(Y.shape[:1] + (grids.K_be,), 1.0), cfg)
    shape_w = (Y.shape[0], grids.K_de, grids.K_do)
    shape_g = (grids.K_be, grids.K_de, grids.K_do)
    shape_a = (Y.shape[0], grids.K_be)

    g_hat = np.zeros(shape_g, dtype=np.complex128)
    e_g_post = np.array(hyper.bg.V, dtype=float)
    s_hat = np.full(shape_a, 0.5)
    a_hat = 0.5 * fs.A_ss
    sigma_a_post = 0.25 * np.abs(fs.A_ss) ** 2
    w_hat = _mode_prod(_mode_prod(Y, fs.B.conj().T, 2), fs.C.conj().T, 3) \
        / (Y.shape[1] * Y.shape[2])
    e_w_post = _mode_prod(e_g_post, np.abs(a_hat) ** 2, 1)

    return InferenceState(
        h_hat=np.zeros_like(Y), e_h_post=np.ones(Y.shape),
        h_pri=np.zeros_like(Y), e_h_pri=np.ones(Y.shape),
        h_res=np.zeros_like(Y), e_h_res=np.zeros(Y.shape),
        w_hat=w_hat, e_w_post=e_w_post,
        w_pri=np.zeros(shape_w, dtype=np.complex128),
        e_w_pri=np.ones(shape_w),
        w_lik=np.zeros(shape_w, dtype=np.complex128),
        e_w_lik=np.ones(shape_w),
        w_res=np.zeros(shape_w, dtype=np.complex128),
        e_w_res=np.zeros(shape_w),
        g_hat=g_hat, e_g_post=e_g_post,
        g_lik=np.zeros(shape_g, dtype=np.complex128),
        e_g_lik=np.ones(shape_g),
        a_hat=a_hat, sigma_a_post=sigma_a_post,
        a_lik=np.zeros(shape_a, dtype=np.complex128),
        sigma_a_lik=np.ones(shape_a),
        s_hat=s_hat,
    )


def em_loop(Y, cfg, grids: GridSpec, sigma_z2: float,
            opts: EmOptions = EmOptions(), truth=None, truth_pred=None,
            pred_horizon: int = 0):
    """Full alternating estimation: T_M outer rounds of E-step then M-step.

    Stops early when the relative change of the posterior channel mean
    drops below opts.tol. When it never does, the returned state/hyper
    pair is the best observation fit seen along the way and the
    diagnostics carry converged=False. `truth` (pilot-frame channel) and
    `truth_pred` (future channel, with pred_horizon) enable the NMSE
    columns of the per-iteration diagnostics.
    """
    Y_arr = Y.data if isinstance(Y, Tensor) else np.asarray(Y, dtype=np.complex128)
    hyper = initial_hyperparams(Y_arr, grids, sigma_z2)
    state = initial_state(Y_arr, grids, cfg, hyper)

    truth_arr = truth.data if isinstance(truth, Tensor) else truth
    pred_arr = truth_pred.data if isinstance(truth_pred, Tensor) else truth_pred

    rows = []
    converged = False
    prev_h = None
    init = (state, hyper)
    best_fit = math.inf
    best = init
    damp = opts.damp
    y_energy = float(np.vdot(Y_arr, Y_arr).real)
    fires_since_improve = 0
    era = 0

    for it in range(1, opts.T_M + 1):
        counter = FloorCounter()
        cand = e_step(state, Y_arr, grids, cfg, hyper, t_e=opts.T_E,
                      damp=damp, counter=counter)
        finite = (np.all(np.isfinite(cand.w_hat))
                  and np.all(np.isfinite(cand.s_hat))
                  and np.all(np.isfinite(cand.g_hat)))
        grew = False
        if finite:
            fs = build_factors(grids, hyper.pert, cand.s_hat, cfg)
            fit = _nmse(_mode_prod(_mode_prod(cand.w_hat, fs.B, 2), fs.C, 3),
                        Y_arr)
            cand_g2 = float(np.vdot(cand.g_hat, cand.g_hat).real)
            prev_g2 = float(np.vdot(state.g_hat, state.g_hat).real)
            grew = cand_g2 > (RESTART_GROWTH_RATIO * prev_g2
                              + RESTART_ENERGY_FRAC * y_energy)
        if not finite or grew or fit > RESTART_FIT_RATIO * max(best_fit, 1e-30):
            # The pass ran away from the data (message passing can when the
            # step is too aggressive for the scene).  Resume from the best
            # snapshot at half the step; if that snapshot itself keeps
            # relapsing, discard the era and refit from scratch.
            fires_since_improve += 1
            limit = (REINIT_DEEP_FIRES if best_fit <= REINIT_FIT_GATE
                     else REINIT_SHALLOW_FIRES)
            if fires_since_improve >= limit:
                era += 1
                damp = max(opts.damp * 0.5 ** era, DAMP_MIN)
                state, hyper = init
                best_fit = math.inf
                best = init
                fires_since_improve = 0
            else:
                damp = max(damp * 0.5, DAMP_MIN)
                state, hyper = best
            rows.append(IterationDiagnostics(
                iteration=it, inner_iterations=opts.T_E,
                floor_hits=counter.hits, rel_change=math.inf,
                fit=fit if finite else math.inf, j_tau=math.nan,
                j_nu=math.nan, j_phi_eta=math.nan, cond_tau=math.nan,
                cond_nu=math.nan, cond_phi_eta=math.nan))
            prev_h = None
            continue
        state = cand
        pert_new, record = m_step_perturbations(state, grids, hyper, cfg, opts)
        bg_new, sns_new = m_step_priors(state, hyper, opts)
        hyper = Hyperparams(pert=pert_new, bg=bg_new, sns=sns_new,
                            sigma_z2=sigma_z2)
        rel = _nmse(state.h_hat, prev_h) ** 0.5 if prev_h is not None else math.inf

        nmse_est = _nmse(state.h_hat, truth_arr) if truth_arr is not None else None
        nmse_pred = None
        if pred_arr is not None:
            pred = predict(state, hyper, grids, cfg, pred_horizon)
            nmse_pred = _nmse(pred.data, pred_arr)

        rows.append(IterationDiagnostics(
            iteration=it, inner_iterations=opts.T_E, floor_hits=counter.hits,
            rel_change=rel, fit=fit, nmse_est=nmse_est, nmse_pred=nmse_pred,
            **record))

        if fit < best_fit:
            best_fit = fit
            best = (state, hyper)
            fires_since_improve = 0
        if rel < opts.tol:
            converged = True
            break
        prev_h = state.h_hat

    if not converged:
        state, hyper = best
    return state, hyper, EmDiagnostics(iterations=rows, converged=converged)


def predict(state: InferenceState, hyper: Hyperparams, grids: GridSpec, cfg,
            horizon: int) -> Tensor:
    """Extrapolate the fitted channel `horizon` symbols past the frame.

    The spatial factor plugs in the soft visibility probabilities; the
    temporal factor swaps the in-frame steering for the extrapolating one
    at the same learned Doppler offsets.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    fs = build_factors(grids, hyper.pert, state.s_hat, cfg)
    C_pred = doppler_pred_matrix(grids, hyper.pert.dnu, horizon, cfg)
    out = _mode_prod(_mode_prod(_mode_prod(state.g_hat, fs.A, 1), fs.B, 2),
                     C_pred, 3)
    return Tensor(out)
