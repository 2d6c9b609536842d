"""Message-passing lines against a loop reference, plus EM loop behavior."""

import math

import numpy as np
import pytest

import oracles
from reference_estep import reference_estep
from chanpred.channel_model import (
    PathParams,
    Scene,
    SystemConfig,
    assemble_sft,
    observe,
)
from chanpred.factor_matrices import (
    GridSpec,
    Perturbations,
    build_factors,
    make_grids,
)
from chanpred.inference import (
    EmOptions,
    FloorCounter,
    Hyperparams,
    InferenceState,
    TRACE_KEYS,
    _contract_except,
    _mode_prod,
    _solve_quadratic,
    bilinear_module,
    delay_quadratic,
    e_step,
    em_loop,
    initial_hyperparams,
    initial_state,
    linear_module,
    m_step_perturbations,
    m_step_priors,
    predict,
)
from chanpred.priors import EPS_M, BgPrior, SnsPrior
from chanpred.tensor_core import Tensor, mode_product

RNG = np.random.default_rng(41)


def small_cfg(n_an=4, n_sc=4, n_sym=2):
    return SystemConfig(f_c=15e9, delta_f=60e3, dT_sym=16.67e-6,
                        dT_cp=1.17e-6, N_IS=14, N_TC=4,
                        N_an=n_an, N_sc=n_sc, N_sym=n_sym)


def small_grids(cfg, k_be=4, k_de=3, k_do=3):
    return make_grids(cfg, v_mt=16.67, K_be=k_be, K_de=k_de, K_do=k_do)


def lattice_grids(cfg, k_be, k_de, k_do):
    """Orthogonal-column grids: DFT spacing in every mode."""
    return GridSpec(
        phi_bar=-1.0 + 2.0 * np.arange(k_be) / k_be,
        tau_bar=np.arange(k_de) / (cfg.N_sc * cfg.df_bar),
        nu_bar=(np.arange(k_do) - k_do // 2) / (cfg.N_sym * cfg.dt_bar),
    )


def crand(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_state(cfg, grids, rng):
    """Generic positive-variance state with no internal consistency."""
    sh = (cfg.N_an, cfg.N_sc, cfg.N_sym)
    sw = (cfg.N_an, grids.K_de, grids.K_do)
    sg = (grids.K_be, grids.K_de, grids.K_do)
    sa = (cfg.N_an, grids.K_be)
    fs = build_factors(grids, Perturbations.zeros(grids.K_be, grids.K_de,
                                                  grids.K_do),
                       np.full(sa, 1.0), cfg)
    s_hat = rng.uniform(0.1, 0.9, sa)
    return InferenceState(
        h_hat=crand(rng, sh), e_h_post=rng.uniform(0.1, 2.0, sh),
        h_pri=crand(rng, sh), e_h_pri=rng.uniform(0.1, 2.0, sh),
        h_res=crand(rng, sh), e_h_res=rng.uniform(0.1, 2.0, sh),
        w_hat=crand(rng, sw), e_w_post=rng.uniform(0.1, 2.0, sw),
        w_pri=crand(rng, sw), e_w_pri=rng.uniform(0.1, 2.0, sw),
        w_lik=crand(rng, sw), e_w_lik=rng.uniform(0.1, 2.0, sw),
        w_res=crand(rng, sw), e_w_res=rng.uniform(0.1, 2.0, sw),
        g_hat=crand(rng, sg), e_g_post=rng.uniform(0.1, 2.0, sg),
        g_lik=crand(rng, sg), e_g_lik=rng.uniform(0.1, 2.0, sg),
        a_hat=s_hat * fs.A_ss, sigma_a_post=s_hat * (1 - s_hat),
        a_lik=crand(rng, sa), sigma_a_lik=rng.uniform(0.1, 2.0, sa),
        s_hat=s_hat,
    )


def random_hyper(cfg, grids, rng, sigma_z2=0.1):
    sg = (grids.K_be, grids.K_de, grids.K_do)
    return Hyperparams(
        pert=Perturbations.zeros(grids.K_be, grids.K_de, grids.K_do),
        bg=BgPrior(M=rng.uniform(0.05, 0.5, sg), V=rng.uniform(0.5, 2.0, sg)),
        sns=SnsPrior(gamma=rng.uniform(-1.0, 1.0, (cfg.N_an, grids.K_be))),
        sigma_z2=sigma_z2,
    )


class TestHelpers:
    def test_mode_prod_matches_tensor_core(self):
        x = crand(RNG, (3, 4, 5))
        u = crand(RNG, (6, 4))
        lib = _mode_prod(x, u, 2)
        ref = mode_product(Tensor(x), u, 2).data
        assert np.allclose(lib, ref, rtol=1e-13, atol=0)

    def test_contract_except_matches_oracle(self):
        x = crand(RNG, (3, 4, 5))
        for d, y_shape in ((1, (6, 4, 5)), (2, (3, 6, 5)), (3, (3, 4, 6))):
            y = crand(RNG, y_shape)
            lib = _contract_except(x, y, d)
            ref = oracles.contract_except_loops(x, y, d)
            assert lib.shape == (x.shape[d - 1], 6)
            assert np.allclose(lib, ref, rtol=1e-12, atol=1e-14)

    def test_solve_quadratic_identity(self):
        mu = RNG.standard_normal(5)
        x, cond = _solve_quadratic(np.eye(5), mu, ridge_scale=1e-8)
        assert np.allclose(x, mu, rtol=1e-6)
        assert cond < 1.0 + 1e-6

    def test_solve_quadratic_nonfinite_system(self):
        Pi = np.full((3, 3), np.inf)
        x, cond = _solve_quadratic(Pi, np.ones(3), ridge_scale=1e-8)
        assert np.array_equal(x, np.zeros(3))
        assert math.isinf(cond)


class TestLinearModule:
    def setup_method(self):
        self.cfg = small_cfg()
        self.grids = small_grids(self.cfg)
        self.fs = build_factors(
            self.grids, Perturbations.zeros(4, 3, 3),
            np.full((self.cfg.N_an, 4), 1.0), self.cfg)

    def test_noiseless_clamp(self):
        """With zero noise the posterior snaps to the observation."""
        rng = np.random.default_rng(3)
        state = random_state(self.cfg, self.grids, rng)
        Y = crand(rng, (4, 4, 2))
        out = linear_module(state, Y, 0.0, self.fs.B, self.fs.C)
        assert np.allclose(out.h_hat, Y, rtol=1e-14, atol=0)

    def test_negative_noise_rejected(self):
        state = random_state(self.cfg, self.grids, np.random.default_rng(4))
        with pytest.raises(ValueError):
            linear_module(state, np.zeros((4, 4, 2)), -1.0,
                          self.fs.B, self.fs.C)

    def test_cold_start_matched_filter(self):
        """From a zero-mean start the W message is the back-projection."""
        rng = np.random.default_rng(5)
        state = random_state(self.cfg, self.grids, rng)
        state.w_hat = np.zeros_like(state.w_hat)
        state.h_res = np.zeros_like(state.h_res)
        Y = crand(rng, (4, 4, 2))
        out = linear_module(state, Y, 0.5, self.fs.B, self.fs.C)
        back = oracles.mode_product_loops(
            oracles.mode_product_loops(out.h_res, self.fs.B.conj().T, 2),
            self.fs.C.conj().T, 3)
        assert np.allclose(out.w_lik, out.e_w_lik * back, rtol=1e-12)

    def test_floor_hits_counted(self):
        rng = np.random.default_rng(6)
        state = random_state(self.cfg, self.grids, rng)
        counter = FloorCounter()
        linear_module(state, crand(rng, (4, 4, 2)), 0.0,
                      self.fs.B, self.fs.C, counter=counter)
        # sigma = 0 collapses every posterior variance onto the floor
        assert counter.hits >= state.h_hat.size


class TestBilinearModule:
    def test_known_support_reduces_to_linear_forms(self):
        """Zero mask variance turns the plug-in terms into plain products."""
        cfg = small_cfg()
        grids = small_grids(cfg)
        rng = np.random.default_rng(7)
        state = random_state(cfg, grids, rng)
        fs = build_factors(grids, Perturbations.zeros(4, 3, 3),
                           np.ones((4, 4)), cfg)
        state.s_hat = np.ones_like(state.s_hat)
        state.a_hat = fs.A_ss.copy()
        state.sigma_a_post = np.zeros_like(state.sigma_a_post)
        trace = {}
        bg = BgPrior(M=np.full((4, 3, 3), 0.2), V=np.ones((4, 3, 3)))
        gamma = np.zeros((4, 4))
        bilinear_module(state, fs.A_ss, bg, gamma, trace=trace)
        absA2 = np.abs(state.a_hat) ** 2
        plug = oracles.mode_product_loops(state.e_g_post, absA2, 1)
        assert np.allclose(trace["e_w_plug"], plug, rtol=1e-12)
        assert np.allclose(trace["e_w_pri"], plug, rtol=1e-12)

    def test_trace_covers_every_line(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        rng = np.random.default_rng(8)
        state = random_state(cfg, grids, rng)
        fs = build_factors(grids, Perturbations.zeros(4, 3, 3),
                           np.ones((4, 4)), cfg)
        hyper = random_hyper(cfg, grids, rng)
        trace = {}
        state = linear_module(state, crand(rng, (4, 4, 2)), hyper.sigma_z2,
                              fs.B, fs.C, trace=trace)
        bilinear_module(state, fs.A_ss, hyper.bg, hyper.sns.gamma,
                        trace=trace)
        assert set(trace) == set(TRACE_KEYS)


class TestEstepAgainstReference:
    def test_full_pass_matches_loop_reference(self):
        """Every line of one linear+bilinear pass, three random instances."""
        cfg = small_cfg()
        grids = small_grids(cfg)
        for seed in (11, 12, 13):
            rng = np.random.default_rng(seed)
            state = random_state(cfg, grids, rng)
            hyper = random_hyper(cfg, grids, rng, sigma_z2=0.3)
            fs = build_factors(grids, hyper.pert, state.s_hat, cfg)
            Y = crand(rng, (4, 4, 2))

            prev = dict(e_w_post=state.e_w_post, w_hat=state.w_hat,
                        h_res=state.h_res, w_res=state.w_res,
                        g_hat=state.g_hat, e_g_post=state.e_g_post,
                        a_hat=state.a_hat, sigma_a_post=state.sigma_a_post)
            ref = reference_estep(prev, Y, hyper.sigma_z2, fs.A_ss, fs.B,
                                  fs.C, hyper.bg.M, hyper.bg.V,
                                  hyper.sns.gamma)

            trace = {}
            out = linear_module(state, Y, hyper.sigma_z2, fs.B, fs.C,
                                trace=trace)
            bilinear_module(out, fs.A_ss, hyper.bg, hyper.sns.gamma,
                            trace=trace)
            for key in TRACE_KEYS:
                lib, want = trace[key], ref[key]
                scale = max(float(np.max(np.abs(want))), 1.0)
                assert np.allclose(lib, want, rtol=1e-10,
                                   atol=1e-10 * scale), key


class TestDamping:
    def test_zero_damp_keeps_state(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        rng = np.random.default_rng(17)
        state = random_state(cfg, grids, rng)
        hyper = random_hyper(cfg, grids, rng)
        Y = crand(rng, (4, 4, 2))
        out = e_step(state, Y, grids, cfg, hyper, t_e=1, damp=0.0)
        for name in ("h_hat", "w_hat", "g_hat", "s_hat", "e_g_post"):
            assert np.array_equal(getattr(out, name), getattr(state, name))

    def test_half_damp_is_arithmetic_mean(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        rng = np.random.default_rng(18)
        state = random_state(cfg, grids, rng)
        hyper = random_hyper(cfg, grids, rng)
        Y = crand(rng, (4, 4, 2))
        full = e_step(state, Y, grids, cfg, hyper, t_e=1, damp=1.0)
        half = e_step(state, Y, grids, cfg, hyper, t_e=1, damp=0.5)
        for name in ("h_hat", "w_hat", "g_hat", "s_hat", "e_w_post"):
            want = 0.5 * (getattr(full, name) + getattr(state, name))
            assert np.allclose(getattr(half, name), want, rtol=1e-13)

    def test_invalid_arguments(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        rng = np.random.default_rng(19)
        state = random_state(cfg, grids, rng)
        hyper = random_hyper(cfg, grids, rng)
        with pytest.raises(ValueError):
            e_step(state, np.zeros((4, 4, 2)), grids, cfg, hyper, t_e=0)
        with pytest.raises(ValueError):
            e_step(state, np.zeros((4, 4, 2)), grids, cfg, hyper, damp=1.5)


def consistent_state(cfg, grids, rng, pert=None):
    """State whose h, w, g chain is an exact Tucker factorization."""
    pert = pert or Perturbations.zeros(grids.K_be, grids.K_de, grids.K_do)
    s = np.ones((cfg.N_an, grids.K_be))
    fs = build_factors(grids, pert, s, cfg)
    state = random_state(cfg, grids, rng)
    state.s_hat = s
    state.g_hat = crand(rng, (grids.K_be, grids.K_de, grids.K_do))
    state.w_hat = _mode_prod(state.g_hat, fs.A, 1)
    state.h_hat = _mode_prod(_mode_prod(state.w_hat, fs.B, 2), fs.C, 3)
    return state


class TestMStepPerturbations:
    def test_zero_residual_keeps_zero_perturbations(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        rng = np.random.default_rng(23)
        state = consistent_state(cfg, grids, rng)
        hyper = random_hyper(cfg, grids, rng)
        pert, record = m_step_perturbations(state, grids, hyper, cfg,
                                            EmOptions(eta_max=0.01))
        assert np.allclose(pert.dtau, 0.0, atol=1e-12 * grids.tau_half_step)
        assert np.allclose(pert.dnu, 0.0, atol=1e-12 * grids.nu_half_step)
        assert np.allclose(pert.dphi, 0.0, atol=1e-12 * grids.phi_half_step)
        assert record["j_tau"] < 1e-18
        assert record["j_phi_eta"] < 1e-18

    def test_recovers_off_grid_delay(self):
        """Gauss-Newton pulls the delay offset to the true sub-grid value."""
        cfg = small_cfg()
        grids = small_grids(cfg)
        rng = np.random.default_rng(24)
        delta = 0.3 * grids.tau_half_step
        true_pert = Perturbations(
            dphi=np.zeros(grids.K_be),
            dtau=np.array([0.0, delta, 0.0]),
            dnu=np.zeros(grids.K_do), eta=np.zeros(grids.K_be))
        state = consistent_state(cfg, grids, rng, pert=true_pert)
        hyper = random_hyper(cfg, grids, rng)
        opts = EmOptions(eta_max=0.0)
        for _ in range(4):
            pert, record = m_step_perturbations(state, grids, hyper, cfg, opts)
            hyper = Hyperparams(pert=pert, bg=hyper.bg, sns=hyper.sns,
                                sigma_z2=hyper.sigma_z2)
        assert abs(hyper.pert.dtau[1] - delta) < 0.02 * delta

    def test_limits_respected_on_random_states(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        opts = EmOptions(eta_max=0.01)
        for seed in range(25, 30):
            rng = np.random.default_rng(seed)
            state = random_state(cfg, grids, rng)
            hyper = random_hyper(cfg, grids, rng)
            pert, _ = m_step_perturbations(state, grids, hyper, cfg, opts)
            assert np.all(np.abs(pert.dtau) <= grids.tau_half_step * (1 + 1e-12))
            assert np.all(np.abs(pert.dnu) <= grids.nu_half_step * (1 + 1e-12))
            assert np.all(np.abs(pert.dphi) <= grids.phi_half_step * (1 + 1e-12))
            assert np.all(pert.eta >= 0.0)
            assert np.all(pert.eta <= opts.eta_max)

    def test_never_increases_objective(self):
        """Trust halving: J at the result stays within tolerance of J at
        the expansion point."""
        cfg = small_cfg()
        grids = small_grids(cfg)
        opts = EmOptions(eta_max=0.01)
        for seed in range(31, 36):
            rng = np.random.default_rng(seed)
            state = random_state(cfg, grids, rng)
            hyper = random_hyper(cfg, grids, rng)
            pert, record = m_step_perturbations(state, grids, hyper, cfg, opts)
            fs0 = build_factors(grids, hyper.pert, state.s_hat, cfg)
            j0 = float(np.linalg.norm((state.h_hat - _mode_prod(
                _mode_prod(state.w_hat, fs0.B, 2), fs0.C, 3)).ravel()) ** 2)
            assert record["j_tau"] <= j0 * (1 + 2e-8)

    def test_gradient_matches_finite_differences(self):
        """The analytic mu equals the finite-difference gradient of J."""
        cfg = small_cfg()
        grids = small_grids(cfg)
        rng = np.random.default_rng(37)
        state = random_state(cfg, grids, rng)
        zero = Perturbations.zeros(grids.K_be, grids.K_de, grids.K_do)
        fs = build_factors(grids, zero, state.s_hat, cfg)
        _, mu = delay_quadratic(state.h_hat, state.w_hat, fs)

        def j_of(dtau):
            f = build_factors(grids, Perturbations(zero.dphi, dtau, zero.dnu,
                                                   zero.eta), state.s_hat, cfg)
            fit = _mode_prod(_mode_prod(state.w_hat, f.B, 2), f.C, 3)
            return float(np.linalg.norm((state.h_hat - fit).ravel()) ** 2)

        grad = oracles.fd_gradient(j_of, np.zeros(grids.K_de), h=1e-9)
        assert np.allclose(grad, -2 * np.real(mu),
                           rtol=1e-4, atol=1e-6 * np.abs(mu).max())


class TestMStepPriors:
    def test_delegates_to_prior_updates(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        rng = np.random.default_rng(43)
        state = random_state(cfg, grids, rng)
        hyper = random_hyper(cfg, grids, rng)
        from chanpred.priors import update_bg, update_gamma
        bg, sns = m_step_priors(state, hyper, EmOptions())
        M_want, V_want = update_bg(hyper.bg.M, hyper.bg.V, state.g_lik,
                                   state.e_g_lik, state.g_hat,
                                   state.e_g_post)
        inside = (M_want > EPS_M) & (M_want < 1 - EPS_M)
        assert np.allclose(bg.M[inside], M_want[inside], rtol=1e-14)
        assert np.allclose(bg.V, V_want, rtol=1e-14)
        assert np.allclose(sns.gamma, update_gamma(state.s_hat), rtol=1e-14)

    def test_support_probabilities_clipped(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        rng = np.random.default_rng(44)
        state = random_state(cfg, grids, rng)
        state.g_lik = 100.0 * np.ones_like(state.g_lik)  # saturating evidence
        state.e_g_lik = 1e-4 * np.ones_like(state.e_g_lik)
        hyper = random_hyper(cfg, grids, rng)
        bg, _ = m_step_priors(state, hyper, EmOptions())
        assert bg.M.max() <= 1.0 - EPS_M
        assert bg.M.min() >= EPS_M

    def test_gamma_rule_switch(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        rng = np.random.default_rng(45)
        state = random_state(cfg, grids, rng)
        hyper = random_hyper(cfg, grids, rng)
        _, ratio = m_step_priors(state, hyper, EmOptions(gamma_rule="ratio"))
        _, logit = m_step_priors(state, hyper, EmOptions(gamma_rule="logit"))
        assert np.allclose(ratio.gamma, state.s_hat / (1 + state.s_hat))
        assert np.allclose(logit.gamma,
                           np.log(state.s_hat / (1 - state.s_hat)))


def exact_scene(cfg, grids, beta=1.2 - 0.7j, k_be=5, k_de=2, k_do=3):
    path = PathParams(phi=grids.phi_bar[k_be], r=np.inf,
                      tau=grids.tau_bar[k_de], nu=grids.nu_bar[k_do],
                      beta=beta, s=np.ones(cfg.N_an))
    return Scene(paths=(path,), rng_seed=None)


class TestEmLoop:
    def test_zero_outer_iterations_returns_initialization(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        Y = crand(np.random.default_rng(51), (4, 4, 2))
        state, hyper, diag = em_loop(Y, cfg, grids, 0.1, EmOptions(T_M=0))
        want = initial_state(Y, grids, cfg,
                             initial_hyperparams(Y, grids, 0.1))
        assert np.array_equal(state.w_hat, want.w_hat)
        assert np.array_equal(state.g_hat, want.g_hat)
        assert diag.iterations == [] and not diag.converged

    def test_deterministic(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        scene = exact_scene(cfg, grids, k_be=2, k_de=1, k_do=1)
        Y = observe(assemble_sft(scene, cfg), 0.01, seed=5)
        a = em_loop(Y, cfg, grids, 0.01, EmOptions(T_M=5, eta_max=0.01))
        b = em_loop(Y, cfg, grids, 0.01, EmOptions(T_M=5, eta_max=0.01))
        assert np.array_equal(a[0].g_hat, b[0].g_hat)
        assert np.array_equal(a[1].bg.M, b[1].bg.M)
        assert [r.fit for r in a[2].iterations] == [r.fit for r in b[2].iterations]

    def test_concentrates_on_true_cell(self):
        """Single on-grid path: the core peaks at the right cell with the
        right gain."""
        cfg = small_cfg(8, 8, 4)
        grids = lattice_grids(cfg, 8, 4, 4)
        scene = exact_scene(cfg, grids, k_be=5, k_de=2, k_do=3)
        Y = observe(assemble_sft(scene, cfg), 0.0, seed=1)
        state, hyper, diag = em_loop(Y, cfg, grids, 1e-12,
                                     EmOptions(T_M=20, eta_max=0.05))
        peak = np.unravel_index(np.argmax(np.abs(state.g_hat)),
                                state.g_hat.shape)
        assert peak == (5, 2, 3)
        assert abs(np.abs(state.g_hat[peak]) - abs(1.2 - 0.7j)) < 0.05

    def test_diagnostics_rows_and_prior_health(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        scene = exact_scene(cfg, grids, k_be=2, k_de=1, k_do=1)
        Y = observe(assemble_sft(scene, cfg), 0.05, seed=9)
        state, hyper, diag = em_loop(Y, cfg, grids, 0.05,
                                     EmOptions(T_M=10, eta_max=0.01, tol=0.0),
                                     truth=assemble_sft(scene, cfg))
        assert [r.iteration for r in diag.iterations] == list(range(1, 11))
        assert all(r.nmse_est is not None for r in diag.iterations)
        assert np.all(hyper.bg.M >= 0.0) and np.all(hyper.bg.M <= 1.0)
        assert np.all(hyper.bg.V > 0.0)
        assert diag.floor_hits_total >= 0

    def test_convergence_flag_stops_early(self):
        cfg = small_cfg(8, 8, 4)
        grids = lattice_grids(cfg, 8, 4, 4)
        scene = exact_scene(cfg, grids, k_be=5, k_de=2, k_do=3)
        Y = observe(assemble_sft(scene, cfg), 0.0, seed=1)
        state, hyper, diag = em_loop(Y, cfg, grids, 1e-12,
                                     EmOptions(T_M=60, eta_max=0.05, tol=1e-5))
        assert diag.converged
        assert len(diag.iterations) < 60


class TestPredict:
    def setup_method(self):
        self.cfg = small_cfg(4, 4, 2)
        self.grids = lattice_grids(self.cfg, 4, 3, 3)

    def manual_state_hyper(self, nu_col):
        rng = np.random.default_rng(61)
        state = random_state(self.cfg, self.grids, rng)
        state.s_hat = np.ones_like(state.s_hat)
        state.g_hat = np.zeros_like(state.g_hat)
        state.g_hat[1, 0, nu_col] = 0.8 - 0.3j
        hyper = random_hyper(self.cfg, self.grids, rng)
        return state, hyper

    def test_zero_horizon_empty(self):
        state, hyper = self.manual_state_hyper(nu_col=1)
        out = predict(state, hyper, self.grids, self.cfg, 0)
        assert out.shape == (4, 4, 0)

    def test_negative_horizon_rejected(self):
        state, hyper = self.manual_state_hyper(nu_col=1)
        with pytest.raises(ValueError):
            predict(state, hyper, self.grids, self.cfg, -1)

    def test_static_scene_repeats(self):
        """All energy at zero Doppler extrapolates to a constant channel."""
        zero_col = self.grids.K_do // 2
        assert self.grids.nu_bar[zero_col] == 0.0
        state, hyper = self.manual_state_hyper(nu_col=zero_col)
        out = predict(state, hyper, self.grids, self.cfg, 6).data
        for j in range(1, 6):
            assert np.allclose(out[:, :, j], out[:, :, 0], rtol=1e-12)

    def test_pilot_lattice_consistency(self):
        """A horizon instant on the pilot lattice matches the frame's own
        steering law at the extended symbol index."""
        state, hyper = self.manual_state_hyper(nu_col=2)
        n_is = self.cfg.N_IS
        out = predict(state, hyper, self.grids, self.cfg, n_is).data
        fs = build_factors(self.grids, hyper.pert, state.s_hat, self.cfg)
        nu = self.grids.nu_bar + hyper.pert.dnu
        ext_row = np.exp(2j * np.pi * self.cfg.N_sym * self.cfg.dt_bar * nu)
        want = _mode_prod(_mode_prod(_mode_prod(
            state.g_hat, fs.A, 1), fs.B, 2), ext_row[None, :], 3)[:, :, 0]
        assert np.allclose(out[:, :, n_is - 1], want, rtol=1e-12)

    def test_matches_loop_oracle(self):
        state, hyper = self.manual_state_hyper(nu_col=2)
        out = predict(state, hyper, self.grids, self.cfg, 5).data
        fs = build_factors(self.grids, hyper.pert, state.s_hat, self.cfg)
        from chanpred.factor_matrices import doppler_pred_matrix
        C_pred = doppler_pred_matrix(self.grids, hyper.pert.dnu, 5, self.cfg)
        ref = oracles.mode_product_loops(
            oracles.mode_product_loops(
                oracles.mode_product_loops(state.g_hat, fs.A, 1),
                fs.B, 2), C_pred, 3)
        assert np.allclose(out, ref, rtol=1e-12)


class TestInitialization:
    def test_hyper_scales_to_observed_energy(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        Y = crand(np.random.default_rng(71), (4, 4, 2))
        hyper = initial_hyperparams(Y, grids, 0.2, m0=0.1)
        k_avg = (4 + 3 + 3) / 3.0
        v0 = np.linalg.norm(Y.ravel()) ** 2 / (Y.size * 0.1 * k_avg)
        assert np.allclose(hyper.bg.V, v0, rtol=1e-14)
        assert np.allclose(hyper.bg.M, 0.1)
        assert np.allclose(hyper.sns.gamma, 0.5)

    def test_state_back_projection(self):
        cfg = small_cfg()
        grids = small_grids(cfg)
        Y = crand(np.random.default_rng(72), (4, 4, 2))
        hyper = initial_hyperparams(Y, grids, 0.2)
        state = initial_state(Y, grids, cfg, hyper)
        fs = build_factors(grids, hyper.pert, np.ones((4, 4)), cfg)
        want = oracles.mode_product_loops(
            oracles.mode_product_loops(Y, fs.B.conj().T, 2),
            fs.C.conj().T, 3) / (4 * 2)
        assert np.allclose(state.w_hat, want, rtol=1e-12)
        assert np.allclose(state.s_hat, 0.5)
        assert np.allclose(state.a_hat, 0.5 * fs.A_ss, rtol=1e-14)
        assert np.all(state.g_hat == 0)
