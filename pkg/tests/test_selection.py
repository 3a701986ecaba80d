import numpy as np
import pytest
from scipy.special import expit

import twophase as tp
from twophase.config import Lambda1Spec, SimulationConfig
from twophase.errors import InputError, SeparationError
from twophase.featurespec import FeatureSpec
from twophase.regress import GlmFit
from twophase.selection import fit_composed, fit_direct, known_selection

from oracles import logistic_loglik_plain, se_from_loglik

SPEC_W0 = FeatureSpec(("1", "w0_1"))


def make_composed(ext_coefs, pool_coefs, phi=50.0, clip=(1e-3, 1 - 1e-3)):
    ext = GlmFit("beta", np.asarray(ext_coefs, float), SPEC_W0, dispersion=phi)
    pool = GlmFit("logistic", np.asarray(pool_coefs, float), SPEC_W0)
    return tp.SelectionModel("composed", clip, ext_fit=ext, pool_fit=pool)


def multinomial_world(n, rng, p_ext=0.05, cap=0.95):
    """Population assigned to exactly one of cohort / external / neither.

    P(cohort|w0) = min(expit(w0), cap), P(external|w0) = p_ext; the two are
    disjoint by construction so the odds composition is exact.
    """
    w0 = rng.normal(3.3, 0.5, n)
    lam1 = np.minimum(expit(w0), cap)
    u = rng.random(n)
    in_ehr = u < lam1
    in_ext = (~in_ehr) & (u < lam1 + p_ext)
    return w0, lam1, in_ehr, in_ext


class TestFitDirect:
    def test_recovers_logistic_truth(self):
        cfg = SimulationConfig(
            n=10_000, n_e=10, n_p=5, gamma=(0.0, 0.0, 0.0, 0.0, 0.0),
            selection_mode="bernoulli", seed=0,
        )
        frame = tp.generate_population(cfg, seed=2)
        model = fit_direct(frame)
        truth = expit(frame.w0[:, 0])
        mae = float(np.mean(np.abs(model.evaluate(frame.w0) - truth)))
        assert mae < 0.02

    def test_constant_mechanism(self):
        cfg = SimulationConfig(
            n=10_000, n_e=10, n_p=5, gamma=(0.0, 0.0, 0.0, 0.0, 0.0),
            selection_mode="bernoulli",
            lambda1=Lambda1Spec(kind="constant", value=0.5),
            seed=0,
        )
        frame = tp.generate_population(cfg, seed=3)
        model = fit_direct(frame)
        xmat = SPEC_W0.matrix({"w0_1": frame.w0[:, 0]})
        truth = np.array([0.0, 0.0])
        se = se_from_loglik(
            lambda b: logistic_loglik_plain(xmat, frame.r1.astype(float), b), truth
        )
        assert abs(model.direct_fit.coefficients[1]) <= 3 * se[1]
        mae = float(np.mean(np.abs(model.evaluate(frame.w0) - 0.5)))
        assert mae < 0.02

    def test_one_class_raises(self):
        cfg = SimulationConfig(
            n=200, n_e=200, n_p=10, gamma=(0.0, 0.0, 0.0, 0.0, 0.0),
            lambda1=Lambda1Spec(kind="constant", value=1.0), seed=0,
        )
        frame = tp.generate_population(cfg, seed=4)
        with pytest.raises(SeparationError):
            fit_direct(frame)


class TestFitComposed:
    def test_unit_odds_collapse(self):
        # pooled model forced to probability 0.5 everywhere: odds = 1
        model = make_composed(ext_coefs=[-2.0, 0.4], pool_coefs=[0.0, 0.0])
        w0 = np.linspace(-2, 2, 31).reshape(-1, 1)
        mu_ext = model.ext_fit.predict({"w0_1": w0[:, 0]})
        assert np.allclose(model.evaluate_raw(w0), mu_ext, atol=1e-10)

    def test_synthetic_world_recovery(self):
        rng = np.random.default_rng(8)
        w0, lam1, in_ehr, in_ext = multinomial_world(40_000, rng)
        external = tp.ExternalProbabilitySample(
            w0=w0[in_ext].reshape(-1, 1),
            samp_prob=np.full(int(in_ext.sum()), 0.05),
        )
        model = fit_composed(w0[in_ehr].reshape(-1, 1), external)
        grid = np.linspace(2.3, 4.3, 41).reshape(-1, 1)
        truth = np.minimum(expit(grid[:, 0]), 0.95)
        mae = float(np.mean(np.abs(model.evaluate(grid) - truth)))
        assert mae < 0.05

    def test_empty_external_rejected(self):
        with pytest.raises(InputError):
            tp.ExternalProbabilitySample(w0=np.zeros((0, 1)), samp_prob=np.zeros(0))

    def test_dimension_mismatch(self):
        ext = tp.ExternalProbabilitySample(
            w0=np.zeros((5, 2)), samp_prob=np.full(5, 0.3)
        )
        with pytest.raises(InputError):
            fit_composed(np.zeros((5, 1)), ext)

    def test_composition_identity_exact(self):
        model = make_composed(ext_coefs=[-1.5, 0.3], pool_coefs=[0.2, 0.7])
        w0 = np.array([[-1.0], [0.0], [0.5], [2.0]])
        cols = {"w0_1": w0[:, 0]}
        mu = model.ext_fit.predict(cols)
        p = model.pool_fit.predict(cols)
        assert np.allclose(model.evaluate_raw(w0), mu * p / (1 - p), rtol=1e-14)

    def test_monotone_passthrough(self):
        model = make_composed(ext_coefs=[-2.0, 0.5], pool_coefs=[-0.3, 0.8])
        w0 = np.linspace(-3, 3, 101).reshape(-1, 1)
        vals = model.evaluate_raw(w0)
        assert np.all(np.diff(vals) > 0)


class TestEvaluate:
    def test_known_logistic_values(self):
        model = known_selection(lambda w0: expit(w0[:, 0]))
        assert model.evaluate(np.array([[0.0]]))[0] == pytest.approx(0.5)
        # frozen: 1/(1+exp(-3.3))
        assert model.evaluate(np.array([[3.3]]))[0] == pytest.approx(
            0.9644288107273639, abs=1e-15
        )

    def test_default_clip_contract(self):
        model = known_selection(lambda w0: expit(w0[:, 0]))
        w0 = np.array([[-50.0], [0.0], [50.0]])
        vals = model.evaluate(w0)
        assert np.all(vals >= 1e-3)
        assert np.all(vals <= 1 - 1e-3)

    def test_clip_never_widens(self):
        model = known_selection(lambda w0: expit(w0[:, 0]))
        w0 = np.array([[0.1], [1.0], [-1.0]])
        assert np.array_equal(model.evaluate(w0), model.evaluate_raw(w0))

    def test_clip_diagnostics(self):
        model = make_composed(ext_coefs=[3.0, 0.0], pool_coefs=[3.0, 0.0])
        diag = model.clip_diagnostics(np.zeros((4, 1)))
        assert diag["n_at_least_one"] == 4

    def test_serialization_round_trip(self):
        model = make_composed(ext_coefs=[-1.0, 0.2], pool_coefs=[0.5, -0.3], phi=7.0)
        again = tp.SelectionModel.from_dict(model.to_dict())
        w0 = np.linspace(-2, 2, 9).reshape(-1, 1)
        assert np.array_equal(model.evaluate(w0), again.evaluate(w0))
