import math

import numpy as np
import pytest

from pacpfl import pacbayes as pb
from pacpfl.pacbayes import BoundContext, FiniteHypothesisSpace


def _ctx(**kw):
    base = dict(m=np.full(4, 10), m_tilde=np.zeros(4, dtype=int), beta=10.0, lam=1.0,
                upsilon=1e-4, delta=0.05, loss_bounds=(0.0, 1.0))
    base.update(kw)
    return BoundContext(**base)


# dp_penalty_I

def test_penalty_without_privacy_is_ln2():
    assert pb.dp_penalty_I(0.0, 7, 0.1) == math.log(2)


def test_penalty_scalar_oracle():
    assert pb.dp_penalty_I(1.0, 2, 4 / math.e) == pytest.approx(2 + math.log(2), rel=1e-15)


def test_penalty_monotone_in_epsilon():
    vals = [pb.dp_penalty_I(e, 10, 0.05) for e in np.linspace(0, 3, 31)]
    assert np.all(np.diff(vals) >= 0)


@pytest.mark.parametrize("args", [(-0.1, 5, 0.1), (0.1, 0, 0.1), (0.1, 5, 0.0), (0.1, 5, -1.0)])
def test_penalty_domain_errors(args):
    with pytest.raises(ValueError):
        pb.dp_penalty_I(*args)


# epsilon_for_client, tau, delta_i

def test_epsilon_examples():
    assert pb.epsilon_for_client(10.0, 0.0, (0, 1), 10) == 0.0
    assert pb.epsilon_for_client(10.0, 0.5, (0, 1), 10) == pytest.approx(1.0, rel=1e-15)
    for m in (3, 10, 50):
        assert pb.epsilon_for_client(m, 0.4, (0, 2), m) == pytest.approx(2 * 0.4 * 2, rel=1e-15)


def test_tau_examples():
    assert pb.tau(24, 0, 1e-4, 10.0, 1.0) == pytest.approx(1 / 1.024, rel=1e-15)
    scale = 10.0 * 24 * (3 + 1e-4)
    assert pb.tau(24, 3, 1e-4, 10.0, 1e9 * scale) > 0.999
    taus = [pb.tau(n, 2, 1e-4, 5.0, 3.0) for n in range(1, 30)]
    assert np.all(np.diff(taus) < 0)


def test_delta_examples():
    assert pb.delta_i(3.0, 10, 0, (0, 1), 5) == 0.0
    assert pb.delta_i(1e3, 10, 5, (0, 2), 4) == pytest.approx(0.5, rel=1e-15)
    assert pb.delta_i(0.1, 9, 1, (0, 1), 1) == pytest.approx(math.exp(0.02) - math.exp(-0.02), rel=1e-14)
    with pytest.raises(ValueError):
        pb.delta_i(1.0, 3, 4, (0, 1), 1)


def test_unknown_m_tilde_uses_worst_case_delta():
    ctx = _ctx(unknown_m_tilde=True, lam=10.0)
    np.testing.assert_array_equal(pb.deltas(ctx), np.full(4, 0.25))
    assert ctx.n2 == 4


# client_bound

def test_client_bound_scalar_oracle():
    # delta = 1 and eps = 0 leave only ln 2 / beta plus the sample term
    got = pb.client_bound(0.3, 0.0, 2.0, 1e12, 0.0, 5, 1.0, (0, 1))
    assert got == pytest.approx(0.3 + math.log(2) / 2.0, rel=1e-12)


def test_client_bound_at_least_risk_and_monotone_in_kl():
    rng = np.random.default_rng(0)
    for _ in range(20):
        risk = rng.uniform(0, 1)
        args = dict(beta=rng.uniform(0.1, 20), m_total=12, epsilon_i=rng.uniform(0, 1), m_i=10,
                    delta=rng.uniform(0.01, 1), loss_bounds=(0, 1))
        b0 = pb.client_bound(risk, 0.0, **args)
        assert b0 >= risk
        assert pb.client_bound(risk, 0.5, **args) > b0


# server and new-client bounds

def test_server_bound_term_by_term():
    rng = np.random.default_rng(1)
    ctx = _ctx(m=np.array([8, 10, 12, 9]), m_tilde=np.array([2, 0, 3, 1]), lam=50.0,
               loss_bounds=(-1.0, 2.0), delta=0.1, beta=9.75)
    v = rng.uniform(1, 3, size=4)
    kl = 0.7
    n, beta, n2 = 4, 9.75, 3
    d = [min(3.0, 2.0 * (math.exp(2 * beta * mt * 3 / (m + mt)) - math.exp(-2 * beta * mt * 3 / (m + mt)))) / n
         for m, mt in zip([8, 10, 12, 9], [2, 0, 3, 1])]
    expected = {
        "empirical": v.sum() / (n * beta),
        "kl": (1 / (n * beta) + (n2 + 1e-4) / 50.0) * kl,
        "sample_complexity": beta * 9 / (8 * n) * (1 / 8 + 1 / 10 + 1 / 12 + 1 / 9),
        "new_samples": 50.0 * sum(x * x for x in d) / (8 * (n2 + 1e-4)),
        "confidence": math.log(10) / 2,
    }
    terms = pb.server_bound_terms(v, kl, ctx)
    assert list(terms) == list(expected)
    for key, value in expected.items():
        assert terms[key] == pytest.approx(value, rel=1e-13), key
    assert pb.server_bound(v, kl, ctx) == pytest.approx(sum(expected.values()), rel=1e-13)


def test_server_bound_zero_delta_and_unit_confidence():
    terms = pb.server_bound_terms(np.ones(4), 0.2, _ctx(delta=1.0))
    assert terms["new_samples"] == 0.0
    assert terms["confidence"] == 0.0


def test_server_bound_monotone_in_kl_and_delta():
    v = np.ones(4)
    ctx = _ctx(lam=10.0)
    assert pb.server_bound(v, 0.3, ctx) < pb.server_bound(v, 0.4, ctx)
    lo = pb.server_bound(v, 0.3, _ctx(lam=10.0, m_tilde=np.array([0, 1, 0, 0])))
    hi = pb.server_bound(v, 0.3, _ctx(lam=10.0, m_tilde=np.array([0, 2, 0, 0])))
    assert lo <= hi


def test_server_bound_shape_check():
    with pytest.raises(ValueError):
        pb.server_bound(np.ones(3), 0.0, _ctx())


def test_new_client_bound_properties():
    ctx = _ctx(delta=1.0)
    assert pb.new_client_bound_terms(-2.0, ctx)["confidence"] == 0.0
    assert pb.new_client_bound(-2.0, ctx) > pb.new_client_bound(-1.0, ctx)


def test_context_validation():
    _ctx().validate()
    with pytest.raises(ValueError, match="lambda"):
        _ctx(m_tilde=np.ones(4, dtype=int)).validate()
    with pytest.raises(ValueError, match="beta"):
        _ctx(beta=0.1).validate()
    with pytest.raises(ValueError):
        _ctx(m_tilde=np.full(4, 11), lam=100.0).validate()
    with pytest.raises(ValueError):
        _ctx(loss_bounds=(1.0, 1.0)).validate()


# finite hypothesis spaces

def test_gibbs_posterior_examples():
    space = FiniteHypothesisSpace(np.array([[0.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_allclose(pb.gibbs_posterior(space, math.log(3)), [0.75, 0.25], rtol=1e-15)
    flat = FiniteHypothesisSpace(np.full((3, 4), 0.4), prior=[0.2, 0.3, 0.5])
    np.testing.assert_allclose(pb.gibbs_posterior(flat, 7.0), flat.prior, rtol=1e-15)
    np.testing.assert_allclose(pb.gibbs_posterior(space, 0.0), space.prior, rtol=1e-15)


def test_gibbs_posterior_subset():
    space = FiniteHypothesisSpace(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(pb.gibbs_posterior(space, math.log(3), [0]), [0.75, 0.25], rtol=1e-15)
    with pytest.raises(ValueError):
        pb.gibbs_posterior(space, 1.0, [])


def test_log_partition_matches_direct_sum():
    rng = np.random.default_rng(2)
    space = FiniteHypothesisSpace(rng.uniform(0, 1, size=(5, 7)), prior=rng.dirichlet(np.ones(5)))
    direct = math.log(np.sum(space.prior * np.exp(-3.0 * space.losses.mean(axis=1))))
    assert pb.log_partition(space, 3.0) == pytest.approx(direct, rel=1e-13)


def test_bad_prior_rejected():
    with pytest.raises(ValueError):
        FiniteHypothesisSpace(np.zeros((2, 3)), prior=[0.6, 0.6])


def test_kl_divergence():
    assert pb.kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert pb.kl_divergence([1.0, 0.0], [0.25, 0.75]) == pytest.approx(math.log(4), rel=1e-15)
    assert pb.kl_divergence([0.5, 0.5], [1.0, 0.0]) == math.inf


def test_hyper_posterior_examples():
    w, log_Z = pb.optimal_hyper_posterior_weights(np.array([[0.0], [-1.0]]), [0.5, 0.5], 1.0)
    np.testing.assert_allclose(w, np.array([1, math.exp(-1)]) / (1 + math.exp(-1)), rtol=1e-15)
    assert log_Z == pytest.approx(math.log(0.5 * (1 + math.exp(-1))), rel=1e-14)
    hp = np.array([0.2, 0.3, 0.5])
    Z = np.random.default_rng(3).normal(size=(3, 4))
    np.testing.assert_allclose(pb.optimal_hyper_posterior_weights(Z, hp, 0.0)[0], hp, rtol=1e-15)
    same = np.tile(Z[0], (3, 1))
    np.testing.assert_allclose(pb.optimal_hyper_posterior_weights(same, hp, 0.8)[0], hp, rtol=1e-14)


# non-vacuousness

def test_nonvacuous_examples():
    ctx = _ctx()
    assert pb.check_nonvacuous(ctx, epsilons=np.full(4, 0.1)).passed
    assert not pb.check_nonvacuous(_ctx(loss_bounds=(0.0, 9.0)), epsilons=np.full(4, 0.1)).passed


def test_nonvacuous_lambda_inversion():
    m = 10
    ctx = _ctx(m=np.full(4, m), m_tilde=np.array([1, 0, 2, 0]), beta=float(m), lam=100.0)
    report = pb.check_nonvacuous(ctx)
    closed_form = m * 4 * (2 + 1e-4) * math.sqrt(2) / (2 - math.sqrt(2))
    assert report.lambda_max == pytest.approx(closed_form, rel=1e-13)
    for lam, ok in ((0.99 * closed_form, True), (1.01 * closed_form, False)):
        eps = pb.epsilon_for_client(m, pb.tau(4, 2, 1e-4, m, lam), (0, 1), m)
        assert (eps < math.sqrt(2)) is ok
    assert set(report.as_dict()) >= {"width_ok", "epsilons", "passed", "lambda_max"}
