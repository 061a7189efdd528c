import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imdm import kernels
from imdm.core import Categorical, DomainError, InfeasibleStateError, Schedule
from imdm.kernels import PriorSpec

alphas = st.tuples(st.floats(0.001, 0.999), st.floats(0.001, 0.999)).map(lambda p: (max(p), min(p)))
probs = st.integers(2, 5).flatmap(
    lambda n: st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n).map(lambda v: np.array(v) / sum(v))
)


def brute_posterior(z_t, x, a_s, a_t, prior):
    """Bayes rule over explicit transition matrices."""
    pi = prior.vector()
    k = pi.size
    q_s = (1 - a_s) * pi
    q_s[x] += a_s
    a_ts = a_t / a_s
    trans = a_ts * np.eye(k) + (1 - a_ts) * pi[None, :]
    joint = q_s * trans[:, z_t]
    return joint / joint.sum()


# forward marginal


def test_forward_mask_near_endpoints():
    m = PriorSpec.mask(2)
    assert kernels.forward_marginal(1, 0.9999, m).probs[1] == pytest.approx(0.9999)
    assert kernels.forward_marginal(1, 0.0001, m).probs[2] == pytest.approx(0.9999)


def test_forward_uniform_example():
    got = kernels.forward_marginal(0, 0.3, PriorSpec.uniform(2, 2)).probs
    assert np.allclose(got, [0.65, 0.35], atol=1e-15)


def test_forward_latent_mask_limit_aggregates():
    got = kernels.forward_marginal(1, 0.25, PriorSpec.latent_mask(3)).probs
    assert np.allclose(got, [0, 0.25, 0, 0.75])


# general posterior


@settings(max_examples=200)
@given(alphas, st.integers(2, 4), st.integers(0, 3), st.data())
def test_general_matches_bayes_uniform(a, n, k_extra, data):
    a_s, a_t = a
    prior = PriorSpec.uniform(n, n + k_extra)
    x = data.draw(st.integers(0, n - 1))
    z_t = data.draw(st.integers(0, prior.size - 1))
    got = kernels.posterior_general(z_t, x, a_s, a_t, prior).probs
    assert np.abs(got - brute_posterior(z_t, x, a_s, a_t, prior)).max() <= 1e-12


def test_general_mask_example():
    got = kernels.posterior_general(2, 0, 0.6, 0.2, PriorSpec.mask(2)).probs
    assert np.allclose(got, [0.5, 0, 0.5], atol=1e-15)


def test_general_identity_step():
    got = kernels.posterior_general(3, 1, 0.4, 0.4, PriorSpec.uniform(3, 5)).probs
    assert np.allclose(got, np.eye(5)[3], atol=1e-15)


def test_general_infeasible_state():
    with pytest.raises(InfeasibleStateError):
        kernels.posterior_general(1, 0, 0.6, 0.2, PriorSpec.mask(2))


def test_general_needs_finite_prior():
    with pytest.raises(DomainError):
        kernels.posterior_general(2, 0, 0.6, 0.2, PriorSpec.latent_mask(2))


@pytest.mark.parametrize("a_s, a_t", [(0.2, 0.6), (0.0, 0.0), (1.0, 0.5)])
def test_posterior_alpha_domain(a_s, a_t):
    with pytest.raises(DomainError):
        kernels.posterior_mdm(2, [0.5, 0.5], a_s, a_t)


# MDM


def test_mdm_carry_over():
    assert np.array_equal(kernels.posterior_mdm(1, [0.5, 0.5], 0.6, 0.2).probs, [0, 1, 0])


def test_mdm_example():
    got = kernels.posterior_mdm(2, [0.5, 0.5], 0.6, 0.2).probs
    assert np.allclose(got, [0.25, 0.25, 0.5], atol=1e-15)


def test_mdm_rejects_unnormalized():
    with pytest.raises(DomainError):
        kernels.posterior_mdm(2, [0.5, 0.6], 0.6, 0.2)


@settings(max_examples=300)
@given(alphas, probs, st.data())
def test_mdm_is_mixture_of_general(a, p, data):
    a_s, a_t = a
    n = p.size
    z_t = data.draw(st.integers(0, n))
    mdm = kernels.posterior_mdm(z_t, p, a_s, a_t).probs
    prior = PriorSpec.mask(n)
    if z_t == n:
        ref = sum(p[x] * kernels.posterior_general(n, x, a_s, a_t, prior).probs for x in range(n))
    else:
        ref = kernels.posterior_general(z_t, z_t, a_s, a_t, prior).probs
    assert np.abs(mdm - ref).max() <= 1e-12
    assert abs(mdm.sum() - 1) <= 1e-12


# IMDM


def test_imdm_example():
    post = kernels.posterior_imdm(2, [0.5, 0.5], 0.6, 0.2)
    assert post.unmask_total == pytest.approx(0.5, abs=1e-15)
    assert post.keep_mask_prob == pytest.approx(1 / 6, abs=1e-15)
    assert post.fresh_mask_prob == pytest.approx(1 / 3, abs=1e-15)


def test_imdm_identity_step_keeps():
    post = kernels.posterior_imdm(2, [0.5, 0.5], 0.4, 0.4)
    assert post.keep_mask_prob == pytest.approx(1.0, abs=1e-15)
    assert post.unmask_total == 0.0


def test_imdm_carry_over():
    post = kernels.posterior_imdm(0, [0.3, 0.7], 0.6, 0.2)
    assert np.array_equal(post.unmask_probs, [1.0, 0.0])
    assert post.mask_total == 0.0


@settings(max_examples=300)
@given(alphas, probs, st.integers(2, 40))
def test_imdm_matches_finite_latent_mask(a, p, m):
    """Aggregate M explicit mask states: same state = keep + fresh / M."""
    a_s, a_t = a
    n = p.size
    post = kernels.posterior_imdm(n, p, a_s, a_t)
    prior = PriorSpec.latent_mask(n, m)
    rows = sum(p[x] * kernels.posterior_general(n, x, a_s, a_t, prior).probs for x in range(n))
    assert np.abs(rows[:n] - post.unmask_probs).max() <= 1e-12
    assert abs(rows[n] - (post.keep_mask_prob + post.fresh_mask_prob / m)) <= 1e-12
    assert abs(rows[n + 1 :].sum() - post.fresh_mask_prob * (m - 1) / m) <= 1e-12


@settings(max_examples=300)
@given(alphas, probs)
def test_imdm_two_case_weights(a, p):
    a_s, a_t = a
    post = kernels.posterior_imdm(p.size, p, a_s, a_t)
    a_ts = a_t / a_s
    assert abs(post.keep_mask_prob - a_ts * (1 - a_s) / (1 - a_t)) <= 1e-12
    assert abs(post.fresh_mask_prob - (1 - a_ts) * (1 - a_s) / (1 - a_t)) <= 1e-12
    assert abs(post.unmask_total - (a_s - a_t) / (1 - a_t)) <= 1e-12
    assert abs(post.unmask_total + post.mask_total - 1) <= 1e-12


def test_imdm_unmask_mass_tends_to_alpha_s():
    """Compose the forward law at s with the reverse kernel from a tiny alpha_t."""
    a_s = 0.37
    for a_t in (1e-3, 1e-6, 1e-9):
        post = kernels.posterior_imdm(2, [1.0, 0.0], a_s, a_t)
        assert abs(post.unmask_total - a_s) <= 2 * a_t


@settings(max_examples=200)
@given(alphas, st.integers(2, 4), st.integers(0, 4), st.data())
def test_chapman_kolmogorov(a, n, extra, data):
    a_s, a_t = a
    for prior in (PriorSpec.uniform(n, n + extra), PriorSpec.mask(n), PriorSpec.latent_mask(n, 1 + extra)):
        x = data.draw(st.integers(0, n - 1))
        pi = prior.vector()
        q_s = kernels.forward_marginal(x, a_s, prior).probs
        q_t = kernels.forward_marginal(x, a_t, prior).probs
        a_ts = a_t / a_s
        trans = a_ts * np.eye(pi.size) + (1 - a_ts) * pi[None, :]
        assert np.abs(q_s @ trans - q_t).max() <= 1e-12


# NELBO terms


def test_mdm_nelbo_examples():
    s = Schedule()
    assert kernels.mdm_nelbo_term([0.0, 1.0], 1, 0.5, s) == 0.0
    assert kernels.mdm_nelbo_term([0.5, 0.5], 0, 0.5, s) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert kernels.mdm_nelbo_term([1.0, 0.0], 1, 0.5, s) == math.inf


def test_imdm_nelbo_is_mdm_nelbo():
    s = Schedule()
    g = np.random.default_rng(3)
    for _ in range(100):
        p = g.dirichlet(np.ones(3))
        t = float(g.random())
        assert kernels.imdm_nelbo_term(p, 1, t, s) == kernels.mdm_nelbo_term(p, 1, t, s)


def test_mdm_nelbo_matches_exact_kl_oracle():
    """One token, two values: the RB term is the integrand of the continuous-time KL.

    For L=1 and a masked z_t, the expected per-step KL between q(z_s|z_t,x)
    and p(z_s|z_t) over a fine grid, divided by the step, converges to the
    term.
    """
    s = Schedule()
    p = np.array([0.3, 0.7])
    x = 0
    t = 0.6
    dt = 1e-6
    a_t = float(s.alpha(t))
    a_s = float(s.alpha(t - dt))
    q = kernels.posterior_general(2, x, a_s, a_t, PriorSpec.mask(2)).probs
    m = kernels.posterior_mdm(2, p, a_s, a_t).probs
    kl = float(np.sum(np.where(q > 0, q * np.log(np.where(q > 0, q, 1) / m), 0)))
    assert kl / dt == pytest.approx(kernels.mdm_nelbo_term(p, x, t, s), rel=1e-4)


def _uniform_term_by_sum(k, p, x, z_t, a, schedule):
    """Direct term-by-term evaluation of the K-state formula."""
    n = p.size
    xbar = np.full(k, 1 - a)
    xbar[x] += k * a
    pk = np.zeros(k)
    pk[:n] = p
    xth = k * a * pk + (1 - a)
    i = z_t
    total = k / xbar[i] - k / xth[i]
    for j in range(k):
        total -= xbar[j] / xbar[i] * math.log(xth[i] * xbar[j] / (xth[j] * xbar[i]))
    t = float(schedule.t_of_alpha(a))
    return float(schedule.alpha_prime(t)) / (k * a) * total


def test_uniform_term_k4_by_hand():
    s = Schedule()
    p = np.array([0.2, 0.5, 0.3])
    for z_t in range(4):
        for x in range(3):
            got = kernels.uniform_nelbo_term(4, p, x, z_t, 0.4, s)
            ref = 0.0 if z_t == x else _uniform_term_by_sum(4, p, x, z_t, 0.4, s)
            assert got == pytest.approx(ref, abs=1e-12)


def test_uniform_term_zero_when_clean():
    assert kernels.uniform_nelbo_term(10**6, [0.1, 0.9], 1, 1, 0.5, Schedule()) == 0.0


def test_uniform_term_nonnegative():
    s = Schedule()
    g = np.random.default_rng(4)
    for _ in range(200):
        n = int(g.integers(2, 5))
        k = n + int(g.integers(0, 6))
        p = g.dirichlet(np.ones(n))
        z = int(g.integers(k))
        assert kernels.uniform_nelbo_term(k, p, int(g.integers(n)), z, float(g.uniform(0.05, 0.95)), s) >= -1e-12


def test_uniform_term_approaches_limit():
    """Gap to the IMDM term shrinks like log(K) / K."""
    s = Schedule()
    p = np.array([0.2, 0.3, 0.5])
    lim = kernels.imdm_nelbo_term(p, 0, 0.7, s)
    gaps = [abs(kernels.uniform_nelbo_term(k, p, 0, 3, 0.3, s) - lim) for k in (10**5, 10**6, 10**7)]
    assert gaps[0] > gaps[1] > gaps[2]
    for k, g in zip((10**5, 10**6, 10**7), gaps):
        assert g * k / math.log(k) < 10


def test_uniform_limit_on_gated_domain():
    s = Schedule()
    g = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        n = int(g.choice([2, 3]))
        a = float(g.uniform(0.3, 0.9))
        p = 0.5 * g.dirichlet(np.ones(n)) + 0.5 / n
        x = int(g.integers(n))
        z = n + int(g.integers(10**6 - n))
        got = kernels.uniform_nelbo_term(10**6, p, x, z, a, s)
        worst = max(worst, abs(got - kernels.imdm_nelbo_term(p, x, 1 - a, s)))
    assert worst <= 1e-4


def test_prior_spec_validation():
    with pytest.raises(DomainError):
        PriorSpec.uniform(3, 2)
    with pytest.raises(DomainError):
        PriorSpec("other", 2)
    with pytest.raises(DomainError):
        PriorSpec.latent_mask(2, 0)
    assert not PriorSpec.latent_mask(2).is_finite
    assert PriorSpec.latent_mask(2, 5).size == 7


def test_categoricals_sum_to_one():
    g = np.random.default_rng(6)
    for _ in range(200):
        n = int(g.integers(2, 5))
        a_s, a_t = sorted(g.uniform(0.01, 0.99, 2), reverse=True)
        prior = PriorSpec.uniform(n, n + 2)
        for z, x in itertools.product(range(n + 2), range(n)):
            c = kernels.posterior_general(z, x, a_s, a_t, prior)
            assert isinstance(c, Categorical)
            assert abs(c.probs.sum() - 1) <= 1e-12
