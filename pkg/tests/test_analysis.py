import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imdm import analysis as an
from imdm.core import CapacityError, DomainError, Rng, Schedule, Sequence
from imdm.denoiser import NoiseSpec, init_params, to_imdm
from imdm.sampler import DecodeConfig, decode_arrays
from imdm.training import DatasetSpec

LN2 = math.log(2)


def uniform_mdm(length=2, n=2):
    p = init_params(n, length, Rng(0))
    p.arrays["w_out"][:] = 0.0
    p.arrays["b_out"][:] = 0.0
    return p


def noisy_imdm(seed=0, sd=1.0):
    spec = NoiseSpec()
    p = to_imdm(init_params(2, 2, Rng(seed)), spec, Rng(seed + 1))
    p.arrays["noise_w2"] = np.random.default_rng(seed).normal(0, sd, p["noise_w2"].shape)
    return p, spec


def random_dataset(g, n, length):
    seqs = list(itertools.product(range(n), repeat=length))
    return DatasetSpec.explicit(n, seqs, g.dirichlet(np.full(len(seqs), 0.5)))


joints = st.integers(2, 3).flatmap(
    lambda k: st.lists(st.floats(0.0, 1.0), min_size=k**3, max_size=k**3)
    .filter(lambda v: sum(v) > 1e-3)
    .map(lambda v: (np.array(v) / sum(v)).reshape(k, k, k))
)


# sample metrics


def test_validity_examples():
    assert an.validity([Sequence((0, 0)), Sequence((1, 1))]) == 1.0
    assert an.validity([[0, 1], [1, 1]]) == 0.5
    assert an.validity([[0, 1], [1, 1]], predicate=lambda r: r[0] == 0) == 0.5
    with pytest.raises(DomainError):
        an.validity([])


def test_validity_random_pairs_binomial():
    g = np.random.default_rng(0)
    n = 20_000
    v = an.validity(g.integers(0, 2, (n, 2)))
    assert abs(v - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_token_entropy_examples():
    assert an.token_entropy([[1, 1], [1, 1]]) == 0.0
    assert an.token_entropy([[0, 1], [1, 0]]) == pytest.approx(LN2, abs=1e-15)
    assert an.token_entropy([[0, 1, 2, 3]]) == pytest.approx(math.log(4), abs=1e-15)


# information measures


def test_kl_conventions():
    assert an.kl([0.5, 0.5, 0.0], [0.25, 0.25, 0.5]) == pytest.approx(LN2)
    assert an.kl([0.5, 0.5], [1.0, 0.0]) == math.inf
    assert an.entropy([1.0, 0.0]) == 0.0


def test_lemma_examples():
    same = np.zeros((2, 2, 2))
    same[0, 0, 0] = same[1, 1, 1] = 0.5
    assert an.lemma_cmi_check(same) == pytest.approx(0.0, abs=1e-15)
    g = np.random.default_rng(1)
    pa, pb, pc = (g.dirichlet(np.ones(3)) for _ in range(3))
    indep = np.einsum("a,b,c->abc", pa, pb, pc)
    assert an.lemma_cmi_check(indep) == pytest.approx(an.entropy(pc), abs=1e-12)


def test_lemma_fuzz():
    g = np.random.default_rng(2)
    for _ in range(500):
        shape = tuple(g.integers(2, 4, 3))
        p = g.dirichlet(np.full(np.prod(shape), 0.3)).reshape(shape)
        assert an.lemma_cmi_check(p) >= -1e-12


@settings(max_examples=200)
@given(joints)
def test_lemma_property(p):
    assert an.lemma_cmi_check(p) >= -1e-12


def test_lemma_rejects_bad_tables():
    with pytest.raises(DomainError):
        an.lemma_cmi_check(np.ones((2, 2)) / 4)


def test_joint_dist_validation():
    with pytest.raises(DomainError):
        an.JointDist(np.array([0.5, 0.6]))
    with pytest.raises(CapacityError):
        an.JointDist(np.full(10**6 + 1, 1 / (10**6 + 1)))
    j = an.JointDist.from_dataset(DatasetSpec.synthetic_pair())
    assert np.array_equal(j.marginal(0), [0.5, 0.5])
    assert an.total_correlation(j) == pytest.approx(LN2)


# total correlation


def test_tc_independent_is_zero():
    g = np.random.default_rng(3)
    m = g.dirichlet(np.ones(2), size=2)
    cond = np.multiply.outer(m[0], m[1])
    assert an.tc_exact(cond[None], m[None]) == pytest.approx(0.0, abs=1e-15)


def test_tc_decomposition_identity():
    """KL(p || prod q) = TC(p) + sum_l KL(p_l || q_l), term by term."""
    g = np.random.default_rng(4)
    for _ in range(200):
        p = g.dirichlet(np.ones(4)).reshape(2, 2)
        q = g.dirichlet(np.ones(2), size=2)
        jd = an.JointDist(p)
        ref = an.total_correlation(jd) + sum(an.kl(jd.marginal(l), q[l]) for l in range(2))
        assert an.tc_exact(p[None], q[None]) == pytest.approx(ref, abs=1e-12)
        true_m = np.stack([jd.marginal(0), jd.marginal(1)])
        assert an.tc_exact(p[None], true_m[None]) == pytest.approx(an.total_correlation(jd), abs=1e-12)
        assert an.tc_exact(p[None], q[None]) >= an.total_correlation(jd) - 1e-12


def test_tc_direct_summation():
    g = np.random.default_rng(5)
    conds = g.dirichlet(np.ones(4), size=3).reshape(3, 2, 2)
    margs = g.dirichlet(np.ones(2), size=(3, 2))
    w = g.dirichlet(np.ones(3))
    ref = 0.0
    for c in range(3):
        for a, b in itertools.product(range(2), repeat=2):
            p = conds[c, a, b]
            ref += w[c] * p * math.log(p / (margs[c, 0, a] * margs[c, 1, b]))
    assert an.tc_exact(conds, margs, w) == pytest.approx(ref, abs=1e-12)


def test_tc_shape_and_capacity():
    with pytest.raises(DomainError):
        an.tc_exact(np.full((1, 2, 2), 0.25), np.full((1, 3, 2), 0.5))
    with pytest.raises(CapacityError):
        an.tc_exact(np.full((1, 2, 2), 0.25), np.full((1, 2, 2), 0.5), capacity=3)


# one-step joint and factorization error


def test_uniform_mdm_joint():
    j = an.onestep_model_joint(uniform_mdm(), 1, Rng(0))
    assert np.allclose(j.flat, 0.25, atol=1e-15)


def test_zero_init_imdm_joint_equals_base():
    base = init_params(2, 2, Rng(6))
    spec = NoiseSpec()
    wrapped = to_imdm(base, spec, Rng(7))
    a = an.onestep_model_joint(base, 1, Rng(0)).flat
    b = an.onestep_model_joint(wrapped, 500, Rng(1), spec).flat
    assert np.abs(a - b).max() <= 1e-12


def test_imdm_joint_matches_direct_sampling():
    p, spec = noisy_imdm(8, sd=2.0)
    joint = an.onestep_model_joint(p, 10_000, Rng(2), spec).flat
    out = decode_arrays(p, DecodeConfig(1, "imdm", 2), [Rng(3).split(i) for i in range(20_000)], Schedule(), spec)
    freq = np.bincount(out.tokens[:, 0] * 2 + out.tokens[:, 1], minlength=4) / 20_000
    assert 0.5 * np.abs(freq - joint).sum() <= 0.02


def test_joint_needs_noise(noise_spec):
    p, _ = noisy_imdm()
    with pytest.raises(DomainError):
        an.onestep_model_joint(p, 10, Rng(0))
    with pytest.raises(DomainError):
        an.onestep_model_joint(p, 0, Rng(0), noise_spec)
    with pytest.raises(CapacityError):
        an.onestep_model_joint(p, 10, Rng(0), noise_spec, capacity=3)


def test_joint_with_explicit_eps():
    p, spec = noisy_imdm()
    eps = np.random.default_rng(0).uniform(-1, 1, (5, 2, 8))
    a = an.onestep_model_joint(p, 0, Rng(0), spec, eps=eps).flat
    factors = an.full_mask_predictions(p, eps, spec)
    ref = np.mean([np.outer(f[0], f[1]).ravel() for f in factors], axis=0)
    assert np.abs(a - ref).max() <= 1e-15


def test_factorization_error_examples():
    data = an.JointDist.from_dataset(DatasetSpec.synthetic_pair())
    m = uniform_mdm()
    assert an.factorization_error(m, data, 1, Rng(0)) == pytest.approx(LN2, abs=1e-12)
    own = an.onestep_model_joint(m, 1, Rng(0))
    assert an.factorization_error(m, own, 1, Rng(0)) == pytest.approx(0.0, abs=1e-15)


def test_factorization_error_support_gap():
    m = uniform_mdm()
    m.arrays["b_out"][:] = [800.0, 0.0, 800.0, 0.0]  # all mass on 00
    data = an.JointDist.from_dataset(DatasetSpec.synthetic_pair())
    assert an.factorization_error(m, data, 1, Rng(0)) == math.inf


def test_factorization_error_shape_mismatch():
    data = an.JointDist.from_dataset(DatasetSpec.explicit(2, [[0, 0, 0]]))
    with pytest.raises(DomainError):
        an.factorization_error(uniform_mdm(), data, 1, Rng(0))


def test_mdm_error_above_bound_on_random_data():
    """Full-mask one-step: any factorized model pays at least the bound."""
    g = np.random.default_rng(9)
    for trial in range(40):
        length = int(g.integers(2, 4))
        data = random_dataset(g, 2, length)
        model = init_params(2, length, Rng(trial), d_model=4, width=8)
        err = an.factorization_error(model, an.JointDist.from_dataset(data), 1, Rng(0))
        bound, _, _ = an.thm1_lower_bound(data, Schedule(), 0.0, 1.0)
        assert err >= bound - 1e-9


# bound


def test_bound_independent_data_is_zero(schedule):
    data = DatasetSpec.explicit(2, [[0, 0], [0, 1], [1, 0], [1, 1]], [0.09, 0.21, 0.21, 0.49])
    value, _, _ = an.thm1_lower_bound(data, schedule, 0.0, 1.0)
    assert value == pytest.approx(0.0, abs=1e-15)


def test_bound_synthetic_one_step(schedule, pair_data):
    value, pair, p_event = an.thm1_lower_bound(pair_data, schedule, 0.0, 1.0)
    assert p_event == 1.0 and pair == (0, 1)
    assert value == pytest.approx(LN2, abs=1e-15)


def test_bound_shrinks_with_step(schedule, pair_data):
    full, _, _ = an.thm1_lower_bound(pair_data, schedule, 0.0, 1.0)
    half, _, _ = an.thm1_lower_bound(pair_data, schedule, 0.5, 1.0)
    assert half < full
    assert half == pytest.approx(0.25 * LN2, abs=1e-15)


@settings(max_examples=200)
@given(st.floats(0, 1), st.floats(0, 1))
def test_pair_event_prob_forms(x, y):
    a_s, a_t = max(x, y), min(x, y)
    p = an.pair_event_prob(a_s, a_t)
    assert p == pytest.approx((a_s - a_t) ** 2, abs=1e-15)
    if a_t < 1:
        assert p == pytest.approx((1 - a_t) ** 2 * ((a_s - a_t) / (1 - a_t)) ** 2, abs=1e-12)


def test_bound_below_exact_tc(schedule):
    g = np.random.default_rng(10)
    for _ in range(30):
        data = random_dataset(g, 2, int(g.integers(2, 4)))
        s, t = sorted(g.uniform(0, 1, 2))
        bound, _, _ = an.thm1_lower_bound(data, schedule, s, t)
        assert an.onestep_tc(data, schedule, s, t) - bound >= -1e-12


def test_step_conditionals_normalized(schedule, pair_data):
    sc = an.step_conditionals(pair_data, schedule, 0.3, 0.7)
    assert sc.context_probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(sc.conditionals.reshape(len(sc.contexts), -1).sum(1), 1.0)
    assert (2, 2) in sc.contexts


def test_bound_argument_errors(schedule, pair_data):
    with pytest.raises(DomainError):
        an.thm1_lower_bound(pair_data, schedule, 0.5, 0.5)
    with pytest.raises(DomainError):
        an.thm1_lower_bound(DatasetSpec.explicit(2, [[0], [1]]), schedule, 0.0, 1.0)
    with pytest.raises(CapacityError):
        an.thm1_lower_bound(pair_data, schedule, 0.0, 1.0, capacity=4)
    with pytest.raises(CapacityError):
        an.step_conditionals(pair_data, schedule, 0.0, 1.0, capacity=10)


# partition map


def test_partition_map_two_outcomes():
    pm = an.build_partition_map(an.JointDist.from_dataset(DatasetSpec.synthetic_pair()))
    assert pm.cuts == (Fraction(0), Fraction(1, 2), Fraction(1, 2), Fraction(1, 2), Fraction(1))
    assert pm(0.0) == (0, 0) and pm(0.4999) == (0, 0)
    assert pm(0.5) == (1, 1) and pm(0.9999) == (1, 1)
    assert np.array_equal(pm.map_array(np.array([0.1, 0.7])), [0, 3])
    with pytest.raises(DomainError):
        pm(1.0)


def test_partition_map_exact_measure():
    g = np.random.default_rng(11)
    for _ in range(100):
        target = an.JointDist(g.dirichlet(np.ones(16)).reshape(2, 2, 2, 2))
        pm = an.build_partition_map(target)
        assert pm.cuts[0] == 0 and pm.cuts[-1] == 1
        assert all(a <= b for a, b in zip(pm.cuts, pm.cuts[1:]))
        assert an.pushforward_error(pm) <= 1e-15


def test_partition_map_monte_carlo():
    pm = an.build_partition_map(an.JointDist.from_dataset(DatasetSpec.synthetic_pair()))
    assert an.pushforward_tv_mc(pm, 10**6, Rng(12)) <= 0.002


def test_partition_map_from_noise():
    pm = an.build_partition_map(an.JointDist.from_dataset(DatasetSpec.synthetic_pair()))
    eps = np.array([[-0.9] + [0.0] * 7, [0.9] + [0.0] * 7])
    assert np.array_equal(pm.map_noise(eps, NoiseSpec()), [0, 3])


def test_partition_map_capacity():
    with pytest.raises(CapacityError):
        an.build_partition_map(an.JointDist(np.full(8, 1 / 8)), capacity=4)


# probe


def test_probe_zero_init_rows_identical():
    spec = NoiseSpec()
    p = to_imdm(init_params(2, 2, Rng(13)), spec, Rng(14))
    table = an.per_token_probe(p, spec.sample(np.random.default_rng(0), (20, 2)), noise_spec=spec)
    assert np.abs(table - table[0]).max() <= 1e-12


def test_probe_mdm_replicates_rows():
    table = an.per_token_probe(uniform_mdm(), np.zeros((3, 2, 8)))
    assert np.allclose(table, 0.5)


def test_find_switching_pair():
    table = np.array([[0.5, 0.5], [0.95, 0.99], [0.02, 0.01], [0.95, 0.05]])
    assert an.find_switching_pair(table) == (1, 2)
    assert an.find_switching_pair(table[[0, 3]]) is None
