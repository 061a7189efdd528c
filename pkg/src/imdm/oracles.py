"""Property suites with pass/fail and worst-case slack, for CI and reports.

Every suite returns a ``SuiteResult``.  Suites take their randomness from a
seed and never raise on a violated property; an exception inside a suite is
reported as a failure with its message.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import analysis, kernels
from .core import Rng, Schedule
from .denoiser import NoiseSpec, grad_check, init_params, predict, to_imdm
from .kernels import PriorSpec
from .training import DatasetSpec, make_batch


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    n_cases: int
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("worst", "tolerance"):
            if not math.isfinite(out[key]):
                out[key] = str(out[key])
        return out


def _run(name, tolerance, body):
    start = time.perf_counter()
    try:
        passed, worst, n, details = body()
    except Exception as exc:  # noqa: BLE001 - any exception is a failed property
        passed, worst, n, details = False, math.inf, 0, {"error": f"{type(exc).__name__}: {exc}"}
    return SuiteResult(name, bool(passed), float(worst), tolerance, n, time.perf_counter() - start, details)


def _random_dataset(g: np.random.Generator, n_values=(2, 3), lengths=(2, 3)) -> DatasetSpec:
    n = int(g.choice(n_values))
    length = int(g.choice(lengths))
    seqs = np.array(list(itertools.product(range(n), repeat=length)))
    w = g.dirichlet(np.full(len(seqs), 0.5))
    return DatasetSpec.explicit(n, seqs, w)


# ---------------------------------------------------------------------------
# bound, conditional-information and partition-map oracles
# ---------------------------------------------------------------------------


def thm1_suite(seed: int = 0, n_cases: int = 200, tol: float = 1e-9) -> SuiteResult:
    """Exact one-step TC >= pairwise bound; synthetic bound equals ln 2."""

    def body():
        schedule = Schedule()
        g = Rng(seed, 0x7401).gen
        worst = math.inf
        for _ in range(n_cases):
            ds = _random_dataset(g)
            t = float(g.uniform(0.05, 1.0))
            s = float(g.uniform(0.0, t))
            bound = analysis.thm1_lower_bound(ds, schedule, s, t)[0]
            sc = analysis.step_conditionals(ds, schedule, s, t)
            true_m = sc.true_marginals()
            rand_m = g.dirichlet(np.ones(ds.n_data + 1), size=true_m.shape[:2])
            for marg in (true_m, rand_m):
                worst = min(worst, analysis.tc_exact(sc.conditionals, marg, sc.context_probs) - bound)
            # full-mask instance with factorized model marginals
            data = analysis.JointDist.from_dataset(ds)
            fact = analysis.kl(data.table, analysis._product([data.marginal(a) for a in range(ds.length)]))
            worst = min(worst, fact - analysis.thm1_lower_bound(ds, schedule, 0.0, 1.0)[0])
        synth = analysis.thm1_lower_bound(DatasetSpec.synthetic_pair(), schedule, 0.0, 1.0)[0]
        synth_err = abs(synth - math.log(2))
        halved = analysis.thm1_lower_bound(DatasetSpec.synthetic_pair(), schedule, 0.5, 1.0)[0]
        ok = worst >= -tol and synth_err <= 1e-12 and halved < synth
        return ok, -worst if worst < 0 else 0.0, n_cases, {
            "min_slack": worst,
            "synthetic_bound": synth,
            "synthetic_abs_err": synth_err,
            "half_step_bound": halved,
        }

    return _run("thm1_lower_bound", tol, body)


def lemma_suite(seed: int = 0, n_cases: int = 500, tol: float = 1e-12) -> SuiteResult:
    def body():
        g = Rng(seed, 0x1E44).gen
        worst = math.inf
        for _ in range(n_cases):
            shape = tuple(int(v) for v in g.integers(2, 5, size=3))
            alpha = float(g.choice([0.1, 0.5, 1.0, 5.0]))
            joint = g.dirichlet(np.full(np.prod(shape), alpha)).reshape(shape)
            worst = min(worst, analysis.lemma_cmi_check(joint))
        fair = np.zeros((2, 2, 2))
        fair[0, 0, 0] = fair[1, 1, 1] = 0.5
        fair_slack = analysis.lemma_cmi_check(fair)
        ok = worst >= -tol and abs(fair_slack) <= 1e-12
        return ok, max(0.0, -worst), n_cases, {"min_slack": worst, "copy_bit_slack": fair_slack}

    return _run("lemma_cmi", tol, body)


def partition_suite(seed: int = 0, n_cases: int = 100, tol: float = 1e-15, mc_draws: int = 10**6, mc_tol: float = 0.002):
    """Partition-map pushforward equals the target; Monte Carlo check on {00, 11}."""

    def body():
        g = Rng(seed, 0x7402).gen
        worst = 0.0
        mc_max = 0.0
        for k in range(n_cases):
            n = int(g.integers(2, 5))
            target = analysis.JointDist(g.dirichlet(np.ones(n * n)).reshape(n, n))
            pm = analysis.build_partition_map(target)
            worst = max(worst, analysis.pushforward_error(pm))
            mc_max = max(mc_max, analysis.pushforward_tv_mc(pm, mc_draws, Rng(seed, 0x7403).split(k)))
        synth = analysis.build_partition_map(analysis.JointDist(np.array([[0.5, 0.0], [0.0, 0.5]])))
        spec = NoiseSpec()
        eps = spec.sample(Rng(seed, 0x7404).gen, (mc_draws,))
        idx = synth.map_noise(eps, spec)
        freq = np.bincount(idx, minlength=4) / mc_draws
        synth_tv = 0.5 * float(np.abs(freq - synth.probs).sum())
        ok = worst <= tol and synth_tv <= mc_tol
        return ok, worst, n_cases, {
            "synthetic_cuts": [str(c) for c in synth.cuts],
            "synthetic_mc_tv": synth_tv,
            "random_targets_mc_tv_max": mc_max,
        }

    return _run("partition_map", tol, body)


# ---------------------------------------------------------------------------
# kernel identities
# ---------------------------------------------------------------------------


def _transition(prior: PriorSpec, a_ts: float) -> np.ndarray:
    """Q[z_s, z_t] = a_ts delta + (1 - a_ts) pi[z_t]."""
    pi = prior.vector()
    return a_ts * np.eye(pi.size) + (1.0 - a_ts) * pi[None, :]


def _forward_vec(prior: PriorSpec, x: int, alpha: float) -> np.ndarray:
    v = (1.0 - alpha) * prior.vector()
    v[x] += alpha
    return v


def kernel_suite(seed: int = 0, n_cases: int = 1000, tol: float = 1e-12, posterior_imdm=None) -> SuiteResult:
    """Normalization, specialization, the two-case mask derivation and Chapman-Kolmogorov.

    ``posterior_imdm`` may be replaced to check that the suite catches a
    faulty implementation.
    """
    post_imdm = posterior_imdm or kernels.posterior_imdm

    def body():
        g = Rng(seed, 0x6E11).gen
        worst = {"normalization": 0.0, "general_vs_mdm": 0.0, "imdm_derivation": 0.0,
                 "imdm_vs_finite_mask": 0.0, "bayes": 0.0, "chapman_kolmogorov": 0.0}
        for _ in range(n_cases):
            n = int(g.integers(2, 6))
            a_s, a_t = sorted(g.uniform(0.001, 0.999, 2), reverse=True)
            a_s, a_t = float(a_s), float(a_t)
            p = g.dirichlet(np.ones(n))
            mask = PriorSpec.mask(n)

            # MDM: mixture of exact posteriors equals the model kernel
            z_t = int(g.integers(n + 1))
            mdm = kernels.posterior_mdm(z_t, p, a_s, a_t).probs
            if z_t == n:
                mix = sum(p[x] * kernels.posterior_general(n, x, a_s, a_t, mask).probs for x in range(n))
            else:
                mix = kernels.posterior_general(z_t, z_t, a_s, a_t, mask).probs
            worst["general_vs_mdm"] = max(worst["general_vs_mdm"], float(np.abs(mdm - mix).max()))
            worst["normalization"] = max(worst["normalization"], abs(mdm.sum() - 1.0))

            # IMDM: closed-form two-case derivation
            ip = post_imdm(n, p, a_s, a_t)
            a_ts = a_t / a_s
            ref = np.array([a_ts * (1 - a_s), (1 - a_ts) * (1 - a_s), a_s - a_t]) / (1 - a_t)
            got = np.array([ip.keep_mask_prob, ip.fresh_mask_prob, ip.unmask_total])
            worst["imdm_derivation"] = max(worst["imdm_derivation"], float(np.abs(got - ref).max()),
                                           float(np.abs(ip.unmask_probs - ref[2] * p).max()))
            worst["normalization"] = max(worst["normalization"], abs(got.sum() - 1.0))
            carry = post_imdm(int(g.integers(n)), p, a_s, a_t)
            worst["imdm_derivation"] = max(worst["imdm_derivation"], abs(carry.unmask_total - 1.0),
                                           carry.keep_mask_prob, carry.fresh_mask_prob)

            # IMDM vs an explicit finite set of M mask states
            m = int(g.integers(2, 50))
            lm = PriorSpec.latent_mask(n, m)
            rows = sum(p[x] * kernels.posterior_general(n, x, a_s, a_t, lm).probs for x in range(n))
            others = rows[n + 1 :].sum()
            fresh = others * m / (m - 1)
            keep = rows[n] - others / (m - 1)
            got_f = np.array([keep, fresh, *rows[:n]])
            ref_f = np.array([ip.keep_mask_prob, ip.fresh_mask_prob, *ip.unmask_probs])
            worst["imdm_vs_finite_mask"] = max(worst["imdm_vs_finite_mask"], float(np.abs(got_f - ref_f).max()))

            # Bayes brute force and Chapman-Kolmogorov on finite priors
            k = int(g.integers(n, n + 5))
            for prior in (PriorSpec.uniform(n, k), mask, lm):
                x = int(g.integers(n))
                qs = _forward_vec(prior, x, a_s)
                qt = _forward_vec(prior, x, a_t)
                trans = _transition(prior, a_ts)
                worst["chapman_kolmogorov"] = max(worst["chapman_kolmogorov"], float(np.abs(qs @ trans - qt).max()))
                support = np.nonzero(qt > 0)[0]
                zt = int(g.choice(support))
                brute = qs * trans[:, zt] / qt[zt]
                gen = kernels.posterior_general(zt, x, a_s, a_t, prior).probs
                worst["bayes"] = max(worst["bayes"], float(np.abs(brute - gen).max()))
                worst["normalization"] = max(worst["normalization"], abs(gen.sum() - 1.0))
        top = max(worst.values())
        return top <= tol, top, n_cases, worst

    return _run("kernel_identities", tol, body)


def nelbo_limit_suite(seed: int = 0, n_cases: int = 1000, tol: float = 1e-4, k: int = 10**6) -> SuiteResult:
    """K-state uniform NELBO approaches the IMDM term; z_t = x gives exactly 0.

    Inputs: N in {2, 3}, alpha in [0.3, 0.9], predictions half uniform.  The
    gap is a truncation error of order log(K) / K; a wider draw is reported
    for information only.
    """

    def draw(g, n_values, lo, hi, mix):
        n = int(g.choice(n_values))
        return n, float(g.uniform(lo, hi)), (1 - mix) * g.dirichlet(np.ones(n)) + mix / n, int(g.integers(n))

    def gap(schedule, n, a, p, x, z_t):
        t = float(schedule.t_of_alpha(a))
        return abs(kernels.uniform_nelbo_term(k, p, x, z_t, a, schedule) - kernels.imdm_nelbo_term(p, x, t, schedule))

    def body():
        schedule = Schedule()
        g = Rng(seed, 0x4E1B).gen
        worst = 0.0
        zero_ok = True
        for _ in range(n_cases):
            n, a, p, x = draw(g, (2, 3), 0.3, 0.9, 0.5)
            worst = max(worst, gap(schedule, n, a, p, x, n + int(g.integers(k - n))))
            zero_ok &= kernels.uniform_nelbo_term(k, p, x, x, a, schedule) == 0.0
        wide = 0.0
        for _ in range(200):
            n, a, p, x = draw(g, (2, 3, 4, 5), 0.05, 0.95, 0.0)
            wide = max(wide, gap(schedule, n, a, p, x, n))
        return worst <= tol and zero_ok, worst, n_cases, {"z_t_equals_x_zero": zero_ok, "wide_domain_max_gap": wide}

    return _run("nelbo_limit", tol, body)


# ---------------------------------------------------------------------------
# network checks
# ---------------------------------------------------------------------------


def _random_model(g_rng: Rng, imdm: bool):
    g = g_rng.gen
    n = int(g.integers(2, 4))
    length = int(g.integers(2, 4))
    params = init_params(n, length, g_rng.split(0), d_model=int(g.choice([4, 8])), width=int(g.choice([8, 16])))
    spec = NoiseSpec(str(g.choice(["uniform", "gaussian"])), int(g.integers(1, 5)), float(g.uniform(0.5, 2.0)))
    if imdm:
        params = to_imdm(params, spec, g_rng.split(1))
    return params, spec


def gradcheck_suite(seed: int = 0, n_configs: int = 10, n_coords: int = 200, tol: float = 1e-4) -> SuiteResult:
    def body():
        schedule = Schedule()
        worst = 0.0
        per = []
        for c in range(n_configs):
            r = Rng(seed, 0x64AD).split(c)
            params, spec = _random_model(r, imdm=c % 2 == 1)
            if params.kind == "imdm":
                g = r.split(2).gen
                params.arrays["noise_w2"] = g.normal(0, 0.3, params.arrays["noise_w2"].shape)
                params.arrays["noise_b2"] = g.normal(0, 0.3, params.arrays["noise_b2"].shape)
            ds = _random_dataset(r.split(3).gen, (params.n_data,), (params.length,))
            batch = make_batch(ds, schedule, 16, r.split(4), spec if params.kind == "imdm" else None)
            err = grad_check(params, batch, 1e-5, schedule, r.split(5), n_coords=n_coords, scale=spec.scale)
            per.append(err)
            worst = max(worst, err)
        return worst <= tol, worst, n_configs, {"per_config": per, "coords_per_config": n_coords}

    return _run("grad_check", tol, body)


def zero_init_suite(seed: int = 0, n_inputs: int = 100, n_eps: int = 100, tol: float = 1e-12) -> SuiteResult:
    """A fresh IMDM wrapper predicts exactly like the MDM it wraps, for every eps."""

    def body():
        worst = 0.0
        r = Rng(seed, 0x2E60)
        mdm = init_params(2, 2, r.split(0))
        spec = NoiseSpec()
        imdm = to_imdm(mdm, spec, r.split(1))
        g = r.split(2).gen
        for _ in range(n_inputs):
            tokens = g.integers(0, 3, size=mdm.length)
            t = float(g.random())
            base = predict(tokens, None, t, mdm)
            eps = spec.sample(g, (n_eps, mdm.length))
            eps[:, tokens != 2] = np.nan
            tiled = np.repeat(tokens[None], n_eps, axis=0)
            out = predict(tiled, eps, t, imdm)
            worst = max(worst, float(np.abs(out - base[None]).max()))
        return worst <= tol, worst, n_inputs * n_eps, {}

    return _run("zero_init_equivalence", tol, body)


SUITES = {
    "thm1": thm1_suite,
    "lemma": lemma_suite,
    "partition": partition_suite,
    "kernels": kernel_suite,
    "nelbo_limit": nelbo_limit_suite,
    "grad_check": gradcheck_suite,
    "zero_init": zero_init_suite,
}


def run_all(seed: int = 0, only=None) -> list[SuiteResult]:
    names = list(SUITES) if not only else list(only)
    return [SUITES[name](seed=seed) for name in names]
