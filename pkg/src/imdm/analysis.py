"""Metrics and exact-enumeration oracles over small discrete supports.

All information quantities are in nats with the convention 0 log 0 = 0.
"""

from __future__ import annotations

import itertools
import math
from bisect import bisect_right
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import _accel
from .core import DEFAULT_CAPACITY, CapacityError, DomainError, Rng, Schedule, effective_alpha
from .denoiser import IMDM, DenoiserParams, NoiseSpec, predict
from .training import DatasetSpec


@dataclass(frozen=True)
class JointDist:
    """Probability table with one axis per variable."""

    table: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.table, dtype=np.float64)
        if p.size > DEFAULT_CAPACITY:
            raise CapacityError(f"joint with {p.size} states exceeds capacity {DEFAULT_CAPACITY}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise DomainError("joint must be non-negative and sum to 1")
        object.__setattr__(self, "table", p)

    @classmethod
    def from_flat(cls, flat, n_states: int, length: int) -> "JointDist":
        return cls(np.asarray(flat, dtype=np.float64).reshape((n_states,) * length))

    @classmethod
    def from_dataset(cls, dataset: DatasetSpec) -> "JointDist":
        _check_capacity(dataset.n_data**dataset.length)
        return cls.from_flat(dataset.joint(), dataset.n_data, dataset.length)

    @property
    def flat(self) -> np.ndarray:
        return self.table.reshape(-1)

    def marginal(self, axes) -> np.ndarray:
        keep = set(np.atleast_1d(axes).tolist())
        drop = tuple(a for a in range(self.table.ndim) if a not in keep)
        return self.table.sum(axis=drop)


def _check_capacity(n: int, capacity: int = DEFAULT_CAPACITY) -> None:
    if n > capacity:
        raise CapacityError(f"{n} states exceed capacity {capacity}")


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> float:
    """sum p log(p / q) with 0 log 0 = 0; +inf where p > 0 = q."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    pos = p > 0
    if np.any(q[pos] <= 0):
        return math.inf
    return float(np.sum(p[pos] * (np.log(p[pos]) - np.log(q[pos]))))


def kl(p, q) -> float:
    return _xlogy_ratio(p, q)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def mutual_information(joint2: np.ndarray) -> float:
    """I(A; B) for a 2-D joint table."""
    pa = joint2.sum(axis=1, keepdims=True)
    pb = joint2.sum(axis=0, keepdims=True)
    return _xlogy_ratio(joint2, pa * pb)


def conditional_mutual_information(joint3: np.ndarray) -> float:
    """I(A; B | C) for a table indexed [a, b, c]."""
    total = 0.0
    for c in range(joint3.shape[2]):
        pc = joint3[:, :, c].sum()
        if pc > 0:
            total += pc * mutual_information(joint3[:, :, c] / pc)
    return total


def total_correlation(joint: JointDist) -> float:
    """KL(joint || product of its own marginals)."""
    prod = _product([joint.marginal(a) for a in range(joint.table.ndim)])
    return kl(joint.table, prod)


def _product(marginals) -> np.ndarray:
    out = np.ones(())
    for m in marginals:
        out = np.multiply.outer(out, np.asarray(m, dtype=np.float64))
    return out


# ---------------------------------------------------------------------------
# sample metrics
# ---------------------------------------------------------------------------


def all_equal(row) -> bool:
    return len(set(int(v) for v in row)) <= 1


def _as_rows(samples) -> np.ndarray:
    rows = np.asarray([getattr(s, "tokens", s) for s in samples], dtype=np.int64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise DomainError("need a non-empty list of equal-length samples")
    return rows


def validity(samples, predicate=None) -> float:
    """Fraction of samples satisfying ``predicate`` (default: all tokens equal)."""
    rows = _as_rows(samples)
    if predicate is None:
        return float(np.mean(np.all(rows == rows[:, :1], axis=1)))
    return float(np.mean([bool(predicate(r)) for r in rows]))


def token_entropy(samples) -> float:
    """Entropy of the pooled single-token marginal."""
    rows = _as_rows(samples)
    counts = np.bincount(rows.ravel())
    return entropy(counts / counts.sum())


# ---------------------------------------------------------------------------
# one-step model joint and factorization error
# ---------------------------------------------------------------------------


def full_mask_predictions(model: DenoiserParams, eps: np.ndarray | None, noise_spec: NoiseSpec | None = None):
    """Per-position predictions from the fully masked input, one row per eps draw."""
    length = model.length
    if model.kind == IMDM:
        eps = np.asarray(eps, dtype=np.float64)
        tokens = np.full((eps.shape[0], length), model.mask_index)
        scale = noise_spec.scale if noise_spec is not None else 1.0
        return predict(tokens, eps, 1.0, model, scale=scale)
    return predict(np.full((1, length), model.mask_index), None, 1.0, model)


def onestep_model_joint(
    model: DenoiserParams,
    n_eps: int,
    rng: Rng,
    noise_spec: NoiseSpec | None = None,
    eps: np.ndarray | None = None,
    capacity: int = DEFAULT_CAPACITY,
) -> JointDist:
    """Average over eps draws of the factorized one-step prediction from full mask.

    MDM models have no eps dependence and use a single product.  ``eps``
    overrides the draws (e.g. to reuse coupling noise).
    """
    _check_capacity(model.n_data**model.length, capacity)
    if model.kind == IMDM:
        if eps is None:
            if noise_spec is None:
                raise DomainError("IMDM joint needs a noise spec or explicit eps")
            if n_eps < 1:
                raise DomainError("n_eps must be >= 1")
            eps = noise_spec.sample(rng.gen, (n_eps, model.length))
    factors = full_mask_predictions(model, eps, noise_spec)
    flat = _accel.product_joint(factors)
    flat = flat / flat.sum()
    return JointDist.from_flat(flat, model.n_data, model.length)


def factorization_error(
    model: DenoiserParams,
    data_joint: JointDist,
    n_eps: int,
    rng: Rng,
    noise_spec: NoiseSpec | None = None,
    eps: np.ndarray | None = None,
) -> float:
    """KL(data joint || one-step full-mask model joint); +inf on a support gap."""
    model_joint = onestep_model_joint(model, n_eps, rng, noise_spec, eps=eps)
    if model_joint.table.shape != data_joint.table.shape:
        raise DomainError("data and model supports differ")
    return kl(data_joint.table, model_joint.table)


def tc_exact(true_conditionals, model_marginals, context_probs=None, capacity: int = DEFAULT_CAPACITY) -> float:
    """sum_c p(c) KL(p(.|c) || prod_l q_l(.|c)) by enumeration.

    ``true_conditionals``: (C, S, ..., S) tables, one per context;
    ``model_marginals``: (C, L, S); ``context_probs``: (C,), default uniform.
    """
    tc = np.asarray(true_conditionals, dtype=np.float64)
    mm = np.asarray(model_marginals, dtype=np.float64)
    n_ctx = tc.shape[0]
    _check_capacity(tc.size, capacity)
    if mm.shape[0] != n_ctx or mm.shape[1] != tc.ndim - 1:
        raise DomainError("marginals do not match the conditionals")
    w = np.full(n_ctx, 1.0 / n_ctx) if context_probs is None else np.asarray(context_probs, dtype=np.float64)
    total = 0.0
    for c in range(n_ctx):
        if w[c] > 0:
            total += w[c] * kl(tc[c], _product(mm[c]))
    return total


# ---------------------------------------------------------------------------
# exact MDM process between two times
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepConditionals:
    """Exact p(z_s | z_t) of the MDM process for every reachable z_t.

    ``contexts`` are z_t tuples with the mask as index N; ``conditionals``
    has one table over (N + 1)^L per context.
    """

    contexts: list
    context_probs: np.ndarray
    conditionals: np.ndarray

    def true_marginals(self) -> np.ndarray:
        length = self.conditionals.ndim - 1
        return np.stack(
            [np.stack([JointDist(c).marginal(l) for l in range(length)]) for c in self.conditionals]
        )


def step_conditionals(
    dataset: DatasetSpec, schedule: Schedule, s: float, t: float, capacity: int = DEFAULT_CAPACITY
) -> StepConditionals:
    if not 0.0 <= s < t <= 1.0:
        raise DomainError("need 0 <= s < t <= 1")
    n, length = dataset.n_data, dataset.length
    _check_capacity((n + 1) ** (2 * length), capacity)
    a_t = effective_alpha(schedule, t)
    a_s = effective_alpha(schedule, s)
    pu = 1.0 if a_t >= 1.0 else (a_s - a_t) / (1.0 - a_t)
    data = JointDist.from_dataset(dataset).table
    xs = list(itertools.product(range(n), repeat=length))
    contexts, probs, conds = [], [], []
    for pattern in itertools.product((False, True), repeat=length):
        p_pat = math.prod((1.0 - a_t) if m else a_t for m in pattern)
        if p_pat == 0.0:
            continue
        by_ctx: dict[tuple, list] = {}
        for x in xs:
            px = data[x]
            if px == 0.0:
                continue
            ctx = tuple(n if m else v for m, v in zip(pattern, x))
            by_ctx.setdefault(ctx, []).append((x, px))
        for ctx, items in by_ctx.items():
            mass = sum(px for _, px in items)
            cond = np.zeros((n + 1,) * length)
            for x, px in items:
                per_pos = []
                for m, v in zip(pattern, x):
                    row = np.zeros(n + 1)
                    if m:
                        row[v] += pu
                        row[n] += 1.0 - pu
                    else:
                        row[v] = 1.0
                    per_pos.append(row)
                cond += (px / mass) * _product(per_pos)
            contexts.append(ctx)
            probs.append(p_pat * mass)
            conds.append(cond)
    return StepConditionals(contexts, np.asarray(probs), np.stack(conds))


def onestep_tc(dataset, schedule, s, t, model_marginals=None) -> float:
    """TC_theta between t and s; true per-position marginals when none are given."""
    sc = step_conditionals(dataset, schedule, s, t)
    mm = sc.true_marginals() if model_marginals is None else model_marginals
    return tc_exact(sc.conditionals, mm, sc.context_probs)


def pair_event_prob(alpha_s: float, alpha_t: float) -> float:
    """P(positions i, j are both masked at t and both unmasked by s), by enumeration.

    Each position is independently clean at t (alpha_t), masked at t and
    clean at s (alpha_s - alpha_t), or masked at both (1 - alpha_s).
    """
    states = {"clean_t": alpha_t, "decoded": alpha_s - alpha_t, "masked_s": 1.0 - alpha_s}
    return sum(
        states[a] * states[b] for a, b in itertools.product(states, repeat=2) if a == b == "decoded"
    )


def thm1_lower_bound(
    dataset: DatasetSpec, schedule: Schedule, s: float, t: float, capacity: int = DEFAULT_CAPACITY
):
    """max over pairs of p(e_ij) I(x_i; x_j | z_t outside {i, j}).

    Returns ``(value, (i, j), p_event)``.  The conditioning context reveals
    the data tokens of the other positions that are clean at t.
    """
    if not 0.0 <= s < t <= 1.0:
        raise DomainError("need 0 <= s < t <= 1")
    n, length = dataset.n_data, dataset.length
    if length < 2:
        raise DomainError("need at least two positions")
    _check_capacity(n**length * 2**length, capacity)
    a_t = effective_alpha(schedule, t)
    a_s = effective_alpha(schedule, s)
    p_event = pair_event_prob(a_s, a_t)
    data = JointDist.from_dataset(dataset).table
    best, best_pair = -1.0, None
    for i, j in itertools.combinations(range(length), 2):
        others = [k for k in range(length) if k not in (i, j)]
        cmi = 0.0
        for revealed in itertools.product((False, True), repeat=len(others)):
            p_rev = math.prod(a_t if r else (1.0 - a_t) for r in revealed)
            if p_rev == 0.0:
                continue
            shown = [k for k, r in zip(others, revealed) if r]
            hidden = [k for k, r in zip(others, revealed) if not r]
            table = data.sum(axis=tuple(hidden)) if hidden else data
            keep = sorted([i, j] + shown)
            table = np.moveaxis(table, [keep.index(i), keep.index(j)], [0, 1])
            table = table.reshape(n, n, -1)
            cmi += p_rev * conditional_mutual_information(table)
        value = p_event * cmi
        if value > best:
            best, best_pair = value, (i, j)
    return best, best_pair, p_event


def lemma_cmi_check(joint3) -> float:
    """I(A; B | C) - (I(A; B) - H(C)); nonnegative for every joint."""
    p = np.asarray(joint3, dtype=np.float64)
    if p.ndim != 3 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError("need a normalized 3-D joint table")
    return conditional_mutual_information(p) - (mutual_information(p.sum(axis=2)) - entropy(p.sum(axis=(0, 1))))


# ---------------------------------------------------------------------------
# partition-and-map witness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionMap:
    """Unit-interval cells, one per outcome in lexicographic order."""

    outcomes: tuple
    probs: np.ndarray
    cuts: tuple

    def interval_lengths(self) -> np.ndarray:
        return np.array([float(b - a) for a, b in zip(self.cuts[:-1], self.cuts[1:])])

    def __call__(self, u: float):
        if not 0.0 <= u < 1.0:
            raise DomainError("u must lie in [0, 1)")
        k = bisect_right(self.cuts, Fraction(u)) - 1
        return self.outcomes[k]

    def map_array(self, u: np.ndarray) -> np.ndarray:
        """Vectorized outcome indices for an array of u in [0, 1)."""
        edges = np.array([float(c) for c in self.cuts[1:-1]])
        return np.searchsorted(edges, u, side="right")

    def map_noise(self, eps: np.ndarray, noise_spec: NoiseSpec) -> np.ndarray:
        """Outcome indices from the first noise coordinate rescaled to [0, 1)."""
        return self.map_array(noise_spec.to_unit(np.asarray(eps)[..., 0]))


def build_partition_map(target: JointDist, capacity: int = DEFAULT_CAPACITY) -> PartitionMap:
    """Cut [0, 1) at exact cumulative target probabilities."""
    flat = target.flat
    _check_capacity(flat.size, capacity)
    shape = target.table.shape
    exact = [Fraction(float(v)) for v in flat]
    total = sum(exact)
    cuts = [Fraction(0)]
    for v in exact:
        cuts.append(cuts[-1] + v / total)
    outcomes = tuple(tuple(int(i) for i in np.unravel_index(k, shape)) for k in range(flat.size))
    return PartitionMap(outcomes, flat.copy(), tuple(cuts))


def pushforward_error(pm: PartitionMap) -> float:
    """Max |interval measure - target probability| over outcomes."""
    return float(np.max(np.abs(pm.interval_lengths() - pm.probs)))


def pushforward_tv_mc(pm: PartitionMap, n: int, rng: Rng) -> float:
    idx = pm.map_array(rng.gen.random(n))
    freq = np.bincount(idx, minlength=len(pm.outcomes)) / n
    return 0.5 * float(np.abs(freq - pm.probs).sum())


# ---------------------------------------------------------------------------
# per-token probe
# ---------------------------------------------------------------------------


def per_token_probe(
    model: DenoiserParams,
    eps_draws: np.ndarray,
    positions=None,
    noise_spec: NoiseSpec | None = None,
    token: int = 0,
) -> np.ndarray:
    """P(token) at each probed position from full mask, one row per eps draw."""
    eps_draws = np.asarray(eps_draws, dtype=np.float64)
    positions = list(range(model.length)) if positions is None else list(positions)
    if model.kind == IMDM:
        probs = full_mask_predictions(model, eps_draws, noise_spec)
    else:
        probs = np.repeat(full_mask_predictions(model, None), eps_draws.shape[0], axis=0)
    return probs[:, positions, token]


def find_switching_pair(table: np.ndarray, hi: float = 0.9, lo: float = 0.1, agree: float = 0.1):
    """Rows A, B with every entry >= hi under A and <= lo under B, each row agreeing within ``agree``.

    Returns ``(a, b)`` row indices or ``None``.
    """
    spread = table.max(axis=1) - table.min(axis=1)
    ok = spread <= agree
    high = np.nonzero(ok & np.all(table >= hi, axis=1))[0]
    low = np.nonzero(ok & np.all(table <= lo, axis=1))[0]
    if high.size == 0 or low.size == 0:
        return None
    return int(high[0]), int(low[0])
