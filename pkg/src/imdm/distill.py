"""Step distillation (SDTT-style) and rectified-coupling distillation (ReDi-style)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .core import CapacityError, DEFAULT_CAPACITY, DomainError, Rng, Schedule, TrainingAbort, effective_alpha, make_grid
from .denoiser import IMDM, DenoiserParams, NoiseSpec, kl_loss_and_grads, predict
from .kernels import keep_prob, unmask_prob
from .sampler import DecodeConfig, decode_arrays
from .training import Adam, DatasetSpec, TrainConfig, train

NOISE_DRIVEN = "noise_driven"
FINAL_EPS = "final_eps"


@dataclass
class CouplingSet:
    """Teacher-generated (noise assignment, sequence) pairs."""

    tokens: np.ndarray
    noise: np.ndarray | None
    teacher_id: str = ""
    steps: int = 0
    seed: int = 0
    rule: str = NOISE_DRIVEN

    def __len__(self):
        return self.tokens.shape[0]


@dataclass(frozen=True)
class DistillConfig:
    rounds: int = 2
    iterations_per_round: int = 2000
    inner_steps: int = 2
    base_steps: int = 4
    kl_direction: str = "teacher_to_student"
    target_mode: str = "exact"
    mc_rollouts: int = 256
    n_eps_quad: int = 64
    coupling_size: int = 10_000
    coupling_steps: int = 64
    coupling_rule: str = NOISE_DRIVEN
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.rounds < 0 or self.iterations_per_round < 0:
            raise DomainError("rounds and iterations_per_round must be >= 0")
        if self.inner_steps < 2:
            raise DomainError("inner_steps must be >= 2")
        if self.kl_direction != "teacher_to_student":
            raise DomainError("only teacher_to_student KL is supported")
        if self.target_mode not in ("exact", "monte_carlo"):
            raise DomainError(f"unknown target mode {self.target_mode!r}")
        if self.coupling_rule not in (NOISE_DRIVEN, FINAL_EPS):
            raise DomainError(f"unknown coupling rule {self.coupling_rule!r}")
        if self.coupling_size < 0 or self.coupling_steps < 2 or self.n_eps_quad < 1:
            raise DomainError("invalid coupling / quadrature settings")

    def student_steps(self, round_index: int) -> int:
        return max(1, self.base_steps // self.inner_steps ** (round_index + 1))


# ---------------------------------------------------------------------------
# SDTT targets
# ---------------------------------------------------------------------------


def _inner_alphas(schedule: Schedule, t: np.ndarray, s: np.ndarray, inner: int):
    """Per-item alphas at the inner knots t = tau_0 > ... > tau_inner = s."""
    frac = np.arange(inner + 1) / inner
    taus = t[:, None] - frac[None, :] * (t - s)[:, None]
    taus[:, 0], taus[:, -1] = t, s
    alphas = np.vectorize(lambda v: effective_alpha(schedule, float(v)))(taus)
    return taus, alphas


def _expand(tokens, eps, weight, item, probs, pu, pm, pk, mask_id, quad):
    """Branch every masked position over unmask / keep / fresh outcomes."""
    length = tokens.shape[1]
    n_data = probs.shape[-1]
    src = np.arange(tokens.shape[0])
    n_q = 0 if quad is None else quad.shape[0]
    for pos in range(length):
        masked = tokens[:, pos] == mask_id
        n_opt = np.where(masked, n_data + 1 + n_q, 1)
        rows = np.repeat(np.arange(tokens.shape[0]), n_opt)
        opt = np.arange(rows.size) - np.repeat(np.cumsum(n_opt) - n_opt, n_opt)
        tokens, weight, item, src = tokens[rows].copy(), weight[rows].copy(), item[rows], src[rows]
        if eps is not None:
            eps = eps[rows].copy()
        m = masked[rows]
        tok_opt = m & (opt < n_data)
        tokens[tok_opt, pos] = opt[tok_opt]
        weight[tok_opt] *= pu[item[tok_opt]] * probs[src[tok_opt], pos, opt[tok_opt]]
        stay = m & (opt >= n_data)
        if eps is None:
            weight[stay] *= pm[item[stay]]
        else:
            eps[tok_opt, pos] = np.nan
            keep = m & (opt == n_data)
            weight[keep] *= pm[item[keep]] * pk[item[keep]]
            fresh = m & (opt > n_data)
            q = opt[fresh] - n_data - 1
            eps[fresh, pos] = quad[q]
            weight[fresh] *= pm[item[fresh]] * (1.0 - pk[item[fresh]]) / n_q
        live = weight > 0
        tokens, weight, item, src = tokens[live], weight[live], item[live], src[live]
        if eps is not None:
            eps = eps[live]
    return tokens, eps, weight, item


def sdtt_targets(
    teacher: DenoiserParams,
    tokens: np.ndarray,
    noise: np.ndarray | None,
    t,
    s,
    inner_steps: int,
    schedule: Schedule,
    noise_spec: NoiseSpec | None = None,
    mode: str = "exact",
    rng: Rng | None = None,
    n_eps_quad: int = 64,
    mc_rollouts: int = 256,
    capacity: int = DEFAULT_CAPACITY,
) -> np.ndarray:
    """Per-position distribution at time s after ``inner_steps`` teacher steps.

    Returns (B, L, N + 1): token masses, then the aggregated mask mass.  All
    rollouts start from the same latent state, including its noise vectors.
    ``exact`` enumerates every branch, integrating fresh-noise branches over
    ``n_eps_quad`` shared draws; ``monte_carlo`` averages sampled rollouts.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    b = tokens.shape[0]
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64).reshape(tokens.shape + (-1,))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)).copy()
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (b,)).copy()
    if np.any(s >= t):
        raise DomainError("need s < t")
    if inner_steps < 1:
        raise DomainError("inner_steps must be >= 1")
    rng = rng or Rng(0)
    if mode == "exact":
        return _targets_exact(teacher, tokens, noise, t, s, inner_steps, schedule, noise_spec, rng, n_eps_quad, capacity)
    if mode == "monte_carlo":
        return _targets_mc(teacher, tokens, noise, t, s, inner_steps, schedule, noise_spec, rng, mc_rollouts)
    raise DomainError(f"unknown mode {mode!r}")


def _targets_exact(teacher, tokens, noise, t, s, inner, schedule, noise_spec, rng, n_q, capacity):
    b, length = tokens.shape
    n_data = teacher.n_data
    mask_id = teacher.mask_index
    use_noise = teacher.kind == IMDM
    n_masked = int((tokens == mask_id).sum(axis=1).max())
    branch = n_data + 1 + (n_q if use_noise else 0)
    est = b * branch ** (n_masked * (inner - 1))
    if est > capacity:
        raise CapacityError(f"exact SDTT targets would enumerate ~{est} states (capacity {capacity})")
    quad = noise_spec.sample(rng.gen, (n_q,)) if use_noise else None
    scale = noise_spec.scale if use_noise else 1.0
    taus, alphas = _inner_alphas(schedule, t, s, inner)
    cur_tok = tokens.copy()
    cur_eps = None if noise is None else noise.copy()
    weight = np.ones(b)
    item = np.arange(b)
    for k in range(inner):
        a_t, a_s = alphas[:, k], alphas[:, k + 1]
        pu = np.array([unmask_prob(x, y) for x, y in zip(a_s, a_t)])
        pm = 1.0 - pu
        pk = np.array([keep_prob(x, y) for x, y in zip(a_s, a_t)])
        probs = predict(cur_tok, cur_eps, taus[item, k], teacher, scale=scale)
        if k < inner - 1:
            cur_tok, cur_eps, weight, item = _expand(cur_tok, cur_eps, weight, item, probs, pu, pm, pk, mask_id, quad)
            continue
        out = np.zeros((b, length, n_data + 1))
        masked = cur_tok == mask_id
        contrib = np.zeros((cur_tok.shape[0], length, n_data + 1))
        contrib[..., :n_data] = pu[item][:, None, None] * probs
        contrib[..., n_data] = pm[item][:, None]
        onehot = np.zeros_like(contrib)
        np.put_along_axis(onehot, np.where(masked, 0, cur_tok)[..., None], 1.0, axis=-1)
        contrib = np.where(masked[..., None], contrib, onehot)
        np.add.at(out, item, weight[:, None, None] * contrib)
        return out


def _targets_mc(teacher, tokens, noise, t, s, inner, schedule, noise_spec, rng, m):
    b, length = tokens.shape
    n_data = teacher.n_data
    mask_id = teacher.mask_index
    use_noise = teacher.kind == IMDM
    scale = noise_spec.scale if use_noise else 1.0
    g = rng.gen
    taus, alphas = _inner_alphas(schedule, t, s, inner)
    item = np.repeat(np.arange(b), m)
    cur = tokens[item].copy()
    eps = noise[item].copy() if use_noise else None
    for k in range(inner):
        a_t, a_s = alphas[item, k], alphas[item, k + 1]
        pu = np.where(a_t >= 1.0, 1.0, (a_s - a_t) / np.where(a_t >= 1.0, 1.0, 1.0 - a_t))
        probs = predict(cur, eps, taus[item, k], teacher, scale=scale)
        masked = cur == mask_id
        unmask = masked & (g.random(cur.shape) < pu[:, None])
        drawn = _accel.inverse_cdf(probs.reshape(-1, n_data), g.random(cur.size)).reshape(cur.shape)
        cur = np.where(unmask, drawn, cur)
        if use_noise:
            eps[unmask] = np.nan
            pk = np.where(a_s <= 0.0, 1.0, a_t / np.where(a_s <= 0.0, 1.0, a_s))
            still = masked & ~unmask
            refresh = still & (g.random(cur.shape) >= pk[:, None])
            fresh = noise_spec.sample(g, cur.shape)
            eps[refresh] = fresh[refresh]
    onehot = np.zeros((cur.shape[0], length, n_data + 1))
    np.put_along_axis(onehot, cur[..., None], 1.0, axis=-1)
    return onehot.reshape(b, m, length, n_data + 1).mean(axis=1)


# ---------------------------------------------------------------------------
# SDTT rounds
# ---------------------------------------------------------------------------


def _sdtt_batch(dataset, schedule, noise_spec, n_student, batch_size, rng):
    g = rng.gen
    grid = make_grid(n_student)
    idx = g.choice(len(dataset.weights), size=batch_size, p=dataset.weights)
    x = dataset.sequences[idx]
    k = g.integers(n_student, size=batch_size)
    knots = np.asarray(grid.knots)
    t, s = knots[k], knots[k + 1]
    alpha = np.array([effective_alpha(schedule, float(v)) for v in t])
    masked = g.random(x.shape) < (1.0 - alpha)[:, None]
    tokens = np.where(masked, dataset.n_data, x)
    noise = None
    if noise_spec is not None:
        noise = noise_spec.sample(g, x.shape)
        noise[~masked] = np.nan
    return tokens, noise, t, s


def sdtt_round(
    student: DenoiserParams,
    teacher: DenoiserParams,
    cfg: DistillConfig,
    dataset: DatasetSpec,
    schedule: Schedule,
    noise_spec: NoiseSpec | None = None,
    round_index: int = 0,
):
    """One round: the student's single step matches ``inner_steps`` teacher steps.

    Returns ``(student', loss_trace)``.
    """
    if student.kind != teacher.kind or student.length != teacher.length or student.n_data != teacher.n_data:
        raise DomainError("student and teacher must share the architecture family")
    tc = cfg.train
    student = student.copy()
    opt = Adam(student, tc.learning_rate, tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
    n_student = cfg.student_steps(round_index)
    root = Rng(tc.seed, 0x5D77 + round_index)
    scale = noise_spec.scale if noise_spec is not None else 1.0
    trace, window = [], []
    initial = None
    bad_run = 0
    for it in range(cfg.iterations_per_round):
        r = root.split(it)
        tokens, noise, t, s = _sdtt_batch(dataset, schedule, noise_spec, n_student, tc.batch_size, r)
        target = sdtt_targets(
            teacher, tokens, noise, t, s, cfg.inner_steps, schedule, noise_spec,
            mode=cfg.target_mode, rng=r.split(1), n_eps_quad=cfg.n_eps_quad, mc_rollouts=cfg.mc_rollouts,
        )
        a_t = np.array([effective_alpha(schedule, float(v)) for v in t])
        a_s = np.array([effective_alpha(schedule, float(v)) for v in s])
        pu = np.array([unmask_prob(x, y) for x, y in zip(a_s, a_t)])
        loss, grads = kl_loss_and_grads(tokens, noise, t, target[..., :-1], pu, student, scale=scale)
        if not np.isfinite(loss):
            raise TrainingAbort(f"non-finite SDTT loss at round {round_index} iteration {it}")
        if initial is None:
            initial = max(loss, 1e-12)
        bad_run = bad_run + 1 if loss > 10 * initial else 0
        if bad_run >= 1000:
            raise TrainingAbort(f"SDTT diverged: loss {loss:.4g} > 10x initial {initial:.4g} for 1000 steps")
        opt.step(student, grads)
        window.append(loss)
        if (it + 1) % tc.eval_every == 0 or it + 1 == cfg.iterations_per_round:
            trace.append((it + 1, float(np.mean(window))))
            window.clear()
    return student, trace


def sdtt(teacher, cfg: DistillConfig, dataset, schedule, noise_spec=None):
    """Run ``cfg.rounds`` rounds; each round's student becomes the next teacher."""
    student = teacher.copy()
    history = []
    for r in range(cfg.rounds):
        student, trace = sdtt_round(student, student, cfg, dataset, schedule, noise_spec, r)
        history.append({"round": r, "student_steps": cfg.student_steps(r), "trace": trace})
    return student, history


# ---------------------------------------------------------------------------
# ReDi
# ---------------------------------------------------------------------------


def redi_build_coupling(
    teacher: DenoiserParams,
    steps: int,
    n_pairs: int,
    rng: Rng,
    schedule: Schedule,
    noise_spec: NoiseSpec | None = None,
    rule: str = NOISE_DRIVEN,
    teacher_id: str = "",
) -> CouplingSet:
    """Generate (noise, sequence) pairs with the teacher sampler.

    Every pair stores, per position, the noise that position held when it
    was unmasked.  Under ``noise_driven`` each position's noise is kept for
    the whole trajectory and also supplies the uniforms for its unmask time
    and token draw, so the sequence is a deterministic function of the
    stored noise.  Under ``final_eps`` the ordinary stochastic sampler runs.
    """
    if steps < 2:
        raise DomainError("coupling needs a multi-step teacher (steps >= 2)")
    use_noise = teacher.kind == IMDM
    d = noise_spec.dim if use_noise else 0
    if n_pairs == 0:
        empty_noise = np.zeros((0, teacher.length, d)) if use_noise else None
        return CouplingSet(np.zeros((0, teacher.length), dtype=np.int64), empty_noise, teacher_id, steps, rng.seed, rule)
    cfg = DecodeConfig(steps, "imdm" if use_noise else "mdm", teacher.length, noise_driven=(rule == NOISE_DRIVEN))
    out = decode_arrays(teacher, cfg, [rng.split(i) for i in range(n_pairs)], schedule, noise_spec)
    return CouplingSet(out.tokens, out.final_noise, teacher_id, steps, rng.seed, rule)


def redi_train(
    student: DenoiserParams,
    coupling: CouplingSet,
    config: TrainConfig,
    schedule: Schedule,
    noise_spec: NoiseSpec | None = None,
):
    """NELBO training with the data replaced by the coupling.

    Positions that get masked reuse the noise stored with their pair.
    """
    if len(coupling) == 0:
        raise DomainError("empty coupling")
    dataset = DatasetSpec.explicit(student.n_data, coupling.tokens)
    stored = coupling.noise if student.kind == IMDM else None
    return train(student, config, dataset, schedule, noise_spec if student.kind == IMDM else None, stored_noise=stored)


def combined_pipeline(
    base: DenoiserParams,
    cfg: DistillConfig,
    dataset: DatasetSpec,
    schedule: Schedule,
    noise_spec: NoiseSpec | None = None,
    redi_train_config: TrainConfig | None = None,
    seed: int = 0,
):
    """SDTT rounds, then ReDi on the SDTT student.  Returns (student, stages)."""
    stages = {"base": base}
    student, history = sdtt(base, cfg, dataset, schedule, noise_spec)
    stages["sdtt"] = student
    stages["sdtt_history"] = history
    if cfg.coupling_size == 0:
        stages["final"] = student
        return student, stages
    coupling = redi_build_coupling(
        student, cfg.coupling_steps, cfg.coupling_size, Rng(seed, 0xC0C0), schedule, noise_spec,
        rule=cfg.coupling_rule, teacher_id="sdtt",
    )
    stages["coupling"] = coupling
    result = redi_train(student, coupling, redi_train_config or cfg.train, schedule, noise_spec)
    stages["redi_trace"] = result.trace
    stages["final"] = result.params
    return result.params, stages
