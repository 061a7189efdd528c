"""Few-step ancestral decoding for MDM and IMDM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .core import DomainError, Rng, Schedule, Sequence, effective_alpha, make_grid
from .denoiser import IMDM, DenoiserParams, NoiseSpec, predict
from .kernels import keep_prob, unmask_prob

CHUNK = 2048


@dataclass(frozen=True)
class DecodeConfig:
    steps: int
    mode: str
    length: int
    conditioning: dict[int, int] = field(default_factory=dict)
    seed: int = 0
    noise_driven: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise DomainError("steps must be >= 1")
        if self.mode not in ("mdm", "imdm"):
            raise DomainError(f"unknown mode {self.mode!r}")
        for pos in self.conditioning:
            if not 0 <= pos < self.length:
                raise DomainError(f"conditioned position {pos} out of range")


@dataclass
class DecodeOutput:
    tokens: np.ndarray
    final_noise: np.ndarray | None = None
    masks: np.ndarray | None = None
    keep_events: int = 0
    fresh_events: int = 0


def _validate(params: DenoiserParams, cfg: DecodeConfig, noise_spec: NoiseSpec | None):
    if cfg.length != params.length:
        raise DomainError("decode length does not match the model")
    if cfg.mode == "imdm" and params.kind != IMDM:
        raise DomainError("imdm decoding needs IMDM parameters")
    if params.kind == IMDM and noise_spec is None:
        raise DomainError("IMDM parameters need a noise spec")
    if cfg.noise_driven and params.kind == IMDM and noise_spec.dim < 2:
        raise DomainError("noise-driven decoding needs d_noise >= 2")
    for tok in cfg.conditioning.values():
        if not 0 <= tok < params.n_data:
            raise DomainError("conditioning token out of range")


def _decode_chunk(params, cfg, gens, schedule, noise_spec, record):
    n = len(gens)
    length = cfg.length
    steps = cfg.steps
    use_noise = params.kind == IMDM
    mask_id = params.mask_index
    grid = make_grid(steps)

    # fixed draw budget per trajectory, so results do not depend on chunking
    if cfg.noise_driven:
        unif = None
        if use_noise:
            eps = np.stack([noise_spec.sample(g, (length,)) for g in gens])
            drive = noise_spec.to_unit(eps[..., :2])
        else:
            eps = None
            drive = np.stack([g.random((length, 2)) for g in gens])
    else:
        unif = np.stack([g.random((steps, 3, length)) for g in gens])
        if use_noise:
            fresh = np.stack([noise_spec.sample(g, (steps + 1, length)) for g in gens])
            eps = fresh[:, 0].copy()
        else:
            eps = None

    tokens = np.full((n, length), mask_id, dtype=np.int64)
    for pos, tok in cfg.conditioning.items():
        tokens[:, pos] = tok
    free = np.ones(length, dtype=bool)
    free[list(cfg.conditioning)] = False
    if use_noise:
        eps[:, ~free] = np.nan
    final_noise = np.full_like(eps, np.nan) if use_noise else None
    masks = np.zeros((n, steps + 1, length), dtype=bool) if record else None
    keep_events = fresh_events = 0

    for k, (t, s) in enumerate(grid.pairs()):
        masked = tokens == mask_id
        if record:
            masks[:, k] = masked
        if not masked.any():
            continue
        a_t = effective_alpha(schedule, t)
        a_s = effective_alpha(schedule, s)
        probs = predict(tokens, eps, t, params, scale=noise_spec.scale if use_noise else 1.0)
        if cfg.noise_driven:
            unmask = masked & (drive[..., 1] < a_s)
            u_tok = drive[..., 0]
        else:
            unmask = masked & (unif[:, k, 0] < unmask_prob(a_s, a_t))
            u_tok = unif[:, k, 1]
        rows, cols = np.nonzero(unmask)
        if rows.size:
            tokens[rows, cols] = _accel.inverse_cdf(probs[rows, cols], u_tok[rows, cols])
        if use_noise:
            final_noise[unmask] = eps[unmask]
            eps[unmask] = np.nan
            still = masked & ~unmask
            if not cfg.noise_driven:
                keep = still & (unif[:, k, 2] < keep_prob(a_s, a_t))
                refresh = still & ~keep
                eps[refresh] = fresh[:, k + 1][refresh]
                keep_events += int(keep.sum())
                fresh_events += int(refresh.sum())
    if record:
        masks[:, steps] = tokens == mask_id
    assert not np.any(tokens == mask_id), "decoding ended with masked positions"
    return DecodeOutput(tokens, final_noise, masks, keep_events, fresh_events)


def decode_arrays(
    params: DenoiserParams,
    cfg: DecodeConfig,
    rngs: list[Rng],
    schedule: Schedule,
    noise_spec: NoiseSpec | None = None,
    record: bool = False,
) -> DecodeOutput:
    """Decode one trajectory per stream in ``rngs``; vectorized over chunks."""
    _validate(params, cfg, noise_spec)
    outs = []
    for start in range(0, len(rngs), CHUNK):
        gens = [r.gen for r in rngs[start : start + CHUNK]]
        outs.append(_decode_chunk(params, cfg, gens, schedule, noise_spec, record))
    tokens = np.concatenate([o.tokens for o in outs])
    final_noise = None if outs[0].final_noise is None else np.concatenate([o.final_noise for o in outs])
    masks = np.concatenate([o.masks for o in outs]) if record else None
    return DecodeOutput(
        tokens,
        final_noise,
        masks,
        sum(o.keep_events for o in outs),
        sum(o.fresh_events for o in outs),
    )


def decode(params, cfg: DecodeConfig, rng: Rng, schedule: Schedule, noise_spec=None, record=False):
    """Decode one sequence.  Returns ``(Sequence, DecodeOutput)``."""
    out = decode_arrays(params, cfg, [rng], schedule, noise_spec, record)
    return Sequence(tuple(int(v) for v in out.tokens[0])), out


def decode_batch(params, cfg: DecodeConfig, n: int, rng: Rng, schedule: Schedule, noise_spec=None) -> list[Sequence]:
    """``n`` trajectories; trajectory ``i`` uses stream ``rng.split(i)``."""
    if n < 1:
        raise DomainError("n must be >= 1")
    out = decode_arrays(params, cfg, [rng.split(i) for i in range(n)], schedule, noise_spec)
    return [Sequence(tuple(int(v) for v in row)) for row in out.tokens]
