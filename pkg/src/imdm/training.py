"""Pretraining on the Rao-Blackwellized NELBO with Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, Rng, Schedule, TrainingAbort
from .denoiser import IMDM, LOG_FLOOR, Batch, DenoiserParams, NoiseSpec, loss_and_grads

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20_000
    batch_size: int = 256
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 500
    log_floor: float = LOG_FLOOR

    def __post_init__(self):
        if self.iterations < 0:
            raise DomainError("iterations must be >= 0")
        if self.batch_size < 1 or self.eval_every < 1:
            raise DomainError("batch_size and eval_every must be positive")
        if not (self.learning_rate > 0 and self.adam_eps > 0):
            raise DomainError("learning_rate and adam_eps must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise DomainError("Adam betas must lie in (0, 1)")


@dataclass(frozen=True)
class DatasetSpec:
    """A finite weighted set of length-L sequences over N data tokens."""

    kind: str
    n_data: int
    sequences: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        seqs = np.asarray(self.sequences, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if seqs.ndim != 2 or seqs.shape[0] == 0 or seqs.shape[0] != w.shape[0]:
            raise DomainError("sequences must be (S, L) with one weight each")
        if np.any(seqs < 0) or np.any(seqs >= self.n_data):
            raise DomainError("sequence tokens out of range")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DomainError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "sequences", seqs)
        object.__setattr__(self, "weights", w)

    @classmethod
    def synthetic_pair(cls) -> "DatasetSpec":
        """Binary length-2 sequences {00, 11}, each with probability 1/2."""
        return cls("synthetic_pair", 2, np.array([[0, 0], [1, 1]]), np.array([0.5, 0.5]))

    @classmethod
    def explicit(cls, n_data: int, sequences, weights=None) -> "DatasetSpec":
        seqs = np.asarray(sequences, dtype=np.int64)
        if weights is None:
            weights = np.full(len(seqs), 1.0 / max(len(seqs), 1))
        return cls("explicit_list", n_data, seqs, np.asarray(weights, dtype=np.float64))

    @property
    def length(self) -> int:
        return self.sequences.shape[1]

    def joint(self) -> np.ndarray:
        """Probability table over N**L outcomes, lexicographic order."""
        n, length = self.n_data, self.length
        table = np.zeros(n**length)
        codes = self.sequences @ (n ** np.arange(length - 1, -1, -1))
        np.add.at(table, codes, self.weights)
        return table


def make_batch(
    dataset: DatasetSpec,
    schedule: Schedule,
    batch_size: int,
    rng: Rng,
    noise_spec: NoiseSpec | None = None,
    stored_noise: np.ndarray | None = None,
    t: float | None = None,
) -> Batch:
    """Sample x ~ dataset, t ~ U(0, 1) and forward-noise each position.

    Masked positions get a fresh noise vector (IMDM), or the row of
    ``stored_noise`` aligned with the sampled sequence when given.
    """
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    g = rng.gen
    idx = g.choice(len(dataset.weights), size=batch_size, p=dataset.weights)
    x = dataset.sequences[idx]
    tt = g.random(batch_size) if t is None else np.full(batch_size, float(t))
    alpha = schedule.alpha(tt)
    masked = g.random(x.shape) < (1.0 - alpha)[:, None]
    tokens = np.where(masked, dataset.n_data, x)
    noise = None
    if noise_spec is not None:
        if stored_noise is not None:
            noise = np.array(stored_noise[idx], dtype=np.float64)
        else:
            noise = noise_spec.sample(g, x.shape)
        noise[~masked] = np.nan
    return Batch(tokens, noise, tt, x)


class Adam:
    def __init__(self, params: DenoiserParams, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.step_count = 0

    def step(self, params: DenoiserParams, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params.arrays[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: DenoiserParams
    trace: list[tuple[int, float]] = field(default_factory=list)


def train(
    params: DenoiserParams,
    config: TrainConfig,
    dataset: DatasetSpec,
    schedule: Schedule,
    noise_spec: NoiseSpec | None = None,
    stored_noise: np.ndarray | None = None,
) -> TrainResult:
    """Minimize the NELBO with Adam; returns new params and a loss trace.

    Batch ``i`` is drawn from stream ``Rng(seed).split(i)``, so a run is
    reproducible from the config alone.
    """
    if (params.kind == IMDM) != (noise_spec is not None):
        raise DomainError("noise_spec must be given exactly for IMDM parameters")
    if dataset.length != params.length or dataset.n_data != params.n_data:
        raise DomainError("dataset shape does not match the model")
    params = params.copy()
    opt = Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    root = Rng(config.seed, 0x7A11)
    scale = noise_spec.scale if noise_spec is not None else 1.0
    trace = []
    window = []
    for it in range(config.iterations):
        batch = make_batch(dataset, schedule, config.batch_size, root.split(it), noise_spec, stored_noise)
        loss, grads = loss_and_grads(batch, params, schedule, log_floor=config.log_floor, scale=scale)
        if not np.isfinite(loss):
            raise TrainingAbort(f"non-finite loss {loss!r} at iteration {it}")
        opt.step(params, grads)
        if not params.all_finite():
            raise TrainingAbort(f"non-finite parameters after iteration {it}")
        window.append(loss)
        if (it + 1) % config.eval_every == 0 or it + 1 == config.iterations:
            mean = float(np.mean(window))
            trace.append((it + 1, mean))
            window.clear()
            log.debug("iter %d loss %.5f", it + 1, mean)
    return TrainResult(params, trace)
