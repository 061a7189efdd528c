"""Foundational types: vocabulary, schedule, time grid, RNG streams, categoricals."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence as _Seq

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class InfeasibleStateError(ValueError):
    """The requested state has zero probability under the process."""


class CapacityError(RuntimeError):
    """An exact enumeration would exceed the configured state budget."""


class TrainingAbort(RuntimeError):
    """Training produced a non-finite or diverging loss."""


DEFAULT_CAPACITY = 1_000_000


@dataclass(frozen=True)
class Vocabulary:
    n_data: int
    has_mask_token: bool = True

    def __post_init__(self):
        if self.n_data < 2:
            raise DomainError(f"n_data must be >= 2, got {self.n_data}")

    @property
    def mask_index(self) -> int:
        """Index of the (aggregated) mask state; always past the data ids."""
        return self.n_data

    @property
    def size(self) -> int:
        return self.n_data + 1 if self.has_mask_token else self.n_data


@dataclass(frozen=True)
class Schedule:
    """Linear schedule alpha(t) = 1 - t, clipped to [clip_eps, 1 - clip_eps]."""

    kind: str = "linear"
    clip_eps: float = 1e-4

    def __post_init__(self):
        if self.kind != "linear":
            raise DomainError(f"unsupported schedule kind {self.kind!r}")
        if not 0.0 < self.clip_eps < 0.5:
            raise DomainError("clip_eps must lie in (0, 0.5)")

    def alpha(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.clip(1.0 - t, self.clip_eps, 1.0 - self.clip_eps)

    def alpha_prime(self, t):
        t = np.asarray(t, dtype=np.float64)
        raw = 1.0 - t
        inside = (raw >= self.clip_eps) & (raw <= 1.0 - self.clip_eps)
        return np.where(inside, -1.0, 0.0)

    def t_of_alpha(self, alpha):
        return 1.0 - np.asarray(alpha, dtype=np.float64)


def alpha_at(schedule: Schedule, t: float) -> tuple[float, float]:
    """Return ``(alpha(t), alpha'(t))`` for a scalar time in [0, 1]."""
    if not (0.0 <= t <= 1.0) or not np.isfinite(t):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    return float(schedule.alpha(t)), float(schedule.alpha_prime(t))


def effective_alpha(schedule: Schedule, t: float) -> float:
    """Alpha used by reverse-process steps.

    The reverse process starts from an all-masked state at t=1 and the final
    step to t=0 unmasks everything, so the endpoints are exact (0 and 1)
    rather than clipped.
    """
    if t >= 1.0:
        return 0.0
    if t <= 0.0:
        return 1.0
    return float(schedule.alpha(t))


@dataclass(frozen=True)
class TimeGrid:
    knots: tuple[float, ...]

    def __post_init__(self):
        k = self.knots
        if len(k) < 2 or k[0] != 1.0 or k[-1] != 0.0:
            raise DomainError("time grid must run from exactly 1 to exactly 0")
        if any(a <= b for a, b in zip(k, k[1:])):
            raise DomainError("time grid knots must be strictly decreasing")

    @property
    def steps(self) -> int:
        return len(self.knots) - 1

    def pairs(self):
        """Iterate ``(t, s)`` step boundaries from t=1 down to s=0."""
        return zip(self.knots[:-1], self.knots[1:])


def make_grid(steps: int) -> TimeGrid:
    if int(steps) != steps or steps < 1:
        raise DomainError(f"steps must be a positive integer, got {steps}")
    steps = int(steps)
    knots = [1.0 - k / steps for k in range(steps + 1)]
    knots[0], knots[-1] = 1.0, 0.0
    return TimeGrid(tuple(knots))


@dataclass(frozen=True)
class Rng:
    """Counter-based (Philox) stream keyed by ``(seed, stream)``.

    The draw sequence depends only on the key, so results do not depend on
    how work is divided among workers.  ``split(i)`` derives child streams by
    hashing ``(seed, stream, i)`` through ``SeedSequence``.
    """

    seed: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        key = np.array([self.seed % 2**64, self.stream % 2**64], dtype=np.uint64)
        object.__setattr__(self, "_gen", np.random.Generator(np.random.Philox(key=key)))

    @property
    def gen(self) -> np.random.Generator:
        return self._gen

    def split(self, i: int) -> "Rng":
        ss = np.random.SeedSequence([self.seed % 2**64, self.stream % 2**64, int(i)])
        child = int(ss.generate_state(1, dtype=np.uint64)[0])
        return Rng(self.seed, child)

    def random(self, size=None):
        return self._gen.random(size)


@dataclass(frozen=True)
class Categorical:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise DomainError("categorical probabilities must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise DomainError("categorical probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise DomainError(f"categorical probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.size

    def __getitem__(self, k):
        return self.probs[k]


@dataclass(frozen=True)
class Sequence:
    tokens: tuple[int, ...]

    @classmethod
    def checked(cls, tokens: _Seq[int], vocab: Vocabulary) -> "Sequence":
        toks = tuple(int(t) for t in tokens)
        if any(t < 0 or t >= vocab.n_data for t in toks):
            raise DomainError(f"token ids must lie in [0, {vocab.n_data}), got {toks}")
        return cls(toks)

    def __len__(self):
        return len(self.tokens)
