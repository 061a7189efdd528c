"""Closed-form forward marginals, posteriors and Rao-Blackwellized NELBO terms.

State indexing: data tokens are ``0..N-1``.  The absorbing mask (MDM) and the
aggregated latent-mask symbol (IMDM) both use index ``N``.  Finite priors over
an extended state space put their extra states at ``N..K-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Categorical, DomainError, InfeasibleStateError, Schedule

MASK_ABSORBING = "mask"
UNIFORM = "uniform"
LATENT_MASK = "latent_mask"


@dataclass(frozen=True)
class PriorSpec:
    """Prior of the forward process.

    ``mask``: all mass on the single absorbing token (K = N + 1).
    ``uniform``: 1/K on each of K states, data tokens being the first N.
    ``latent_mask``: uniform over M latent mask states, zero on data
    (K = N + M).  ``n_mask=None`` is the M -> infinity limit, where the mask
    states are represented by one aggregated symbol plus a noise vector.
    """

    kind: str
    n_data: int
    n_states: int | None = None
    n_mask: int | None = None

    def __post_init__(self):
        if self.n_data < 2:
            raise DomainError("n_data must be >= 2")
        if self.kind == UNIFORM:
            if self.n_states is None or self.n_states < max(2, self.n_data):
                raise DomainError("uniform prior needs n_states >= n_data")
        elif self.kind == LATENT_MASK:
            if self.n_mask is not None and self.n_mask < 1:
                raise DomainError("n_mask must be >= 1")
        elif self.kind != MASK_ABSORBING:
            raise DomainError(f"unknown prior kind {self.kind!r}")

    @classmethod
    def mask(cls, n_data: int) -> "PriorSpec":
        return cls(MASK_ABSORBING, n_data)

    @classmethod
    def uniform(cls, n_data: int, n_states: int) -> "PriorSpec":
        return cls(UNIFORM, n_data, n_states=n_states)

    @classmethod
    def latent_mask(cls, n_data: int, n_mask: int | None = None) -> "PriorSpec":
        return cls(LATENT_MASK, n_data, n_mask=n_mask)

    @property
    def is_finite(self) -> bool:
        return not (self.kind == LATENT_MASK and self.n_mask is None)

    @property
    def size(self) -> int:
        """Length of the support vector (aggregated for the latent-mask limit)."""
        if self.kind == MASK_ABSORBING:
            return self.n_data + 1
        if self.kind == UNIFORM:
            return self.n_states
        if self.n_mask is None:
            return self.n_data + 1
        return self.n_data + self.n_mask

    def vector(self) -> np.ndarray:
        """The prior probability vector pi over the support."""
        pi = np.zeros(self.size)
        if self.kind == MASK_ABSORBING:
            pi[self.n_data] = 1.0
        elif self.kind == UNIFORM:
            pi[:] = 1.0 / self.n_states
        elif self.n_mask is None:
            pi[self.n_data] = 1.0
        else:
            pi[self.n_data:] = 1.0 / self.n_mask
        return pi


@dataclass(frozen=True)
class ImdmPosterior:
    """Reverse kernel of one IMDM position.

    ``unmask_probs`` holds the (unnormalized) mass on each data token;
    ``keep_mask_prob`` is the mass of staying masked with the same noise,
    ``fresh_mask_prob`` the mass of staying masked with a redrawn noise.
    """

    unmask_probs: np.ndarray
    keep_mask_prob: float
    fresh_mask_prob: float

    def __post_init__(self):
        total = float(self.unmask_probs.sum()) + self.keep_mask_prob + self.fresh_mask_prob
        if abs(total - 1.0) > 1e-12:
            raise AssertionError(f"IMDM posterior mass {total!r} != 1")

    @property
    def unmask_total(self) -> float:
        return float(self.unmask_probs.sum())

    @property
    def mask_total(self) -> float:
        return self.keep_mask_prob + self.fresh_mask_prob


def _check_alphas(alpha_s: float, alpha_t: float) -> None:
    if not (0.0 < alpha_s < 1.0 and 0.0 < alpha_t < 1.0):
        raise DomainError(f"alphas must lie in (0, 1), got s={alpha_s}, t={alpha_t}")
    if alpha_t > alpha_s:
        raise DomainError("need alpha_t <= alpha_s (s < t)")


def _check_token(x: int, n_data: int) -> int:
    x = int(x)
    if not 0 <= x < n_data:
        raise DomainError(f"data token {x} outside [0, {n_data})")
    return x


def _as_probs(x_pred, n: int | None = None) -> np.ndarray:
    p = x_pred.probs if isinstance(x_pred, Categorical) else np.asarray(x_pred, dtype=np.float64)
    if p.ndim != 1 or (n is not None and p.size != n):
        raise DomainError("prediction has the wrong shape")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError("prediction is not a normalized categorical")
    return p


def forward_marginal(x: int, alpha_t: float, prior: PriorSpec) -> Categorical:
    """q(z_t | x) = alpha_t * onehot(x) + (1 - alpha_t) * pi.

    For the latent-mask limit the mask side is the single aggregated symbol
    at index N; a masked position additionally carries a fresh noise vector
    drawn from the model's ``NoiseSpec``.
    """
    if not 0.0 < alpha_t < 1.0:
        raise DomainError(f"alpha_t must lie in (0, 1), got {alpha_t}")
    x = _check_token(x, prior.n_data)
    probs = (1.0 - alpha_t) * prior.vector()
    probs[x] += alpha_t
    return Categorical(probs)


def posterior_general(z_t: int, x: int, alpha_s: float, alpha_t: float, prior: PriorSpec) -> Categorical:
    """Exact q(z_s | z_t, x) for a finite prior."""
    _check_alphas(alpha_s, alpha_t)
    if not prior.is_finite:
        raise DomainError("posterior_general needs a finite prior")
    x = _check_token(x, prior.n_data)
    k = prior.size
    z_t = int(z_t)
    if not 0 <= z_t < k:
        raise DomainError(f"state {z_t} outside [0, {k})")
    pi = prior.vector()
    zt_vec = np.zeros(k)
    zt_vec[z_t] = 1.0
    x_vec = np.zeros(k)
    x_vec[x] = 1.0
    a_ts = alpha_t / alpha_s
    left = a_ts * zt_vec + (1.0 - a_ts) * pi[z_t]
    right = alpha_s * x_vec + (1.0 - alpha_s) * pi
    denom = alpha_t * x_vec[z_t] + (1.0 - alpha_t) * pi[z_t]
    if denom <= 0.0:
        raise InfeasibleStateError(f"state {z_t} is unreachable from token {x} under this prior")
    probs = left * right / denom
    return Categorical(probs / probs.sum())


def posterior_mdm(z_t: int, x_pred, alpha_s: float, alpha_t: float) -> Categorical:
    """MDM reverse kernel over data tokens plus the mask (last entry)."""
    _check_alphas(alpha_s, alpha_t)
    p = _as_probs(x_pred)
    n = p.size
    z_t = int(z_t)
    out = np.zeros(n + 1)
    if z_t < n:
        out[z_t] = 1.0
        return Categorical(out)
    if z_t != n:
        raise DomainError(f"state {z_t} is neither a data token nor the mask")
    out[n] = (1.0 - alpha_s) / (1.0 - alpha_t)
    out[:n] = (alpha_s - alpha_t) / (1.0 - alpha_t) * p
    return Categorical(out)


def posterior_imdm(z_t: int, x_pred, alpha_s: float, alpha_t: float) -> ImdmPosterior:
    """IMDM reverse kernel for one position.

    ``z_t == N`` denotes any latent mask state; the keep/fresh split acts on
    the noise vector the state carries.
    """
    _check_alphas(alpha_s, alpha_t)
    p = _as_probs(x_pred)
    n = p.size
    z_t = int(z_t)
    if z_t < n:
        carry = np.zeros(n)
        carry[z_t] = 1.0
        return ImdmPosterior(carry, 0.0, 0.0)
    if z_t != n:
        raise DomainError(f"state {z_t} is neither a data token nor a mask state")
    a_ts = alpha_t / alpha_s
    mask_mass = (1.0 - alpha_s) / (1.0 - alpha_t)
    keep = a_ts * mask_mass
    fresh = (1.0 - a_ts) * mask_mass
    unmask = (alpha_s - alpha_t) / (1.0 - alpha_t) * p
    # absorb last-ulp rounding into the fresh branch so the total is 1
    fresh += 1.0 - (unmask.sum() + keep + fresh)
    return ImdmPosterior(unmask, keep, fresh)


def mdm_nelbo_term(x_pred, x_true: int, t: float, schedule: Schedule) -> float:
    """alpha'(t) / (1 - alpha(t)) * log <x_pred, x_true> for a masked position.

    Returns ``inf`` when the prediction gives the true token zero mass.
    """
    p = _as_probs(x_pred)
    x_true = _check_token(x_true, p.size)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    alpha = float(schedule.alpha(t))
    alpha_prime = float(schedule.alpha_prime(t))
    q = p[x_true]
    if q <= 0.0:
        return math.inf
    return alpha_prime / (1.0 - alpha) * math.log(q) + 0.0


# The IMDM objective has exactly the MDM form.
imdm_nelbo_term = mdm_nelbo_term


def uniform_nelbo_term(
    n_states: int, x_pred, x_true: int, z_t: int, alpha_t: float, schedule: Schedule
) -> float:
    """Rao-Blackwellized NELBO term of uniform diffusion over ``n_states`` states.

    Data tokens are states ``0..N-1`` (N = len(x_pred)); the remaining
    ``n_states - N`` states carry no model mass.  The sum over the mask-side
    states is aggregated in closed form so very large ``n_states`` is cheap.
    """
    p = _as_probs(x_pred)
    n = p.size
    k = int(n_states)
    if k < max(2, n):
        raise DomainError("n_states must be >= max(2, len(x_pred))")
    x_true = _check_token(x_true, n)
    z_t = int(z_t)
    if not 0 <= z_t < k:
        raise DomainError(f"state {z_t} outside [0, {k})")
    if not 0.0 < alpha_t < 1.0:
        raise DomainError("alpha_t must lie in (0, 1)")
    if z_t == x_true:
        return 0.0
    t = float(schedule.t_of_alpha(alpha_t))
    alpha_prime = float(schedule.alpha_prime(t))
    a = alpha_t
    xbar = np.full(n, 1.0 - a)
    xbar[x_true] += k * a
    xbar_th = k * a * p + (1.0 - a)
    n_mask = k - n
    if z_t < n:
        xi, xti = xbar[z_t], xbar_th[z_t]
    else:
        xi = xti = 1.0 - a
    ratio_r = xbar / xi
    ratio_q = xbar_th / xti
    data_sum = float(np.sum(ratio_r * np.log(ratio_r / ratio_q)))
    # every mask-side state has xbar = xbar_th = 1 - a
    r_mask = (1.0 - a) / xi
    q_mask = (1.0 - a) / xti
    mask_sum = n_mask * r_mask * math.log(r_mask / q_mask) if n_mask else 0.0
    bracket = k / xi - k / xti - (data_sum + mask_sum)
    return alpha_prime / (k * a) * bracket + 0.0


def unmask_prob(alpha_s: float, alpha_t: float) -> float:
    """Probability that a position masked at t is unmasked by s."""
    if alpha_t >= 1.0:
        return 1.0
    return (alpha_s - alpha_t) / (1.0 - alpha_t)


def keep_prob(alpha_s: float, alpha_t: float) -> float:
    """alpha_{t|s}: probability a still-masked position keeps its noise."""
    if alpha_s <= 0.0:
        return 1.0
    return alpha_t / alpha_s
