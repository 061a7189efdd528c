"""Per-position token predictor x_theta(z_t, t) with a noise-injected mask embedding.

Architecture: per-position embeddings (data token rows, or the mask row plus
``noise_mlp(eps * scale)`` for masked positions) are concatenated with a
scalar time feature, passed through two exact-GeLU layers, and mapped to
per-position logits.  Gradients are written out by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .core import DomainError, Rng, Schedule

MDM = "mdm"
IMDM = "imdm"

LOG_FLOOR = -30.0

_NOISE_KEYS = ("noise_w1", "noise_b1", "noise_w2", "noise_b2")


@dataclass(frozen=True)
class NoiseSpec:
    distribution: str = "uniform"
    dim: int = 8
    scale: float = 1.0

    def __post_init__(self):
        if self.distribution not in ("uniform", "gaussian"):
            raise DomainError(f"unknown noise distribution {self.distribution!r}")
        if self.dim < 1:
            raise DomainError("noise dim must be >= 1")
        if not self.scale > 0:
            raise DomainError("noise scale must be positive")

    def sample(self, gen: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
        size = tuple(shape) + (self.dim,)
        if self.distribution == "uniform":
            return gen.uniform(-1.0, 1.0, size)
        return gen.standard_normal(size)

    def to_unit(self, eps: np.ndarray) -> np.ndarray:
        """Map noise coordinates to [0, 1) through their own CDF."""
        if self.distribution == "uniform":
            u = 0.5 * (np.asarray(eps) + 1.0)
        else:
            u = _accel.std_normal_cdf(np.asarray(eps))
        return np.clip(u, 0.0, np.nextafter(1.0, 0.0))


@dataclass
class DenoiserParams:
    kind: str
    n_data: int
    length: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def d_model(self) -> int:
        return self.arrays["mask_emb"].shape[0]

    @property
    def width(self) -> int:
        return self.arrays["b1"].shape[0]

    @property
    def d_noise(self) -> int | None:
        if self.kind != IMDM:
            return None
        return self.arrays["noise_w1"].shape[0]

    @property
    def mask_index(self) -> int:
        return self.n_data

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.kind, self.n_data, self.length, {k: v.copy() for k, v in self.arrays.items()})

    def names(self) -> list[str]:
        return list(self.arrays)

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]


def init_params(n_data: int, length: int, rng: Rng, d_model: int = 16, width: int = 64) -> DenoiserParams:
    """Fresh MDM parameters."""
    if n_data < 2 or length < 1 or d_model < 1 or width < 1:
        raise DomainError("invalid denoiser dimensions")
    g = rng.gen
    fan_in = length * d_model
    arrays = {
        "tok_emb": g.normal(0.0, 1.0, (n_data, d_model)),
        "mask_emb": g.normal(0.0, 1.0, d_model),
        "w1": g.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, width)),
        "time_w": g.normal(0.0, 1.0, width),
        "b1": np.zeros(width),
        "w2": g.normal(0.0, 1.0 / np.sqrt(width), (width, width)),
        "b2": np.zeros(width),
        "w_out": g.normal(0.0, 1.0 / np.sqrt(width), (width, length * n_data)),
        "b_out": np.zeros(length * n_data),
    }
    return DenoiserParams(MDM, n_data, length, arrays)


def to_imdm(params: DenoiserParams, noise_spec: NoiseSpec, rng: Rng) -> DenoiserParams:
    """Wrap MDM weights with a noise MLP whose output layer starts at exactly 0."""
    if params.kind != MDM:
        raise DomainError("to_imdm expects MDM parameters")
    d = params.d_model
    hidden = 4 * d
    g = rng.gen
    arrays = {}
    for name, value in params.arrays.items():
        arrays[name] = value.copy()
        if name == "mask_emb":
            arrays["noise_w1"] = g.normal(0.0, 1.0 / np.sqrt(noise_spec.dim), (noise_spec.dim, hidden))
            arrays["noise_b1"] = g.normal(0.0, 0.5, hidden)
            arrays["noise_w2"] = np.zeros((hidden, d))
            arrays["noise_b2"] = np.zeros(d)
    return DenoiserParams(IMDM, params.n_data, params.length, arrays)


def _softmax(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - log_z
    return np.exp(logp), logp


def _noise_mlp(params: DenoiserParams, eps_scaled: np.ndarray):
    a = eps_scaled @ params["noise_w1"] + params["noise_b1"]
    h, dh = _accel.gelu(a)
    return h @ params["noise_w2"] + params["noise_b2"], h, dh


def embed(state: int, params: DenoiserParams, eps: np.ndarray | None = None, scale: float = 1.0) -> np.ndarray:
    """Embedding of one position: token row, or mask row plus noise MLP."""
    state = int(state)
    masked = state == params.mask_index
    if not masked and not 0 <= state < params.n_data:
        raise DomainError(f"state {state} out of range")
    if masked and params.kind == IMDM:
        if eps is None:
            raise DomainError("masked IMDM position needs a noise vector")
        eps = np.asarray(eps, dtype=np.float64).reshape(1, -1)
        out, _, _ = _noise_mlp(params, eps * scale)
        return params["mask_emb"] + out[0]
    if eps is not None:
        raise DomainError("noise vector given for a position that cannot carry one")
    if masked:
        return params["mask_emb"].copy()
    return params["tok_emb"][state].copy()


def _check_inputs(params: DenoiserParams, tokens: np.ndarray, noise: np.ndarray | None, t: np.ndarray):
    if tokens.ndim != 2 or tokens.shape[1] != params.length:
        raise DomainError(f"tokens must have shape (B, {params.length}), got {tokens.shape}")
    if np.any(tokens < 0) or np.any(tokens > params.mask_index):
        raise DomainError("token ids out of range")
    if t.shape != (tokens.shape[0],):
        raise DomainError("need one time per sequence")
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("t must lie in [0, 1]")
    masked = tokens == params.mask_index
    if params.kind == IMDM:
        if noise is None or noise.shape != tokens.shape + (params.d_noise,):
            raise DomainError("IMDM prediction needs noise of shape (B, L, d_noise)")
        if not np.all(np.isfinite(noise[masked])):
            raise DomainError("every masked position needs a finite noise vector")
        if not np.all(np.isnan(noise[~masked])):
            raise DomainError("unmasked positions must not carry noise (use NaN)")
    elif noise is not None:
        raise DomainError("MDM prediction takes no noise")
    return masked


def _forward(params: DenoiserParams, tokens, noise, t, scale):
    b, length = tokens.shape
    d = params.d_model
    masked = _check_inputs(params, tokens, noise, t)
    emb = np.empty((b, length, d))
    emb[~masked] = params["tok_emb"][tokens[~masked]]
    emb[masked] = params["mask_emb"]
    noise_cache = None
    if params.kind == IMDM and masked.any():
        e = noise[masked] * scale
        out, h, dh = _noise_mlp(params, e)
        emb[masked] += out
        noise_cache = (e, h, dh)
    h0 = emb.reshape(b, length * d)
    a1 = h0 @ params["w1"] + t[:, None] * params["time_w"] + params["b1"]
    h1, d1 = _accel.gelu(a1)
    a2 = h1 @ params["w2"] + params["b2"]
    h2, d2 = _accel.gelu(a2)
    logits = (h2 @ params["w_out"] + params["b_out"]).reshape(b, length, params.n_data)
    probs, logp = _softmax(logits)
    cache = dict(masked=masked, h0=h0, h1=h1, d1=d1, h2=h2, d2=d2, noise=noise_cache, t=t)
    return probs, logp, cache


def predict(tokens, noise, t, params: DenoiserParams, scale: float = 1.0) -> np.ndarray:
    """Per-position token probabilities.

    ``tokens`` is (B, L) or (L,) with the mask index for masked positions;
    ``noise`` is (B, L, d_noise) with NaN on unmasked positions (IMDM) or
    None (MDM); ``t`` is a scalar or (B,).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
        if noise is not None:
            noise = np.asarray(noise, dtype=np.float64)[None]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (tokens.shape[0],))
    probs, _, _ = _forward(params, tokens, None if noise is None else np.asarray(noise, dtype=np.float64), t, scale)
    return probs[0] if single else probs


@dataclass
class Batch:
    """Noised training items: latent tokens, noise, times and clean targets."""

    tokens: np.ndarray
    noise: np.ndarray | None
    t: np.ndarray
    x: np.ndarray

    @classmethod
    def from_items(cls, items) -> "Batch":
        items = list(items)
        if not items:
            raise DomainError("empty batch")
        tokens = np.stack([np.asarray(z, dtype=np.int64) for z, _, _, _ in items])
        noises = [n for _, n, _, _ in items]
        noise = None if noises[0] is None else np.stack([np.asarray(n, dtype=np.float64) for n in noises])
        t = np.array([float(tt) for _, _, tt, _ in items])
        x = np.stack([np.asarray(xx, dtype=np.int64) for _, _, _, xx in items])
        return cls(tokens, noise, t, x)

    def __len__(self):
        return self.tokens.shape[0]


def _backward(params: DenoiserParams, tokens, cache, dlogits) -> dict[str, np.ndarray]:
    b, length = tokens.shape
    d = params.d_model
    g = {}
    dl = dlogits.reshape(b, -1)
    g["w_out"] = cache["h2"].T @ dl
    g["b_out"] = dl.sum(axis=0)
    da2 = (dl @ params["w_out"].T) * cache["d2"]
    g["w2"] = cache["h1"].T @ da2
    g["b2"] = da2.sum(axis=0)
    da1 = (da2 @ params["w2"].T) * cache["d1"]
    g["w1"] = cache["h0"].T @ da1
    g["time_w"] = cache["t"] @ da1
    g["b1"] = da1.sum(axis=0)
    demb = (da1 @ params["w1"].T).reshape(b, length, d)
    masked = cache["masked"]
    g_tok = np.zeros_like(params["tok_emb"])
    np.add.at(g_tok, tokens[~masked], demb[~masked])
    g["tok_emb"] = g_tok
    g["mask_emb"] = demb[masked].sum(axis=0)
    if params.kind == IMDM:
        if cache["noise"] is None:
            for k in _NOISE_KEYS:
                g[k] = np.zeros_like(params[k])
        else:
            e, h, dh = cache["noise"]
            do = demb[masked]
            g["noise_w2"] = h.T @ do
            g["noise_b2"] = do.sum(axis=0)
            da = (do @ params["noise_w2"].T) * dh
            g["noise_w1"] = e.T @ da
            g["noise_b1"] = da.sum(axis=0)
    return {k: g[k] for k in params.arrays}


def nelbo_weight(schedule: Schedule, t: np.ndarray) -> np.ndarray:
    """-alpha'(t) / (1 - alpha(t)); non-negative."""
    return -schedule.alpha_prime(t) / (1.0 - schedule.alpha(t))


def loss_and_grads(
    batch: Batch,
    params: DenoiserParams,
    schedule: Schedule,
    log_floor: float = LOG_FLOOR,
    scale: float = 1.0,
    with_grads: bool = True,
):
    """Mean Rao-Blackwellized NELBO over masked positions, with exact gradients.

    Log-probabilities are floored at ``log_floor``; floored entries are
    constants, so they contribute no gradient.
    """
    if not isinstance(batch, Batch):
        batch = Batch.from_items(batch)
    if len(batch) == 0:
        raise DomainError("empty batch")
    probs, logp, cache = _forward(params, batch.tokens, batch.noise, batch.t, scale)
    masked = cache["masked"]
    n_masked = int(masked.sum())
    if n_masked == 0:
        zero = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        return 0.0, (zero if with_grads else None)
    x = batch.x
    lp_true = np.take_along_axis(logp, x[..., None], axis=-1)[..., 0]
    floored = lp_true <= log_floor
    lp_used = np.maximum(lp_true, log_floor)
    w = nelbo_weight(schedule, batch.t)[:, None] * np.ones_like(lp_true)
    loss = float(np.sum(np.where(masked, -w * lp_used, 0.0)) / n_masked)
    if not with_grads:
        return loss, None
    coef = np.where(masked & ~floored, w / n_masked, 0.0)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, x[..., None], 1.0, axis=-1)
    dlogits = coef[..., None] * (probs - onehot)
    return loss, _backward(params, batch.tokens, cache, dlogits)


def kl_loss_and_grads(
    tokens: np.ndarray,
    noise: np.ndarray | None,
    t: np.ndarray,
    target_unmask: np.ndarray,
    unmask_mass: np.ndarray,
    params: DenoiserParams,
    scale: float = 1.0,
    with_grads: bool = True,
):
    """Mean forward KL(target || student one-step kernel) over masked positions.

    ``target_unmask`` (B, L, N) is the target mass on each token at time s;
    ``unmask_mass`` (B,) is the student's total unmask mass
    (alpha_s - alpha_t) / (1 - alpha_t).  The mask-side masses of target and
    student coincide, so only token entries enter the divergence.
    """
    probs, logp, cache = _forward(params, tokens, noise, t, scale)
    masked = cache["masked"]
    n_masked = int(masked.sum())
    if n_masked == 0:
        return 0.0, ({k: np.zeros_like(v) for k, v in params.arrays.items()} if with_grads else None)
    tgt = np.where(masked[..., None], target_unmask, 0.0)
    log_student = np.log(unmask_mass)[:, None, None] + logp
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(tgt > 0, tgt * (np.log(np.where(tgt > 0, tgt, 1.0)) - log_student), 0.0)
    loss = float(terms.sum() / n_masked)
    if not with_grads:
        return loss, None
    mass = tgt.sum(axis=-1, keepdims=True)
    dlogits = (mass * probs - tgt) / n_masked
    return loss, _backward(params, tokens, cache, dlogits)


def grad_check(
    params: DenoiserParams,
    batch: Batch,
    h: float,
    schedule: Schedule,
    rng: Rng,
    n_coords: int = 200,
    scale: float = 1.0,
    rel_floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, rel_floor)`` over at least
    ``n_coords`` coordinates, with every parameter array represented.
    """
    if not 1e-6 <= h <= 1e-3:
        raise DomainError("h must lie in [1e-6, 1e-3]")
    if not isinstance(batch, Batch):
        batch = Batch.from_items(batch)
    _, grads = loss_and_grads(batch, params, schedule, scale=scale)
    coords = _pick_coords(params, n_coords, rng)
    worst = 0.0
    probe = params.copy()
    for name, idx in coords:
        arr = probe.arrays[name]
        orig = arr[idx]
        arr[idx] = orig + h
        up, _ = loss_and_grads(batch, probe, schedule, scale=scale, with_grads=False)
        arr[idx] = orig - h
        down, _ = loss_and_grads(batch, probe, schedule, scale=scale, with_grads=False)
        arr[idx] = orig
        num = (up - down) / (2 * h)
        ana = grads[name][idx]
        err = abs(ana - num) / max(abs(ana), abs(num), rel_floor)
        worst = max(worst, err)
    return worst


def _pick_coords(params: DenoiserParams, n_coords: int, rng: Rng):
    g = rng.gen
    names = params.names()
    coords = []
    for name in names:
        arr = params.arrays[name]
        for flat in g.choice(arr.size, size=min(arr.size, 4), replace=False):
            coords.append((name, np.unravel_index(int(flat), arr.shape)))
    sizes = np.array([params.arrays[n].size for n in names])
    extra = max(0, n_coords - len(coords))
    which = g.choice(len(names), size=extra, p=sizes / sizes.sum())
    for k in which:
        arr = params.arrays[names[k]]
        coords.append((names[k], np.unravel_index(int(g.integers(arr.size)), arr.shape)))
    return coords
