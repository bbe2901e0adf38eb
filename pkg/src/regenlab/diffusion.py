"""Pixel-space diffusion with an exactly solvable Gaussian-mixture prior.

Array-level functions take ``x`` of shape ``(..., N)`` so many chains can run
in one call; :func:`regenerate` is the Image-level entry point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import Image, Message, RngStream, as_generator
from .watermark import SpreadSpectrumKey, wm_loss_and_grad

LINEAR = "linear"
COSINE = "cosine"
DEFAULT_T = 1000
PRIOR_FORMAT = "regenlab.mixture-prior/1"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """``alpha[t-1]`` holds alpha_t for t = 1..T; ``abar(0)`` is 1 by convention."""

    kind: str
    alpha: np.ndarray
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        a = np.array(self.alpha, dtype=np.float64)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(a <= 0) or np.any(a >= 1):
            raise ValueError("every alpha_t must lie in (0, 1)")
        a.setflags(write=False)
        ab = np.cumprod(a)
        ab.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return int(self.alpha.size)

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def alpha_at(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return float(self.alpha[t - 1])

    def sigma_eff(self, t: int) -> float:
        """Noise std per unit of signal at step t, sqrt((1 - abar) / abar)."""
        ab = self.abar(t)
        return math.sqrt((1.0 - ab) / ab)


def make_schedule(kind: str = LINEAR, T: int = DEFAULT_T) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == LINEAR:
        betas = np.linspace(1e-4, 0.02, T)
        return NoiseSchedule(LINEAR, 1.0 - betas)
    if kind == COSINE:
        s = 0.008
        t = np.arange(T + 1) / T
        f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
        return NoiseSchedule(COSINE, 1.0 - betas)
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True, eq=False)
class MixturePrior:
    """Diagonal-covariance Gaussian mixture over flattened images."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.array(self.means, dtype=np.float64))
        var = np.atleast_2d(np.array(self.variances, dtype=np.float64))
        if mu.shape != var.shape or mu.shape[0] != w.size:
            raise ValueError(
                f"inconsistent prior shapes: weights {w.shape}, means {mu.shape}, variances {var.shape}"
            )
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            w = w / w.sum()
        if np.any(var <= 0):
            raise ValueError("variances must be strictly positive")
        for arr in (w, mu, var):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def J(self) -> int:
        return int(self.weights.size)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @classmethod
    def isotropic(cls, mean, std: float) -> "MixturePrior":
        mean = np.asarray(mean, dtype=np.float64).reshape(1, -1)
        return cls(np.ones(1), mean, np.full_like(mean, std**2))

    def sample(self, count: int, rng) -> np.ndarray:
        gen = as_generator(rng)
        comp = gen.choice(self.J, size=count, p=self.weights)
        z = gen.standard_normal((count, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * z

    def to_json(self) -> str:
        doc = {
            "format": PRIOR_FORMAT,
            "J": self.J,
            "dim": self.dim,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "MixturePrior":
        doc = json.loads(text)
        if doc.get("format") != PRIOR_FORMAT:
            raise ValueError(f"not a mixture prior file (format={doc.get('format')!r})")
        unknown = set(doc) - {"format", "J", "dim", "weights", "means", "variances"}
        if unknown:
            raise ValueError(f"unknown prior keys: {sorted(unknown)}")
        prior = cls(doc["weights"], doc["means"], doc["variances"])
        if prior.J != doc["J"] or prior.dim != doc["dim"]:
            raise ValueError("prior J/dim fields disagree with arrays")
        return prior

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "MixturePrior":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _marginal_params(prior: MixturePrior, t: int, sched: NoiseSchedule):
    ab = sched.abar(t)
    return math.sqrt(ab) * prior.means, ab * prior.variances + (1.0 - ab)


def _check_dim(x: np.ndarray, prior: MixturePrior) -> None:
    if x.shape[-1] != prior.dim:
        raise ValueError(f"dimension mismatch: x has {x.shape[-1]}, prior has {prior.dim}")


def _component_loglik(x, means, var):
    d = x[..., None, :] - means
    return -0.5 * np.sum(d * d / var + np.log(2 * np.pi * var), axis=-1), d


def log_density(x, t: int, prior: MixturePrior, sched: NoiseSchedule) -> np.ndarray:
    """log p_t(x) for the noised mixture marginal."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(x, prior)
    means, var = _marginal_params(prior, t, sched)
    ll, _ = _component_loglik(x, means, var)
    return logsumexp(ll + np.log(prior.weights), axis=-1)


def score_array(x, t: int, prior: MixturePrior, sched: NoiseSchedule) -> np.ndarray:
    """Exact grad_x log p_t(x); responsibilities via log-sum-exp."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(x, prior)
    means, var = _marginal_params(prior, t, sched)
    ll, d = _component_loglik(x, means, var)
    logr = ll + np.log(prior.weights)
    logr -= logsumexp(logr, axis=-1, keepdims=True)
    r = np.exp(logr)
    return -np.einsum("...j,...jn->...n", r, d / var)


def score(x: Image, t: int, prior: MixturePrior, sched: NoiseSchedule) -> Image:
    return x.with_data(score_array(x.flat(), t, prior, sched))


def predicted_noise(x, t: int, prior: MixturePrior, sched: NoiseSchedule) -> np.ndarray:
    return -math.sqrt(1.0 - sched.abar(t)) * score_array(x, t, prior, sched)


def forward_sample(x0, t: int, sched: NoiseSchedule, rng):
    """Closed-form q(x_t | x_0). Accepts an Image or an array; t = 0 returns x0."""
    ab = sched.abar(t)
    if t == 0:
        return x0
    gen = as_generator(rng)
    arr = x0.flat() if isinstance(x0, Image) else np.asarray(x0, dtype=np.float64)
    out = math.sqrt(ab) * arr + math.sqrt(1.0 - ab) * gen.standard_normal(arr.shape)
    return x0.with_data(out) if isinstance(x0, Image) else out


def forward_step(x_prev, t: int, sched: NoiseSchedule, rng) -> np.ndarray:
    """One Markov noising step q(x_t | x_{t-1})."""
    a = sched.alpha_at(t)
    gen = as_generator(rng)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    return math.sqrt(a) * x_prev + math.sqrt(1.0 - a) * gen.standard_normal(x_prev.shape)


def ddpm_step(x_t, t: int, prior: MixturePrior, sched: NoiseSchedule, rng, t_prev: int | None = None):
    """Ancestral step t -> t_prev (default t - 1).

    With a skipped grid the per-step alpha is abar_t / abar_{t_prev}.
    No noise is added when landing on t_prev = 0.
    """
    if t_prev is None:
        t_prev = t - 1
    if not 1 <= t <= sched.T or not 0 <= t_prev < t:
        raise ValueError(f"invalid DDPM step {t} -> {t_prev} for T={sched.T}")
    x = np.asarray(x_t, dtype=np.float64)
    a = sched.abar(t) / sched.abar(t_prev)
    mean = (x + (1.0 - a) * score_array(x, t, prior, sched)) / math.sqrt(a)
    if t_prev == 0:
        return mean
    gen = as_generator(rng)
    return mean + math.sqrt(1.0 - a) * gen.standard_normal(x.shape)


def ddim_step(x_t, t: int, t_prev: int, prior: MixturePrior, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from t to t_prev."""
    if t_prev > t or t_prev < 0 or t > sched.T:
        raise ValueError(f"invalid DDIM step {t} -> {t_prev} for T={sched.T}")
    x = np.asarray(x_t, dtype=np.float64)
    if t_prev == t:
        return x.copy()
    ab, ab_prev = sched.abar(t), sched.abar(t_prev)
    eps = predicted_noise(x, t, prior, sched)
    x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps


@dataclass(frozen=True)
class GuidanceConfig:
    """Post-step correction x <- x - eta * grad L_wm(x; m) for steps landing in ``window``.

    ``window`` is an inclusive ``(t_lo, t_hi)`` range of destination steps;
    ``None`` means every step.
    """

    eta: float
    key: SpreadSpectrumKey
    message: Message
    window: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.window is not None:
            lo, hi = self.window
            if lo < 0 or lo > hi:
                raise ValueError(f"bad guidance window {self.window}")

    def active(self, t: int) -> bool:
        if self.window is None:
            return True
        return self.window[0] <= t <= self.window[1]


def timestep_grid(t_star: int, substeps: int) -> np.ndarray:
    """Evenly spaced, strictly decreasing integer steps from t_star to 0."""
    if t_star == 0:
        return np.array([0])
    n = min(substeps, t_star)
    return np.round(np.linspace(t_star, 0, n + 1)).astype(int)


def strength_to_step(strength: float, sched: NoiseSchedule) -> int:
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    return int(round(strength * sched.T))


def last_steps_window(strength: float, substeps: int, sched: NoiseSchedule, fraction: float) -> tuple[int, int]:
    """Window covering the final ``fraction`` of the reverse substeps."""
    grid = timestep_grid(strength_to_step(strength, sched), substeps)
    steps = len(grid) - 1
    m = max(1, int(math.ceil(fraction * steps - 1e-9))) if steps else 0
    return (0, int(grid[-m])) if m else (0, 0)


def regenerate(
    x: Image,
    strength: float,
    prior: MixturePrior,
    sched: NoiseSchedule,
    rng,
    sampler: str = "ddim",
    substeps: int = 50,
    guidance: GuidanceConfig | None = None,
) -> Image:
    """Image-to-image regeneration: noise to t* = round(strength*T), denoise back to 0."""
    t_star = strength_to_step(strength, sched)
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    if sampler not in ("ddim", "ddpm"):
        raise ValueError(f"unknown sampler {sampler!r}")
    if x.size != prior.dim:
        raise ValueError(f"image has {x.size} samples, prior dim is {prior.dim}")
    if guidance is not None:
        guidance.key.check_image(x)
    if t_star == 0:
        return x

    stream = rng if isinstance(rng, RngStream) else None
    gen = stream.child("forward").generator() if stream else as_generator(rng)
    step_gen = stream.child("reverse").generator() if stream else gen

    cur = forward_sample(x.flat(), t_star, sched, gen)
    grid = timestep_grid(t_star, substeps)
    for t, t_prev in zip(grid[:-1], grid[1:]):
        t, t_prev = int(t), int(t_prev)
        if sampler == "ddim":
            cur = ddim_step(cur, t, t_prev, prior, sched)
        else:
            cur = ddpm_step(cur, t, prior, sched, step_gen, t_prev=t_prev)
        if guidance is not None and guidance.eta > 0 and guidance.active(t_prev):
            _, grad = wm_loss_and_grad(x.with_data(cur), guidance.message, guidance.key)
            cur = cur - guidance.eta * grad.flat()
    return x.with_data(cur)
