"""Attack registry: baseline distortions and diffusion regeneration behind one interface."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.fft import dctn, idctn

from .core import Image, Message, RngStream, as_generator, psnr
from .diffusion import (
    GuidanceConfig,
    MixturePrior,
    NoiseSchedule,
    last_steps_window,
    regenerate,
)
from .watermark import SpreadSpectrumKey, decode, wm_loss_and_grad

KINDS = ("none", "gaussian_noise", "blur", "jpeg_sim", "fgsm", "regen", "regen_guided")

# ITU T.81 Annex K luminance table
JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def gaussian_noise(x: Image, sigma: float, rng) -> Image:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x
    gen = as_generator(rng)
    return x.with_data(x.data + sigma * gen.standard_normal(x.shape))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    if sigma <= 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    r = size // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    return g / g.sum()


def _blur_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = kernel.size // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    padded = np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    # x + sum_i w_i (x_i - x): identical to sum_i w_i x_i but exact on flat regions
    out = a.copy()
    for i, w in enumerate(kernel):
        shifted = np.take(padded, np.arange(i, i + n), axis=axis)
        out += w * (shifted - a)
    return out


def blur(x: Image, kernel_size: int = 5, sigma: float = 1.0) -> Image:
    """Separable Gaussian blur with edge-replicate padding."""
    k = gaussian_kernel(kernel_size, sigma)
    out = _blur_axis(x.data, k, 0)
    out = _blur_axis(out, k, 1)
    return x.with_data(out)


def quant_table(quality: int) -> np.ndarray:
    """libjpeg quality scaling of the standard luminance table."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(1.0, np.floor((JPEG_LUMA * scale + 50.0) / 100.0))


def jpeg_sim(x: Image, quality: int = 50) -> Image:
    """8x8 block DCT quantization round trip on the 0..255 scale, per channel.

    Sizes that are not multiples of 8 are edge-padded and cropped back.
    """
    q = quant_table(int(quality))
    h, w = x.height, x.width
    ph, pw = -h % 8, -w % 8
    arr = np.pad(x.data * 255.0 - 128.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W = arr.shape[:2]
    # (by, bx, c, 8, 8) blocks
    blocks = arr.reshape(H // 8, 8, W // 8, 8, -1).transpose(0, 2, 4, 1, 3)
    coeff = dctn(blocks, axes=(-2, -1), norm="ortho")
    coeff = np.round(coeff / q) * q
    rec = idctn(coeff, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(H, W, -1)
    return x.with_data((rec[:h, :w] + 128.0) / 255.0)


def fgsm(x: Image, m: Message, key: SpreadSpectrumKey, eps: float) -> Image:
    """One signed-gradient step down the watermark-presence loss."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if eps == 0:
        return x
    _, grad = wm_loss_and_grad(x, m, key)
    return x.with_data(x.data - eps * np.sign(grad.data))


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = {**DEFAULTS[self.kind], **self.params}
        _validate(self.kind, merged)
        object.__setattr__(self, "params", merged)
        if not self.name:
            object.__setattr__(self, "name", self.kind)

    def echo(self) -> str:
        """Stable ``kind;key=value;...`` text that parses back to the same config."""
        items = ";".join(f"{k}={_fmt(v)}" for k, v in sorted(self.params.items()))
        return f"kind={self.kind};seed={self.seed}" + (f";{items}" if items else "")

    @classmethod
    def from_echo(cls, text: str, name: str = "") -> "AttackConfig":
        fields = dict(part.split("=", 1) for part in text.split(";") if part)
        kind = fields.pop("kind")
        seed = int(fields.pop("seed", 0))
        return cls(kind, {k: parse_param(kind, k, v) for k, v in fields.items()}, seed, name)

    def replace(self, **params) -> "AttackConfig":
        return AttackConfig(self.kind, {**self.params, **params}, self.seed, self.name)


DEFAULTS: dict[str, dict[str, Any]] = {
    "none": {},
    "gaussian_noise": {"sigma": 0.0316},
    "blur": {"kernel_size": 5, "sigma": 1.0},
    "jpeg_sim": {"quality": 50},
    "fgsm": {"eps": 4.0 / 255.0},
    "regen": {"strength": 0.3, "sampler": "ddim", "substeps": 50},
    "regen_guided": {
        "strength": 0.3,
        "sampler": "ddim",
        "substeps": 50,
        "eta": None,
        "window": "full",
    },
}

_INT_PARAMS = {"kernel_size", "quality", "substeps"}
_STR_PARAMS = {"sampler", "window"}


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_param(kind: str, name: str, text: str):
    text = text.strip()
    if name in _INT_PARAMS:
        return int(text)
    if name in _STR_PARAMS:
        return text
    if name == "eta" and text == "auto":
        return None
    return float(text)


def parse_window(text: str) -> tuple[str, float | tuple[int, int] | None]:
    """``full``, ``last:<fraction>``, ``none`` (empty), or ``<t_lo>:<t_hi>``."""
    if text == "full":
        return "full", None
    if text == "none":
        return "none", None
    head, _, tail = text.partition(":")
    if head == "last":
        frac = float(tail)
        if not 0 < frac <= 1:
            raise ValueError(f"window fraction must be in (0, 1], got {frac}")
        return "last", frac
    try:
        lo, hi = int(head), int(tail)
    except ValueError:
        raise ValueError(f"bad guidance window {text!r}") from None
    return "range", (lo, hi)


def _validate(kind: str, p: dict) -> None:
    if kind == "gaussian_noise" and p["sigma"] < 0:
        raise ValueError("gaussian_noise sigma must be >= 0")
    if kind == "blur":
        gaussian_kernel(p["kernel_size"], p["sigma"])
    if kind == "jpeg_sim":
        quant_table(p["quality"])
    if kind == "fgsm" and p["eps"] < 0:
        raise ValueError("fgsm eps must be >= 0")
    if kind in ("regen", "regen_guided"):
        if not 0.0 <= p["strength"] <= 1.0:
            raise ValueError("strength must be in [0, 1]")
        if p["substeps"] < 1:
            raise ValueError("substeps must be >= 1")
        if p["sampler"] not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {p['sampler']!r}")
    if kind == "regen_guided":
        if p["eta"] is not None and p["eta"] < 0:
            raise ValueError("eta must be >= 0")
        parse_window(p["window"])


@dataclass(frozen=True)
class AttackDeps:
    """Shared inputs an attack may need."""

    prior: MixturePrior | None = None
    schedule: NoiseSchedule | None = None
    key: SpreadSpectrumKey | None = None
    default_eta_factor: float = 0.04


def guidance_window(p: dict, sched: NoiseSchedule):
    mode, val = parse_window(p["window"])
    if mode == "full":
        return None
    if mode == "none":
        return (sched.T + 1, sched.T + 1)
    if mode == "last":
        return last_steps_window(p["strength"], p["substeps"], sched, val)
    return val


def run_attack(x: Image, cfg: AttackConfig, deps: AttackDeps, rng=None) -> Image:
    """Apply ``cfg`` to ``x``. Randomness comes from ``rng`` or, if absent, ``cfg.seed``.

    White-box attacks (fgsm, regen_guided) read the target message off the
    decoder, as an attacker holding the key would.
    """
    p = cfg.params
    stream = rng if rng is not None else RngStream(cfg.seed, f"attack/{cfg.name}")
    kind = cfg.kind
    if kind == "none":
        return x
    if kind == "gaussian_noise":
        return gaussian_noise(x, p["sigma"], stream)
    if kind == "blur":
        return blur(x, p["kernel_size"], p["sigma"])
    if kind == "jpeg_sim":
        return jpeg_sim(x, p["quality"])
    if kind == "fgsm":
        key = _need(deps.key, "fgsm", "watermark key")
        return fgsm(x, decode(x, key).bits, key, p["eps"])

    prior = _need(deps.prior, kind, "mixture prior")
    sched = _need(deps.schedule, kind, "noise schedule")
    guidance = None
    if kind == "regen_guided":
        key = _need(deps.key, kind, "watermark key")
        eta = p["eta"] if p["eta"] is not None else deps.default_eta_factor * key.beta
        guidance = GuidanceConfig(eta, key, decode(x, key).bits, guidance_window(p, sched))
    return regenerate(
        x,
        p["strength"],
        prior,
        sched,
        stream,
        sampler=p["sampler"],
        substeps=p["substeps"],
        guidance=guidance,
    )


def _need(value, kind: str, what: str):
    if value is None:
        raise ValueError(f"attack {kind!r} requires a {what}")
    return value


def calibrate_noise_sigma(
    images: list[Image],
    target_psnr: float,
    rng,
    tol_db: float = 0.5,
    iters: int = 60,
    references: list[Image] | None = None,
) -> float:
    """Bisect the noise sigma whose mean PSNR over ``images`` hits ``target_psnr``.

    PSNR is taken against ``references`` (default: the inputs themselves).
    Uses one fixed noise draw per image so the objective is monotone in sigma.
    """
    gen = as_generator(rng)
    refs = images if references is None else references
    draws = [gen.standard_normal(im.shape) for im in images]

    def mean_psnr(sigma: float) -> float:
        return float(np.mean([psnr(ref, im.with_data(im.data + sigma * z)) for im, ref, z in zip(images, refs, draws)]))

    lo, hi = 1e-6, 1.0
    while mean_psnr(hi) > target_psnr:
        hi *= 2.0
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        val = mean_psnr(mid)
        if abs(val - target_psnr) < tol_db / 10:
            return mid
        if val > target_psnr:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)
