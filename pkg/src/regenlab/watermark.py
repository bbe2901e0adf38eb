"""Spread-spectrum watermark encoder, blind correlation decoder, and erasure loss."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import Image, Message, RngStream

PLAIN = "plain"
INFORMED = "informed"
_MODES = (PLAIN, INFORMED)

WMK_MAGIC = b"WMK1"
_WMK = struct.Struct("<4sIIdQB")


def _orthonormal_patterns(k: int, n: int, seed: int) -> np.ndarray:
    rng = RngStream(seed, "watermark/patterns").generator()
    raw = rng.standard_normal((k, n))
    basis = np.empty((k + 1, n))
    basis[0] = 1.0 / np.sqrt(n)
    # modified Gram-Schmidt, run twice per vector to keep orthogonality at 1e-15
    for i in range(k):
        v = raw[i].copy()
        for _ in range(2):
            for j in range(i + 1):
                v -= (basis[j] @ v) * basis[j]
        norm = np.linalg.norm(v)
        if norm < 1e-8:
            raise ValueError("pattern generation degenerated; k too close to N")
        basis[i + 1] = v / norm
    return basis[1:]


@dataclass(frozen=True, eq=False)
class SpreadSpectrumKey:
    """k orthonormal zero-mean patterns, re-derived from ``seed``; never stored."""

    k: int
    n: int
    beta: float
    seed: int
    mode: str = INFORMED
    patterns: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.k + 1 > self.n:
            raise ValueError(f"k={self.k} too large for N={self.n} (need k + 1 <= N)")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        p = _orthonormal_patterns(self.k, self.n, self.seed)
        p.setflags(write=False)
        object.__setattr__(self, "patterns", p)

    @property
    def tau(self) -> float:
        return self.beta / 2.0

    def to_bytes(self) -> bytes:
        return _WMK.pack(
            WMK_MAGIC, self.k, self.n, float(self.beta), self.seed, _MODES.index(self.mode)
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SpreadSpectrumKey":
        if len(buf) < _WMK.size:
            raise ValueError(f"truncated WMK1 key: {len(buf)} < {_WMK.size} bytes")
        magic, k, n, beta, seed, mode = _WMK.unpack_from(buf, 0)
        if magic != WMK_MAGIC:
            raise ValueError(f"bad key magic {magic!r}")
        if mode >= len(_MODES):
            raise ValueError(f"unknown key mode byte {mode}")
        return cls(k, n, beta, seed, _MODES[mode])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SpreadSpectrumKey":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def check_image(self, x: Image) -> None:
        if x.size != self.n:
            raise ValueError(f"image has {x.size} samples but key expects N={self.n}")


def keygen(k: int, image_shape, beta: float, seed: int, mode: str = INFORMED) -> SpreadSpectrumKey:
    """``image_shape`` is ``(height, width[, channels])`` or an Image."""
    if isinstance(image_shape, Image):
        n = image_shape.size
    else:
        n = int(np.prod(image_shape))
    return SpreadSpectrumKey(k, n, beta, seed, mode)


@dataclass(frozen=True)
class DecodeResult:
    bits: Message
    correlations: np.ndarray
    confidences: np.ndarray


def correlations(x: Image, key: SpreadSpectrumKey) -> np.ndarray:
    key.check_image(x)
    return key.patterns @ x.flat()


def host_interference(cover: Image, key: SpreadSpectrumKey) -> np.ndarray:
    """kappa_i = <I, p_i> of the cover image."""
    return correlations(cover, key)


def embed(cover: Image, m: Message, key: SpreadSpectrumKey) -> Image:
    """Add beta * sum_i b_i p_i; informed mode also removes the host projection."""
    key.check_image(cover)
    if m.k != key.k:
        raise ValueError(f"message length {m.k} != key k={key.k}")
    coeff = key.beta * m.bits.astype(np.float64)
    if key.mode == INFORMED:
        coeff = coeff - key.patterns @ cover.flat()
    return cover.with_data(cover.flat() + coeff @ key.patterns)


def decode(x: Image, key: SpreadSpectrumKey) -> DecodeResult:
    c = correlations(x, key)
    bits = np.where(c >= 0.0, 1, -1)
    return DecodeResult(Message(bits), c, expit(c / key.tau))


def wm_loss_and_grad(x: Image, m: Message, key: SpreadSpectrumKey) -> tuple[float, Image]:
    """Sigmoid margin loss sum_i sigmoid(b_i <x, p_i> / tau) and its gradient in x.

    Minimising it drives each correct-bit correlation negative.
    """
    if m.k != key.k:
        raise ValueError(f"message length {m.k} != key k={key.k}")
    b = m.bits.astype(np.float64)
    z = b * correlations(x, key) / key.tau
    s = expit(z)
    coeff = (b / key.tau) * s * (1.0 - s)
    return float(s.sum()), x.with_data(coeff @ key.patterns)


def bit_accuracy(a: Message, b: Message) -> float:
    if a.k != b.k:
        raise ValueError(f"message length mismatch: {a.k} vs {b.k}")
    return float(np.mean(a.bits == b.bits))


def exact_match(a: Message, b: Message) -> bool:
    if a.k != b.k:
        raise ValueError(f"message length mismatch: {a.k} vs {b.k}")
    return bool(np.array_equal(a.bits, b.bits))
