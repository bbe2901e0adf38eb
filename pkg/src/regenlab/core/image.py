"""Image and message value types."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Image:
    """Real-valued pixel grid stored as a read-only ``(height, width, channels)`` array.

    Values nominally live in [0, 1] but are never clamped here; diffusion
    intermediates are unbounded.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"image data must be 2-D or 3-D, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1:
            raise ValueError(f"image must be non-empty, got {w}x{h}")
        if c not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {c}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, flat, width: int, height: int, channels: int = 1) -> "Image":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != width * height * channels:
            raise ValueError(
                f"flat length {flat.size} != {width}*{height}*{channels}"
            )
        return cls(flat.reshape(height, width, channels))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        """Row-major, channel-interleaved view of the samples."""
        return self.data.reshape(-1)

    def with_data(self, arr) -> "Image":
        return Image(np.asarray(arr, dtype=np.float64).reshape(self.shape))

    def clamped(self) -> "Image":
        return Image(np.clip(self.data, 0.0, 1.0))

    def same_shape(self, other: "Image") -> bool:
        return self.shape == other.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"Image({self.width}x{self.height}x{self.channels})"


def check_same_shape(a: Image, b: Image) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


@dataclass(frozen=True, eq=False)
class Message:
    """Payload of k bits, each exactly +1 or -1."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.bits, dtype=np.int8).reshape(-1)
        if arr.size < 1:
            raise ValueError("message must have at least one bit")
        if not np.all((arr == 1) | (arr == -1)):
            raise ValueError("message bits must be +1 or -1")
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @classmethod
    def from_string(cls, s: str) -> "Message":
        """Parse a ``'0'/'1'`` string; ``'1'`` maps to +1 and ``'0'`` to -1."""
        s = s.strip()
        if not s or set(s) - {"0", "1"}:
            raise ValueError(f"bit string must be non-empty 0/1 text, got {s!r}")
        return cls(np.array([1 if ch == "1" else -1 for ch in s]))

    @classmethod
    def random(cls, k: int, rng: np.random.Generator) -> "Message":
        return cls(np.where(rng.integers(0, 2, size=k) == 1, 1, -1))

    def to_string(self) -> str:
        return "".join("1" if b > 0 else "0" for b in self.bits)

    @property
    def k(self) -> int:
        return int(self.bits.size)

    def __len__(self) -> int:
        return self.k

    def __neg__(self) -> "Message":
        return Message(-self.bits.astype(np.int64))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Message):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __repr__(self) -> str:
        return f"Message({self.to_string()})"
