"""Synthetic and on-disk image sets, plus the prior that goes with them."""

from __future__ import annotations

import os

import numpy as np

from ..core import Image, RngStream, load_image, save_image
from ..diffusion import MixturePrior
from .config import ConfigError, DatasetConfig
from .fit import fit_prior

IMAGE_EXTS = (".pgm", ".ppm", ".pnm", ".wmf")


def synthetic_prior(
    J: int,
    height: int,
    width: int,
    channels: int = 1,
    contrast: float = 0.1,
    texture: float = 0.1,
    seed: int = 0,
) -> MixturePrior:
    """J equally weighted components with smooth mean images and white texture.

    Component means are sums of low-frequency cosines scaled to per-pixel std
    ``contrast`` around a brightness evenly spread over [0.35, 0.65] (0.5 for
    J = 1); every pixel has standard deviation ``texture``.
    """
    gen = RngStream(seed, "synthetic-prior").generator()
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / height
    xx = xx / width
    levels = [0.5] if J == 1 else np.linspace(0.35, 0.65, J)
    means = []
    for j in range(J):
        pattern = np.zeros((height, width, channels))
        if contrast > 0:
            for _ in range(4):
                fy, fx = gen.integers(0, 3, size=2)
                phase = gen.uniform(0, 2 * np.pi, size=channels)
                pattern += np.cos(2 * np.pi * (fx * xx + fy * yy)[..., None] + phase)
            pattern -= pattern.mean()
            sd = pattern.std()
            pattern = pattern / sd * contrast if sd > 0 else pattern
        means.append((levels[j] + pattern).reshape(-1))
    means = np.array(means)
    return MixturePrior(np.full(J, 1.0 / J), means, np.full_like(means, texture**2))


def _list_images(path: str) -> list[str]:
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(IMAGE_EXTS))
    return [os.path.join(path, f) for f in names]


def load_directory(path: str) -> tuple[list[Image], list[str]]:
    images, failures = [], []
    for f in _list_images(path):
        try:
            images.append(load_image(f))
        except (OSError, ValueError) as exc:
            failures.append(f"{f}: {exc}")
    if failures:
        raise OSError("failed to load images:\n  " + "\n  ".join(failures))
    if not images:
        raise ConfigError(f"no images found in {path}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ConfigError(f"images in {path} have differing shapes: {sorted(shapes)}")
    return images, _list_images(path)


def generate_dataset(cfg: DatasetConfig, rng, prior: MixturePrior | None = None) -> list[Image]:
    """Draw ``cfg.count`` unclamped images from the prior, or load a directory."""
    if cfg.kind == "directory":
        return load_directory(cfg.path)[0]
    if cfg.count < 1:
        raise ConfigError("dataset.count must be >= 1")
    if prior is None:
        prior = dataset_prior(cfg, seed=rng.master_seed if isinstance(rng, RngStream) else 0)
    draws = prior.sample(cfg.count, rng)
    return [Image.from_flat(v, cfg.width, cfg.height, cfg.channels) for v in draws]


def dataset_prior(cfg: DatasetConfig, seed: int = 0, images: list[Image] | None = None) -> MixturePrior:
    """The prior the diffusion attacks use for this dataset.

    Loaded from ``cfg.prior`` when set; otherwise the synthetic generator's own
    prior, or an EM fit to the loaded images in directory mode.
    """
    if cfg.prior:
        return MixturePrior.load(cfg.prior)
    if cfg.kind == "synthetic":
        return synthetic_prior(
            cfg.components, cfg.height, cfg.width, cfg.channels, cfg.contrast, cfg.texture, seed
        )
    if images is None:
        images = load_directory(cfg.path)[0]
    J = min(cfg.components, len(images))
    return fit_prior(images, J, cfg.fit_iterations, RngStream(seed, "fit-prior").generator())


def export_dataset(images: list[Image], directory: str) -> list[str]:
    """Write clamped 8-bit copies for inspection."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, im in enumerate(images):
        ext = ".pgm" if im.channels == 1 else ".ppm"
        p = os.path.join(directory, f"img_{i:05d}{ext}")
        save_image(im, p)
        paths.append(p)
    return paths
