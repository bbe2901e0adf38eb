"""Diagonal-covariance EM for the mixture prior."""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import logsumexp

from ..core import Image, as_generator
from ..diffusion import MixturePrior

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6


def _kmeans_pp(X: np.ndarray, J: int, gen: np.random.Generator) -> np.ndarray:
    centers = [X[gen.integers(len(X))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, J):
        total = d2.sum()
        idx = gen.choice(len(X), p=d2 / total) if total > 0 else gen.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _loglik_matrix(X, w, mu, var):
    ll = -0.5 * (
        np.sum(np.log(2 * np.pi * var), axis=1)[None, :]
        + np.sum(X[:, None, :] ** 2 / var[None], axis=2)
        - 2 * X @ (mu / var).T
        + np.sum(mu**2 / var, axis=1)[None, :]
    )
    return ll + np.log(w)[None, :]


def fit_prior(images, J: int, iterations: int = 50, rng=0, history: list | None = None) -> MixturePrior:
    """Fit J diagonal Gaussians to flattened images.

    k-means++ seeding, a fixed number of EM iterations, and a variance floor.
    If ``history`` is given, the data log-likelihood after every M-step is
    appended to it (it is non-decreasing).
    """
    X = np.array([im.flat() if isinstance(im, Image) else np.ravel(im) for im in images], dtype=np.float64)
    if J < 1:
        raise ValueError(f"J must be >= 1, got {J}")
    if len(X) < J:
        raise ValueError(f"need at least J={J} samples, got {len(X)}")
    if np.all(X == X[0]):
        raise ValueError("degenerate data: all inputs are identical")

    if J == 1:
        mu = X.mean(axis=0, keepdims=True)
        var = np.maximum(X.var(axis=0, keepdims=True), VARIANCE_FLOOR)
        prior = MixturePrior(np.ones(1), mu, var)
        if history is not None:
            history.append(float(logsumexp(_loglik_matrix(X, prior.weights, mu, var), axis=1).sum()))
        return prior

    gen = as_generator(rng)
    mu = _kmeans_pp(X, J, gen)
    var = np.tile(np.maximum(X.var(axis=0), VARIANCE_FLOOR), (J, 1))
    w = np.full(J, 1.0 / J)
    for it in range(iterations):
        ll = _loglik_matrix(X, w, mu, var)
        logr = ll - logsumexp(ll, axis=1, keepdims=True)
        r = np.exp(logr)
        nk = r.sum(axis=0)
        alive = nk > 1e-10
        w = np.where(alive, nk, 1e-300)
        w = w / w.sum()
        for j in np.flatnonzero(alive):
            mu[j] = (r[:, j] @ X) / nk[j]
            d = X - mu[j]
            var[j] = np.maximum((r[:, j] @ (d * d)) / nk[j], VARIANCE_FLOOR)
        if history is not None:
            total = float(logsumexp(_loglik_matrix(X, w, mu, var), axis=1).sum())
            history.append(total)
            log.debug("EM iteration %d: log-likelihood %.6f", it, total)
    return MixturePrior(w, mu, var)
