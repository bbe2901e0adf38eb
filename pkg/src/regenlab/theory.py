"""Closed-form decode probabilities and Monte Carlo / mutual-information checks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.stats import spearmanr

from .core import RngStream, as_generator

MC_CHUNK = 1 << 14
THEORY_COLUMNS = (
    "beta",
    "sigma",
    "k",
    "p_bit_theory",
    "p_bit_mc",
    "stderr",
    "p_msg_theory",
    "p_msg_mc",
    "mi_proxy",
)


def phi(z: float) -> float:
    """Standard normal CDF."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


@dataclass(frozen=True)
class TheoryPrediction:
    p_bit: float
    p_msg_bound: float
    sigma_effective: float


def predict(beta: float, sigma: float, k: int) -> TheoryPrediction:
    if beta <= 0 or sigma <= 0 or k < 1:
        raise ValueError(f"need beta > 0, sigma > 0, k >= 1; got {beta}, {sigma}, {k}")
    p = phi(beta / sigma)
    return TheoryPrediction(p, p**k, sigma)


class ChannelStats:
    """Per-bit 2x2 tables of (true bit, decoded bit) counts; index 0 is -1, 1 is +1."""

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.counts = np.zeros((k, 2, 2), dtype=np.int64)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def trials(self) -> int:
        return int(self.counts[0].sum())

    def add(self, true_bits, decoded_bits) -> None:
        """Accumulate one trial (1-D arrays) or a batch (``(trials, k)`` arrays) of +/-1 bits."""
        t = (np.atleast_2d(true_bits) > 0).astype(np.int64)
        d = (np.atleast_2d(decoded_bits) > 0).astype(np.int64)
        if t.shape != d.shape or t.shape[1] != self.k:
            raise ValueError(f"bit arrays must have shape (n, {self.k})")
        for ti in (0, 1):
            for di in (0, 1):
                self.counts[:, ti, di] += np.sum((t == ti) & (d == di), axis=0)

    def merge(self, other: "ChannelStats") -> None:
        self.counts += other.counts


def mi_proxy(stats: ChannelStats) -> float:
    """Mean over bits of plug-in I(true; decoded) in bits, Jeffreys-smoothed (+0.5 per cell)."""
    if stats.trials <= 0:
        raise ValueError("channel stats are empty")
    joint = stats.counts + 0.5
    joint = joint / joint.sum(axis=(1, 2), keepdims=True)
    pt = joint.sum(axis=2, keepdims=True)
    pd = joint.sum(axis=1, keepdims=True)
    mi = np.sum(joint * np.log2(joint / (pt * pd)), axis=(1, 2))
    return float(np.clip(mi.mean(), 0.0, 1.0))


def binary_entropy(p: float) -> float:
    if p <= 0 or p >= 1:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


@dataclass(frozen=True)
class DecodeRate:
    per_bit_acc: float
    msg_rate: float
    stderr: float
    trials: int
    k: int
    stats: ChannelStats

    @property
    def msg_stderr(self) -> float:
        q = self.msg_rate
        return math.sqrt(max(q * (1 - q), 0.0) / self.trials)


def mc_decode_rate(beta: float, sigma: float, k: int, trials: int, rng) -> DecodeRate:
    """Simulate correlations beta*b + N(0, sigma^2) and decode by sign.

    Trials are split into fixed-size chunks, each with its own derived stream,
    so the result does not depend on how chunks are scheduled.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    base = rng if isinstance(rng, RngStream) else RngStream(int(as_generator(rng).integers(2**63)), "mc")
    stats = ChannelStats(k)
    correct_bits = 0
    correct_msgs = 0
    for c, start in enumerate(range(0, trials, MC_CHUNK)):
        n = min(MC_CHUNK, trials - start)
        gen = base.child("chunk", c).generator()
        b = np.where(gen.integers(0, 2, size=(n, k)) == 1, 1, -1)
        corr = beta * b + sigma * gen.standard_normal((n, k))
        d = np.where(corr >= 0.0, 1, -1)
        ok = d == b
        correct_bits += int(ok.sum())
        correct_msgs += int(ok.all(axis=1).sum())
        stats.add(b, d)
    p = correct_bits / (trials * k)
    se = math.sqrt(p * (1 - p) / (trials * k))
    return DecodeRate(p, correct_msgs / trials, se, trials, k, stats)


def isotonic_nonincreasing(x, y) -> np.ndarray:
    """Least-squares non-increasing fit of ``y`` ordered by ``x``."""
    order = np.argsort(np.asarray(x, float), kind="stable")
    fit = isotonic_regression(np.asarray(y, float)[order], increasing=False).x
    out = np.empty_like(fit)
    out[order] = fit
    return out


def spearman(x, y) -> float:
    """Spearman rank correlation; 0 when either side is constant."""
    if np.ptp(np.asarray(y, float)) == 0 or np.ptp(np.asarray(x, float)) == 0:
        return 0.0
    return float(spearmanr(x, y).statistic)


@dataclass(frozen=True)
class CurvePoint:
    strength: float
    mi_proxy: float
    per_bit_acc: float
    msg_rate: float


def mi_curve(strengths, run_point) -> list[CurvePoint]:
    """Evaluate ``run_point(strength) -> (ChannelStats, per_bit_acc, msg_rate)`` along a sweep.

    The harness supplies ``run_point`` as an embed -> regenerate -> decode pipeline.
    """
    out = []
    for s in strengths:
        stats, acc, rate = run_point(float(s))
        out.append(CurvePoint(float(s), mi_proxy(stats), float(acc), float(rate)))
    return out


def theory_grid(ratios=(0.25, 0.5, 1.0, 2.0, 4.0), ks=(1, 2, 4, 8, 32), trials: int = 100_000, seed: int = 0, beta: float = 1.0):
    """Rows of predicted vs simulated decode rates over a (sigma/beta, k) grid."""
    root = RngStream(seed, "theory")
    rows = []
    for r in ratios:
        sigma = beta * r
        for k in ks:
            pred = predict(beta, sigma, k)
            mc = mc_decode_rate(beta, sigma, k, trials, root.child(r, k))
            rows.append(
                {
                    "beta": beta,
                    "sigma": sigma,
                    "k": k,
                    "p_bit_theory": pred.p_bit,
                    "p_bit_mc": mc.per_bit_acc,
                    "stderr": mc.stderr,
                    "p_msg_theory": pred.p_msg_bound,
                    "p_msg_mc": mc.msg_rate,
                    "mi_proxy": mi_proxy(mc.stats),
                }
            )
    return rows


def write_theory_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=THEORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
