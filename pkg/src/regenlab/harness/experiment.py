"""Attack-grid evaluation, strength sweeps, and their CSV reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..attacks import AttackConfig, AttackDeps, calibrate_noise_sigma, run_attack
from ..core import Image, Message, RngStream, psnr, ssim
from ..diffusion import MixturePrior, NoiseSchedule, make_schedule
from ..theory import ChannelStats, mi_proxy
from ..watermark import SpreadSpectrumKey, bit_accuracy, decode, embed, exact_match, keygen
from .config import ExperimentConfig
from .dataset import dataset_prior, export_dataset, generate_dataset, load_directory

log = logging.getLogger(__name__)

NO_ATTACK = AttackConfig("none", name="no_attack")
TRIAL_COLUMNS = (
    "image_id",
    "attack_id",
    "bit_accuracy",
    "exact_match",
    "psnr_db",
    "ssim",
    "true_bits",
    "decoded_bits",
    "params",
    "error",
)
REPORT_COLUMNS = (
    "setting",
    "attack_id",
    "n",
    "errors",
    "detection_rate",
    "bit_accuracy",
    "bit_accuracy_stderr",
    "psnr_db",
    "ssim",
    "mi_proxy",
    "params",
)
SWEEP_COLUMNS = ("strength", "variant", "eta") + REPORT_COLUMNS[2:]

ETA_GRID = (0.005, 0.01, 0.015, 0.02, 0.03, 0.04, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.5)
GUIDED_TARGET_ACC = 0.55

METADATA = {
    "psnr": "10*log10(1/MSE) on the [0,1] scale, MSE over every sample of every channel, "
    "measured against the unwatermarked original",
    "ssim": "8x8 uniform window, stride 1, C1=0.01^2, C2=0.03^2, population moments, mean over channels",
    "fgsm_target": "sign-gradient step on the correlation decoder's sigmoid watermark loss "
    "(stand-in for a learned decoder)",
    "guided_target": "message read from the decoder on the watermarked input (white-box attacker)",
    "guided_window_tolerance": "last-window vs full-window guided detection compared at 5 points",
    "mi_proxy": "plug-in I(true bit; decoded bit), Jeffreys +0.5 smoothing, base 2, mean over bits",
    "diffusion_prior": "analytic diagonal Gaussian mixture in pixel space",
}


@dataclass
class TrialRecord:
    image_id: int
    attack_id: str
    bit_accuracy: float
    exact_match: bool
    psnr_db: float
    ssim: float
    true_bits: str
    decoded_bits: str
    params: str
    error: str = ""


@dataclass
class ReportRow:
    setting: str
    attack_id: str
    n: int
    errors: int
    detection_rate: float
    bit_accuracy: float
    bit_accuracy_stderr: float
    psnr_db: float
    ssim: float
    mi_proxy: float
    params: str


@dataclass
class ReportTable:
    rows: list[ReportRow]
    records: list[TrialRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def row(self, attack_id: str) -> ReportRow:
        for r in self.rows:
            if r.attack_id == attack_id:
                return r
        raise KeyError(attack_id)


@dataclass
class Lab:
    """Everything a trial needs, resolved once from the config."""

    cfg: ExperimentConfig
    images: list[Image]
    prior: MixturePrior
    schedule: NoiseSchedule
    key: SpreadSpectrumKey
    messages: list[Message]
    watermarked: list[Image]

    @property
    def deps(self) -> AttackDeps:
        return AttackDeps(self.prior, self.schedule, self.key)

    @property
    def setting(self) -> str:
        return f"ss-{self.key.mode}-k{self.key.k}-beta{self.key.beta:g}"


def prepare(cfg: ExperimentConfig) -> Lab:
    root = RngStream(cfg.seed)
    if cfg.dataset.kind == "directory":
        images = load_directory(cfg.dataset.path)[0]
        prior = dataset_prior(cfg.dataset, cfg.seed, images)
    else:
        prior = dataset_prior(cfg.dataset, cfg.seed)
        images = generate_dataset(cfg.dataset, root.child("dataset"), prior)
    if prior.dim != images[0].size:
        raise ValueError(f"prior dim {prior.dim} does not match image size {images[0].size}")
    n = images[0].size
    wm = cfg.watermark
    key = keygen(wm.k, images[0].shape, wm.resolved_beta(n), wm.key_seed, wm.mode)
    messages = [
        Message.random(wm.k, root.child("message", i).generator()) for i in range(len(images))
    ]
    watermarked = [embed(im, m, key) for im, m in zip(images, messages)]
    schedule = make_schedule(cfg.diffusion.schedule, cfg.diffusion.steps)
    return Lab(cfg, images, prior, schedule, key, messages, watermarked)


def _trial(lab: Lab, i: int, attack: AttackConfig) -> TrialRecord:
    m = lab.messages[i]
    echo = attack.echo()
    stream = RngStream(attack.seed, "trial").child(i, attack.name)
    try:
        out = run_attack(lab.watermarked[i], attack, lab.deps, stream)
        d = decode(out, lab.key).bits
        metrics = lab.cfg.metrics
        return TrialRecord(
            i,
            attack.name,
            bit_accuracy(d, m),
            exact_match(d, m),
            psnr(out, lab.images[i]) if metrics.psnr else math.nan,
            ssim(out, lab.images[i]) if metrics.ssim else math.nan,
            m.to_string(),
            d.to_string(),
            echo,
        )
    except Exception as exc:  # recorded, never dropped
        log.warning("trial image=%d attack=%s failed: %s", i, attack.name, exc)
        return TrialRecord(i, attack.name, math.nan, False, math.nan, math.nan, m.to_string(), "", echo, f"{type(exc).__name__}: {exc}")


def evaluate(lab: Lab, attacks, threads: int = 1, image_ids=None) -> list[TrialRecord]:
    """All (image, attack) trials, returned in image-major order regardless of thread count."""
    ids = range(len(lab.images)) if image_ids is None else image_ids
    jobs = [(i, a) for i in ids for a in attacks]
    if threads <= 1:
        return [_trial(lab, i, a) for i, a in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: _trial(lab, *job), jobs))


def _bits(s: str) -> np.ndarray:
    return np.array([1 if ch == "1" else -1 for ch in s])


def aggregate(records: list[TrialRecord], setting: str, order=None, with_mi: bool = True) -> list[ReportRow]:
    groups: dict[str, list[TrialRecord]] = {}
    for r in records:
        groups.setdefault(r.attack_id, []).append(r)
    rows = []
    for attack_id in order or list(groups):
        recs = groups[attack_id]
        n = len(recs)
        ok = [r for r in recs if not r.error]
        acc = np.array([r.bit_accuracy for r in ok])
        mean_acc = float(acc.mean()) if ok else math.nan
        k = len(recs[0].true_bits)
        se = math.sqrt(max(mean_acc * (1 - mean_acc), 0.0) / (len(ok) * k)) if ok else math.nan
        mi = math.nan
        if with_mi and ok:
            stats = ChannelStats(k)
            stats.add(np.array([_bits(r.true_bits) for r in ok]), np.array([_bits(r.decoded_bits) for r in ok]))
            mi = mi_proxy(stats)
        rows.append(
            ReportRow(
                setting,
                attack_id,
                n,
                n - len(ok),
                sum(r.exact_match for r in recs) / n,
                mean_acc,
                se,
                _mean([r.psnr_db for r in ok]),
                _mean([r.ssim for r in ok]),
                mi,
                recs[0].params,
            )
        )
    return rows


def _mean(vals) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            d = row if isinstance(row, dict) else asdict(row)
            w.writerow([_fmt(d[c]) for c in columns])


def read_trials(path) -> list[TrialRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRIAL_COLUMNS:
            raise ValueError(f"{path}: unexpected trial columns {reader.fieldnames}")
        for row in reader:
            out.append(
                TrialRecord(
                    int(row["image_id"]),
                    row["attack_id"],
                    float(row["bit_accuracy"]),
                    row["exact_match"] == "1",
                    float(row["psnr_db"]),
                    float(row["ssim"]),
                    row["true_bits"],
                    row["decoded_bits"],
                    row["params"],
                    row["error"],
                )
            )
    return out


def matched_noise(lab: Lab, attacks: list[AttackConfig], calibration: int) -> list[AttackConfig]:
    """Replace noise sigmas with ones matching the first regen attack's mean PSNR."""
    ref = next((a for a in attacks if a.kind == "regen"), None)
    if ref is None:
        log.warning("calibrate_noise set but no regen attack to match; leaving sigmas unchanged")
        return attacks
    ids = list(range(min(calibration, len(lab.images))))
    target = _mean([r.psnr_db for r in evaluate(lab, [ref], lab.cfg.threads, ids)])
    out = []
    for a in attacks:
        if a.kind == "gaussian_noise":
            sigma = calibrate_noise_sigma(
                [lab.watermarked[i] for i in ids],
                target,
                RngStream(lab.cfg.seed, "calibrate").generator(),
                references=[lab.images[i] for i in ids],
            )
            log.info("noise attack %s calibrated to sigma=%.6g (target PSNR %.3f dB)", a.name, sigma, target)
            a = a.replace(sigma=sigma)
        out.append(a)
    return out


def tune_eta(
    lab: Lab,
    strength: float,
    sampler: str = "ddim",
    substeps: int = 50,
    calibration: int = 32,
    target: float = GUIDED_TARGET_ACC,
    grid=ETA_GRID,
) -> float:
    """Smallest eta (as a multiple of beta, from ``grid``) whose full-window guided
    attack brings mean bit accuracy on the calibration images to ``target`` or below.
    """
    ids = list(range(min(calibration, len(lab.images))))
    eta = grid[-1] * lab.key.beta
    for factor in grid:
        cand = factor * lab.key.beta
        cfg = AttackConfig(
            "regen_guided",
            {"strength": strength, "sampler": sampler, "substeps": substeps, "eta": cand, "window": "full"},
            lab.cfg.seed,
            "eta_tuning",
        )
        acc = _mean([r.bit_accuracy for r in evaluate(lab, [cfg], lab.cfg.threads, ids)])
        if acc <= target:
            eta = cand
            break
    log.info("tuned eta=%.6g at strength %.3f", eta, strength)
    return eta


def _resolve_auto_eta(lab: Lab, attacks) -> list[AttackConfig]:
    out = []
    for a in attacks:
        if a.kind == "regen_guided" and a.params["eta"] is None:
            p = a.params
            a = a.replace(eta=tune_eta(lab, p["strength"], p["sampler"], p["substeps"], lab.cfg.sweep.calibration))
        out.append(a)
    return out


def run_experiment(cfg: ExperimentConfig, write: bool = True, lab: Lab | None = None) -> ReportTable:
    """Embed a fresh random message per image, apply every attack, decode, aggregate.

    A ``no_attack`` control row is always first.
    """
    cfg.validate()
    lab = lab or prepare(cfg)
    attacks = list(cfg.attacks)
    if cfg.calibrate_noise:
        attacks = matched_noise(lab, attacks, cfg.sweep.calibration)
    attacks = [NO_ATTACK] + _resolve_auto_eta(lab, attacks)
    records = evaluate(lab, attacks, cfg.threads)
    rows = aggregate(records, lab.setting, [a.name for a in attacks], cfg.metrics.mi)
    meta = dict(METADATA, seed=cfg.seed, setting=lab.setting, images=len(lab.images))
    table = ReportTable(rows, records, meta)
    if write:
        os.makedirs(cfg.output, exist_ok=True)
        if cfg.dataset.export:
            export_dataset(lab.images, os.path.join(cfg.output, "dataset"))
        write_csv(os.path.join(cfg.output, "trials.csv"), TRIAL_COLUMNS, records)
        write_csv(os.path.join(cfg.output, "report.csv"), REPORT_COLUMNS, rows)
        with open(os.path.join(cfg.output, "metadata.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return table


@dataclass
class SweepRow:
    strength: float
    variant: str
    eta: float
    row: ReportRow

    def as_dict(self) -> dict:
        return {"strength": self.strength, "variant": self.variant, "eta": self.eta, **asdict(self.row)}


def sweep_attacks(cfg: ExperimentConfig, lab: Lab, strengths) -> list[tuple[float, str, float, AttackConfig]]:
    sw = cfg.sweep
    plan = []
    for s in strengths:
        base = {"strength": float(s), "sampler": sw.sampler, "substeps": sw.substeps}
        plan.append((float(s), "unguided", 0.0, AttackConfig("regen", base, cfg.seed, f"regen@{s:g}")))
        if sw.guided:
            eta = sw.eta * lab.key.beta if sw.eta is not None else tune_eta(
                lab, float(s), sw.sampler, sw.substeps, sw.calibration
            )
            for variant, window in (("guided_full", "full"), (f"guided_last{sw.window_fraction:g}", f"last:{sw.window_fraction!r}")):
                plan.append(
                    (
                        float(s),
                        variant,
                        eta,
                        # same seed and trial labels as unguided: identical forward noise
                        AttackConfig("regen_guided", {**base, "eta": eta, "window": window}, cfg.seed, f"regen@{s:g}"),
                    )
                )
    return plan


def run_sweep(cfg: ExperimentConfig, strengths=None, write: bool = True, lab: Lab | None = None) -> list[SweepRow]:
    """One row per strength for unguided regeneration, plus full-window and
    last-window guided variants at a shared eta when ``sweep.guided`` is on.

    ``sweep.eta`` is a multiple of beta; ``auto`` tunes it per strength.
    """
    cfg.validate(require_attacks=False)
    lab = lab or prepare(cfg)
    strengths = cfg.sweep.strengths if strengths is None else tuple(strengths)
    out = []
    for s, variant, eta, attack in sweep_attacks(cfg, lab, strengths):
        records = evaluate(lab, [attack], cfg.threads)
        row = aggregate(records, lab.setting, [attack.name], cfg.metrics.mi)[0]
        out.append(SweepRow(s, variant, eta, row))
    if write:
        os.makedirs(cfg.output, exist_ok=True)
        write_csv(os.path.join(cfg.output, "sweep.csv"), SWEEP_COLUMNS, [r.as_dict() for r in out])
    return out


def strength_point(lab: Lab, threads: int = 1, sampler: str = "ddim", substeps: int = 50):
    """Adapter for theory.mi_curve: strength -> (ChannelStats, per-bit acc, message rate)."""

    def run(strength: float):
        attack = AttackConfig("regen", {"strength": strength, "sampler": sampler, "substeps": substeps}, lab.cfg.seed, f"regen@{strength:g}")
        recs = evaluate(lab, [attack], threads)
        stats = ChannelStats(lab.key.k)
        stats.add(np.array([_bits(r.true_bits) for r in recs]), np.array([_bits(r.decoded_bits) for r in recs]))
        return stats, _mean([r.bit_accuracy for r in recs]), sum(r.exact_match for r in recs) / len(recs)

    return run


def rereport(trials_path, out_path, columns=REPORT_COLUMNS) -> list[ReportRow]:
    """Re-aggregate a trials.csv into a report; ``columns`` selects what to write."""
    records = read_trials(trials_path)
    setting = os.path.basename(os.path.dirname(os.path.abspath(trials_path))) or "report"
    rows = aggregate(records, setting)
    write_csv(out_path, columns, rows)
    return rows
