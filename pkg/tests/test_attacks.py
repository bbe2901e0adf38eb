import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regenlab.attacks import (
    KINDS,
    AttackConfig,
    AttackDeps,
    blur,
    calibrate_noise_sigma,
    fgsm,
    gaussian_kernel,
    gaussian_noise,
    jpeg_sim,
    parse_window,
    quant_table,
    run_attack,
)
from regenlab.core import Image, Message, RngStream, psnr
from regenlab.diffusion import MixturePrior, make_schedule
from regenlab.theory import phi
from regenlab.watermark import decode, embed, keygen


def dct_matrix(n=8):
    """Orthonormal DCT-II basis built from its definition."""
    d = np.empty((n, n))
    for u in range(n):
        a = math.sqrt(1 / n) if u == 0 else math.sqrt(2 / n)
        for i in range(n):
            d[u, i] = a * math.cos(math.pi * (2 * i + 1) * u / (2 * n))
    return d


def block_coeffs(a):
    """Per-block DCT coefficients of a (H, W) array on the 0..255 scale, H and W multiples of 8."""
    d = dct_matrix()
    h, w = a.shape
    out = np.empty((h // 8, w // 8, 8, 8))
    for by in range(h // 8):
        for bx in range(w // 8):
            blk = a[8 * by : 8 * by + 8, 8 * bx : 8 * bx + 8] * 255 - 128
            out[by, bx] = d @ blk @ d.T
    return out


def smooth_image(h=32, w=32, seed=0):
    gen = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    f = 0.5 + sum(0.05 * gen.normal() * np.cos(2 * np.pi * (gen.integers(1, 4) * xx + gen.integers(0, 3) * yy)) for _ in range(4))
    return Image(f + gen.normal(0, 0.03, (h, w)))


class TestNoise:
    def test_zero_sigma_identity(self):
        x = smooth_image()
        assert gaussian_noise(x, 0.0, 1) is x

    def test_psnr_near_30db(self):
        x = smooth_image(128, 128)
        y = gaussian_noise(x, 0.0316, RngStream(1))
        assert psnr(x, y) == pytest.approx(30.0, abs=0.2)

    def test_mse_equals_variance(self):
        x = smooth_image(64, 64)
        sigma = 0.1
        diffs = [np.mean((gaussian_noise(x, sigma, RngStream(i)).data - x.data) ** 2) for i in range(50)]
        n = 50 * x.size
        assert abs(np.mean(diffs) - sigma**2) < 3 * sigma**2 * math.sqrt(2 / n)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_noise(smooth_image(), -0.1, 0)

    def test_calibration_hits_target(self):
        imgs = [smooth_image(32, 32, s) for s in range(4)]
        sigma = calibrate_noise_sigma(imgs, 30.0, RngStream(3))
        assert sigma == pytest.approx(10 ** (-1.5), rel=0.06)

    def test_bit_accuracy_follows_phi(self):
        key = keygen(16, (32, 32), 0.64, 4)
        deps = AttackDeps(key=key)
        sigma = 0.64
        cfg = AttackConfig("gaussian_noise", {"sigma": sigma}, seed=9)
        hits = trials = 0
        for i in range(300):
            m = Message.random(16, np.random.default_rng(i))
            y = run_attack(embed(smooth_image(seed=i), m, key), cfg, deps, RngStream(9).child(i))
            hits += int(np.sum(decode(y, key).bits.bits == m.bits))
            trials += 16
        p = phi(1.0)
        assert abs(hits / trials - p) < 3 * math.sqrt(p * (1 - p) / trials)


class TestBlur:
    @settings(max_examples=30, deadline=None)
    @given(st.floats(-5, 5), st.sampled_from([3, 5, 7]), st.floats(0.3, 3.0))
    def test_constant_image_exact(self, c, size, sigma):
        x = Image(np.full((9, 11, 3), c))
        assert np.array_equal(blur(x, size, sigma).data, x.data)

    def test_impulse_center_weight(self):
        a = np.zeros((11, 11))
        a[5, 5] = 1.0
        g = np.exp(-0.5 * np.arange(-2, 3) ** 2)
        out = blur(Image(a), 5, 1.0).data[..., 0]
        assert out[5, 5] == pytest.approx(g[2] ** 2 / g.sum() ** 2, rel=1e-12)
        # separable: the response is the outer product of the 1-D kernel
        assert np.allclose(out[3:8, 3:8], np.outer(g, g) / g.sum() ** 2, rtol=1e-12)

    def test_mass_preserved_with_flat_border(self):
        a = np.zeros((20, 20))
        a[4:16, 4:16] = np.random.default_rng(2).uniform(size=(12, 12))
        assert blur(Image(a)).data.sum() == pytest.approx(a.sum(), rel=1e-12)

    def test_bad_kernel(self):
        with pytest.raises(ValueError):
            gaussian_kernel(4, 1.0)
        with pytest.raises(ValueError):
            gaussian_kernel(5, 0.0)


class TestJpeg:
    def test_quant_table_scaling(self):
        assert np.all(quant_table(100) == 1)
        assert quant_table(50)[0, 0] == 16 and quant_table(50)[7, 7] == 99
        # q=25: scale 200, base 16 -> 32
        assert quant_table(25)[0, 0] == 32
        # q=75: scale 50, base 11 -> floor(5.5 + 0.5) = 6
        assert quant_table(75)[0, 1] == 6
        for q in (0, 101):
            with pytest.raises(ValueError):
                quant_table(q)

    def test_quality_100_error_bounds(self):
        # unit steps leave coefficient errors in [-0.5, 0.5]; the orthonormal
        # transform keeps the RMS below 0.5 and bounds each pixel by the block norm (4)
        x = smooth_image(64, 64, 1)
        err = (jpeg_sim(x, 100).data - x.data) * 255
        assert np.sqrt(np.mean(err**2)) <= 0.5
        assert np.max(np.abs(err)) <= 4.0
        assert np.mean(np.abs(err)) < 1.0

    def test_quality_100_exact_on_lattice_images(self):
        # images whose block coefficients are already integers pass through
        y = jpeg_sim(smooth_image(32, 32, 2), 100)
        assert np.max(np.abs(jpeg_sim(y, 100).data - y.data)) < 1e-12

    @pytest.mark.parametrize("q", [10, 50, 90])
    def test_idempotent(self, q):
        y = jpeg_sim(smooth_image(32, 32, 3), q)
        assert np.max(np.abs(jpeg_sim(y, q).data - y.data)) < 1e-9

    def test_matches_direct_dct(self):
        x = smooth_image(16, 16, 4)
        q = quant_table(50)
        d = dct_matrix()
        coeff = np.round(block_coeffs(x.data[..., 0]) / q) * q
        rec = np.block([[d.T @ coeff[by, bx] @ d for bx in range(2)] for by in range(2)])
        assert np.allclose(jpeg_sim(x, 50).data[..., 0], (rec + 128) / 255, atol=1e-12)

    def test_high_frequency_energy_drops(self):
        gen = np.random.default_rng(5)
        prior = MixturePrior([0.5, 0.5], gen.uniform(0.3, 0.7, (2, 1024)), np.full((2, 1024), 0.01))
        for row in prior.sample(5, 6):
            x = Image(row.reshape(32, 32))
            before = np.abs(block_coeffs(x.data[..., 0])[..., 4:, 4:]).mean()
            after = np.abs(block_coeffs(jpeg_sim(x, 50).data[..., 0])[..., 4:, 4:]).mean()
            assert after < before

    def test_odd_size_and_colour(self):
        x = Image(np.random.default_rng(7).uniform(size=(13, 10, 3)))
        y = jpeg_sim(x, 50)
        assert y.shape == x.shape
        for c in range(3):
            single = jpeg_sim(Image(x.data[..., c]), 50)
            assert np.array_equal(y.data[..., c], single.data[..., 0])


@pytest.fixture(scope="module")
def key():
    return keygen(8, (32, 32), 0.64, 5)


class TestFgsm:
    def test_linf_exact(self, key):
        x = smooth_image()
        m = Message.random(8, np.random.default_rng(0))
        eps = 4 / 255
        y = fgsm(embed(x, m, key), m, key, eps)
        d = np.abs(y.data - embed(x, m, key).data)
        assert np.max(d) <= eps + 1e-15
        assert np.max(d) >= eps - 1e-15

    def test_zero_eps_identity(self, key):
        x = smooth_image()
        assert fgsm(x, Message.random(8, np.random.default_rng(0)), key, 0.0) is x
        with pytest.raises(ValueError):
            fgsm(x, Message.random(8, np.random.default_rng(0)), key, -1.0)

    def test_lowers_accuracy_under_noise(self, key):
        gen = np.random.default_rng(1)
        plain = attacked = 0
        for i in range(200):
            m = Message.random(8, gen)
            iw = embed(smooth_image(seed=i), m, key)
            z = gen.normal(0, 0.5, iw.shape)
            plain += np.sum(decode(iw.with_data(iw.data + z), key).bits.bits == m.bits)
            adv = fgsm(iw, m, key, 4 / 255)
            attacked += np.sum(decode(adv.with_data(adv.data + z), key).bits.bits == m.bits)
        assert attacked < plain


@pytest.fixture(scope="module")
def deps():
    gen = np.random.default_rng(0)
    prior = MixturePrior([0.5, 0.5], gen.uniform(0.3, 0.7, (2, 256)), np.full((2, 256), 0.01))
    return AttackDeps(prior, make_schedule("linear", 1000), keygen(4, (16, 16), 0.32, 1))


class TestRunAttack:
    @pytest.mark.parametrize("kind", KINDS)
    def test_dimensions_and_determinism(self, kind, deps):
        x = embed(smooth_image(16, 16), Message.from_string("1011"), deps.key)
        params = {"strength": 0.2, "substeps": 10} if kind.startswith("regen") else {}
        cfg = AttackConfig(kind, params, seed=4)
        a = run_attack(x, cfg, deps)
        b = run_attack(x, cfg, deps)
        assert a.shape == x.shape
        assert a == b

    def test_none_is_identity(self, deps):
        x = smooth_image(16, 16)
        assert run_attack(x, AttackConfig("none"), deps) is x

    @pytest.mark.parametrize("kind", ["fgsm", "regen", "regen_guided"])
    def test_missing_dependencies(self, kind):
        with pytest.raises(ValueError):
            run_attack(smooth_image(16, 16), AttackConfig(kind), AttackDeps())

    def test_guided_eta_zero_equals_unguided(self, deps):
        x = embed(smooth_image(16, 16), Message.from_string("1001"), deps.key)
        base = run_attack(x, AttackConfig("regen", {"strength": 0.3}, seed=2, name="r"), deps)
        guided = run_attack(x, AttackConfig("regen_guided", {"strength": 0.3, "eta": 0.0}, seed=2, name="r"), deps)
        assert guided == base

    def test_guidance_lowers_accuracy(self, deps):
        hits_u = hits_g = 0
        for i in range(20):
            m = Message.random(4, np.random.default_rng(i))
            x = embed(smooth_image(16, 16, i), m, deps.key)
            u = run_attack(x, AttackConfig("regen", {"strength": 0.1}, seed=i, name="r"), deps)
            g = run_attack(x, AttackConfig("regen_guided", {"strength": 0.1, "eta": 0.1}, seed=i, name="r"), deps)
            hits_u += np.sum(decode(u, deps.key).bits.bits == m.bits)
            hits_g += np.sum(decode(g, deps.key).bits.bits == m.bits)
        assert hits_g < hits_u

    @pytest.mark.parametrize(
        "kind, params",
        [
            ("gaussian_noise", {"sigma": 0.05}),
            ("blur", {"kernel_size": 7, "sigma": 2.0}),
            ("jpeg_sim", {"quality": 30}),
            ("fgsm", {"eps": 0.01}),
            ("regen", {"strength": 0.25, "sampler": "ddpm", "substeps": 20}),
            ("regen_guided", {"strength": 0.5, "eta": 0.125, "window": "last:0.2"}),
            ("regen_guided", {"window": "100:200"}),
        ],
    )
    def test_echo_roundtrip(self, kind, params):
        cfg = AttackConfig(kind, params, seed=2**63 + 1, name="n")
        back = AttackConfig.from_echo(cfg.echo(), name="n")
        assert back == cfg and back.echo() == cfg.echo()

    @pytest.mark.parametrize(
        "kind, params",
        [
            ("gaussian_noise", {"sigma": -1.0}),
            ("blur", {"kernel_size": 4}),
            ("jpeg_sim", {"quality": 0}),
            ("regen", {"strength": 1.5}),
            ("regen", {"sampler": "euler"}),
            ("regen_guided", {"window": "last:2"}),
            ("regen_guided", {"window": "sideways"}),
            ("blur", {"quality": 3}),
        ],
    )
    def test_invalid_configs(self, kind, params):
        with pytest.raises(ValueError):
            AttackConfig(kind, params)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            AttackConfig("crop")

    def test_parse_window(self):
        assert parse_window("full") == ("full", None)
        assert parse_window("last:0.2") == ("last", 0.2)
        assert parse_window("10:20") == ("range", (10, 20))
