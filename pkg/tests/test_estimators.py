import numpy as np
import pytest

import oracles
from illumest import (
    DataError,
    DegenerateEstimateError,
    EstimatorConfig,
    IlluminantEstimate,
    LinearImage,
    NAMED_ESTIMATORS,
    angular_error,
    estimate_illuminant,
    estimate_named,
    von_kries_correct,
)
from illumest.estimators import do_nothing


NAMED_TABLE = {
    "GW": (0, 1.0, 0.0),
    "WP": (0, np.inf, 0.0),
    "SoG": (0, 4.0, 0.0),
    "gGW": (0, 9.0, 9.0),
    "GE1": (1, 1.0, 6.0),
    "GE2": (2, 1.0, 1.0),
}


class TestConfig:
    def test_named_table(self):
        assert set(NAMED_ESTIMATORS) == set(NAMED_TABLE)
        for name, (order, p, sigma) in NAMED_TABLE.items():
            cfg = NAMED_ESTIMATORS[name]
            assert cfg.derivative_order == order
            assert cfg.minkowski_p == p
            assert cfg.sigma == sigma

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(derivative_order=3),
            dict(derivative_order=-1),
            dict(minkowski_p=0.5),
            dict(minkowski_p=0.0),
            dict(sigma=-1.0),
            dict(sigma=np.nan),
        ],
    )
    def test_rejects_bad_parameters(self, kwargs):
        with pytest.raises(ValueError):
            EstimatorConfig(**{**dict(derivative_order=0, minkowski_p=1.0, sigma=0.0),
                               **kwargs})


class TestSimpleClosedForms:
    def test_gray_world_is_channel_means(self, rng):
        data = rng.uniform(0.0, 1.0, (24, 31, 3)).astype(np.float32)
        est = estimate_named(LinearImage(data), "GW")
        means = data.astype(np.float64).mean(axis=(0, 1))
        expect = means / np.linalg.norm(means)
        assert np.allclose(est.rgb, expect, atol=1e-12)

    def test_white_point_is_channel_maxima(self, rng):
        data = rng.uniform(0.0, 1.0, (24, 31, 3)).astype(np.float32)
        est = estimate_named(LinearImage(data), "WP")
        maxes = data.astype(np.float64).max(axis=(0, 1))
        expect = maxes / np.linalg.norm(maxes)
        assert np.allclose(est.rgb, expect, atol=1e-12)

    def test_constant_image_recovers_cast(self):
        tint = np.array([0.7, 1.0, 0.4])
        data = np.tile(tint, (40, 40, 1)).astype(np.float32)
        img = LinearImage(data)
        for name in ("GW", "WP", "SoG", "gGW"):
            est = estimate_named(img, name)
            assert angular_error(est.rgb, tint) < 1e-4, name

    def test_do_nothing(self):
        est = do_nothing()
        assert np.allclose(est.rgb, np.ones(3) / np.sqrt(3))


class TestOracleAgreement:
    """The production path must agree with a loop-based reference."""

    @pytest.mark.parametrize("name", sorted(NAMED_TABLE))
    def test_named_estimators_match_reference(self, name, rng):
        # min side >= 28 so the widest kernel only reflects once at borders
        for trial in range(4):
            h = int(rng.integers(28, 48))
            w = int(rng.integers(28, 48))
            data = rng.uniform(0.01, 1.0, (h, w, 3)).astype(np.float32)
            img = LinearImage(data)
            est = estimate_illuminant(img, NAMED_ESTIMATORS[name])
            raw = oracles.estimate_ref(data, None, *NAMED_TABLE[name])
            sim = oracles.cosine_similarity(est.rgb, raw)
            assert sim > 1.0 - 1e-9, f"{name} trial {trial}: cos={sim}"

    def test_random_configs_match_reference(self, rng):
        for trial in range(12):
            order = int(rng.integers(0, 3))
            p = float(rng.choice([1.0, 2.0, 3.0, 5.0, np.inf]))
            sigma = float(rng.choice([0.0, 1.0, 2.0]))
            if order > 0 and sigma == 0.0:
                sigma = 1.0
            data = rng.uniform(0.01, 1.0, (30, 33, 3)).astype(np.float32)
            cfg = EstimatorConfig(order, p, sigma)
            est = estimate_illuminant(LinearImage(data), cfg)
            raw = oracles.estimate_ref(data, None, order, p, sigma)
            sim = oracles.cosine_similarity(est.rgb, raw)
            assert sim > 1.0 - 1e-9, f"trial {trial} ({order},{p},{sigma})"

    def test_smoothing_matches_separable_reference(self, rng):
        data = rng.uniform(0, 1, (30, 30)).astype(np.float64)
        from illumest.estimators import _smooth

        ours = _smooth(data, 2.0)
        ref = oracles.smooth_ref(data, 2.0)
        assert np.allclose(ours, ref, atol=1e-12)

    def test_gradient_matches_reference(self, rng):
        data = rng.uniform(0, 1, (20, 22)).astype(np.float64)
        gy, gx = np.gradient(data)
        ry, rx = oracles.gradient_ref(data)
        assert np.allclose(gy, ry, atol=1e-14)
        assert np.allclose(gx, rx, atol=1e-14)


class TestInvariants:
    def test_exposure_invariance(self, rng, make_image):
        img = make_image(rng, 32, 32, lo=0.05, hi=0.5)
        bright = LinearImage(img.data * 1.9)
        for name in NAMED_TABLE:
            a = estimate_named(img, name)
            b = estimate_named(bright, name)
            assert angular_error(a.rgb, b.rgb) < 1e-5, name

    def test_unit_norm_and_nonnegative(self, rng, make_image):
        img = make_image(rng, 32, 32)
        for name in NAMED_TABLE:
            est = estimate_named(img, name)
            assert np.linalg.norm(est.rgb) == pytest.approx(1.0, abs=1e-12)
            assert (est.rgb >= 0).all()

    def test_correction_neutralizes_cast(self, rng):
        gray = rng.uniform(0.1, 0.9, (48, 48, 1)).astype(np.float32)
        scene = np.repeat(gray, 3, axis=2)
        tint = np.array([1.3, 1.0, 0.7], dtype=np.float32)
        img = LinearImage(scene * tint)
        est = estimate_named(img, "GW")
        out = von_kries_correct(img, est)
        ratio = out.data[:, :, 0] / out.data[:, :, 1]
        assert np.allclose(ratio, 1.0, atol=1e-4)

    def test_mask_excludes_pixels(self, rng):
        data = rng.uniform(0.1, 0.5, (32, 32, 3)).astype(np.float32)
        spoiled = data.copy()
        spoiled[:4, :4] = [50.0, 0.1, 0.1]  # would dominate WP
        mask = np.zeros((32, 32), bool)
        mask[:4, :4] = True
        # no smoothing in WP, so masked pixel values cannot leak at all
        clean = estimate_named(LinearImage(data, mask), "WP")
        masked = estimate_named(LinearImage(spoiled, mask), "WP")
        unmasked = estimate_named(LinearImage(spoiled), "WP")
        assert angular_error(masked.rgb, clean.rgb) < 1e-12
        assert angular_error(unmasked.rgb, clean.rgb) > 5.0

    def test_masked_estimate_matches_reference(self, rng):
        # masked pixels still participate in their neighbors' smoothing and
        # differentiation; they are only excluded from the final pooling
        data = rng.uniform(0.1, 1.0, (40, 40, 3)).astype(np.float32)
        mask = np.zeros((40, 40), bool)
        mask[:8] = True
        for name in ("GW", "GE1", "GE2"):
            est = estimate_named(LinearImage(data, mask), name)
            raw = oracles.estimate_ref(data, mask, *NAMED_TABLE[name])
            sim = oracles.cosine_similarity(est.rgb, raw)
            assert sim > 1.0 - 1e-9, name


class TestDegenerate:
    def test_all_masked(self, rng):
        data = rng.uniform(0.1, 1.0, (32, 32, 3)).astype(np.float32)
        img = LinearImage(data, np.ones((32, 32), bool))
        with pytest.raises(DegenerateEstimateError):
            estimate_named(img, "GW")

    def test_black_image_first_order(self):
        img = LinearImage(np.zeros((32, 32, 3), np.float32))
        with pytest.raises(DegenerateEstimateError):
            estimate_named(img, "GE1")

    def test_unknown_name(self, rng, make_image):
        with pytest.raises(ValueError):
            estimate_named(make_image(rng), "nope")

    def test_estimate_is_illuminant_type(self, rng, make_image):
        assert isinstance(estimate_named(make_image(rng), "GW"), IlluminantEstimate)
