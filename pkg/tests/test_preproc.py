import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gemfuse import preproc
from gemfuse.errors import EstimationFailed, InvalidInput, InvalidParameter
from gemfuse.preproc import RshConfig


def random_projective(rng, size=64.0):
    """A mild projective transform that keeps a size x size image roughly in view."""
    h = np.eye(3)
    h[:2, :2] += rng.uniform(-0.15, 0.15, size=(2, 2))
    h[:2, 2] = rng.uniform(-6, 6, size=2)
    h[2, :2] = rng.uniform(-8e-4, 8e-4, size=2)
    return h


def correspondences(h, pts):
    return np.hstack([pts, preproc.apply_homography(h, pts)])


class TestRBlend:
    def test_default_alpha(self):
        depth = np.full((1, 2, 2), 0.4)
        rgb = np.stack([np.full((2, 2), 0.8), np.zeros((2, 2)), np.ones((2, 2))])
        np.testing.assert_allclose(preproc.r_blend(depth, rgb), 0.44, atol=1e-15)

    def test_endpoints_exact(self):
        rng = np.random.default_rng(0)
        depth, rgb = rng.uniform(size=(1, 5, 6)), rng.uniform(size=(3, 5, 6))
        assert np.array_equal(preproc.r_blend(depth, rgb, 1.0), depth)
        assert np.array_equal(preproc.r_blend(depth, rgb, 0.0), rgb[:1])

    def test_size_mismatch(self):
        with pytest.raises(InvalidInput):
            preproc.r_blend(np.zeros((1, 4, 4)), np.zeros((3, 4, 5)))
        with pytest.raises(InvalidInput):
            preproc.r_blend(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)))

    def test_alpha_range(self):
        with pytest.raises(InvalidParameter):
            preproc.r_blend(np.zeros((1, 2, 2)), np.zeros((3, 2, 2)), 1.5)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 2**31))
    def test_affine_and_never_clamped_on_valid_input(self, alpha, seed):
        rng = np.random.default_rng(seed)
        depth, rgb = rng.uniform(size=(1, 3, 3)), rng.uniform(size=(3, 3, 3))
        out = preproc.r_blend(depth, rgb, alpha)
        np.testing.assert_allclose(out, alpha * depth + (1 - alpha) * rgb[:1], atol=1e-15)


class TestHomography:
    pts = np.array([[0, 0], [63, 0], [63, 63], [0, 63], [20, 31], [45, 12]], dtype=float)

    def test_identity(self):
        h = preproc.estimate_homography(np.hstack([self.pts, self.pts]))
        np.testing.assert_allclose(h.matrix, np.eye(3), atol=1e-9)

    def test_translation(self):
        h = preproc.estimate_homography(np.hstack([self.pts, self.pts + [5, 3]]))
        np.testing.assert_allclose(h.matrix, [[1, 0, 5], [0, 1, 3], [0, 0, 1]], atol=1e-9)
        assert h.max_residual < 1e-6
        assert h.matrix[2, 2] == 1.0

    def test_noisy_recovery(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            true = random_projective(rng)
            src = rng.uniform(0, 64, size=(20, 2))
            c = correspondences(true, src)
            c[:, 2:] += rng.uniform(-0.5, 0.5, size=(20, 2))
            est = preproc.estimate_homography(c)
            clean = preproc.apply_homography(est.matrix, src) - preproc.apply_homography(true, src)
            assert est.mean_residual < 1.0
            assert np.linalg.norm(clean, axis=1).mean() < 1.0

    def test_too_few_points(self):
        with pytest.raises(EstimationFailed):
            preproc.estimate_homography(np.hstack([self.pts[:3], self.pts[:3]]))

    def test_collinear(self):
        line = np.stack([np.arange(6.0), 2 * np.arange(6.0) + 1], axis=1)
        with pytest.raises(EstimationFailed):
            preproc.estimate_homography(np.hstack([line, line + 1]))

    def test_bad_shape(self):
        with pytest.raises(EstimationFailed):
            preproc.estimate_homography(np.zeros((5, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 100))
    def test_normalized_estimate_scale_invariant(self, seed, scale):
        rng = np.random.default_rng(seed)
        src = rng.uniform(0, 64, size=(8, 2))
        c = correspondences(random_projective(rng), src)
        c[:, 2:] += rng.uniform(-0.5, 0.5, size=(8, 2))
        a = preproc.estimate_homography(c).normalized
        b = preproc.estimate_homography(c * scale).normalized
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_json_layout(self):
        d = preproc.estimate_homography(np.hstack([self.pts, self.pts + 1])).to_json_dict()
        assert len(d["H"]) == 9 and d["n_points"] == len(self.pts)
        assert {"residual_mean", "residual_max"} <= set(d)


def smooth_image(rows=48, cols=48):
    ys, xs = np.mgrid[0:rows, 0:cols] / 48.0
    return (0.5 + 0.25 * np.sin(2 * xs + 1) * np.cos(3 * ys))[None]


class TestWarp:
    def test_identity_bit_exact(self):
        img = np.random.default_rng(0).uniform(size=(3, 10, 12))
        assert np.array_equal(preproc.warp_image(img, np.eye(3)), img)

    def test_integer_translation(self):
        img = np.random.default_rng(1).uniform(size=(1, 10, 12))
        h = np.array([[1.0, 0, 5], [0, 1, 0], [0, 0, 1]])
        out = preproc.warp_image(img, h)
        assert np.array_equal(out[:, :, 5:], img[:, :, :-5])
        assert np.all(out[:, :, :5] == 0.0)

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        img = smooth_image()
        for _ in range(5):
            h = random_projective(rng, 48) * 0.5 + np.eye(3) * 0.5
            back = preproc.warp_image(preproc.warp_image(img, h), np.linalg.inv(h))
            err = np.abs(back - img)[:, 10:-10, 10:-10]
            assert err.max() <= 2 / 255

    def test_out_size(self):
        assert preproc.warp_image(np.ones((1, 4, 4)), np.eye(3), (6, 3)).shape == (1, 6, 3)

    def test_singular(self):
        with pytest.raises(InvalidParameter):
            preproc.warp_image(np.ones((1, 4, 4)), np.zeros((3, 3)))


class TestRsh:
    def test_disabled_is_identity(self):
        img = np.random.default_rng(0).uniform(size=(3, 16, 16))
        assert np.array_equal(preproc.apply_rsh(img, RshConfig.disabled(), np.random.default_rng(1)), img)

    def test_full_image_shadow_halves(self):
        img = np.random.default_rng(0).uniform(size=(3, 8, 8))
        out = preproc.shade_polygon(img, [(-1, -1), (9, -1), (9, 9), (-1, 9)], 0.5)
        np.testing.assert_array_equal(out, img * 0.5)

    def test_highlight_clamps(self):
        out = preproc.shade_polygon(np.full((1, 4, 4), 0.9), [(-1, -1), (5, -1), (5, 5), (-1, 5)], 1.5)
        assert np.all(out == 1.0)

    def test_deterministic(self):
        img = np.random.default_rng(0).uniform(size=(3, 32, 32))
        a = preproc.apply_rsh(img, RshConfig(), np.random.default_rng(7))
        b = preproc.apply_rsh(img, RshConfig(), np.random.default_rng(7))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, img)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_only_multiplies(self, seed):
        # geometry is untouched: zero pixels stay zero and output stays in range
        img = np.random.default_rng(seed).uniform(size=(3, 20, 20))
        img[:, :5] = 0.0
        out = preproc.apply_rsh(img, RshConfig(), np.random.default_rng(seed + 1))
        assert np.all(out[:, :5] == 0.0)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_polygons_are_convex(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            v = preproc.random_convex_polygon(rng, 64, 64, RshConfig())
            e = np.roll(v, -1, axis=0) - v
            cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
            assert np.all(cross >= -1e-9) or np.all(cross <= 1e-9)

    @pytest.mark.parametrize(
        "kwargs",
        [{"shadow_factor": (0.5, 1.2)}, {"highlight_factor": (0.9, 1.5)}, {"vertices": (2, 4)}, {"shadow_count": (3, 1)}],
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(InvalidParameter):
            RshConfig(**kwargs)
