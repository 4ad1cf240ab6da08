"""CAM explainer tests: hand-worked 2x2 oracles, a loop-based scripted oracle,
resampling semantics, and serialization round trips."""

import json

import numpy as np
import pytest

from vita.cam import (Heatmap, SpatialActivation, grad_cam, grad_cam_pp,
                      minmax_normalize, read_raw_f32, tokens_to_grid,
                      upsample_bilinear, write_pgm, write_raw_f32)
from vita.errors import ShapeError
from vita.model import CaptureBundle, forward


def scripted_grad_cam(grid, grad):
    """Per-channel loops, no vectorized shortcuts."""
    g, _, channels = grid.shape
    cam = np.zeros((g, g))
    for c in range(channels):
        w = grad[:, :, c].sum() / (g * g)
        cam += w * grid[:, :, c]
    cam = np.maximum(cam, 0.0)
    lo, hi = cam.min(), cam.max()
    return np.zeros_like(cam) if hi == lo else (cam - lo) / (hi - lo)


def scripted_grad_cam_pp(grid, grad):
    g, _, channels = grid.shape
    cam = np.zeros((g, g))
    for c in range(channels):
        s = grid[:, :, c].sum()
        w = 0.0
        for i in range(g):
            for j in range(g):
                gv = grad[i, j, c]
                denom = 2.0 * gv * gv + s * gv ** 3
                alpha = 0.0 if denom == 0.0 else gv * gv / denom
                w += alpha * max(gv, 0.0)
        cam += w * grid[:, :, c]
    cam = np.maximum(cam, 0.0)
    lo, hi = cam.min(), cam.max()
    return np.zeros_like(cam) if hi == lo else (cam - lo) / (hi - lo)


class TestGradCam:
    def test_hand_case_two_channels(self):
        grid = np.stack([np.array([[1.0, 2.0], [3.0, 4.0]]),
                         np.array([[0.0, 1.0], [0.0, 0.0]])], axis=2)
        grad = np.stack([np.ones((2, 2)),
                         np.array([[-2.0, 0.0], [0.0, 0.0]])], axis=2)
        # weights: mean grads = (1, -0.5); weighted sum [[1, 1.5], [3, 4]]
        out = grad_cam(SpatialActivation(grid=grid, gradient=grad))
        np.testing.assert_allclose(out.values, [[0.0, 1.0 / 6.0], [2.0 / 3.0, 1.0]],
                                   rtol=0, atol=1e-15)

    def test_all_negative_sum_collapses_to_zeros(self):
        grid = np.ones((3, 3, 2))
        grad = -np.ones((3, 3, 2))
        out = grad_cam(SpatialActivation(grid=grid, gradient=grad))
        assert np.array_equal(out.values, np.zeros((3, 3)))

    def test_constant_map_normalizes_to_zeros(self):
        grid = np.ones((3, 3, 1))
        grad = np.ones((3, 3, 1))
        out = grad_cam(SpatialActivation(grid=grid, gradient=grad))
        assert np.array_equal(out.values, np.zeros((3, 3)))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        grid = rng.normal(size=(4, 4, 6))
        grad = rng.normal(size=(4, 4, 6))
        out = grad_cam(SpatialActivation(grid=grid, gradient=grad))
        np.testing.assert_allclose(out.values, scripted_grad_cam(grid, grad),
                                   rtol=1e-12, atol=1e-12)

    def test_invariant_to_positive_gradient_scale(self):
        rng = np.random.default_rng(8)
        grid = rng.normal(size=(3, 3, 4))
        grad = rng.normal(size=(3, 3, 4))
        a = grad_cam(SpatialActivation(grid=grid, gradient=grad))
        b = grad_cam(SpatialActivation(grid=grid, gradient=grad * 37.5))
        np.testing.assert_allclose(a.values, b.values, rtol=1e-12, atol=1e-12)

    def test_range_and_extremes(self):
        rng = np.random.default_rng(9)
        grid = rng.normal(size=(5, 5, 3))
        grad = rng.normal(size=(5, 5, 3))
        out = grad_cam(SpatialActivation(grid=grid, gradient=grad))
        assert out.values.min() == 0.0 and out.values.max() == 1.0


class TestGradCamPP:
    def test_hand_case_single_channel(self):
        grid = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        grad = np.array([[0.5, -1.0], [2.0, 0.0]]).reshape(2, 2, 1)
        # alpha = [[1/7, -1/8], [1/22, 0]], relu(g) = [[0.5, 0], [2, 0]],
        # weight = 0.5/7 + 2/22 = 25/154; map proportional to the activations
        out = grad_cam_pp(SpatialActivation(grid=grid, gradient=grad))
        np.testing.assert_allclose(out.values, [[0.0, 1.0 / 3.0], [2.0 / 3.0, 1.0]],
                                   rtol=1e-12)

    def test_zero_denominator_positions_dropped(self):
        grid = np.zeros((2, 2, 1))  # sum of activations 0 and grads 0 -> denom 0
        grad = np.zeros((2, 2, 1))
        out = grad_cam_pp(SpatialActivation(grid=grid, gradient=grad))
        assert np.array_equal(out.values, np.zeros((2, 2)))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        grid = rng.normal(size=(4, 4, 6))
        grad = rng.normal(size=(4, 4, 6))
        out = grad_cam_pp(SpatialActivation(grid=grid, gradient=grad))
        np.testing.assert_allclose(out.values, scripted_grad_cam_pp(grid, grad),
                                   rtol=1e-12, atol=1e-12)

    def test_agrees_with_grad_cam_on_uniform_positive_grad(self):
        # constant positive gradient makes both weightings proportional,
        # and min-max normalization erases the constant
        rng = np.random.default_rng(12)
        grid = np.abs(rng.normal(size=(4, 4, 1))) + 0.1
        grad = np.full((4, 4, 1), 0.7)
        a = grad_cam(SpatialActivation(grid=grid, gradient=grad))
        b = grad_cam_pp(SpatialActivation(grid=grid, gradient=grad))
        np.testing.assert_allclose(a.values, b.values, rtol=1e-10)


class TestTokensToGrid:
    def _bundle(self, tokens, channels, grad=True):
        captured = np.arange(tokens * channels, dtype=np.float64).reshape(tokens, channels)
        gradient = captured * 2.0 if grad else None
        return CaptureBundle(logits=np.zeros(3), captured=captured, gradient=gradient,
                             astro_trace=None, capture_block=1,
                             _logits_t=None, _captured_t=None)

    def test_raster_order(self, toy_config):
        g = toy_config.grid
        bundle = self._bundle(toy_config.tokens, toy_config.embed_dim)
        sa = tokens_to_grid(bundle, toy_config)
        assert sa.grid.shape == (g, g, toy_config.embed_dim)
        for r in range(g):
            for c in range(g):
                token = 1 + r * g + c
                np.testing.assert_array_equal(sa.grid[r, c], bundle.captured[token])
                np.testing.assert_array_equal(sa.gradient[r, c], bundle.gradient[token])

    def test_requires_gradient(self, toy_config):
        with pytest.raises(ValueError, match="backward"):
            tokens_to_grid(self._bundle(toy_config.tokens, 8, grad=False), toy_config)

    def test_token_count_mismatch(self, toy_config):
        with pytest.raises(ShapeError, match="grid"):
            tokens_to_grid(self._bundle(toy_config.tokens + 1, 8), toy_config)

    def test_end_to_end_from_forward(self, toy_config, toy_weights, toy_image):
        bundle = forward(toy_image, toy_weights, toy_config)
        bundle.backward(int(np.argmax(bundle.logits)))
        heat = grad_cam(tokens_to_grid(bundle, toy_config))
        assert heat.values.shape == (toy_config.grid, toy_config.grid)
        assert heat.values.min() >= 0.0 and heat.values.max() <= 1.0


class TestUpsample:
    def test_checkerboard_hand_oracle(self):
        src = Heatmap(values=np.array([[0.0, 1.0], [1.0, 0.0]]))
        out = upsample_bilinear(src, 4, renormalize=False)
        want = np.array([
            [0.0, 0.25, 0.75, 1.0],
            [0.25, 0.375, 0.625, 0.75],
            [0.75, 0.625, 0.375, 0.25],
            [1.0, 0.75, 0.25, 0.0],
        ])
        np.testing.assert_allclose(out.values, want, rtol=0, atol=1e-15)

    def test_identity_when_same_size(self):
        rng = np.random.default_rng(3)
        v = rng.uniform(size=(5, 5))
        out = upsample_bilinear(Heatmap(values=v), 5, renormalize=False)
        np.testing.assert_allclose(out.values, v, rtol=0, atol=1e-15)

    def test_constant_stays_constant(self):
        out = upsample_bilinear(Heatmap(values=np.full((3, 3), 0.4)), 7, renormalize=False)
        np.testing.assert_allclose(out.values, np.full((7, 7), 0.4), rtol=1e-15)

    def test_renormalize_restores_full_range(self):
        src = Heatmap(values=np.array([[0.0, 1.0], [1.0, 0.0]]))
        out = upsample_bilinear(src, 8)
        assert out.values.min() == 0.0 and out.values.max() == 1.0

    def test_rejects_downsampling(self):
        with pytest.raises(ShapeError, match="smaller"):
            upsample_bilinear(Heatmap(values=np.zeros((4, 4))), 3)

    def test_vit_geometry(self):
        rng = np.random.default_rng(6)
        out = upsample_bilinear(Heatmap(values=rng.uniform(size=(14, 14))), 224)
        assert out.values.shape == (224, 224)
        assert out.values.min() >= 0.0 and out.values.max() <= 1.0

    def test_preserves_monotone_gradient_direction(self):
        # a left-to-right ramp stays non-decreasing along rows
        src = Heatmap(values=np.tile(np.linspace(0, 1, 4), (4, 1)))
        out = upsample_bilinear(src, 16, renormalize=False)
        assert np.all(np.diff(out.values, axis=1) >= -1e-15)


class TestMinmax:
    def test_affine_map(self):
        v = np.array([[2.0, 4.0], [6.0, 10.0]])
        np.testing.assert_allclose(minmax_normalize(v), [[0.0, 0.25], [0.5, 1.0]])

    def test_constant(self):
        assert np.array_equal(minmax_normalize(np.full((2, 2), 3.3)), np.zeros((2, 2)))


class TestSerialization:
    def test_pgm_bytes(self, tmp_path):
        h = Heatmap(values=np.array([[0.0, 1.0], [0.5, 0.25]]))
        path = tmp_path / "map.pgm"
        write_pgm(h, path)
        blob = path.read_bytes()
        assert blob == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64])

    def test_raw_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        h = Heatmap(values=rng.uniform(size=(6, 4)))
        path = tmp_path / "map.f32"
        write_raw_f32(h, path, extra={"note": "x"})
        meta = json.loads((tmp_path / "map.f32.json").read_text())
        assert meta["width"] == 4 and meta["height"] == 6 and meta["note"] == "x"
        back = read_raw_f32(path)
        assert back.values.shape == (6, 4)
        np.testing.assert_allclose(back.values, h.values, atol=1e-7)

    def test_raw_size_mismatch(self, tmp_path):
        h = Heatmap(values=np.zeros((2, 2)))
        path = tmp_path / "map.f32"
        write_raw_f32(h, path)
        meta = json.loads((tmp_path / "map.f32.json").read_text())
        meta["width"] = 3
        (tmp_path / "map.f32.json").write_text(json.dumps(meta))
        with pytest.raises(ShapeError, match="sidecar"):
            read_raw_f32(path)
