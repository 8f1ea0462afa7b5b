import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from r2n2.field_geometry import (DisplacementField, Image2D, ShapeError, accumulate,
                                 finite_diff_gradient_check, load_field, load_image, make_grid,
                                 sample_field, save_field, save_image, warp, warp_images)


def smooth_image(h, w, seed=0, dtype=torch.float64):
    g = make_grid(h, w, dtype)
    rng = np.random.default_rng(seed)
    a, b, c = rng.uniform(0.5, 2.0, 3)
    vals = 0.5 + 0.3 * torch.sin(a * g.coords_x + b * g.coords_y) * torch.cos(c * g.coords_y)
    return Image2D(g, vals)


def random_field(grid, scale=0.1, seed=0):
    gen = torch.Generator().manual_seed(seed)
    u = scale * torch.randn(grid.shape, generator=gen, dtype=torch.float64).to(grid.dtype)
    v = scale * torch.randn(grid.shape, generator=gen, dtype=torch.float64).to(grid.dtype)
    return DisplacementField(grid, u, v)


class TestMakeGrid:
    def test_two_by_two_endpoints(self):
        g = make_grid(2, 2)
        assert_array_equal(g.coords_x.numpy(), [[-1, 1], [-1, 1]])
        assert_array_equal(g.coords_y.numpy(), [[-1, -1], [1, 1]])

    def test_middle_is_zero(self):
        g = make_grid(3, 3)
        assert g.coords_x[1, 1] == 0.0 and g.coords_y[1, 1] == 0.0

    def test_spacing_256(self):
        g = make_grid(256, 256, torch.float64)
        assert_allclose(np.diff(g.coords_x[0].numpy()), 2 / 255, rtol=1e-12)
        assert_allclose(np.diff(g.coords_y[:, 0].numpy()), 2 / 255, rtol=1e-12)
        assert g.spacing() == (2 / 255, 2 / 255)

    @pytest.mark.parametrize("h,w", [(1, 5), (5, 1), (0, 0)])
    def test_rejects_tiny(self, h, w):
        with pytest.raises(ValueError):
            make_grid(h, w)

    def test_endpoints_exact_for_odd_sizes(self):
        for n in (7, 33, 255):
            g = make_grid(n, n)
            assert g.coords_x[0, -1] == 1.0 and g.coords_y[-1, 0] == 1.0


class TestWarp:
    def test_zero_field_identity(self):
        img = smooth_image(16, 12, dtype=torch.float32)
        out = warp(img, DisplacementField.zeros(img.grid))
        assert_allclose(out.numpy(), img.numpy(), atol=1e-6)

    def test_linear_ramp_shift(self):
        g = make_grid(21, 21, torch.float64)
        ramp = Image2D(g, g.coords_x.clone())
        delta = 0.13
        f = DisplacementField(g, torch.full(g.shape, delta, dtype=torch.float64), torch.zeros(g.shape, dtype=torch.float64))
        out = warp(ramp, f).numpy()
        x = g.coords_x.numpy()
        inside = x + delta <= 1
        assert_allclose(out[inside], (x + delta)[inside], atol=1e-12)
        # beyond the border the sample clamps to the last column
        assert_allclose(out[~inside], 1.0, atol=1e-12)

    def test_constant_image(self):
        g = make_grid(10, 10)
        img = Image2D(g, torch.full(g.shape, 0.37))
        out = warp(img, random_field(g, 0.5))
        assert_allclose(out.numpy(), 0.37, atol=1e-6)

    def test_linear_in_image(self):
        a, b = smooth_image(12, 12, 1), smooth_image(12, 12, 2)
        f = random_field(a.grid, 0.2)
        lhs = warp(Image2D(a.grid, 2.0 * a.values - 0.5 * b.values), f).values
        rhs = 2.0 * warp(a, f).values - 0.5 * warp(b, f).values
        assert_allclose(lhs.numpy(), rhs.numpy(), atol=1e-6)

    def test_grid_mismatch(self):
        img = smooth_image(8, 8)
        with pytest.raises(ShapeError):
            warp(img, DisplacementField.zeros(make_grid(8, 9)))
        with pytest.raises(ShapeError):
            warp_images(torch.zeros(2, 1, 8, 8), torch.zeros(1, 2, 8, 8))

    def test_inputs_untouched(self):
        img = smooth_image(8, 8)
        f = random_field(img.grid)
        before = img.values.clone(), f.u.clone()
        warp(img, f)
        assert torch.equal(img.values, before[0]) and torch.equal(f.u, before[1])

    def test_pixel_shift_moves_content(self):
        # displacement of exactly one pixel samples the neighbour
        g = make_grid(9, 9, torch.float64)
        vals = torch.arange(81, dtype=torch.float64).reshape(9, 9)
        img = Image2D(g, vals)
        step = g.spacing()[0]
        f = DisplacementField(g, torch.full(g.shape, step, dtype=torch.float64), torch.zeros(g.shape, dtype=torch.float64))
        out = warp(img, f).numpy()
        assert_allclose(out[:, :-1], vals.numpy()[:, 1:], atol=1e-9)


class TestAccumulate:
    def test_identities_and_commutativity(self):
        g = make_grid(6, 7)
        a, b, z = random_field(g, seed=1), random_field(g, seed=2), DisplacementField.zeros(g)
        assert torch.equal(accumulate(a, z).u, a.u)
        assert torch.equal(accumulate(z, a).v, a.v)
        ab, ba = accumulate(a, b), accumulate(b, a)
        assert torch.equal(ab.u, ba.u) and torch.equal(ab.v, ba.v)

    def test_associative(self):
        g = make_grid(5, 5, torch.float64)
        a, b, c = (random_field(g, seed=s) for s in range(3))
        left = accumulate(accumulate(a, b), c)
        right = accumulate(a, accumulate(b, c))
        assert_allclose(left.as_tensor().numpy(), right.as_tensor().numpy(), atol=1e-15)

    def test_value_semantics(self):
        g = make_grid(4, 4)
        a, b = random_field(g, seed=3), random_field(g, seed=4)
        keep = a.u.clone()
        accumulate(a, b)
        assert torch.equal(a.u, keep)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            accumulate(DisplacementField.zeros(make_grid(4, 4)), DisplacementField.zeros(make_grid(5, 4)))


class TestGradientCheck:
    def test_identity_op_is_exact(self):
        # a power-of-two step makes the central difference exact
        x = torch.zeros(5, dtype=torch.float64)
        assert finite_diff_gradient_check(lambda t: t, x, eps=2.0 ** -10) == 0.0
        assert finite_diff_gradient_check(lambda t: t, torch.randn(5, dtype=torch.float64)) < 1e-10

    def test_warp_field_gradient(self):
        img = smooth_image(8, 8, 3)
        f = random_field(img.grid, 0.05, seed=5)
        err = finite_diff_gradient_check(lambda d: warp_images(img.as_batch(), d), f.as_batch(), eps=1e-4)
        assert err < 1e-3

    def test_warp_image_gradient(self):
        img = smooth_image(8, 8, 4)
        f = random_field(img.grid, 0.05, seed=6).as_batch()
        err = finite_diff_gradient_check(lambda m: warp_images(m, f), img.as_batch(), eps=1e-4)
        assert err < 1e-3

    def test_reports_kink_without_raising(self, caplog):
        x = torch.tensor([0.0, 1.0, -2.0], dtype=torch.float64)
        with caplog.at_level(logging.WARNING):
            err = finite_diff_gradient_check(torch.relu, x, eps=1e-4)
        assert err > 1e-3
        assert "gradient mismatch" in caplog.text

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_gradient_check(lambda t: t, torch.zeros(2), eps=0.0)


class TestFieldTypes:
    def test_non_finite_rejected(self):
        g = make_grid(3, 3)
        bad = torch.zeros(3, 3)
        bad[1, 1] = float("nan")
        with pytest.raises(ValueError):
            DisplacementField(g, bad, torch.zeros(3, 3))
        with pytest.raises(ValueError):
            Image2D(g, bad)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            DisplacementField(make_grid(3, 3), torch.zeros(3, 4), torch.zeros(3, 3))

    def test_sample_field_at_nodes(self):
        g = make_grid(5, 5, torch.float64)
        f = random_field(g, seed=9)
        pts = np.array([[g.coords_x[1, 3].item(), g.coords_y[1, 3].item()], [1.0, -1.0]])
        got = sample_field(f, pts).numpy()
        assert_allclose(got[0], [f.u[1, 3], f.v[1, 3]], atol=1e-12)
        assert_allclose(got[1], [f.u[0, 4], f.v[0, 4]], atol=1e-12)


class TestFileFormats:
    def test_field_roundtrip(self, tmp_path):
        g = make_grid(7, 5)
        f = random_field(g, seed=11)
        save_field(tmp_path / "f.r2nf", f)
        back = load_field(tmp_path / "f.r2nf")
        assert back.grid.shape == (7, 5)
        assert_array_equal(back.u.numpy(), f.u.numpy())
        assert_array_equal(back.v.numpy(), f.v.numpy())

    def test_field_layout(self, tmp_path):
        g = make_grid(2, 3)
        f = DisplacementField(g, torch.arange(6.0).reshape(2, 3), -torch.arange(6.0).reshape(2, 3))
        save_field(tmp_path / "f.r2nf", f)
        blob = (tmp_path / "f.r2nf").read_bytes()
        assert blob[:4] == b"R2NF"
        assert np.frombuffer(blob[4:12], "<u4").tolist() == [2, 3]
        assert_array_equal(np.frombuffer(blob[12:], "<f4"), [0, 1, 2, 3, 4, 5, 0, -1, -2, -3, -4, -5])

    def test_field_rejects_garbage(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError, match="R2NF"):
            load_field(tmp_path / "bad")
        save_field(tmp_path / "ok", DisplacementField.zeros(make_grid(4, 4)))
        (tmp_path / "short").write_bytes((tmp_path / "ok").read_bytes()[:-4])
        with pytest.raises(ValueError, match="truncated"):
            load_field(tmp_path / "short")

    @pytest.mark.parametrize("suffix,bits,tol", [(".png", 16, 1 / 65535), (".pgm", 16, 1 / 65535),
                                                 (".png", 8, 1 / 255), (".pgm", 8, 1 / 255)])
    def test_image_roundtrip(self, tmp_path, suffix, bits, tol):
        img = smooth_image(9, 11, dtype=torch.float32)
        save_image(tmp_path / f"im{suffix}", img, bits=bits)
        back = load_image(tmp_path / f"im{suffix}")
        assert back.grid.shape == (9, 11)
        assert_allclose(back.numpy(), img.numpy(), atol=tol)

    def test_rgb_rejected(self, tmp_path):
        from PIL import Image

        Image.new("RGB", (4, 4)).save(tmp_path / "c.png")
        with pytest.raises(ValueError, match="grayscale"):
            load_image(tmp_path / "c.png")


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_constant_shift_of_constant_image(h, w, du, dv):
    g = make_grid(h, w)
    img = Image2D(g, torch.full(g.shape, 0.25))
    f = DisplacementField(g, torch.full(g.shape, du), torch.full(g.shape, dv))
    assert_allclose(warp(img, f).numpy(), 0.25, atol=1e-6)
