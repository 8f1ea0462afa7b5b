import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from r2n2.field_geometry import DisplacementField, Image2D, ShapeError, finite_diff_gradient_check, make_grid, warp
from r2n2.objectives import (TV_EPS, ObjectiveConfig, classic_objective, mse, mse_loss, sequence_loss, sequence_objective,
                             total_variation, tv_loss)


def const_image(h, w, c, dtype=torch.float64):
    g = make_grid(h, w, dtype)
    return Image2D(g, torch.full(g.shape, float(c), dtype=dtype))


def textured(h=12, w=12, seed=0):
    g = make_grid(h, w, torch.float64)
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(1, 3, 2)
    return Image2D(g, 0.5 + 0.4 * torch.sin(a * g.coords_x) * torch.cos(b * g.coords_y))


def smooth_field(grid, scale, seed=0):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0.5, 2, 2)
    u = scale * torch.sin(a * grid.coords_y)
    v = scale * torch.cos(b * grid.coords_x)
    return DisplacementField(grid, u, v)


class TestMSE:
    def test_identical_is_zero(self):
        img = textured()
        assert mse_loss(img, img).item() == 0.0

    def test_constants(self):
        assert mse_loss(const_image(4, 5, 0), const_image(4, 5, 1)).item() == 1.0
        assert mse_loss(const_image(4, 5, 0), const_image(4, 5, 0.3)).item() == pytest.approx(0.09, rel=1e-12)

    def test_symmetric_nonnegative(self):
        a, b = textured(seed=1), textured(seed=2)
        assert mse_loss(a, b).item() == mse_loss(b, a).item() > 0

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(const_image(4, 4, 0), const_image(4, 5, 0))


class TestTV:
    def test_constant_field(self):
        g = make_grid(6, 6, torch.float64)
        f = DisplacementField(g, torch.full(g.shape, 0.2, dtype=torch.float64), torch.full(g.shape, -0.1, dtype=torch.float64))
        assert tv_loss(f).item() == pytest.approx(math.sqrt(TV_EPS), rel=1e-12)

    def test_linear_ramp(self):
        g = make_grid(9, 9, torch.float64)
        f = DisplacementField(g, g.coords_x.clone(), torch.zeros(g.shape, dtype=torch.float64))
        s = g.spacing()[0]
        assert tv_loss(f).item() == pytest.approx(math.sqrt(s * s + TV_EPS), rel=1e-12)

    def test_hand_computed_2x2(self):
        # single interior pixel: dx = (1, 0), dy = (0, 2) -> sqrt(1 + 4)
        t = torch.tensor([[[0.0, 1.0], [0.0, 0.0]], [[0.0, 0.0], [2.0, 0.0]]], dtype=torch.float64)
        assert total_variation(t, eps=0.0).item() == pytest.approx(math.sqrt(5.0))

    def test_positive_homogeneity(self):
        g = make_grid(16, 16, torch.float64)
        f = smooth_field(g, 0.1).as_tensor()
        base = total_variation(f, eps=0.0).item()
        for k in (0.5, 2.0, 7.0):
            assert total_variation(k * f, eps=0.0).item() == pytest.approx(k * base, rel=1e-12)
        # with the smoothing constant the scaling holds approximately
        assert total_variation(3 * f).item() - math.sqrt(TV_EPS) == pytest.approx(3 * base, rel=5e-3)

    def test_invariant_to_global_shift(self):
        g = make_grid(10, 10, torch.float64)
        f = smooth_field(g, 0.1).as_tensor()
        shift = torch.tensor([0.3, -0.2], dtype=torch.float64)[:, None, None]
        assert total_variation(f + shift).item() == pytest.approx(total_variation(f).item(), rel=1e-12)

    def test_too_small(self):
        with pytest.raises(ValueError):
            total_variation(torch.zeros(2, 1, 5))

    def test_gradient_finite_at_zero(self):
        f = torch.zeros(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        total_variation(f).backward()
        assert torch.isfinite(f.grad).all()


class TestSequenceObjective:
    def test_single_term_is_classic_form(self):
        fixed, moving = textured(seed=3), textured(seed=4)
        f = smooth_field(fixed.grid, 0.05)
        want = mse_loss(fixed, warp(moving, f)) + 0.3 * tv_loss(f)
        got = sequence_objective(fixed, moving, [f], 0.3)
        assert got.item() == pytest.approx(want.item(), rel=1e-12)
        assert classic_objective(fixed, moving, f, 0.3).item() == got.item()

    def test_aligned_zero(self):
        img = textured()
        z = DisplacementField.zeros(img.grid)
        assert sequence_objective(img, img, [z, z, z], 0.0).item() == pytest.approx(0.0, abs=1e-24)

    def test_equal_fields_average(self):
        fixed, moving = textured(seed=5), textured(seed=6)
        f = smooth_field(fixed.grid, 0.08)
        one = mse_loss(fixed, warp(moving, f)).item()
        assert sequence_objective(fixed, moving, [f] * 4, 0.0).item() == pytest.approx(one, rel=1e-12)

    def test_mean_over_steps_and_final_regularizer(self):
        fixed, moving = textured(seed=7), textured(seed=8)
        fs = [smooth_field(fixed.grid, s, seed=i) for i, s in enumerate((0.02, 0.05, 0.1))]
        want = np.mean([mse_loss(fixed, warp(moving, f)).item() for f in fs]) + 0.1 * tv_loss(fs[-1]).item()
        assert sequence_objective(fixed, moving, fs, 0.1).item() == pytest.approx(want, rel=1e-12)

    def test_empty_rejected(self):
        img = textured()
        with pytest.raises(ValueError):
            sequence_objective(img, img, [], 0.1)

    def test_classic_identity_case(self):
        img = textured()
        val = classic_objective(img, img, DisplacementField.zeros(img.grid), 0.5).item()
        assert val == pytest.approx(0.5 * math.sqrt(TV_EPS), rel=1e-9)

    def test_classic_linear_in_lambda(self):
        fixed, moving = textured(seed=9), textured(seed=10)
        f = smooth_field(fixed.grid, 0.05)
        a, b, c = (classic_objective(fixed, moving, f, lam).item() for lam in (0.0, 0.1, 0.2))
        assert_allclose(c - a, 2 * (b - a), rtol=1e-12)

    def test_classic_mismatch(self):
        img = textured()
        with pytest.raises(ShapeError):
            classic_objective(img, img, DisplacementField.zeros(make_grid(5, 5)), 0.1)


def test_config_validation():
    assert ObjectiveConfig() == ObjectiveConfig(lam=0.1, sequence_length=25)
    with pytest.raises(ValueError):
        ObjectiveConfig(lam=-1)
    with pytest.raises(ValueError):
        ObjectiveConfig(sequence_length=0)


class TestLossGradients:
    def setup_method(self):
        gen = torch.Generator().manual_seed(0)
        self.fixed = textured(8, 8, 11).as_batch()
        self.moving = textured(8, 8, 12).as_batch()
        self.field = 0.05 * torch.randn(1, 2, 8, 8, generator=gen, dtype=torch.float64)

    def test_mse_gradient(self):
        err = finite_diff_gradient_check(lambda a: mse(a, self.moving), self.fixed)
        assert err < 1e-3

    def test_tv_gradient(self):
        assert finite_diff_gradient_check(total_variation, self.field) < 1e-3

    def test_sequence_loss_gradient(self):
        def loss(f):
            return sequence_loss(self.fixed, self.moving, [0.5 * f, f], 0.1)[0]

        assert finite_diff_gradient_check(loss, self.field) < 1e-3
