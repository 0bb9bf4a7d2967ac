import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgeseg.ffdreg import (
    FFDConfig,
    FFDGrid,
    GridError,
    PatternIntensityParams,
    _CostModel,
    bending_energy,
    bspline_basis,
    ffd_cost,
    ffd_transform_point,
    invert_ffd_points,
    optimize_ffd_detailed,
    pattern_intensity,
)
from lgeseg.imagecore import Image2D, warp_ffd
from synth import blob_function, dense_field_error, ffd_pair, grid_xy


def closed_forms(u):
    return [(1 - u) ** 3 / 6, (3 * u**3 - 6 * u**2 + 4) / 6, (-3 * u**3 + 3 * u**2 + 3 * u + 1) / 6, u**3 / 6]


def transform_oracle(grid, x, y):
    """Direct 16-term blend with lattice indices i = floor(x/s) - 1; the array is offset by one cell."""
    sx, sy = grid.spacing_x, grid.spacing_y
    i, j = math.floor(x / sx) - 1, math.floor(y / sy) - 1
    u, v = x / sx - math.floor(x / sx), y / sy - math.floor(y / sy)
    bu, bv = closed_forms(u), closed_forms(v)
    ox = oy = 0.0
    for l in range(4):
        for m in range(4):
            phi = grid.displacements[j + m + 1, i + l + 1]
            ox += bu[l] * bv[m] * phi[0]
            oy += bu[l] * bv[m] * phi[1]
    return x + ox, y + oy


def pi_oracle(diff, r, sigma):
    h, w = diff.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            acc, n = 0.0, 0
            for v in range(h):
                for u in range(w):
                    if (x - u) ** 2 + (y - v) ** 2 <= r * r:
                        acc += sigma**2 / (sigma**2 + (diff[y, x] - diff[v, u]) ** 2)
                        n += 1
            total += acc / n
    return total / (h * w)


def random_grid(rng, w=48, h=40, scale=2.0):
    g = FFDGrid.for_image(w, h)
    return g.with_displacements(rng.normal(0, scale, g.displacements.shape))


class TestBasis:
    def test_values_at_zero(self):
        assert [bspline_basis(l, 0.0) for l in range(4)] == pytest.approx([1 / 6, 4 / 6, 1 / 6, 0.0], abs=1e-15)

    @pytest.mark.parametrize("u", [0.0, 0.25, 0.5, 0.75])
    def test_partition_of_unity(self, u):
        assert sum(bspline_basis(l, u) for l in range(4)) == pytest.approx(1.0, abs=1e-15)

    def test_closed_forms_and_symmetry(self):
        for u in np.linspace(0, 0.999, 37):
            assert [bspline_basis(l, u) for l in range(4)] == pytest.approx(closed_forms(u), abs=1e-15)
            if u > 0:
                assert bspline_basis(3, u) == pytest.approx(bspline_basis(0, 1 - u), abs=1e-15)

    def test_derivative_sums_vanish(self):
        from lgeseg.ffdreg import _basis_d1, _basis_d2

        u = np.linspace(0, 0.999, 101)
        assert np.max(np.abs(_basis_d1(u).sum(axis=0))) < 1e-14
        assert np.max(np.abs(_basis_d2(u).sum(axis=0))) < 1e-14
        # d1 against a numerical derivative of the closed forms
        h = 1e-6
        num = (np.array(closed_forms(u + h)) - np.array(closed_forms(u - h))) / (2 * h)
        assert np.allclose(_basis_d1(u), num, atol=1e-8)

    @pytest.mark.parametrize("l,u", [(4, 0.5), (-1, 0.5), (0, 1.0), (0, -0.1)])
    def test_bad_arguments(self, l, u):
        with pytest.raises(ValueError):
            bspline_basis(l, u)


class TestGrid:
    def test_coverage_margin(self):
        for w, h, s in [(128, 128, 8), (100, 37, 8), (9, 9, 4), (64, 80, 5.5)]:
            g = FFDGrid.for_image(w, h, s, s)
            g.check_covers(w, h)
            assert g.nx >= 4 and g.ny >= 4

    def test_rejects_bad_shapes(self):
        with pytest.raises(GridError):
            FFDGrid(np.zeros((3, 5, 2)))
        with pytest.raises(GridError):
            FFDGrid(np.full((5, 5, 2), np.inf))

    def test_text_round_trip(self):
        g = random_grid(np.random.default_rng(0))
        back = FFDGrid.from_text(g.to_text())
        assert np.array_equal(back.displacements, g.displacements)
        assert (back.spacing_x, back.origin_y) == (g.spacing_x, g.origin_y)
        head = g.to_text().splitlines()[0].split()
        assert head[:2] == [str(g.nx), str(g.ny)]

    @pytest.mark.parametrize("text", ["", "4 4 8 8 -8", "4 4 8 8 -8 -8\n0 0\n", "4 4 8 8 -8 -8\n" + "0 x\n" * 16])
    def test_malformed_text(self, text):
        with pytest.raises(ValueError):
            FFDGrid.from_text(text)


class TestTransformPoint:
    def test_zero_grid(self):
        g = FFDGrid.for_image(32, 32)
        assert ffd_transform_point(g, 3.7, 20.2) == (3.7, 20.2)

    def test_uniform_displacement(self):
        g = FFDGrid.for_image(32, 32)
        g = g.with_displacements(np.broadcast_to([1.5, -2.0], g.displacements.shape))
        x, y = ffd_transform_point(g, 10.3, 4.9)
        assert (x, y) == pytest.approx((11.8, 2.9), abs=1e-12)

    def test_node_example(self):
        # node (16, 24): u = v = 0, the B1-weighted control has lattice index (2, 3)
        g = FFDGrid.for_image(64, 64)
        d = np.zeros(g.displacements.shape)
        d[3 + 1, 2 + 1] = [9.0, 0.0]
        x, y = ffd_transform_point(g.with_displacements(d), 16.0, 24.0)
        assert x == pytest.approx(16.0 + 4.0, abs=1e-12) and y == 24.0
        assert transform_oracle(g.with_displacements(d), 16.0, 24.0) == pytest.approx((20.0, 24.0), abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            g = random_grid(rng)
            for x, y in rng.uniform(0, [47, 39], (20, 2)):
                assert ffd_transform_point(g, x, y) == pytest.approx(transform_oracle(g, x, y), abs=1e-12)

    def test_outside_coverage(self):
        g = FFDGrid.for_image(32, 32)
        with pytest.raises(GridError):
            ffd_transform_point(g, -20.0, 3.0)

    def test_dense_field_matches_pointwise(self):
        g = random_grid(np.random.default_rng(6))
        dx, dy = g.displacement_field(48, 40)
        xs, ys = grid_xy(48, 40)
        px, py = ffd_transform_point(g, xs, ys)
        assert np.allclose(dx, px - xs, atol=1e-12) and np.allclose(dy, py - ys, atol=1e-12)

    def test_inverse(self):
        g = random_grid(np.random.default_rng(7), scale=0.8)
        p = np.random.default_rng(8).uniform(5, 35, (30, 2))
        q = invert_ffd_points(g, p)
        tx, ty = ffd_transform_point(g, q[:, 0], q[:, 1])
        assert np.allclose(np.stack([tx, ty], 1), p, atol=1e-8)


class TestPatternIntensity:
    def test_identity_and_shift(self):
        img = Image2D(np.random.default_rng(0).normal(50, 20, (20, 24)))
        assert pattern_intensity(img, img) == 1.0
        assert pattern_intensity(img, img.with_data(img.data + 37.5)) == 1.0

    def test_3x3_example(self):
        diff = np.zeros((3, 3))
        diff[1, 1] = 10.0
        a = Image2D(diff)
        b = Image2D(np.zeros((3, 3)))
        p = PatternIntensityParams(r=1, sigma=10.0)
        # hand count: center sees itself + 4 neighbours at 0.5; each edge-mid
        # pixel sees 4 pixels with one 0.5 term; corners see 3 pixels with none
        hand = ((1 + 4 * 0.5) / 5 + 4 * (3 + 0.5) / 4 + 4 * 1.0) / 9
        assert pattern_intensity(a, b, p) == pytest.approx(hand, abs=1e-15)
        assert pattern_intensity(a, b, p) == pytest.approx(pi_oracle(diff, 1, 10.0), abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        a = Image2D(rng.uniform(0, 255, (12, 12)))
        b = Image2D(rng.uniform(0, 255, (12, 12)))
        for r, sigma in [(1, 10.0), (3, 10.0), (2, 40.0)]:
            got = pattern_intensity(a, b, PatternIntensityParams(r, sigma))
            assert got == pytest.approx(pi_oracle(a.data - b.data, r, sigma), rel=1e-9)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(1)
        a = Image2D(rng.uniform(0, 255, (16, 16)))
        b = Image2D(rng.uniform(0, 255, (16, 16)))
        v = pattern_intensity(a, b)
        assert 0 < v <= 1
        assert pattern_intensity(b, a) == pytest.approx(v, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            pattern_intensity(Image2D(np.zeros((4, 4))), Image2D(np.zeros((4, 5))))

    def test_outlier_robustness(self):
        h = w = 16
        r = 3
        n_max = sum(1 for u in range(-r, r + 1) for v in range(-r, r + 1) if u * u + v * v <= r * r)
        n_min = sum(1 for u in range(0, r + 1) for v in range(0, r + 1) if u * u + v * v <= r * r)
        bound = (2 * n_max + 1) / (h * w * n_min)
        base = Image2D(np.zeros((h, w)))
        for y, x in [(0, 0), (7, 8), (0, 9)]:
            prev = 1.0
            for mag in [1, 5, 20, 100, 1e3, 1e6]:
                d = np.zeros((h, w))
                d[y, x] = mag
                v = pattern_intensity(Image2D(d), base)
                assert v <= prev + 1e-15
                assert 1.0 - v <= bound
                prev = v


def fd_second_derivatives(grid, x, y, h=0.05):
    """Forward-difference stencils exact for cubics, on the 16-term point evaluation."""

    def disp(px, py):
        tx, ty = ffd_transform_point(grid, px, py)
        return np.array([tx - px, ty - py])

    c2 = np.array([2.0, -5.0, 4.0, -1.0]) / h**2
    c1 = np.array([-11.0, 18.0, -9.0, 2.0]) / (6 * h)
    dxx = sum(c2[k] * disp(x + k * h, y) for k in range(4))
    dyy = sum(c2[k] * disp(x, y + k * h) for k in range(4))
    dxy = sum(c1[k] * c1[m] * disp(x + k * h, y + m * h) for k in range(4) for m in range(4))
    return dxx, dxy, dyy


class TestBendingEnergy:
    def test_zero_grid(self):
        assert bending_energy(FFDGrid.for_image(40, 40), 40, 40) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_affine_fields_vanish(self, seed):
        rng = np.random.default_rng(seed)
        g = FFDGrid.for_image(48, 40)
        M = rng.normal(0, 0.2, (2, 2))
        t = rng.normal(0, 3, 2)
        d = g.control_positions() @ M.T + t
        assert bending_energy(g.with_displacements(d), 48, 40) < 1e-10

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_difference_oracle(self, seed):
        rng = np.random.default_rng(seed)
        w, h = 24, 20
        g = FFDGrid.for_image(w, h)
        d = np.zeros(g.displacements.shape)
        j, i = rng.integers(1, g.ny - 1), rng.integers(1, g.nx - 1)
        d[j, i] = rng.normal(0, 3, 2)
        d[j - 1 : j + 2, i] += rng.normal(0, 1, (3, 2))
        g = g.with_displacements(d)
        total = 0.0
        for y in range(h):
            for x in range(w):
                dxx, dxy, dyy = fd_second_derivatives(g, float(x), float(y))
                total += np.sum(dxx**2 + 2 * dxy**2 + dyy**2)
        oracle = total / (w * h)
        got = bending_energy(g, w, h)
        assert got > 0
        assert got == pytest.approx(oracle, rel=1e-6)


class TestCost:
    def test_zero_grid_examples(self):
        rng = np.random.default_rng(0)
        f = Image2D(rng.uniform(0, 200, (32, 32)))
        m = Image2D(rng.uniform(0, 200, (32, 32)))
        g = FFDGrid.for_image(32, 32)
        assert ffd_cost(f, f, g) == 0.0
        assert ffd_cost(f, m, g) == 1.0 - pattern_intensity(f, m)

    def test_compositional(self):
        rng = np.random.default_rng(1)
        f = Image2D(rng.uniform(0, 200, (32, 32)))
        m = Image2D(rng.uniform(0, 200, (32, 32)))
        g = FFDGrid.for_image(32, 32)
        g = g.with_displacements(rng.normal(0, 1.5, g.displacements.shape))
        cfg = FFDConfig(lambda_=0.37)
        expect = (1.0 - pattern_intensity(f, warp_ffd(m, g), cfg.pi_params)) + 0.37 * bending_energy(g, 32, 32)
        assert ffd_cost(f, m, g, cfg) == pytest.approx(expect, rel=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FFDConfig(lambda_=-1.0)
        with pytest.raises(ValueError):
            FFDConfig(metric="mi")
        with pytest.raises(ValueError):
            PatternIntensityParams(r=0)


def smooth_pair(seed, size=48, sigma=(6, 10), shift=(1.2, -0.8)):
    rng = np.random.default_rng(seed)
    f = blob_function(rng, size=size, margin=12, sigma=sigma)
    xs, ys = grid_xy(size, size)
    return Image2D(f(xs + shift[0], ys + shift[1])), Image2D(f(xs, ys))


class TestGradient:
    @pytest.mark.parametrize("metric", ["pi", "ssd"])
    def test_local_gradient_equals_full_central_difference(self, metric):
        fixed, moving = smooth_pair(0, 40)
        t = FFDGrid.for_image(40, 40)
        model = _CostModel(fixed, moving, t, FFDConfig(metric=metric))
        d = np.random.default_rng(1).normal(0, 1, t.displacements.shape)
        g = model.gradient(d, 0.5)
        oracle = np.zeros_like(d)
        for idx in np.ndindex(d.shape):
            e = np.zeros_like(d)
            e[idx] = 0.5
            oracle[idx] = (model.cost(d + e) - model.cost(d - e)) / 1.0
        assert np.max(np.abs(g - oracle)) <= 1e-12 * max(1.0, np.max(np.abs(oracle)))

    def test_halved_delta_agreement_ssd(self):
        for seed in range(3):
            fixed, moving = smooth_pair(seed, 64, sigma=(16, 24), shift=(3.0, -1.5))
            t = FFDGrid.for_image(64, 64)
            model = _CostModel(fixed, moving, t, FFDConfig(metric="ssd"))
            d = np.zeros(t.displacements.shape)
            g1, g2 = model.gradient(d, 0.5), model.gradient(d, 0.25)
            assert np.linalg.norm(g1 - g2) / np.linalg.norm(g2) <= 1e-3

    @pytest.mark.xfail(
        strict=True,
        reason="bilinear resampling and the pattern-intensity nonlinearity leave the "
        "delta=0.5 and delta=0.25 gradients 0.2-3% apart; see the decisions ledger",
    )
    def test_halved_delta_agreement_pi(self):
        fixed, moving = smooth_pair(0, 64, sigma=(16, 24), shift=(3.0, -1.5))
        t = FFDGrid.for_image(64, 64)
        model = _CostModel(fixed, moving, t, FFDConfig(metric="pi"))
        d = np.zeros(t.displacements.shape)
        g1, g2 = model.gradient(d, 0.5), model.gradient(d, 0.25)
        assert np.linalg.norm(g1 - g2) / np.linalg.norm(g2) <= 1e-3

    def test_gradient_is_a_descent_direction(self):
        fixed, moving = smooth_pair(2, 48)
        t = FFDGrid.for_image(48, 48)
        model = _CostModel(fixed, moving, t, FFDConfig())
        d = np.zeros(t.displacements.shape)
        g = model.gradient(d, 0.5)
        assert model.cost(d - 0.05 * g / np.max(np.abs(g))) < model.cost(d)


class TestOptimize:
    def test_identical_images(self):
        fixed, _ = smooth_pair(3, 48)
        res = optimize_ffd_detailed(fixed, fixed, FFDConfig(max_iters=10))
        assert np.max(np.hypot(*np.moveaxis(res.grid.displacements, -1, 0))) <= 0.5
        assert res.cost_history[0] == 0.0

    def test_recovers_known_deformation(self):
        fixed, moving, truth = ffd_pair(11)
        res = optimize_ffd_detailed(fixed, moving, FFDConfig(max_iters=60))
        assert dense_field_error(res.grid, truth, 128, 128) <= 1.5
        h = res.cost_history
        assert all(b <= a for a, b in zip(h, h[1:]))
        zero = ffd_cost(fixed, moving, FFDGrid.for_image(128, 128))
        assert h[-1] <= zero + 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            optimize_ffd_detailed(Image2D(np.zeros((8, 8))), Image2D(np.zeros((8, 9))))


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 0.999), st.floats(0, 0.999))
def test_partition_of_unity_2d(u, v):
    s = sum(bspline_basis(l, u) * bspline_basis(m, v) for l in range(4) for m in range(4))
    assert s == pytest.approx(1.0, abs=1e-14)


def test_bright_scar_on_fixed_only():
    from lgeseg.phantom import PhantomSpec, make_phantom

    # near-blood intensity, full-thickness scar; the true alignment is identity
    ph = make_phantom(PhantomSpec(scar=175.0, scar_extent=240.0, scar_depth=1.0), 0)
    err = {}
    for metric in ("pi", "ssd"):
        g = optimize_ffd_detailed(ph.lge, ph.cine, FFDConfig(metric=metric)).grid
        err[metric] = np.mean(
            [np.mean(np.hypot(*(invert_ffd_points(g, c.vertices) - c.vertices).T)) for c in (ph.true_endo, ph.true_epi)]
        )
    assert err["pi"] <= 2.0
    assert err["ssd"] > 2.0
