import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgeseg.affinereg import (
    AffineConfig,
    AffineTransform2D,
    RegistrationError,
    estimate_affine,
    estimate_affine_detailed,
    ncc,
    project_constraints,
)
from lgeseg.imagecore import Image2D, warp_affine
from synth import affine_pair, blob_function, grid_xy


def pearson_oracle(a, b):
    a, b = list(np.ravel(a)), list(np.ravel(b))
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / (va * vb) ** 0.5


class TestTransform:
    def test_apply_and_inverse(self):
        A = AffineTransform2D(1.05, 0.02, 3.0, -0.01, 0.97, -2.0)
        p = np.array([[0.0, 0.0], [10.0, 5.0]])
        q = A.apply(p)
        assert np.allclose(q[1], [1.05 * 10 + 0.02 * 5 + 3, -0.01 * 10 + 0.97 * 5 - 2])
        back = AffineTransform2D.from_matrix(A.inverse_matrix()).apply(q)
        assert np.allclose(back, p, atol=1e-12)

    def test_singular(self):
        with pytest.raises(RegistrationError):
            AffineTransform2D(1.0, 2.0, 0.0, 0.5, 1.0, 0.0).inverse_matrix()

    def test_text_round_trip(self):
        A = AffineTransform2D(1.0123456789, -0.01, 3.25, 0.0, 0.99, -7.5)
        assert AffineTransform2D.from_text(A.to_text()) == A
        assert len(A.to_text().split()) == 6

    @pytest.mark.parametrize("text", ["", "1 0 0 0 1", "1 0 0 0 1 x", "1 0 0 0 1 0 7"])
    def test_bad_text(self, text):
        with pytest.raises(ValueError):
            AffineTransform2D.from_text(text)


class TestNCC:
    def test_self(self):
        img = Image2D(np.random.default_rng(0).normal(size=(8, 8)))
        assert ncc(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_anticorrelation(self):
        img = Image2D(np.random.default_rng(1).normal(size=(8, 8)))
        assert ncc(img, img.with_data(-img.data + 42.0)) == pytest.approx(-1.0, abs=1e-12)

    def test_hand_example(self):
        a = Image2D(np.array([[0.0, 1.0], [2.0, 3.0]]))
        b = Image2D(np.array([[0.0, 2.0], [1.0, 3.0]]))
        assert ncc(a, b) == pytest.approx(0.8, abs=1e-15)
        assert pearson_oracle(a.data, b.data) == pytest.approx(0.8, abs=1e-15)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = rng.normal(size=(2, 6, 7))
            assert ncc(Image2D(a), Image2D(b)) == pytest.approx(pearson_oracle(a, b), abs=1e-12)

    def test_errors(self):
        with pytest.raises(RegistrationError):
            ncc(Image2D(np.ones((3, 3))), Image2D(np.arange(9.0).reshape(3, 3)))
        with pytest.raises(RegistrationError):
            ncc(Image2D(np.zeros((3, 3))), Image2D(np.zeros((3, 4))))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 100), st.floats(-1e3, 1e3), st.booleans())
    def test_affine_intensity_invariance(self, alpha, beta, negate):
        rng = np.random.default_rng(3)
        a = Image2D(rng.normal(size=(10, 10)))
        b = Image2D(rng.normal(size=(10, 10)) + a.data)
        base = ncc(a, b)
        s = -alpha if negate else alpha
        got = ncc(a, b.with_data(s * b.data + beta))
        assert got == pytest.approx(-base if negate else base, abs=1e-12)


class TestProjection:
    def test_feasible_unchanged(self):
        A = AffineTransform2D(1.05, 0.3, -4.0, 0.2, 0.93, 9.0)
        assert project_constraints(A, AffineConfig()) == A

    def test_translation_clamped_strictly(self):
        P = project_constraints(AffineTransform2D(a13=25.0, a23=-25.0), AffineConfig())
        assert P.a13 < 10.0 and P.a13 == pytest.approx(10.0, abs=1e-12)
        assert P.a23 > -10.0 and P.a23 == pytest.approx(-10.0, abs=1e-12)
        assert P.is_feasible(AffineConfig())

    def test_scale_clamped_and_shear_kept(self):
        P = project_constraints(AffineTransform2D(a11=1.5, a12=0.7, a21=-0.4, a22=0.2), AffineConfig())
        assert 1.0 < P.a11 < 1.1 and 0.9 < P.a22 < 1.0
        assert (P.a12, P.a21) == (0.7, -0.4)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=6, max_size=6))
    def test_idempotent_and_feasible(self, p):
        cfg = AffineConfig()
        P = project_constraints(AffineTransform2D.from_params(p), cfg)
        assert project_constraints(P, cfg) == P
        assert P.is_feasible(cfg)


def smooth_image(seed=0, size=128):
    f = blob_function(np.random.default_rng(seed), size=size)
    xs, ys = grid_xy(size, size)
    return f, Image2D(f(xs, ys))


class TestEstimate:
    def test_identical_images(self):
        _, img = smooth_image(0)
        A = estimate_affine(img, img)
        assert ncc(img, warp_affine(img, A)) >= 0.999
        assert np.allclose(A.params(), AffineTransform2D.identity().params(), atol=1e-3)

    def test_translation_3_2(self):
        f, fixed = smooth_image(1)
        xs, ys = grid_xy(128, 128)
        # fixed(p) = moving(A^-1 p) with A a (3, 2) shift
        moving = Image2D(f(xs + 3.0, ys + 2.0))
        A = estimate_affine(fixed, moving)
        assert abs(A.a13 - 3.0) <= 0.5 and abs(A.a23 - 2.0) <= 0.5

    def test_translation_beyond_bound(self):
        f, fixed = smooth_image(2)
        xs, ys = grid_xy(128, 128)
        moving = Image2D(f(xs + 20.0, ys))
        A = estimate_affine(fixed, moving)
        assert A.is_feasible(AffineConfig())
        assert 9.0 <= A.a13 < 10.0

    def test_history_and_feasibility(self):
        fixed, moving, _ = affine_pair(3)
        res = estimate_affine_detailed(fixed, moving)
        h = res.ncc_history
        assert all(b >= a - 1e-9 for a, b in zip(h, h[1:]))
        assert res.transform.is_feasible(AffineConfig())
        ident = ncc(fixed, warp_affine(moving, AffineTransform2D.identity()))
        assert ncc(fixed, warp_affine(moving, res.transform)) >= ident - 1e-9

    def test_degenerate(self):
        flat = Image2D(np.ones((16, 16)))
        with pytest.raises(RegistrationError):
            estimate_affine(flat, Image2D(np.arange(256.0).reshape(16, 16)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AffineConfig(eps_scale=0)
        with pytest.raises(ValueError):
            AffineConfig(max_iters=0)
