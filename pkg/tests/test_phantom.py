import math

import numpy as np
import pytest

from lgeseg.phantom import Bump, PhantomError, PhantomSpec, cine_to_lge, lge_to_cine, make_phantom


def test_zero_deformation_differs_only_in_scar():
    ph = make_phantom(PhantomSpec(scar_extent=60.0), 0)
    differ = ph.cine.data != ph.lge.data
    assert differ.any()
    # every differing pixel has some scar coverage in the supersampled render
    spec = ph.spec
    ys, xs = np.nonzero(differ)
    rho = np.hypot(xs - spec.center_x, ys - spec.center_y)
    assert np.all((rho > spec.endo_radius - 1) & (rho < spec.scar_outer_radius() + 1))
    assert np.array_equal(ph.prior_endo.vertices, ph.true_endo.vertices)


def test_determinism():
    spec = PhantomSpec(noise_sigma=3.0, scar_extent=45.0, bumps=(Bump(50, 60, 1.5, -1.0),))
    a, b = make_phantom(spec, 7), make_phantom(spec, 7)
    assert np.array_equal(a.cine.data, b.cine.data) and np.array_equal(a.lge.data, b.lge.data)
    assert not np.array_equal(a.lge.data, make_phantom(spec, 8).lge.data)


def test_scar_area_close_to_sector():
    spec = PhantomSpec(scar_extent=60.0, scar_depth=0.5)
    ph = make_phantom(spec, 0)
    analytic = 0.5 * math.radians(60) * (23.0**2 - 18.0**2)
    assert spec.scar_area() == pytest.approx(analytic)
    assert abs(ph.scar_mask.sum() - analytic) <= 0.05 * analytic


def test_prior_contours_follow_ground_truth_map():
    spec = PhantomSpec(affine=(1.03, 0.01, 3.0, -0.01, 0.98, 2.0), bumps=(Bump(70, 55, 2.0, 1.0),))
    ph = make_phantom(spec, 0)
    x, y = cine_to_lge(spec, ph.prior_endo.vertices[:, 0], ph.prior_endo.vertices[:, 1])
    assert np.allclose(np.stack([x, y], 1), ph.true_endo.vertices, atol=1e-9)
    back = lge_to_cine(spec, ph.true_epi.vertices)
    assert np.allclose(back, ph.prior_epi.vertices)


def test_cine_is_warped_anatomy():
    spec = PhantomSpec(affine=(1.0, 0.0, 4.0, 0.0, 1.0, 0.0), supersample=1)
    ph = make_phantom(spec, 0)
    # cine(y) = anatomy(y + 4 in x), so the cine shows the LV 4 px further left
    assert np.array_equal(ph.cine.data[:, 10:100], ph.lge.data[:, 14:104])


def test_text_round_trip():
    spec = PhantomSpec(scar_extent=30.0, bumps=(Bump(1, 2, 3, 4), Bump(5, 6, 7, 8, 9)), affine=(1.01, 0, 3, 0, 0.99, 2))
    assert PhantomSpec.from_text(spec.to_text()) == spec


@pytest.mark.parametrize(
    "kw",
    [
        dict(endo_radius=30.0),
        dict(blood=60.0),
        dict(scar_depth=0.0),
        dict(scar_extent=400.0),
        dict(epi_radius=70.0),
        dict(affine=(0, 0, 0, 0, 0, 0)),
        dict(noise_sigma=-1.0),
    ],
)
def test_invalid_specs(kw):
    with pytest.raises((PhantomError, ValueError)):
        PhantomSpec(**kw)


def test_unknown_text_key():
    with pytest.raises(PhantomError):
        PhantomSpec.from_text("radius=3\n")
