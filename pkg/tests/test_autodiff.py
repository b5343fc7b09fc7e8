import numpy as np
import pytest

from fluxcaustic import autodiff as ad
from fluxcaustic.geometry import Vec3
from fluxcaustic.optics import incident_point


def richardson(f, x, h=1e-3):
    d1 = (f(x + h) - f(x - h)) / (2 * h)
    d2 = (f(x + h / 2) - f(x - h / 2)) / h
    return (4 * d2 - d1) / 3


def test_square():
    x = ad.Dual(2.0, [1.0])
    y = x * x
    assert y.val == 4 and y.der.tolist() == [4.0]


def test_self_difference_is_zero():
    x = ad.variable(3.7, 0, 2)
    y = x - x
    assert y.val == 0 and np.all(y.der == 0)


def test_arctan2_against_finite_differences(rng):
    n = 10_000
    yv = rng.uniform(-3, 3, n)
    xv = rng.uniform(-3, 3, n)
    keep = np.hypot(xv, yv) > 0.1
    yv, xv = yv[keep], xv[keep]
    # stay away from the branch cut on the negative x axis
    keep = ~((xv < 0) & (np.abs(yv) < 0.05))
    yv, xv = yv[keep], xv[keep]
    out = ad.arctan2(ad.variable(yv, 0, 2), ad.variable(xv, 1, 2))
    dy = richardson(lambda t: np.arctan2(t, xv), yv)
    dx = richardson(lambda t: np.arctan2(yv, t), xv)
    scale = np.maximum(np.abs(out.der), 1e-8)
    assert np.max(np.abs(out.der[:, 0] - dy) / scale[:, 0]) < 1e-7
    assert np.max(np.abs(out.der[:, 1] - dx) / scale[:, 1]) < 1e-7


def test_elementary_rules():
    x = ad.variable(np.array([0.5, 2.0]), 0, 1)
    assert np.allclose(ad.sqrt(x).der[:, 0], 0.5 / np.sqrt([0.5, 2.0]))
    assert np.allclose((1.0 / x).der[:, 0], -1 / np.array([0.25, 4.0]))
    assert np.allclose(ad.power(x, 3.0).der[:, 0], 3 * np.array([0.25, 4.0]))
    assert np.allclose((x / (x + 1)).der[:, 0], 1 / (np.array([0.5, 2.0]) + 1) ** 2)


def test_nonsmooth_points_use_zero_subgradient():
    z = ad.variable(0.0, 0, 1)
    assert ad.absolute(z).der.tolist() == [0.0]
    assert ad.sqrt(z).der.tolist() == [0.0]


def test_where_follows_branch():
    x = ad.variable(np.array([-1.0, 1.0]), 0, 1)
    y = ad.where(x.val > 0, x * 3.0, x * 5.0)
    assert y.der[:, 0].tolist() == [5.0, 3.0]


def test_debug_mode_catches_nan():
    ad.DEBUG = True
    try:
        with pytest.raises(FloatingPointError):
            ad.sqrt(ad.variable(-1.0, 0, 1))
    finally:
        ad.DEBUG = False


def test_plain_inputs_pass_through():
    assert ad.sqrt(4.0) == 2.0
    assert ad.value(3.0) == 3.0
    assert ad.partials(3.0, 2).tolist() == [0.0, 0.0]


# implicit root ------------------------------------------------------------------


def test_identity_medium_root_derivative():
    zb = 121.0
    A = incident_point(Vec3(0.0, 0.0, 0.0), Vec3(2.0, 1.0, ad.variable(zb, 0, 1)), 120.0, 1.0)
    # A.x = k * 2 with k = z0/zb
    assert A.x.der[0] / 2 == pytest.approx(-120.0 / zb**2, rel=1e-10)


def test_incident_point_against_finite_differences(rng):
    for _ in range(20):
        p = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-5, 5), rng.uniform(-5, 5),
                      rng.uniform(120.3, 122)])

        def f(p):
            return np.array(incident_point(Vec3(p[0], p[1], 0.0), Vec3(p[2], p[3], p[4]), 120.0, 1.49)[:2])

        duals = ad.seed(p)
        A = incident_point(Vec3(duals[0], duals[1], 0.0), Vec3(duals[2], duals[3], duals[4]), 120.0, 1.49)
        J = np.array([A.x.der, A.y.der])
        for j in range(5):
            e = np.eye(5)[j]
            fd = richardson(lambda t: f(p + t * e), 0.0)
            assert np.allclose(J[:, j], fd, rtol=1e-6, atol=1e-9)


def test_geometry_does_not_depend_on_intensity():
    # intensity enters only the flux, so seeding it leaves the incidence point constant
    q = ad.variable(0.7, 2, 3)
    A = incident_point(Vec3(ad.variable(0.1, 0, 3), ad.variable(-0.2, 1, 3), 0.0), Vec3(2.0, 1.0, 121.0),
                       120.0, 1.49)
    flux = q * 1.0
    assert A.x.der[2] == 0.0 and A.y.der[2] == 0.0
    assert flux.der.tolist() == [0.0, 0.0, 1.0]


def test_double_root_is_rejected():
    # (k - 0.5)^2 with a parameter in the constant term
    c0 = ad.variable(0.25, 0, 1)
    with pytest.raises(ad.IllConditionedRoot):
        ad.implicit_root_derivative([1.0, -1.0, c0], 0.5)
