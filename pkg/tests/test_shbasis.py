import math

import numpy as np
import pytest

from difftrack import (
    InvalidDirectionError,
    InvalidParameterError,
    ShCoefficients,
    SphericalAngles,
    amplitude,
    cartesian_to_angles,
    eval_basis,
    eval_basis_derivatives,
    num_coefficients,
)

from util import basis_matrix, dense_grid_max, grid_directions


def test_num_coefficients_formula():
    assert num_coefficients(0) == 1
    assert num_coefficients(2) == 6
    assert num_coefficients(8) == 45


@pytest.mark.parametrize("bad", [-2, 1, 3, 7, 18])
def test_num_coefficients_rejects(bad):
    with pytest.raises(InvalidParameterError):
        num_coefficients(bad)


def test_cartesian_to_angles_axes():
    a = cartesian_to_angles(np.array([0.0, 0.0, 1.0]))
    assert a.el == 0.0 and a.az == 0.0
    a = cartesian_to_angles(np.array([1.0, 0.0, 0.0]))
    assert abs(a.el - math.pi / 2) < 1e-15 and a.az == 0.0
    a = cartesian_to_angles(np.array([0.0, 1.0, 0.0]))
    assert abs(a.el - math.pi / 2) < 1e-15 and abs(a.az - math.pi / 2) < 1e-15


def test_cartesian_to_angles_rejects_bad_vectors():
    with pytest.raises(InvalidDirectionError):
        cartesian_to_angles(np.zeros(3))
    with pytest.raises(InvalidDirectionError):
        cartesian_to_angles(np.array([np.nan, 0.0, 1.0]))
    with pytest.raises(InvalidDirectionError):
        cartesian_to_angles(np.array([1.1, 0.0, 0.0]))


def test_constant_term():
    b = eval_basis(SphericalAngles(el=0.7, az=-1.2), 0)
    assert b.shape == (1,)
    assert abs(b[0] - 1.0 / math.sqrt(4 * math.pi)) < 1e-15


def test_north_pole_zeros_off_axis_terms():
    b = eval_basis(SphericalAngles(el=0.0, az=0.3), 4)
    for l in range(0, 5, 2):
        for m in range(-l, l + 1):
            k = l * (l + 1) // 2 + m
            if m != 0:
                assert b[k] == 0.0


def test_equator_l2_m0_closed_form():
    b = eval_basis(SphericalAngles(el=math.pi / 2, az=0.0), 4)
    expected = math.sqrt(5.0 / (4 * math.pi)) * (3 * math.cos(math.pi / 2) ** 2 - 1) / 2
    assert abs(b[2 * 3 // 2] - expected) < 1e-12
    assert abs(expected - (-0.31539157)) < 1e-7


def test_against_scipy_reference():
    scipy_special = pytest.importorskip("scipy.special")
    if hasattr(scipy_special, "sph_harm_y"):
        def ref_entry(l, m, el, az):
            return scipy_special.sph_harm_y(l, abs(m), el, az)
    else:
        def ref_entry(l, m, el, az):
            return scipy_special.sph_harm(abs(m), l, az, el)

    rng = np.random.default_rng(42)
    lmax = 8
    for _ in range(25):
        el = rng.uniform(0.05, math.pi - 0.05)
        az = rng.uniform(-math.pi, math.pi)
        mine = eval_basis(SphericalAngles(el=el, az=az), lmax)
        for l in range(0, lmax + 1, 2):
            for m in range(-l, l + 1):
                k = l * (l + 1) // 2 + m
                y = ref_entry(l, m, el, az)
                if m == 0:
                    want = y.real
                elif m > 0:
                    want = math.sqrt(2) * y.real
                else:
                    want = math.sqrt(2) * y.imag
                assert mine[k] == pytest.approx(want, abs=1e-12)


def test_orthonormality_by_quadrature():
    lmax = 8
    k = num_coefficients(lmax)
    n_el, n_az = 200, 400
    els = (np.arange(n_el) + 0.5) * math.pi / n_el
    azs = -math.pi + (np.arange(n_az) + 0.5) * 2 * math.pi / n_az
    el, az = np.meshgrid(els, azs, indexing="ij")
    dirs = np.stack(
        [
            np.sin(el.ravel()) * np.cos(az.ravel()),
            np.sin(el.ravel()) * np.sin(az.ravel()),
            np.cos(el.ravel()),
        ],
        axis=1,
    )
    B = basis_matrix(dirs, lmax)
    w = np.sin(el.ravel()) * (math.pi / n_el) * (2 * math.pi / n_az)
    gram = B.T @ (B * w[:, None])
    # even-degree terms only span half the full harmonic set, but they are
    # orthonormal among themselves
    assert np.abs(gram - np.eye(k)).max() < 1e-3


def test_derivatives_match_finite_differences():
    # first differences at h=1e-6; second differences need h=1e-4 to stay
    # above float64 round-off (eps/h^2)
    rng = np.random.default_rng(7)
    lmax = 8
    h1 = 1e-6
    h2 = 1e-4
    for _ in range(100):
        el = rng.uniform(0.1, math.pi - 0.1)
        az = rng.uniform(-math.pi + 0.1, math.pi - 0.1)
        d = eval_basis_derivatives(SphericalAngles(el=el, az=az), lmax)

        def b(e, a):
            return eval_basis(SphericalAngles(el=e, az=a), lmax)

        # floors sit ~1e3 above each difference's round-off noise
        checks = [
            (d.d_el, (b(el + h1, az) - b(el - h1, az)) / (2 * h1), 1e-8),
            (d.d_az, (b(el, az + h1) - b(el, az - h1)) / (2 * h1), 1e-8),
            (d.d2_el, (b(el + h2, az) - 2 * b(el, az) + b(el - h2, az)) / h2**2, 1e-1),
            (d.d2_az, (b(el, az + h2) - 2 * b(el, az) + b(el, az - h2)) / h2**2, 1e-1),
            (
                d.d_el_az,
                (
                    b(el + h2, az + h2)
                    - b(el + h2, az - h2)
                    - b(el - h2, az + h2)
                    + b(el - h2, az - h2)
                )
                / (4 * h2 * h2),
                1e-1,
            ),
        ]
        for analytic, numeric, floor in checks:
            err = np.abs(analytic - numeric) / np.maximum.reduce(
                [np.abs(analytic), np.abs(numeric), np.full_like(numeric, floor)]
            )
            assert err.max() < 1e-5


def test_m0_terms_have_no_azimuth_dependence():
    d = eval_basis_derivatives(SphericalAngles(el=1.0, az=0.7), 8)
    for l in range(0, 9, 2):
        k = l * (l + 1) // 2
        assert d.d_az[k] == 0.0
        assert d.d_el_az[k] == 0.0
    z = eval_basis_derivatives(SphericalAngles(el=0.4, az=0.0), 0)
    for field in (z.d_el, z.d_az, z.d2_el, z.d2_az, z.d_el_az):
        assert np.all(field == 0.0)


def test_antipodal_symmetry():
    rng = np.random.default_rng(3)
    for _ in range(50):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        b1 = eval_basis(cartesian_to_angles(d), 8)
        b2 = eval_basis(cartesian_to_angles(-d), 8)
        assert np.abs(b1 - b2).max() < 1e-12


def test_amplitude_isotropic_and_zero():
    k = num_coefficients(8)
    c = np.zeros(k)
    c[0] = math.sqrt(4 * math.pi)
    coeffs = ShCoefficients(values=c, lmax=8)
    for d in [(1.0, 0, 0), (0, 0, 1.0), (0.6, 0.8, 0.0)]:
        assert amplitude(coeffs, np.array(d)) == pytest.approx(1.0, abs=1e-12)
    zero = ShCoefficients(values=np.zeros(k), lmax=8)
    assert amplitude(zero, np.array([0.0, 0.0, 1.0])) == 0.0


def test_amplitude_linearity():
    rng = np.random.default_rng(11)
    k = num_coefficients(6)
    c1 = rng.standard_normal(k)
    c2 = rng.standard_normal(k)
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    a, b = 1.7, -0.4
    lhs = amplitude(ShCoefficients(values=a * c1 + b * c2, lmax=6), d)
    rhs = a * amplitude(ShCoefficients(values=c1, lmax=6), d) + b * amplitude(
        ShCoefficients(values=c2, lmax=6), d
    )
    assert abs(lhs - rhs) < 1e-12


def test_single_lobe_amplitude_matches_grid_max():
    from difftrack.synth import lobe_coefficients

    c = lobe_coefficients((0.0, 0.0, 1.0), 8)
    coeffs = ShCoefficients(values=c, lmax=8)
    at_peak = amplitude(coeffs, np.array([0.0, 0.0, 1.0]))
    grid = grid_directions(1.0)
    grid_max = (basis_matrix(grid, 8) @ c).max()
    assert at_peak >= grid_max - 1e-9
    peak_dir = dense_grid_max(c, 8)
    assert abs(peak_dir[2]) > math.cos(math.radians(0.2))


def test_amplitude_dimension_mismatch():
    with pytest.raises(Exception):
        ShCoefficients(values=np.zeros(10), lmax=8)
