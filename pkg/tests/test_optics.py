import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bmisim import kernels, optics
from bmisim.optics import (GlassMaterial, LensPrescription, PrescriptionError, Ray, Surface,
                           TotalInternalReflection)

import oracles

WL = 587.6


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def single_surface(radius=50.0, n2=1.5, thickness=100.0, sensor_radius=None, sd=20.0):
    glass = GlassMaterial("G", {656.3: n2, 587.6: n2, 486.1: n2})
    surfaces = (Surface("stop", math.inf, 1.0, "air", sd),
                Surface("sphere", radius, thickness, "G", sd))
    return LensPrescription("single", surfaces, sensor_radius if sensor_radius else math.inf,
                            100.0, sd, {"G": glass})


# -- loading ----------------------------------------------------------------

def test_table_one_rows(mono):
    assert len(mono.surfaces) == 5
    s1 = mono.surfaces[0]
    assert (s1.radius, s1.thickness, s1.material, s1.semi_diameter) == (4.126, 2.1, "H-ZLAF3", 4.07)
    assert mono.surfaces[2].kind == "stop" and math.isinf(mono.surfaces[2].radius)
    assert mono.sensor_radius == -7.199 and mono.sensor_semi_diameter == 0.755


def test_double_gauss_rows(dgauss):
    assert len(dgauss.surfaces) == 11
    assert dgauss.stop_index == 5
    assert math.isinf(dgauss.surfaces[5].radius)
    assert dgauss.sensor_semi_diameter == 0.801


def _write(tmp_path, doc):
    p = tmp_path / "lens.json"
    p.write_text(json.dumps(doc))
    return p


def _doc():
    return json.loads(optics.builtin_prescription_path("monocentric").read_text())


def test_empty_prescription_rejected(tmp_path):
    doc = _doc()
    doc["surfaces"] = []
    with pytest.raises(PrescriptionError, match="no surfaces"):
        optics.load_prescription(_write(tmp_path, doc))


def test_unknown_material_rejected(tmp_path):
    doc = _doc()
    doc["surfaces"][0]["material"] = "UNOBTAINIUM"
    with pytest.raises(PrescriptionError, match="UNOBTAINIUM"):
        optics.load_prescription(_write(tmp_path, doc))


def test_missing_stop_rejected(tmp_path):
    doc = _doc()
    doc["surfaces"][2]["kind"] = "sphere"
    with pytest.raises(PrescriptionError, match="no stop"):
        optics.load_prescription(_write(tmp_path, doc))


def test_non_increasing_positions_rejected(tmp_path):
    doc = _doc()
    doc["surfaces"][1]["thickness_mm"] = 0.0
    with pytest.raises(PrescriptionError, match="strictly increasing"):
        optics.load_prescription(_write(tmp_path, doc))


def test_parse_failure(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(PrescriptionError, match="cannot parse"):
        optics.load_prescription(p)


def test_catalog_has_design_wavelengths():
    cat = optics.load_catalog()
    for name in ("H-ZLAF3", "H-ZPK5", "LAF2", "PSK3", "SF1"):
        for wl in optics.DESIGN_WAVELENGTHS:
            assert 1.0 < cat[name].index(wl) < 3.0
    # normal dispersion: blue index above red
    assert all(g.index(486.1) > g.index(656.3) for g in cat.values())


def test_glass_index_bounds():
    with pytest.raises(PrescriptionError):
        GlassMaterial("bad", {587.6: 0.9})


# -- refraction --------------------------------------------------------------

def test_normal_incidence_unchanged():
    d = np.array([0.0, 0.0, 1.0])
    for n1, n2 in ((1.0, 1.5), (1.7, 1.2)):
        np.testing.assert_allclose(optics.refract(d, np.array([0.0, 0.0, -1.0]), n1, n2), d, atol=1e-15)


def test_snell_thirty_degrees():
    i = math.radians(30)
    d = np.array([math.sin(i), 0.0, math.cos(i)])
    t = optics.refract(d, np.array([0.0, 0.0, 1.0]), 1.0, 1.5)
    assert math.degrees(math.asin(t[0])) == pytest.approx(math.degrees(math.asin(1 / 3)), abs=1e-12)
    assert math.degrees(math.asin(t[0])) == pytest.approx(19.471, abs=1e-3)
    assert abs(np.linalg.norm(t) - 1) < 1e-12


def test_total_internal_reflection():
    i = math.radians(60)
    d = np.array([math.sin(i), 0.0, math.cos(i)])
    with pytest.raises(TotalInternalReflection):
        optics.refract(d, np.array([0.0, 0.0, 1.0]), 1.5, 1.0)


angles = st.floats(0.0, 1.45)
azim = st.floats(0.0, 2 * math.pi)
index = st.floats(1.0, 2.5)


@given(angles, azim, index, index)
def test_snell_properties(theta, phi, n1, n2):
    d = np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])
    nrm = np.array([0.0, 0.0, -1.0])
    if n1 * math.sin(theta) >= n2 * (1 - 1e-9):
        return
    t = optics.refract(d, nrm, n1, n2)
    assert abs(np.linalg.norm(t) - 1) < 1e-12
    # Snell in the plane of incidence, coplanar with d and n
    assert n1 * math.sin(theta) == pytest.approx(n2 * math.hypot(t[0], t[1]), abs=1e-12)
    assert abs(np.dot(np.cross(d, nrm), t)) < 1e-12
    back = optics.refract(t, -nrm, n2, n1)
    np.testing.assert_allclose(back, d, atol=1e-9)


# -- ray trace ---------------------------------------------------------------

def test_ray_direction_must_be_unit():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0.0, 0.0, 2.0]), WL)


def test_free_space_propagation():
    glass = GlassMaterial("G", {656.3: 1.5, 587.6: 1.5, 486.1: 1.5})
    p = LensPrescription("air", (Surface("stop", math.inf, 10.0, "air", 50.0),), math.inf,
                         100.0, 5.0, {"G": glass})
    d = unit([0.1, -0.2, 1.0])
    out = optics.trace_ray(p, Ray(np.array([1.0, 2.0, -5.0]), d, WL))
    t = 15.0 / d[2]
    np.testing.assert_allclose(out.origin, [1.0 + t * d[0], 2.0 + t * d[1], 10.0], atol=1e-12)
    np.testing.assert_allclose(out.direction, d, atol=1e-15)


def test_on_axis_ray_stays_on_axis(mono):
    out = optics.trace_ray(mono, Ray(np.array([0.0, 0.0, -1000.0]), np.array([0.0, 0.0, 1.0]), WL))
    assert out.alive
    assert math.hypot(out.origin[0], out.origin[1]) < 1e-6


@pytest.mark.parametrize("n2", [1.5, 1.8])
def test_marginal_fan_matches_scalar_trace(n2):
    p = single_surface(radius=50.0, n2=n2, thickness=120.0)
    for y0 in np.linspace(-15, 15, 13):
        for ang in (-0.05, 0.0, 0.03):
            ray = Ray(np.array([0.0, y0, -20.0]), np.array([0.0, math.sin(ang), math.cos(ang)]), WL)
            out = optics.trace_ray(p, ray)
            y, z, _ = oracles.meridional_trace(p, y0, -20.0, ang, WL)
            assert out.alive
            assert out.origin[1] == pytest.approx(y, abs=1e-9)


def test_mono_fan_matches_scalar_trace(mono):
    for y0 in np.linspace(-1.7, 1.7, 9):
        ray = Ray(np.array([0.0, y0, -10.0]), np.array([0.0, 0.0, 1.0]), WL)
        out = optics.trace_ray(mono, ray)
        y, _, _ = oracles.meridional_trace(mono, y0, -10.0, 0.0, WL)
        assert out.origin[1] == pytest.approx(y, abs=1e-9)


def test_dead_ray_reasons(mono):
    # outside the stop of a stop-first system
    r = optics.trace_ray(single_surface(sd=20.0),
                         Ray(np.array([0.0, 25.0, -10.0]), np.array([0.0, 0.0, 1.0]), WL))
    assert not r.alive and r.reason == "clipped"
    # misses the first sphere altogether
    r = optics.trace_ray(mono, Ray(np.array([0.0, 5.0, -10.0]), np.array([0.0, 0.0, 1.0]), WL))
    assert not r.alive and r.reason in ("miss", "clipped")
    # travelling away from the lens
    r = optics.trace_ray(mono, Ray(np.array([0.0, 0.0, -10.0]), np.array([0.0, 0.0, -1.0]), WL))
    assert not r.alive and r.reason == "miss"


def test_tir_reason():
    # dense glass to air through a steep surface
    glass = GlassMaterial("G", {656.3: 1.9, 587.6: 1.9, 486.1: 1.9})
    surfaces = (Surface("sphere", math.inf, 1.0, "G", 10.0),
                Surface("stop", math.inf, 1.0, "G", 10.0),
                Surface("sphere", -6.0, 5.0, "air", 10.0))
    p = LensPrescription("tir", surfaces, math.inf, 100.0, 5.0, {"G": glass})
    r = optics.trace_ray(p, Ray(np.array([0.0, 5.0, -1.0]), np.array([0.0, 0.0, 1.0]), WL))
    assert not r.alive and r.reason == "tir"
    table = p.surface_table(WL)
    _, _, status, surf = kernels.trace_bundle(np.array([[0.0, 5.0, -1.0]]),
                                              np.array([[0.0, 0.0, 1.0]]), table)
    assert status[0] == kernels.TIR and surf[0] == 2


def test_backends_agree(mono):
    rng = np.random.default_rng(3)
    n = 2000
    o = np.column_stack([rng.uniform(-3, 3, n), rng.uniform(-3, 3, n), np.full(n, -50.0)])
    d = np.column_stack([rng.normal(0, 0.05, (n, 2)), np.ones(n)])
    d /= np.linalg.norm(d, axis=1)[:, None]
    table = mono.surface_table(WL)
    a = kernels.trace_bundle(o, d, table, backend="numpy")
    if kernels.BACKEND != "cython":
        pytest.skip("compiled backend not built")
    b = kernels.trace_bundle(o, d, table, backend="cython")
    np.testing.assert_array_equal(a[2], b[2])
    np.testing.assert_array_equal(a[3], b[3])
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


# -- even asphere ------------------------------------------------------------

ASPH = (-2.5e-4, 1.2e-6, -3.0e-9, 4.0e-12)  # r^4..r^10, mm^-3..mm^-9


def _asphere_lens(coeffs):
    glass = GlassMaterial("G", {656.3: 1.49, 587.6: 1.49, 486.1: 1.49})
    surfaces = (Surface("stop", math.inf, 1.0, "air", 12.0),
                Surface("even_asphere", 40.0, 30.0, "G", 12.0, coeffs))
    return LensPrescription("asph", surfaces, math.inf, 100.0, 10.0, {"G": glass})


def _sag(r, c, a):
    r2 = r * r
    return c * r2 / (1 + math.sqrt(1 - c * c * r2)) + sum(ai * r2 ** (k + 2) for k, ai in enumerate(a))


@pytest.mark.parametrize("backend", ["numpy", "cython"])
def test_asphere_intersection_on_surface(backend):
    if backend == "cython" and kernels.BACKEND != "cython":
        pytest.skip("compiled backend not built")
    p = _asphere_lens(ASPH)
    table = p.surface_table(WL, upto=1)
    ys = np.linspace(-9, 9, 19)
    o = np.column_stack([np.zeros_like(ys), ys, np.full_like(ys, -3.0)])
    d = np.tile([0.0, 0.0, 1.0], (len(ys), 1))
    pos, _, status, _ = kernels.trace_bundle(o, d, table, backend=backend)
    assert np.all(status == kernels.ALIVE)
    for y, z in zip(pos[:, 1], pos[:, 2]):
        assert z - 1.0 == pytest.approx(_sag(abs(y), 1 / 40.0, ASPH), abs=1e-10)


def test_zero_asphere_equals_sphere():
    a = _asphere_lens((0.0, 0.0, 0.0, 0.0))
    b = _asphere_lens((1e-30, 0.0, 0.0, 0.0))
    for y in (0.5, 3.0, 8.0):
        ray = Ray(np.array([0.0, y, -5.0]), np.array([0.0, 0.0, 1.0]), WL)
        np.testing.assert_allclose(optics.trace_ray(a, ray).origin, optics.trace_ray(b, ray).origin,
                                   atol=1e-9)


# -- paraxial ----------------------------------------------------------------

def test_planar_surface_afocal():
    assert math.isinf(optics.paraxial_efl(single_surface(radius=math.inf), WL))


def test_single_surface_power():
    assert optics.paraxial_power(single_surface(50.0, 1.5), WL) == pytest.approx(0.01, abs=1e-15)


@pytest.mark.parametrize("name", ["mono", "dgauss"])
@pytest.mark.parametrize("wl", optics.DESIGN_WAVELENGTHS)
def test_efl_matches_transfer_matrix(request, name, wl):
    p = request.getfixturevalue(name)
    ref = oracles.abcd_efl(p, wl)
    assert optics.paraxial_efl(p, wl) == pytest.approx(ref, rel=1e-12)
    assert optics.traced_efl(p, wl) == pytest.approx(ref, rel=1e-3)


# -- PSFs --------------------------------------------------------------------

def test_psf_basic_invariants(mono):
    g = optics.compute_psf(mono, 1.0, 0.0, WL, 256 * 256)
    assert g.samples.shape == (128, 128) and g.pitch == 0.4
    assert np.all(g.samples >= 0)
    assert abs(g.samples.sum() - 1) < 1e-9
    assert 0 <= g.captured_energy_fraction <= 1


@pytest.mark.parametrize("theta", [0.0, 3.0, 6.0])
def test_energy_bookkeeping(mono, theta):
    g = optics.compute_psf(mono, 0.8, theta, WL, 128 * 128)
    counts = g.samples * g.rays_inside
    assert np.allclose(counts, np.round(counts), atol=1e-6)
    assert int(round(counts.sum())) == g.rays_inside
    assert g.captured_energy_fraction * g.rays_survived == pytest.approx(g.rays_inside, abs=1e-9)


def test_energy_capture_on_axis(mono):
    g = optics.compute_psf(mono, 1.0, 0.0, WL)
    assert g.captured_energy_fraction >= 0.999


def test_ring_to_point(mono):
    near = optics.compute_psf(mono, 0.8, 0.0, WL).second_moment_radius_um()
    far = optics.compute_psf(mono, 10.0, 0.0, WL).second_moment_radius_um()
    assert near > far


def test_on_axis_symmetry(mono):
    g = optics.compute_psf(mono, 1.0, 0.0, WL)
    assert np.abs(g.samples - np.rot90(g.samples)).sum() < 0.02
    cx, cy = g.centroid_um()
    assert math.hypot(cx, cy) < 1.0


def test_pupil_convergence_from_1024(mono):
    a = optics.compute_psf(mono, 1.0, 0.0, WL, 1024 * 1024).samples
    b = optics.compute_psf(mono, 1.0, 0.0, WL, 2 * 1024 * 1024).samples
    assert np.abs(a - b).sum() < 0.01


@pytest.mark.xfail(reason="binning noise at the default 512^2 sampling exceeds 1% at 1 m",
                   strict=True)
def test_pupil_convergence_at_default(mono):
    a = optics.compute_psf(mono, 1.0, 0.0, WL, 512 * 512).samples
    b = optics.compute_psf(mono, 1.0, 0.0, WL, 2 * 512 * 512).samples
    assert np.abs(a - b).sum() < 0.01


@pytest.mark.parametrize("theta", [0.05, 0.1])
def test_centroid_near_paraxial_image(mono, theta):
    g = optics.compute_psf(mono, 10.0, theta, WL, 64 * 64, aperture_scale=0.01)
    x_mm = g.center[0] + g.centroid_um()[0] / 1000.0
    ref = oracles.paraxial_chief_height(mono, WL, 10000.0, theta)
    assert abs(x_mm - ref) * 1000.0 < 1.0


def test_off_axis_lands_positive_x(mono):
    g = optics.compute_psf(mono, 2.0, 6.0, WL, 128 * 128)
    assert g.center[0] > 0 and abs(g.center[1]) < 1e-12


def test_deterministic_and_worker_independent(mono):
    a = optics.compute_psf_stack(mono, [WL], [0.0, 3.0], [1.0], 64 * 64, workers=1)
    b = optics.compute_psf_stack(mono, [WL], [0.0, 3.0], [1.0], 64 * 64, workers=2)
    np.testing.assert_array_equal(a, b)


def test_psf_argument_errors(mono):
    with pytest.raises(ValueError):
        optics.compute_psf(mono, 1.0, 0.0, WL, 32 * 32)
    with pytest.raises(ValueError):
        optics.compute_psf(mono, -1.0, 0.0, WL)


def test_dead_bundle(mono):
    with pytest.raises(optics.EmptyPsfError):
        optics.compute_psf(mono, 1.0, 80.0, WL, 64 * 64)


def test_double_gauss_psf(dgauss):
    g = optics.compute_psf(dgauss, 5.0, 3.0, WL, 128 * 128)
    assert abs(g.samples.sum() - 1) < 1e-9
