import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iqcdiss import sim
from iqcdiss.analysis import (AnalysisOptions, CertificateBundle, SimOptions, certificate_margins,
                              check_well_posedness, ellipse_boundary_points, fdi_sample_check,
                              gamma_bisection, positivity_check, robust_ellipsoid_analysis,
                              robust_stability_test, soft_iqc_identity_residual, validate_invariance,
                              worst_case_excursions)
from iqcdiss.lmi import structured_Z
from iqcdiss.statespace import Interval, Realization, multiplier_filter, parametric_T, static


def plant_channel(plant):
    return Realization(plant.a, plant.b_w, plant.c_z, plant.d_zw)


def test_nu0_feasible(solved):
    bundle, report = solved[0]
    assert bundle.diagnostics["status"] in ("optimal", "feasible")
    assert report.trace > 0 and np.linalg.eigvalsh(report.y).min() > 0


def test_traces_non_increasing(solved):
    traces = [solved[nu][1].trace for nu in range(4)]
    assert all(b <= a * (1 + 1e-6) for a, b in zip(traces, traces[1:]))


def test_ill_posed_interval(plant):
    with pytest.raises(sim.WellPosednessError):
        check_well_posedness(plant, Interval(-5.0, 50.0))
    with pytest.raises(sim.WellPosednessError):
        robust_ellipsoid_analysis(plant, Interval(-5.0, 50.0), 0)


def test_well_posed_example(plant, interval):
    assert check_well_posedness(plant, interval) >= 0.3


def test_stability_trivial():
    g = Realization(np.zeros((1, 1)) - 1.0, [[1.0]], [[0.0]], [[0.0]])
    v = robust_stability_test(g, Interval(-1.0, 1.0), 1)
    assert v.certified


def test_stability_example_channel(plant, interval):
    v = robust_stability_test(plant_channel(plant), interval, 1)
    assert v.certified and v.coupling_margin > 0


def test_stability_gain_two_not_certified():
    # delta = -1 gives the pole -1 + 2 = 1
    g = Realization([[-1.0]], [[1.0]], [[-2.0]], [[0.0]])
    for nu in (0, 1, 2):
        assert not robust_stability_test(g, Interval(-1.0, 1.0), nu).certified


def test_stability_ill_posed():
    g = Realization([[-1.0]], [[1.0]], [[1.0]], [[1.0]])
    v = robust_stability_test(g, Interval(-2.0, 2.0), 1)
    assert not v.certified and v.status == "ill_posed"


def test_fdi_sample_check_signs():
    g = static([[0.0]])
    pi = np.diag([1.0, -1.0])
    # [G; I] = [0; 1] picks the lower-right entry
    assert np.isclose(fdi_sample_check(static(np.eye(2)), pi, g), -1.0)
    assert fdi_sample_check(static(np.eye(2)), -pi, g) > 0


def test_positivity_check():
    assert np.isclose(positivity_check(np.eye(3), np.zeros((2, 2))), 1.0)
    assert np.isclose(positivity_check(np.eye(3), 2 * np.eye(2)), -1.0)


def test_positivity_of_solutions(solved):
    for nu in range(1, 4):
        b = solved[nu][0]
        assert positivity_check(b.xcal, b.z_tilde) > 0
        from iqcdiss.riccati import terminal_cost_from_K
        assert positivity_check(b.xcal, terminal_cost_from_K(b.k_are).z) > 0


def test_ellipse_points():
    th, pts = ellipse_boundary_points(np.eye(2), 8)
    assert np.allclose(pts, np.column_stack([np.cos(th), np.sin(th)]))
    _, pts = ellipse_boundary_points(np.diag([4.0, 1.0]), 4)
    assert np.allclose(pts, [[2, 0], [0, 1], [-2, 0], [0, -1]], atol=1e-15)
    with pytest.raises(ValueError):
        ellipse_boundary_points(-np.eye(2))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(-0.9, 0.9))
def test_ellipse_points_on_boundary(a, b, rho):
    c = rho * np.sqrt(a * b)
    y = np.array([[a, c], [c, b]])
    _, pts = ellipse_boundary_points(y, 32)
    vals = np.einsum("ki,ij,kj->k", pts, np.linalg.inv(y), pts)
    assert np.allclose(vals, 1.0, rtol=1e-9)


def test_bundle_roundtrip(solved):
    for nu in range(4):
        b = solved[nu][0]
        r = CertificateBundle.from_dict(b.to_dict())
        for key in ("p", "xcal", "r", "k", "y", "z_tilde"):
            assert np.array_equal(getattr(r, key), getattr(b, key))
        assert r.gamma == b.gamma


def test_certificate_coherence(plant, interval, solved):
    for nu in range(4):
        res = certificate_margins(plant, interval, solved[nu][0])
        assert all(v["residual"] >= -v["margin"] / 2 for v in res.values())


def test_certificate_tampering_detected(plant, interval, solved):
    b = solved[2][0]
    bad = CertificateBundle.from_dict(b.to_dict())
    bad.y = 0.5 * bad.y
    res = certificate_margins(plant, interval, bad)
    assert min(v["residual"] + v["margin"] / 2 for v in res.values()) < 0


def test_gamma_reproducible(plant, interval, solved):
    b = solved[1][0]
    g = gamma_bisection(b.xcal, b.m, multiplier_filter(1), plant, parametric_T(interval))
    assert g == b.gamma
    # slightly below the bisection result the test fails
    with pytest.raises(ValueError):
        gamma_bisection(b.xcal, b.m, multiplier_filter(1), plant, parametric_T(interval),
                        lo=b.gamma / 1.01, hi=b.gamma / 1.01)


def test_soft_iqc_identity(solved, interval):
    b = solved[2][0]
    for d in np.linspace(interval.alpha, interval.beta, 5):
        assert soft_iqc_identity_residual(2, b.p, interval, d) <= 1e-10


def test_invariance_small(plant, solved, interval):
    y = solved[3][0].y
    res = validate_invariance(plant, interval, y, SimOptions(n_random_runs=20, horizon=10.0))
    assert res["violations"] == 0 and res["max_excursion"] <= 1 + 1e-5


def test_worst_case_excursions(plant, solved):
    res = worst_case_excursions(plant, -0.6, solved[3][0].y, n_dirs=3, horizon=30.0)
    assert res["boundary_mismatch"].max() <= 1e-2
    assert np.all(res["max_ratio"] <= 1 + 1e-5) and np.all(res["max_ratio"] >= 0.8)


def test_infeasible_margin_reports_constraint(plant, interval):
    from iqcdiss.analysis import AnalysisError
    with pytest.raises(AnalysisError) as exc:
        robust_ellipsoid_analysis(plant, interval, 0, AnalysisOptions(eps_margin=1e3))
    assert exc.value.status in ("infeasible", "numerical_failure")
