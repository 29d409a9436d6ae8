import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hymlab.torus import make_domain
from hymlab.bundle import (
    bundle_spec, reference_metric, chern_numbers, form_to_endo,
    trace_free_split, normalized_endo, log_herm, exp_herm, dlog_herm,
    MetricField, EIG_FLOOR,
)
from hymlab.errors import PositivityError, TwistError

from conftest import smooth_hermitian_endo


def random_spd(rng, r, cond_max=1e6):
    q, _ = np.linalg.qr(rng.standard_normal((r, r)) + 1j * rng.standard_normal((r, r)))
    eigs = np.exp(rng.uniform(0, np.log(cond_max), r))
    eigs /= eigs.max() ** 0.5
    return (q * eigs) @ q.conj().T


class TestReferenceMetric:
    def test_split_reference_is_identity(self, split_spec):
        b = reference_metric(split_spec)
        eye = np.eye(2)
        assert np.abs(b.values - eye).max() == 0

    def test_extension_twist_rule_exact(self, ext_spec):
        # B(x + 1) = A^{-*} B(x) A^{-1} exactly, from exp(-(x+1)N) = exp(-xN) exp(-N)
        dom = ext_spec.domain
        b = reference_metric(ext_spec).values
        a = ext_spec.twist_mats()[0]
        ainv = np.linalg.inv(a)
        rule = ainv.conj().T @ b @ ainv
        # shifting the x index by N wraps once around the twisted axis
        x = dom.lattice_coords()[0]
        n_mat = ext_spec.twist_nilpotent
        eye = np.eye(2)
        p = (x + 1.0)[..., None, None]
        right = eye - p * n_mat
        shifted = right.conj().swapaxes(-1, -2) @ right
        assert np.abs(shifted - rule).max() < 1e-13

    def test_extension_unit_determinant(self, ext_spec):
        b = reference_metric(ext_spec).values
        assert np.abs(np.linalg.det(b) - 1.0).max() < 1e-12

    def test_extension_is_valid_metric(self, ext_spec):
        reference_metric(ext_spec).check()


class TestChernNumbers:
    def test_split_degree_additivity(self):
        dom = make_domain(1, 8, deg_det=6)
        spec = bundle_spec(dom, rank=2, degree=3)
        nums = chern_numbers(spec)
        assert nums["c1_top"] == 6
        assert nums["per_factor"] == [3, 3]

    def test_line_bundle(self):
        dom = make_domain(1, 8, deg_det=1)
        spec = bundle_spec(dom, rank=1, degree=1)
        assert chern_numbers(spec)["c1_top"] == 1

    def test_extension_determinant_degree(self):
        dom = make_domain(1, 8, deg_det=4)
        spec = bundle_spec(dom, rank=2, degree=2, model="extension")
        assert chern_numbers(spec)["c1_top"] == 4


class TestFormEndoAlgebra:
    def test_form_of_metric_is_identity(self, split_spec, rng):
        h = MetricField(
            exp_herm(smooth_hermitian_endo(split_spec, rng)), split_spec)
        q = form_to_endo(h.values, h)
        assert np.abs(q.values - np.eye(2)).max() < 1e-12
        q2 = form_to_endo(2.0 * h.values, h)
        assert np.abs(q2.values - 2.0 * np.eye(2)).max() < 1e-12

    def test_defining_identity_random_pairs(self, split_spec, rng):
        h = MetricField(
            exp_herm(smooth_hermitian_endo(split_spec, rng)), split_spec)
        qvals = smooth_hermitian_endo(split_spec, rng)
        qt = form_to_endo(qvals, h).values
        hv = h.values
        for _ in range(10):
            v = rng.standard_normal(2) + 1j * rng.standard_normal(2)
            w = rng.standard_normal(2) + 1j * rng.standard_normal(2)
            lhs = np.einsum("...a,...ab,...b->...", w.conj(), hv, np.einsum(
                "...ab,...b->...a", qt, v))
            rhs = np.einsum("...a,...ab,...b->...", w.conj(), qvals, v)
            assert np.abs(lhs - rhs).max() < 1e-12 * max(1.0, np.abs(rhs).max())

    def test_h_hermitian_output(self, split_spec, rng):
        h = MetricField(
            exp_herm(smooth_hermitian_endo(split_spec, rng)), split_spec)
        qvals = smooth_hermitian_endo(split_spec, rng)
        qt = form_to_endo(qvals, h).values
        hq = h.values @ qt
        assert np.abs(hq - hq.conj().swapaxes(-1, -2)).max() < 1e-12


class TestTraceFreeSplit:
    def test_identity(self):
        tau, u0 = trace_free_split(np.eye(3)[None])
        assert tau[0] == pytest.approx(1.0)
        assert np.abs(u0).max() < 1e-15

    def test_trace_free_input_passthrough(self, rng):
        u = rng.standard_normal((4, 3, 3)) + 1j * rng.standard_normal((4, 3, 3))
        u = u - np.trace(u, axis1=-2, axis2=-1)[..., None, None] * np.eye(3) / 3
        tau, u0 = trace_free_split(u)
        assert np.abs(tau).max() < 1e-14
        assert np.abs(u0 - u).max() < 1e-14

    @given(seed=st.integers(0, 10 ** 6))
    @settings(max_examples=25, deadline=None)
    def test_reassembly_exact(self, seed):
        rng = np.random.default_rng(seed)
        r = rng.integers(1, 4)
        u = rng.standard_normal((5, r, r)) + 1j * rng.standard_normal((5, r, r))
        tau, u0 = trace_free_split(u)
        back = tau[..., None, None] * np.eye(r) + u0
        assert np.abs(back - u).max() < 1e-14 * max(1.0, np.abs(u).max())


class TestNormalizedEndo:
    def test_reference_maps_to_identity(self, ext_spec):
        h0 = reference_metric(ext_spec)
        out = normalized_endo(h0)
        assert np.abs(out.values - np.eye(2)).max() < 1e-12

    def test_scale_invariance(self, split_spec):
        h0 = reference_metric(split_spec)
        h = MetricField(4.2 * h0.values, split_spec)
        out = normalized_endo(h)
        assert np.abs(out.values - np.eye(2)).max() < 1e-12

    def test_unit_determinant(self, split_spec, rng):
        h = MetricField(
            exp_herm(smooth_hermitian_endo(split_spec, rng)), split_spec)
        out = normalized_endo(h)
        assert np.abs(np.linalg.det(out.values) - 1.0).max() < 1e-12


class TestMatrixLog:
    def test_log_identity_and_diag(self):
        assert np.abs(log_herm(np.eye(2)[None])).max() < 1e-14
        d = np.diag([np.e, np.e ** 2])[None]
        expect = np.diag([1.0, 2.0])
        assert np.abs(log_herm(d) - expect).max() < 1e-12

    def test_dlog_at_identity_is_identity_map(self, rng):
        v = rng.standard_normal((3, 3))
        v = v + v.T
        out = dlog_herm(np.eye(3)[None], v[None])
        assert np.abs(out - v).max() < 1e-12

    @given(seed=st.integers(0, 10 ** 6))
    @settings(max_examples=20, deadline=None)
    def test_exp_log_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        u = random_spd(rng, 3, cond_max=1e6)
        back = exp_herm(log_herm(u[None]))[0]
        assert np.abs(back - u).max() < 1e-10 * np.abs(u).max()

    def test_dlog_matches_finite_difference(self, rng):
        for _ in range(10):
            u = random_spd(rng, 3, cond_max=1e3)
            v = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
            v = 0.5 * (v + v.conj().T)
            s = 1e-6
            fd = (log_herm((u + s * v)[None]) - log_herm((u - s * v)[None])) / (2 * s)
            an = dlog_herm(u[None], v[None])
            rel = np.abs(fd - an).max() / max(1e-30, np.abs(an).max())
            assert rel < 1e-7

    def test_log_of_unit_det_is_trace_free(self, split_spec, rng):
        h = MetricField(
            exp_herm(smooth_hermitian_endo(split_spec, rng)), split_spec)
        hn = normalized_endo(h).values
        logs = log_herm(hn)
        tr = np.trace(logs, axis1=-2, axis2=-1)
        assert np.abs(tr).max() < 1e-10

    def test_nonpositive_is_hard_error(self):
        bad = np.diag([1.0, EIG_FLOOR / 2])[None].astype(complex)
        with pytest.raises(PositivityError):
            log_herm(bad)


class TestSpecValidation:
    def test_twist_must_square_to_zero(self):
        dom = make_domain(1, 8, deg_det=2)
        with pytest.raises(TwistError):
            bundle_spec(dom, rank=2, degree=1, model="extension",
                        twist_nilpotent=np.array([[0.0, 1.0], [1.0, 0.0]]))

    def test_extension_needs_twisted_axis(self):
        dom = make_domain(1, 8, deg_det=2)
        with pytest.raises(TwistError):
            bundle_spec(dom, rank=2, degree=1, model="extension",
                        twist_coeffs=(0.0, 0.0))
