import numpy as np
import pytest

from hymlab.torus import make_domain
from hymlab.bundle import (bundle_spec, reference_metric, exp_herm, MetricField)
from hymlab.curvature import (
    chern_curvature, trace_free_curvature, big_theta, det_root_density,
    positivity_probe, nakano_matrix, dual_nakano_matrix, CurvatureField,
    evaluate_nakano_form, evaluate_dual_nakano_form, evaluate_griffiths_form,
    curvature_endo_matrices, orthonormal_conjugator, BigHermitianField,
)

from conftest import smooth_scalar, smooth_hermitian_endo


def random_curvature_field(domain, rank, rng, scale=1.0):
    """Pointwise random components with the Hermitian symmetry of a curvature."""
    n = domain.n
    blocks = np.empty(domain.shape + (n, n, rank, rank), dtype=complex)
    for j in range(n):
        for k in range(j, n):
            m = rng.standard_normal(domain.shape + (rank, rank)) \
                + 1j * rng.standard_normal(domain.shape + (rank, rank))
            if j == k:
                m = 0.5 * (m + m.conj().swapaxes(-1, -2))
            blocks[..., j, k, :, :] = m
            if k != j:
                blocks[..., k, j, :, :] = m.conj().swapaxes(-1, -2)
    blocks *= scale
    return CurvatureField(c=blocks.swapaxes(-1, -2), domain=domain)


def perturbed_metric(spec, rng, amplitude=0.25, max_mode=3):
    u = smooth_hermitian_endo(spec, rng, max_mode=max_mode, amplitude=amplitude)
    if spec.model == "split":
        return MetricField(exp_herm(u), spec)
    b = reference_metric(spec).values
    w = np.linalg.cholesky(b)
    return MetricField(w @ exp_herm(u) @ w.conj().swapaxes(-1, -2), spec)


class TestChernCurvature:
    def test_reference_split_is_constant(self, split_spec):
        h0 = reference_metric(split_spec)
        cf = chern_curvature(h0)
        kappa = split_spec.domain.kappa[0, 0]
        expect = (kappa / 2) * np.eye(2)
        assert np.abs(cf.c - expect).max() < 1e-10
        assert cf.symmetrization_defect < 1e-12

    def test_rank_one_matches_spectral_oracle(self, rng):
        dom = make_domain(1, 64, deg_det=1)
        spec = bundle_spec(dom, rank=1, degree=1)
        u = smooth_scalar(dom, rng, max_mode=4, amplitude=0.4)
        h = MetricField(np.exp(-u)[..., None, None].astype(complex), spec)
        cf = chern_curvature(h)
        oracle = dom.kappa[0, 0] + dom.i_del_delbar(u)[..., 0, 0]
        assert np.abs(cf.c[..., 0, 0, 0, 0] - oracle).max() < 1e-8

    def test_duality_identity(self, split_spec, rng):
        # curvature of the dual metric, in the dual frame, is minus the
        # transpose (in bundle indices) of the curvature of h
        h = perturbed_metric(split_spec, rng)
        dom = split_spec.domain
        r = split_spec.rank
        cf = chern_curvature(h)
        m_hat = cf.endo_blocks()

        hdual = np.linalg.inv(h.values).conj()
        hdual_inv = np.linalg.inv(hdual)
        mdual = np.empty_like(m_hat)
        for j in range(dom.n):
            gam = hdual_inv @ dom.dz(hdual, j)
            for k in range(dom.n):
                mdual[..., j, k, :, :] = -(dom.kappa[j, k] / r) * np.eye(r) \
                    - dom.dzbar(gam, k)
        # dual frame of the Cholesky frame: columns conj(L)
        chol = np.linalg.cholesky(h.values)
        sd = chol.conj()
        sd_inv = np.linalg.inv(sd)
        mdual_hat = sd_inv[..., None, None, :, :] @ mdual \
            @ sd[..., None, None, :, :]
        expect = -m_hat.swapaxes(-1, -2)
        defect = np.abs(mdual_hat - expect).max() / np.abs(m_hat).max()
        assert defect < 1e-8

    def test_extension_reference_has_nontrivial_trace_free_part(self, ext_spec):
        h0 = reference_metric(ext_spec)
        cf0 = trace_free_curvature(h0)
        assert np.abs(cf0.c).max() > 0.01
        # analytic value at x=0 for tau=i, N=[[0,1],[0,0]]: the raw trace-free
        # block is [[1,-2x],[0,-1]]/4 before the frame change
        m = curvature_endo_matrices(h0)
        kappa = ext_spec.domain.kappa[0, 0]
        m0 = m[0, 0, 0, 0] - (kappa / 2) * np.eye(2)
        expect = np.array([[1.0, 0.0], [0.0, -1.0]]) / 4.0
        assert np.abs(m0 - expect).max() < 1e-6


class TestTraceFree:
    def test_reference_split_is_zero(self, split_spec):
        cf0 = trace_free_curvature(reference_metric(split_spec))
        assert np.abs(cf0.c).max() < 1e-10

    def test_pointwise_trace_vanishes(self, split_spec, rng):
        h = perturbed_metric(split_spec, rng)
        cf0 = trace_free_curvature(h)
        tr = cf0.trace_endo()
        assert np.abs(tr).max() < 1e-10 * max(1.0, np.abs(cf0.c).max())

    def test_conformal_metric_is_trace_free_flat(self, split_spec, rng):
        c = np.exp(smooth_scalar(split_spec.domain, rng, amplitude=0.3))
        h = MetricField(c[..., None, None] * np.eye(2), split_spec)
        cf0 = trace_free_curvature(h)
        assert np.abs(cf0.c).max() < 1e-9


class TestBigTheta:
    def test_reference_t0_constant_eigenvalues(self, split_spec):
        h0 = reference_metric(split_spec)
        alpha = 0.7
        th = big_theta(h0, t=0.0, alpha=alpha)
        kappa = split_spec.domain.kappa[0, 0]
        expect = kappa * (0.5 + alpha)
        eigs = np.linalg.eigvalsh(th.values)
        assert np.abs(eigs - expect).max() < 1e-9

    def test_t1_offset_vanishes(self, split_spec, rng):
        h = perturbed_metric(split_spec, rng)
        cf = chern_curvature(h)
        th = big_theta(h, t=1.0, alpha=3.0, curvature=cf)
        blocks = cf.endo_blocks()[..., 0, 0, :, :]
        assert np.abs(th.values - blocks).max() < 1e-12

    def test_hermitian(self, split_spec, rng):
        h = perturbed_metric(split_spec, rng)
        th = big_theta(h, t=0.4, alpha=1.0)
        defect = np.abs(th.values - th.values.conj().swapaxes(-1, -2)).max()
        assert defect < 1e-10 * max(1.0, np.abs(th.values).max())


class TestDetRoot:
    def test_identity_matrix(self):
        dom = make_domain(1, 8, deg_det=2)
        th = BigHermitianField(
            np.broadcast_to(np.eye(2, dtype=complex), dom.shape + (2, 2)).copy(),
            dom, rank=2, t=1.0, alpha=0.0)
        assert np.abs(det_root_density(th) - 1.0).max() < 1e-14

    def test_block_product_identity(self, rng):
        dom = make_domain(1, 8, deg_det=2)
        a = np.exp(rng.standard_normal(dom.shape))
        b = np.exp(rng.standard_normal(dom.shape))
        vals = np.zeros(dom.shape + (2, 2), dtype=complex)
        vals[..., 0, 0] = a
        vals[..., 1, 1] = b
        th = BigHermitianField(vals, dom, rank=2, t=1.0, alpha=0.0)
        expect = np.sqrt(a * b)
        assert np.abs(det_root_density(th) - expect).max() < 1e-9 * expect.max()

    def test_frame_invariance_under_unitaries(self, rng):
        dom = make_domain(2, 8, deg_det=2)
        n, r = 2, 2
        herm_f = rng.standard_normal(dom.shape + (n * r, n * r)) \
            + 1j * rng.standard_normal(dom.shape + (n * r, n * r))
        herm_f = herm_f + herm_f.conj().swapaxes(-1, -2)
        th = BigHermitianField(herm_f, dom, rank=r, t=1.0, alpha=0.0)
        base = det_root_density(th)
        qt, _ = np.linalg.qr(rng.standard_normal(dom.shape + (n, n))
                             + 1j * rng.standard_normal(dom.shape + (n, n)))
        qe, _ = np.linalg.qr(rng.standard_normal(dom.shape + (r, r))
                             + 1j * rng.standard_normal(dom.shape + (r, r)))
        u = np.einsum("...jk,...lm->...jlkm", qt, qe).reshape(dom.shape + (n * r, n * r))
        conj_vals = u @ herm_f @ u.conj().swapaxes(-1, -2)
        th2 = BigHermitianField(conj_vals, dom, rank=r, t=1.0, alpha=0.0)
        assert np.abs(det_root_density(th2) - base).max() \
            < 1e-10 * np.abs(base).max()

    def test_homogeneity_exponent(self, rng):
        dom = make_domain(1, 8, deg_det=2)
        herm_f = rng.standard_normal(dom.shape + (2, 2)) \
            + 1j * rng.standard_normal(dom.shape + (2, 2))
        herm_f = herm_f + herm_f.conj().swapaxes(-1, -2) + 6 * np.eye(2)
        th = BigHermitianField(herm_f, dom, rank=2, t=1.0, alpha=0.0)
        base = det_root_density(th)
        s = 2.3
        th2 = BigHermitianField(s * herm_f, dom, rank=2, t=1.0, alpha=0.0)
        # det of an nr x nr matrix to the power 1/r scales by s^n
        assert np.abs(det_root_density(th2) - s ** dom.n * base).max() < 1e-10 * base.max()


class TestPositivityProbes:
    def test_reference_margins_are_inverse_rank(self, split_spec, rng):
        h0 = reference_metric(split_spec)
        cf = chern_curvature(h0)
        for kind in ("nakano", "dual_nakano", "griffiths"):
            rep = positivity_probe(cf, kind, rng=rng)
            assert rep.margin == pytest.approx(0.5, abs=1e-8)

    def test_margins_coincide_for_n1(self, rng):
        dom = make_domain(1, 8, deg_det=2)
        for _ in range(5):
            cf = random_curvature_field(dom, rank=2, rng=rng)
            margins = {k: positivity_probe(cf, k, rng=rng).margin
                       for k in ("nakano", "dual_nakano", "griffiths")}
            vals = list(margins.values())
            assert max(vals) - min(vals) < 1e-8 * max(1.0, abs(vals[0]))

    def test_griffiths_dominates_on_n2_fields(self, rng):
        dom = make_domain(2, 8, deg_det=2)
        for _ in range(5):
            cf = random_curvature_field(dom, rank=2, rng=rng)
            g = positivity_probe(cf, "griffiths", rng=rng).margin
            nk = positivity_probe(cf, "nakano", rng=rng).margin
            dn = positivity_probe(cf, "dual_nakano", rng=rng).margin
            assert g >= nk - 1e-9
            assert g >= dn - 1e-9

    def test_decomposable_tensor_identity(self, rng):
        dom = make_domain(2, 8, deg_det=2)
        cf = random_curvature_field(dom, rank=3, rng=rng)
        c0 = cf.c[(0,) * dom.naxes]
        for _ in range(10):
            xi = rng.standard_normal(2) + 1j * rng.standard_normal(2)
            v = rng.standard_normal(3) + 1j * rng.standard_normal(3)
            tau = np.outer(xi, v)
            a = evaluate_nakano_form(c0, tau)
            b = evaluate_griffiths_form(c0, xi, v)
            assert abs(a - b) < 1e-12 * max(1.0, abs(a))

    def test_report_reevaluation_invariant(self, rng):
        dom = make_domain(1, 8, deg_det=2)
        cf = random_curvature_field(dom, rank=2, rng=rng)
        kappa = dom.kappa.conj()

        rep = positivity_probe(cf, "nakano")
        c0 = cf.c[rep.location]
        tau = rep.tensor
        norm = np.einsum("jl,jk,kl->", tau.conj(), kappa, tau).real
        assert evaluate_nakano_form(c0, tau) / norm == pytest.approx(rep.margin, abs=1e-10)

        rep = positivity_probe(cf, "dual_nakano")
        c0 = cf.c[rep.location]
        tau = rep.tensor
        norm = np.einsum("jl,jk,kl->", tau.conj(), kappa, tau).real
        assert evaluate_dual_nakano_form(c0, tau) / norm == pytest.approx(rep.margin, abs=1e-10)

        rep = positivity_probe(cf, "griffiths", rng=rng)
        c0 = cf.c[rep.location]
        xi, v = rep.tensor
        assert evaluate_griffiths_form(c0, xi, v) == pytest.approx(rep.margin, abs=1e-10)

    def test_theta_probe_matches_dual_arrangement(self, split_spec, rng):
        h = perturbed_metric(split_spec, rng)
        cf = chern_curvature(h)
        th = big_theta(h, t=1.0, alpha=0.0, curvature=cf)
        m1 = positivity_probe(th, "nakano").margin
        m2 = positivity_probe(cf, "dual_nakano").margin
        assert m1 == pytest.approx(m2, abs=1e-9)

    def test_report_serializes(self, split_spec, rng):
        import json
        cf = chern_curvature(reference_metric(split_spec))
        rep = positivity_probe(cf, "griffiths", rng=rng)
        json.dumps(rep.to_dict())
