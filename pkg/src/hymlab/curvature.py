"""Chern curvature, positivity probes, and the determinant root form.

Curvature components are stored as c[..., j, k, lam, mu] in a pointwise
h-orthonormal frame, i.e. the coefficients of

    i sum c_{jk lam mu} dz_j ^ dzbar_k (x) e*_lam (x) e_mu .

The endomorphism matrix of the dz_j ^ dzbar_k block is the transpose of
c[..., j, k, :, :] (a matrix acts as M[mu, lam] = c[lam, mu]).  Hermitian
symmetry c_{jk lam mu} = conj(c_{kj mu lam}) holds after symmetrization.

Three positivity notions are probed, all normalized against omega_0 (x) h:

* nakano: the quadratic form on all tensors of T_X (x) E,
* dual_nakano: the transposed arrangement on T_X (x) E*,
* griffiths: the restriction to decomposable tensors xi (x) v.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .bundle import MetricField, herm, reference_metric
from .errors import PositivityError
from .torus import TorusDomain

PROBE_KINDS = ("griffiths", "nakano", "dual_nakano")


# -- raw-frame curvature (endomorphism matrices in the trivialization) -----


def reference_hessian_factor(spec):
    """Coefficient of omega_0 in the line-factor reference curvature.

    The stored metric matrices have the ample-factor weight stripped; only
    its constant Hessian enters, equal to (degree / det_degree) * omega_0
    per factor.  For a bundle whose determinant matches the domain
    normalization this is 1/rank.
    """
    deg_dom = spec.domain.det_degree
    if deg_dom is None:
        return 1.0 / spec.rank
    return spec.degree / deg_dom


def curvature_endo_matrices(h, method=None):
    """M_{jk} = f kappa_{jk} Id - dzbar_k(H^{-1} dz_j H) in the trivialization,
    with f the reference Hessian factor.

    These are the endomorphism blocks of the curvature before any frame
    change; traces, determinants and eigenvalues computed from them agree
    with the orthonormal-frame components exactly.
    """
    dom = h.spec.domain
    r = h.spec.rank
    hv = h.values
    hinv = np.linalg.inv(hv)
    tw_metric = h.spec.metric_twist()
    tw_endo = h.spec.endo_twist()
    eye = np.eye(r)
    factor = reference_hessian_factor(h.spec)
    out = np.empty(dom.shape + (dom.n, dom.n, r, r), dtype=complex)
    for j in range(dom.n):
        gamma_j = hinv @ dom.dz(hv, j, twist=tw_metric, method=method)
        for k in range(dom.n):
            out[..., j, k, :, :] = (factor * dom.kappa[j, k]) * eye \
                - dom.dzbar(gamma_j, k, twist=tw_endo, method=method)
    return out


def orthonormal_conjugator(h_values):
    """C with M_orth = C @ M @ C^{-1}; C = chol(H)^* maps to an h-orthonormal frame."""
    chol = np.linalg.cholesky(h_values)
    c = chol.conj().swapaxes(-1, -2)
    return c, np.linalg.inv(c)


@dataclass
class CurvatureField:
    """Curvature components in a pointwise h-orthonormal frame."""

    c: np.ndarray
    domain: TorusDomain
    symmetrization_defect: float = 0.0

    @property
    def rank(self):
        return self.c.shape[-1]

    def endo_blocks(self):
        """Endomorphism matrices M_{jk}, i.e. c with bundle indices transposed."""
        return self.c.swapaxes(-1, -2)

    def trace_endo(self):
        """tr_E of the curvature: coefficient matrix of the determinant curvature."""
        return np.einsum("...jkll->...jk", self.c)


@dataclass
class BigHermitianField:
    """nr x nr Hermitian curvature matrix theta(t, h) per grid point.

    theta_{(j lam),(k mu)} = c_{jk mu lam} + (1-t) alpha kappa_{jk} delta_{lam mu}.
    """

    values: np.ndarray
    domain: TorusDomain
    rank: int
    t: float
    alpha: float


def chern_curvature(h, method=None, max_symmetrization_defect=None):
    """Curvature of a metric in an h-orthonormal frame (Cholesky of H).

    The discretization breaks the Hermitian symmetry at truncation level;
    the returned field is symmetrized and the defect recorded.  A defect
    above ``max_symmetrization_defect`` raises (under-resolution guard).
    """
    h.check()
    m = curvature_endo_matrices(h, method=method)
    c_mat, c_inv = orthonormal_conjugator(h.values)
    m_orth = c_mat[..., None, None, :, :] @ m @ c_inv[..., None, None, :, :]
    m_adj = m_orth.conj().swapaxes(-1, -2).swapaxes(-4, -3)
    defect = float(np.abs(m_orth - m_adj).max())
    m_sym = 0.5 * (m_orth + m_adj)
    if max_symmetrization_defect is not None and defect > max_symmetrization_defect:
        raise PositivityError(
            f"curvature symmetrization defect {defect:g} exceeds "
            f"{max_symmetrization_defect:g}; grid under-resolves the metric")
    return CurvatureField(c=m_sym.swapaxes(-1, -2), domain=h.spec.domain,
                          symmetrization_defect=defect)


def trace_free_curvature(h, method=None):
    """Curvature minus (1/r) of its determinant part; endomorphism trace is zero."""
    cf = chern_curvature(h, method=method)
    r = cf.rank
    tr = cf.trace_endo()
    c0 = cf.c - tr[..., None, None] * (np.eye(r) / r)
    return CurvatureField(c=c0, domain=cf.domain,
                          symmetrization_defect=cf.symmetrization_defect)


def big_theta(h, t, alpha, method=None, curvature=None):
    """The offset curvature matrix theta(t, h), Hermitian nr x nr per point."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    cf = curvature if curvature is not None else chern_curvature(h, method=method)
    return big_theta_from_curvature(cf, t, alpha, h.spec.rank)


def big_theta_from_curvature(cf, t, alpha, rank):
    dom = cf.domain
    n, r = dom.n, rank
    blocks = cf.endo_blocks().copy()          # blocks[j,k] = M_{jk}
    offset = (1.0 - t) * alpha
    if offset:
        for j in range(n):
            for k in range(n):
                blocks[..., j, k, :, :] += offset * dom.kappa[j, k] * np.eye(r)
    theta = blocks.transpose(tuple(range(blocks.ndim - 4)) + (-4, -2, -3, -1))
    theta = theta.reshape(dom.shape + (n * r, n * r))
    return BigHermitianField(values=theta, domain=dom, rank=r, t=float(t),
                             alpha=float(alpha))


# -- determinant root form --------------------------------------------------


def det_root_density(theta, demand_positive=False):
    """det(theta)^{1/r} as a density against prod_j i dz_j ^ dzbar_j.

    The sign of det is reported through the sign of the output; with
    ``demand_positive`` a non-positive determinant raises.
    """
    if isinstance(theta, BigHermitianField):
        vals, r = theta.values, theta.rank
    else:
        vals, r = theta
    sign, logabs = np.linalg.slogdet(vals)
    sgn_real = sign.real if np.iscomplexobj(sign) else sign
    if np.iscomplexobj(sign) and np.abs(sign.imag).max() > 1e-8:
        raise PositivityError("determinant of the curvature matrix is not real")
    if demand_positive and sgn_real.min() <= 0:
        raise PositivityError("curvature matrix has non-positive determinant")
    return np.sign(sgn_real) * np.exp(logabs / r)


# -- quadratic form arrangements -------------------------------------------


def nakano_matrix(cf):
    """Hermitian matrix of the form on T_X (x) E: Q[(j lam),(k mu)] = c_{kj mu lam}."""
    c = cf.c
    n, r = cf.domain.n, cf.rank
    q = c.transpose(tuple(range(c.ndim - 4)) + (-3, -1, -4, -2))
    return q.reshape(cf.domain.shape + (n * r, n * r))


def dual_nakano_matrix(cf):
    """Hermitian matrix of the transposed form on T_X (x) E*: Q[(a al),(b be)] = c_{ba al be}."""
    c = cf.c
    n, r = cf.domain.n, cf.rank
    q = c.transpose(tuple(range(c.ndim - 4)) + (-3, -2, -4, -1))
    return q.reshape(cf.domain.shape + (n * r, n * r))


def evaluate_nakano_form(c_point, tau):
    """sum c_{jk lam mu} tau_{j lam} conj(tau_{k mu}) at one point."""
    return complex(np.einsum("jklm,jl,km->", c_point, tau, tau.conj())).real


def evaluate_dual_nakano_form(c_point, tau):
    """sum c_{jk mu lam} tau_{j lam} conj(tau_{k mu}) at one point."""
    return complex(np.einsum("jkml,jl,km->", c_point, tau, tau.conj())).real


def evaluate_griffiths_form(c_point, xi, v):
    """sum c_{jk lam mu} xi_j conj(xi_k) v_lam conj(v_mu) at one point."""
    return complex(np.einsum("jklm,j,k,l,m->", c_point, xi, xi.conj(),
                             v, v.conj())).real


# -- positivity probes -------------------------------------------------------


@dataclass
class PositivityReport:
    kind: str
    margin: float
    location: tuple
    tensor: object
    converged: bool = True
    details: dict = dataclass_field(default_factory=dict)

    def to_dict(self):
        if self.kind == "griffiths":
            xi, v = self.tensor
            tensor = {"xi_re": xi.real.tolist(), "xi_im": xi.imag.tolist(),
                      "v_re": v.real.tolist(), "v_im": v.imag.tolist()}
        else:
            t = np.asarray(self.tensor)
            tensor = {"tau_re": t.real.tolist(), "tau_im": t.imag.tolist()}
        return {"kind": self.kind, "margin": float(self.margin),
                "location": [int(i) for i in self.location], "tensor": tensor,
                "converged": bool(self.converged),
                "normalization": "omega0_tensor_h", **self.details}


def _gram_whitener(domain, rank):
    """Cholesky factor of the omega_0 (x) h Gram matrix in our frames."""
    wk = np.linalg.cholesky(domain.kappa.conj())
    return np.kron(wk, np.eye(rank))


def _min_eig_report(qmat, domain, rank, kind, t=None, alpha=None):
    wg = _gram_whitener(domain, rank)
    wg_inv = np.linalg.inv(wg)
    white = wg_inv @ qmat @ wg_inv.conj().T
    white = herm(white)
    eigs, vecs = np.linalg.eigh(white)
    flat_idx = int(np.argmin(eigs[..., 0]))
    margin = float(eigs[..., 0].reshape(-1)[flat_idx])
    loc = np.unravel_index(flat_idx, domain.shape)
    w = vecs.reshape(-1, eigs.shape[-1], eigs.shape[-1])[flat_idx][:, 0]
    tau_flat = wg_inv.conj().T @ w
    tau = tau_flat.reshape(domain.n, rank)
    details = {}
    if t is not None:
        details = {"t": t, "alpha": alpha}
    return PositivityReport(kind=kind, margin=margin, location=loc,
                            tensor=tau, details=details)


def _griffiths_probe(cf, rng, n_random_starts=8, max_iter=200, tol=1e-12):
    """Alternating minimization of the decomposable-tensor form per point.

    For fixed v the form is a Hermitian form in xi (minimized by a
    generalized eigenvector against kappa); for fixed xi it is a Hermitian
    form in v.  Alternation decreases the value monotonically; multiple
    starts guard against local minima.  Converged (start, point) columns
    are retired from the batch as the iteration proceeds.
    """
    dom, n, r = cf.domain, cf.domain.n, cf.rank
    c = cf.c.reshape((-1, n, n, r, r))
    npts = c.shape[0]
    wk = np.linalg.cholesky(dom.kappa.conj())
    wk_inv = np.linalg.inv(wk)
    scale = max(1.0, float(np.abs(c).max()))

    starts = []
    for j in range(n):
        for lam in range(r):
            xi0 = np.zeros(n, dtype=complex)
            xi0[j] = 1.0
            v0 = np.zeros(r, dtype=complex)
            v0[lam] = 1.0
            starts.append((xi0, v0))
    for _ in range(n_random_starts):
        xi0 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        v0 = rng.standard_normal(r) + 1j * rng.standard_normal(r)
        starts.append((xi0, v0))
    ns = len(starts)

    # active columns, flattened over (start, point)
    point_of = np.tile(np.arange(npts), ns)
    xi = np.repeat(np.stack([s[0] for s in starts]), npts, axis=0)
    v = np.repeat(np.stack([s[1] for s in starts]), npts, axis=0)
    ca = c[point_of]

    def norm_xi(x):
        # unit length against kappa in our index order
        nrm = np.sqrt(np.abs(np.einsum("aj,jk,ak->a", x.conj(),
                                       dom.kappa.conj(), x)))
        return x / nrm[..., None]

    def norm_v(x):
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def form_value(cc, x, w):
        return np.einsum("ajklm,aj,ak,al,am->a", cc, x, x.conj(),
                         w, w.conj()).real

    xi = norm_xi(xi)
    v = norm_v(v)
    value = form_value(ca, xi, v)
    final_value = np.empty(ns * npts)
    final_xi = np.empty((ns * npts, n), dtype=complex)
    final_v = np.empty((ns * npts, r), dtype=complex)
    active = np.arange(ns * npts)
    converged = True
    for it in range(max_iter):
        # v-step: Hermitian matrix X[mu, lam] = sum c xi xibar
        xmat = np.einsum("ajklm,aj,ak->aml", ca, xi, xi.conj())
        xmat = 0.5 * (xmat + xmat.conj().swapaxes(-1, -2))
        _, vecs = np.linalg.eigh(xmat)
        v = norm_v(vecs[..., :, 0])
        # xi-step: form matrix Y[k, j] = sum c v vbar, generalized against kappa
        ymat = np.einsum("ajklm,al,am->akj", ca, v, v.conj())
        white = wk_inv @ ymat @ wk_inv.conj().T
        white = 0.5 * (white + white.conj().swapaxes(-1, -2))
        _, vecs = np.linalg.eigh(white)
        xi = norm_xi(np.einsum("ab,cb->ca", wk_inv.conj().T, vecs[..., :, 0]))
        new_value = form_value(ca, xi, v)
        done = np.abs(new_value - value) <= tol * scale
        if it == max_iter - 1:
            done[:] = True
            converged = bool(done.all())
        if done.any():
            idx = active[done]
            final_value[idx] = new_value[done]
            final_xi[idx] = xi[done]
            final_v[idx] = v[done]
            keep = ~done
            active, xi, v, ca = active[keep], xi[keep], v[keep], ca[keep]
            value = new_value[keep]
        else:
            value = new_value
        if active.size == 0:
            break

    final_value = final_value.reshape(ns, npts)
    best_start = final_value.min(axis=0)
    flat_idx = int(np.argmin(best_start))
    s_idx = int(np.argmin(final_value[:, flat_idx]))
    margin = float(final_value[s_idx, flat_idx])
    loc = np.unravel_index(flat_idx, dom.shape)
    col = s_idx * npts + flat_idx
    report = PositivityReport(kind="griffiths", margin=margin, location=loc,
                              tensor=(final_xi[col].copy(), final_v[col].copy()),
                              converged=converged,
                              details={"starts": ns})
    return report


def positivity_probe(obj, kind, rng=None, **griffiths_opts):
    """Smallest normalized value of the requested curvature form over the grid."""
    if kind not in PROBE_KINDS:
        raise ValueError(f"kind must be one of {PROBE_KINDS}")
    if isinstance(obj, BigHermitianField):
        if kind == "griffiths":
            raise ValueError("griffiths probe needs curvature components, "
                             "not the stacked matrix")
        # theta and both arrangements share their spectrum
        return _min_eig_report(obj.values, obj.domain, obj.rank, kind,
                               t=obj.t, alpha=obj.alpha)
    cf = obj
    if kind == "nakano":
        return _min_eig_report(nakano_matrix(cf), cf.domain, cf.rank, kind)
    if kind == "dual_nakano":
        return _min_eig_report(dual_nakano_matrix(cf), cf.domain, cf.rank, kind)
    rng = rng if rng is not None else np.random.default_rng(0)
    return _griffiths_probe(cf, rng, **griffiths_opts)
