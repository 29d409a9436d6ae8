"""Bundle models on the torus and the Hermitian-endomorphism algebra.

Two bundle models are supported, both with ample determinant of degree r*d:

* SPLIT: a direct sum of r degree-d line factors.  All fields are exactly
  periodic.
* EXTENSION: the same smooth bundle twisted by a unipotent factor of
  automorphy A = exp(c_a N) per lattice axis (N nilpotent, N^2 = 0), which
  realizes a non-split extension of a line factor by itself.

Metrics are stored relative to the flat trivialization: a MetricField holds
the positive Hermitian matrix H(z) with the non-periodic line-factor weight
stripped off (only its constant Hessian enters curvature).  The reference
metric has matrix B(z) with det B = 1, chosen so its determinant curvature
is exactly omega_0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import PositivityError, TwistError
from .torus import TorusDomain, Twist

EIG_FLOOR = 1e-14  # positivity is a hard invariant; never clamp silently


@dataclass(frozen=True)
class BundleSpec:
    """Rank, degree and twist data of a bundle model over a TorusDomain."""

    domain: TorusDomain
    rank: int
    degree: int
    model: str = "split"               # "split" | "extension"
    twist_nilpotent: np.ndarray | None = None
    twist_coeffs: tuple = ()           # per real axis, scalar multiples of N

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.degree < 1:
            raise ValueError("degree of the ample line factor must be >= 1")
        if self.model not in ("split", "extension"):
            raise ValueError(f"unknown bundle model {self.model!r}")
        if self.model == "extension":
            if self.rank < 2:
                raise ValueError("extension model needs rank >= 2")
            n = np.asarray(self.twist_nilpotent, dtype=complex)
            if n.shape != (self.rank, self.rank):
                raise TwistError("twist matrix must be rank x rank")
            if np.abs(n @ n).max() > 1e-13 * max(1.0, np.abs(n).max()) ** 2:
                raise TwistError("twist matrix must square to zero")
            coeffs = tuple(float(c) for c in self.twist_coeffs)
            if len(coeffs) != self.domain.naxes:
                raise TwistError("one twist coefficient per real axis required")
            if not any(coeffs):
                raise TwistError("extension model needs a twisted lattice direction")
            object.__setattr__(self, "twist_nilpotent", n)
            object.__setattr__(self, "twist_coeffs", coeffs)

    # -- twists ----------------------------------------------------------

    def twist_mats(self):
        """Unipotent twist matrix exp(c_a N) per real axis (None if trivial)."""
        if self.model == "split":
            return [None] * self.domain.naxes
        n = self.twist_nilpotent
        eye = np.eye(self.rank)
        return [None if c == 0 else eye + c * n for c in self.twist_coeffs]

    def endo_twist(self):
        return Twist.endo(self.twist_mats())

    def metric_twist(self):
        return Twist.metric(self.twist_mats())

    def content_key(self):
        key = {"rank": self.rank, "degree": self.degree, "model": self.model,
               "domain": self.domain.content_key()}
        if self.model == "extension":
            key["twist_nilpotent"] = [[repr(v) for v in row]
                                      for row in self.twist_nilpotent.tolist()]
            key["twist_coeffs"] = list(self.twist_coeffs)
        return key


@dataclass
class EndoField:
    """r x r matrix per grid point with a declared lattice twist rule."""

    values: np.ndarray
    twist: Twist

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)

    @property
    def rank(self):
        return self.values.shape[-1]


@dataclass
class MetricField:
    """Positive Hermitian matrix field of a metric, relative to the trivialization."""

    values: np.ndarray
    spec: BundleSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        expected = self.spec.domain.shape + (self.spec.rank, self.spec.rank)
        if self.values.shape != expected:
            raise ValueError(f"metric values must have shape {expected}")

    def check(self, hermitian_tol=1e-10):
        v = self.values
        defect = np.abs(v - v.conj().swapaxes(-1, -2)).max()
        if defect > hermitian_tol * max(1.0, np.abs(v).max()):
            raise PositivityError(f"metric not Hermitian: defect {defect:g}")
        small = np.linalg.eigvalsh(v).min()
        if small <= EIG_FLOOR:
            raise PositivityError(f"metric not positive: min eigenvalue {small:g}")
        return self


def bundle_spec(domain, rank, degree, model="split", twist_nilpotent=None,
                twist_axis=0, twist_coeffs=None):
    """Build a BundleSpec; for the extension model default to one twisted axis."""
    if model == "extension" and twist_coeffs is None:
        twist_coeffs = [0.0] * domain.naxes
        twist_coeffs[twist_axis] = 1.0
    if model == "extension" and twist_nilpotent is None:
        twist_nilpotent = np.zeros((rank, rank))
        twist_nilpotent[0, 1] = 1.0
    return BundleSpec(domain=domain, rank=rank, degree=degree, model=model,
                      twist_nilpotent=twist_nilpotent,
                      twist_coeffs=tuple(twist_coeffs or ()))


# -- reference metric and Chern numbers ----------------------------------


def reference_metric(spec):
    """Reference metric matrix B(z): identity for SPLIT, a unipotent distortion
    along the twisted directions for EXTENSION, with det B = 1 exactly."""
    dom = spec.domain
    r = spec.rank
    if spec.model == "split":
        vals = np.broadcast_to(np.eye(r, dtype=complex),
                               dom.shape + (r, r)).copy()
        return MetricField(vals, spec)
    coords = dom.lattice_coords()
    phase = sum(c * coords[a] for a, c in enumerate(spec.twist_coeffs) if c)
    n = spec.twist_nilpotent
    eye = np.eye(r, dtype=complex)
    # exp(-p N) = Id - p N since N^2 = 0
    p = phase[..., None, None]
    right = eye - p * n
    left = right.conj().swapaxes(-1, -2)
    vals = left @ right
    return MetricField(vals, spec)


def chern_numbers(spec):
    """Top self-intersection of c1 for the bundle and its line factors; exact ints."""
    n = spec.domain.n
    total = (spec.rank * spec.degree) ** n
    per_factor = [spec.degree ** n] * spec.rank
    return {"c1_top": total, "per_factor": per_factor}


# -- pointwise Hermitian algebra ------------------------------------------


def herm(values):
    """Pointwise Hermitian part."""
    return 0.5 * (values + values.conj().swapaxes(-1, -2))


def _eigh_positive(values, what):
    w, u = np.linalg.eigh(values)
    if w.min() <= EIG_FLOOR:
        raise PositivityError(f"{what}: eigenvalue {w.min():g} at or below {EIG_FLOOR:g}")
    return w, u


def form_to_endo(q_values, h):
    """Endomorphism of a Hermitian form relative to a metric: q~ = H^{-1} Q."""
    h.check()
    q_values = np.asarray(q_values, dtype=complex)
    vals = np.linalg.solve(h.values, q_values)
    return EndoField(vals, h.spec.endo_twist())


def trace_free_split(u_values, rank=None):
    """Split u into (tr u / r, trace-free part); u = tau Id + u0 exactly."""
    u_values = np.asarray(u_values, dtype=complex)
    r = rank or u_values.shape[-1]
    tau = np.trace(u_values, axis1=-2, axis2=-1) / r
    u0 = u_values - tau[..., None, None] * np.eye(r)
    return tau, u0


def normalized_endo(h):
    """Unit-determinant endomorphism of h relative to the reference metric."""
    b = reference_metric(h.spec).values
    htilde = np.linalg.solve(b, h.values)
    det = np.linalg.det(htilde)
    if det.real.min() <= 0 or np.abs(det.imag).max() > 1e-8 * np.abs(det).max():
        raise PositivityError("metric has non-positive determinant relative to reference")
    vals = htilde * (det.real ** (-1.0 / h.spec.rank))[..., None, None]
    return EndoField(vals, h.spec.endo_twist())


def log_herm(values):
    """Principal logarithm of a Hermitian positive definite matrix field."""
    values = np.asarray(values, dtype=complex)
    w, u = _eigh_positive(values, "matrix logarithm")
    return (u * np.log(w)[..., None, :]) @ u.conj().swapaxes(-1, -2)


def exp_herm(values):
    values = np.asarray(values, dtype=complex)
    w, u = np.linalg.eigh(values)
    return (u * np.exp(w)[..., None, :]) @ u.conj().swapaxes(-1, -2)


def _log_divided_differences(w):
    """(log a - log b)/(a - b) with the limit 1/a on the diagonal, stably."""
    a = w[..., :, None]
    b = w[..., None, :]
    diff = a - b
    mean = 0.5 * (a + b)
    near = np.abs(diff) <= 1e-12 * np.abs(mean)
    safe = np.where(near, 1.0, diff)
    table = np.where(near, 1.0 / mean, (np.log(a) - np.log(b)) / safe)
    return table


def dlog_herm(values, direction):
    """Frechet derivative of log at a Hermitian positive point, any direction.

    Equals the integral of ((1-t)Id + t u)^{-1} v ((1-t)Id + t u)^{-1} dt,
    evaluated in the eigenbasis by divided differences.
    """
    values = np.asarray(values, dtype=complex)
    direction = np.asarray(direction, dtype=complex)
    w, u = _eigh_positive(values, "log derivative")
    uh = u.conj().swapaxes(-1, -2)
    table = _log_divided_differences(w)
    return u @ (table * (uh @ direction @ u)) @ uh
