"""Discretized flat complex torus.

The base manifold is X = C^n / (Z^n + T Z^n) with T an n x n complex period
matrix, Im T positive definite.  Points are parametrized by real lattice
coordinates s = (x_1..x_n, y_1..y_n) in [0,1)^{2n} through z = x + T y, and
fields are sampled on the uniform N^{2n} grid.  The flat Kahler form is
omega_0 = sum kappa_{jk} i dz_j ^ dzbar_k with a constant positive Hermitian
coefficient matrix kappa.

Complex derivatives are fixed linear combinations of the real-axis
derivatives.  Exactly periodic fields are differentiated spectrally; fields
with a lattice twist use 4th-order central differences whose wrap-around
applies the twist conjugation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import TwistError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Twist:
    """Wrap-around rule of a matrix field under full-period lattice shifts.

    Along real axis a the continuation is F(s + e_a) = left[a] @ F(s) @ right[a].
    ``None`` entries mean the field is exactly periodic along that axis.
    """

    left: tuple
    right: tuple

    @staticmethod
    def trivial(naxes):
        return Twist(left=(None,) * naxes, right=(None,) * naxes)

    @staticmethod
    def endo(mats):
        """Conjugation twist A F A^{-1}; for endomorphism-valued fields."""
        left, right = [], []
        for a in mats:
            if a is None:
                left.append(None)
                right.append(None)
            else:
                left.append(np.asarray(a, dtype=complex))
                right.append(np.linalg.inv(a).astype(complex))
        return Twist(tuple(left), tuple(right))

    @staticmethod
    def metric(mats):
        """Congruence twist A^{-*} F A^{-1}; for metric (Hermitian form) fields."""
        left, right = [], []
        for a in mats:
            if a is None:
                left.append(None)
                right.append(None)
            else:
                ainv = np.linalg.inv(a).astype(complex)
                left.append(ainv.conj().T)
                right.append(ainv)
        return Twist(tuple(left), tuple(right))

    @staticmethod
    def inverse_metric(mats):
        """Twist A F A^*; for inverses of metric fields."""
        left, right = [], []
        for a in mats:
            if a is None:
                left.append(None)
                right.append(None)
            else:
                a = np.asarray(a, dtype=complex)
                left.append(a)
                right.append(a.conj().T)
        return Twist(tuple(left), tuple(right))

    @property
    def is_trivial(self):
        return all(l is None for l in self.left)

    def axis_is_trivial(self, axis):
        return self.left[axis] is None


def _check_positive_hermitian(mat, name):
    mat = np.asarray(mat, dtype=complex)
    if not np.allclose(mat, mat.conj().T):
        raise ValueError(f"{name} must be Hermitian")
    if np.linalg.eigvalsh(mat).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return mat


class TorusDomain:
    """Uniform grid on a flat complex torus with its Kahler data.

    Parameters
    ----------
    n : complex dimension (1 or 2).
    size : grid points per real axis (N >= 8, even); the grid has N^{2n} points.
    periods : n x n complex matrix T of the non-integer lattice generators;
        the lattice is Z^n + T Z^n.  For n=1 this is [[tau]].
    kappa : constant positive Hermitian coefficient matrix of omega_0.
    deriv_method : "auto" (spectral when untwisted, FD4 otherwise),
        "spectral", or "fd4".
    """

    def __init__(self, n, size, periods, kappa, deriv_method="auto",
                 det_degree=None):
        if n not in (1, 2):
            raise ValueError("complex dimension must be 1 or 2")
        size = int(size)
        if size < 8 or size % 2:
            raise ValueError("grid size must be even and at least 8")
        periods = np.asarray(periods, dtype=complex).reshape(n, n)
        if np.linalg.eigvalsh((periods.imag + periods.imag.T) / 2).min() <= 0 or \
                abs(np.linalg.det(periods.imag)) < 1e-14:
            raise ValueError("Im(periods) must be nondegenerate positive")
        if deriv_method not in ("auto", "spectral", "fd4"):
            raise ValueError(f"unknown derivative method {deriv_method!r}")
        self.n = n
        self.size = size
        self.periods = periods
        self.kappa = _check_positive_hermitian(kappa, "kappa")
        self.deriv_method = deriv_method
        # degree of det E that kappa was normalized against; line factors of
        # degree d then have reference curvature (d / det_degree) * omega_0
        self.det_degree = det_degree

        self.naxes = 2 * n
        self.shape = (size,) * self.naxes
        self.kappa_inv = np.linalg.inv(self.kappa)
        self.det_kappa = float(np.linalg.det(self.kappa).real)
        # omega_0^n = n! det(kappa) * prod_j (i dz_j ^ dzbar_j)
        self.omega_top_density = float(math.factorial(n) * self.det_kappa)
        self.volume_lebesgue = float(np.linalg.det(periods.imag))
        self.volume_idz = float(2 ** n * self.volume_lebesgue)

        # (d/dz; d/dzbar) = inv([[I, I], [T^T, Tbar^T]]) (d/dx; d/dy)
        m = np.zeros((self.naxes, self.naxes), dtype=complex)
        m[:n, :n] = np.eye(n)
        m[:n, n:] = np.eye(n)
        m[n:, :n] = periods.T
        m[n:, n:] = periods.conj().T
        minv = np.linalg.inv(m)
        self.cz = minv[:n, :].copy()          # d/dz_j = sum_a cz[j,a] d/ds_a
        self.czbar = minv[n:, :].copy()       # rows are conj(cz) rows

        modes = np.fft.fftfreq(size) * size   # integer modes, Nyquist = -N/2
        self._modes = modes.astype(float)
        self._spectral_mult = []
        nyq = size // 2
        for axis in range(self.naxes):
            mult = TWO_PI * 1j * modes.copy()
            mult[nyq] = 0.0                   # drop Nyquist for odd-order stencil
            shape = [1] * self.naxes
            shape[axis] = size
            self._spectral_mult.append(mult.reshape(shape))
        self._dz_symbol_cache = {}

    # -- coordinates -----------------------------------------------------

    def lattice_coords(self):
        """Real lattice coordinates, one (grid-shaped) array per axis."""
        t = np.arange(self.size) / self.size
        return np.meshgrid(*([t] * self.naxes), indexing="ij")

    def complex_coords(self):
        """z_j = x_j + (T y)_j as grid-shaped arrays, one per complex axis."""
        s = self.lattice_coords()
        x = s[: self.n]
        y = s[self.n:]
        return [x[j] + sum(self.periods[j, k] * y[k] for k in range(self.n))
                for j in range(self.n)]

    def content_key(self):
        return {
            "n": self.n,
            "size": self.size,
            "periods": [[repr(v) for v in row] for row in self.periods.tolist()],
            "kappa": [[repr(v) for v in row] for row in self.kappa.tolist()],
            "deriv_method": self.deriv_method,
            "det_degree": self.det_degree,
        }

    def same_geometry(self, other):
        return (self.n == other.n and self.size == other.size
                and np.array_equal(self.periods, other.periods)
                and np.array_equal(self.kappa, other.kappa))

    # -- shifts and derivatives ------------------------------------------

    def _check_field(self, arr):
        if arr.shape[: self.naxes] != self.shape:
            raise ValueError(
                f"field shape {arr.shape} does not start with grid shape {self.shape}")

    def shift(self, arr, axis, k, twist=None):
        """arr sampled at s + k/N along a real axis, twist applied at wrap-around."""
        self._check_field(arr)
        if k == 0:
            return arr.copy()
        out = np.roll(arr, -k, axis=axis)
        if twist is None or twist.axis_is_trivial(axis):
            return out
        if arr.ndim < self.naxes + 2:
            raise TwistError("twisted shift needs a matrix-valued field")
        left = twist.left[axis]
        right = twist.right[axis]
        if k < 0:
            left = np.linalg.inv(left)
            right = np.linalg.inv(right)
        sel = [slice(None)] * out.ndim
        if k > 0:
            sel[axis] = slice(self.size - k, self.size)
        else:
            sel[axis] = slice(0, -k)
        sel = tuple(sel)
        out[sel] = left @ out[sel] @ right
        return out

    def deriv_real(self, arr, axis, twist=None, method=None):
        """First derivative along real lattice axis (unit period)."""
        self._check_field(arr)
        method = method or self.deriv_method
        twisted = twist is not None and not twist.axis_is_trivial(axis)
        if method == "auto":
            method = "fd4" if twisted else ("spectral" if self.deriv_method != "fd4" else "fd4")
        if method == "spectral":
            if twisted:
                raise TwistError("spectral derivative of a twisted field")
            spec = np.fft.fft(arr, axis=axis)
            mult = self._spectral_mult[axis]
            mult = mult.reshape(mult.shape + (1,) * (arr.ndim - self.naxes))
            return np.fft.ifft(spec * mult, axis=axis)
        # 4th-order central difference
        p1 = self.shift(arr, axis, 1, twist)
        m1 = self.shift(arr, axis, -1, twist)
        p2 = self.shift(arr, axis, 2, twist)
        m2 = self.shift(arr, axis, -2, twist)
        return (8.0 * (p1 - m1) - (p2 - m2)) * (self.size / 12.0)

    def dz(self, arr, j, twist=None, method=None):
        """Holomorphic derivative d/dz_j."""
        out = None
        for a in range(self.naxes):
            c = self.cz[j, a]
            if c == 0:
                continue
            term = c * self.deriv_real(arr, a, twist=twist, method=method)
            out = term if out is None else out + term
        return out

    def dzbar(self, arr, j, twist=None, method=None):
        """Antiholomorphic derivative d/dzbar_j."""
        out = None
        for a in range(self.naxes):
            c = self.czbar[j, a]
            if c == 0:
                continue
            term = c * self.deriv_real(arr, a, twist=twist, method=method)
            out = term if out is None else out + term
        return out

    def dz_symbol(self, j):
        """Grid of d/dz_j acting on exp(2 pi i m.s): the factor G_j(m)."""
        if j not in self._dz_symbol_cache:
            out = np.zeros(self.shape, dtype=complex)
            for a in range(self.naxes):
                shape = [1] * self.naxes
                shape[a] = self.size
                out = out + self.cz[j, a] * (TWO_PI * 1j * self._modes).reshape(shape)
            self._dz_symbol_cache[j] = out
        return self._dz_symbol_cache[j]

    def i_del_delbar(self, u, method=None):
        """Coefficient matrix of i d dbar u: entries du/dz_j dzbar_k, Hermitian for real u."""
        self._check_field(np.asarray(u))
        u = np.asarray(u, dtype=complex)
        out = np.empty(self.shape + (self.n, self.n), dtype=complex)
        for j in range(self.n):
            dju = self.dz(u, j, method=method)
            for k in range(self.n):
                out[..., j, k] = self.dzbar(dju, k, method=method)
        return out

    # -- integration -------------------------------------------------------

    def integrate(self, values, measure="lebesgue", real_tol=None):
        """Mean over the grid times the fundamental-domain volume.

        ``measure="lebesgue"`` uses the Euclidean volume det(Im T);
        ``measure="idz"`` uses the volume of prod_j i dz_j ^ dzbar_j,
        which is 2^n det(Im T).  Exact for band-limited integrands.
        """
        values = np.asarray(values)
        self._check_field(values)
        mean = complex(values.mean())
        if real_tol is not None and abs(mean.imag) > real_tol * max(1.0, abs(mean.real)):
            raise ValueError(f"density is not real: mean imaginary part {mean.imag:g}")
        vol = {"lebesgue": self.volume_lebesgue, "idz": self.volume_idz}[measure]
        return mean.real * vol

    def c1_volume(self):
        """Integral of ((2 pi)^{-1} omega_0)^n; equals deg(det E)^n by normalization."""
        return self.omega_top_density * self.volume_idz / TWO_PI ** self.n


def kappa_for_degree(n, periods, deg_det, kappa_base=None):
    """Scale a positive Hermitian base so that int ((2pi)^-1 omega_0)^n = deg_det^n."""
    if deg_det <= 0:
        raise ValueError("deg(det E) must be positive")
    periods = np.asarray(periods, dtype=complex).reshape(n, n)
    base = np.eye(n) if kappa_base is None else _check_positive_hermitian(
        kappa_base, "kappa_base")
    det_im = float(np.linalg.det(periods.imag))
    det_base = float(np.linalg.det(base).real)
    scale = np.pi * deg_det * (math.factorial(n) * det_base * det_im) ** (-1.0 / n)
    return scale * base


def make_domain(n, size, deg_det, periods=None, kappa_base=None, deriv_method="auto"):
    """Standard domain: default square period lattice, kappa normalized to deg_det."""
    if periods is None:
        periods = 1j * np.eye(n)
    kappa = kappa_for_degree(n, periods, deg_det, kappa_base)
    return TorusDomain(n, size, periods, kappa, deriv_method=deriv_method,
                       det_degree=int(deg_det))
