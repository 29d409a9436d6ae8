import numpy as np
import pytest

from hymlab.torus import make_domain
from hymlab.bundle import bundle_spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_scalar(domain, rng, max_mode=4, amplitude=1.0, real=True):
    """Band-limited random periodic scalar field (same continuum field for any N
    when the rng state and max_mode are fixed)."""
    coords = domain.lattice_coords()
    field = np.zeros(domain.shape, dtype=complex)
    modes = range(-max_mode, max_mode + 1)
    import itertools
    for m in itertools.product(modes, repeat=domain.naxes):
        if all(v == 0 for v in m):
            continue
        c = (rng.standard_normal() + 1j * rng.standard_normal()) / (
            1.0 + sum(v * v for v in m))
        phase = sum(mi * ci for mi, ci in zip(m, coords))
        field = field + c * np.exp(2j * np.pi * phase)
    field *= amplitude / max(1e-30, np.abs(field).max())
    if real:
        return field.real.copy()
    return field


def smooth_hermitian_endo(spec, rng, max_mode=3, amplitude=0.3):
    """Band-limited random Hermitian matrix field (periodic)."""
    r = spec.rank
    dom = spec.domain
    out = np.zeros(dom.shape + (r, r), dtype=complex)
    for a in range(r):
        for b in range(r):
            f = smooth_scalar(dom, rng, max_mode=max_mode, amplitude=amplitude,
                              real=False)
            out[..., a, b] = f
    return 0.5 * (out + out.conj().swapaxes(-1, -2))


@pytest.fixture
def dom64():
    return make_domain(n=1, size=64, deg_det=2)


@pytest.fixture
def split_spec(dom64):
    return bundle_spec(dom64, rank=2, degree=1, model="split")


@pytest.fixture
def ext_spec(dom64):
    return bundle_spec(dom64, rank=2, degree=1, model="extension")
