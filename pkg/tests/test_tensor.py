import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import cosine
from krflab.grid import GridSpec, fd_oracle, integrate, make_grid, random_bandlimited
from krflab.tensor import (
    MetricField,
    PositivityLoss,
    RefJet,
    Tensor,
    christoffel_ref,
    conversion_residual,
    covderiv_ref,
    curvature_direct,
    curvature_via_ref,
    laplacian,
    metric_from_potential,
    nabla_rm_direct,
    nabla_rm_evolving,
    pinch_eigenvalues,
    pinch_lower_bound,
    ricci,
    ricci_commutator,
    ricci_trace,
    sup_abs,
    tensor_norm,
    trace_identity_residual,
)

seeds = st.integers(min_value=0, max_value=2**31)


def random_pair(n, seed, curved=True, N=None):
    """Admissible ``(g, g0)`` with a band-limited potential on top of an optional cosine reference."""
    N = N or (64 if n == 1 else 16)
    grid = make_grid(n, N)
    phi0 = cosine(grid, 0.05 if n == 1 else 0.003, axis=1) if curved else np.zeros(grid.shape, complex)
    g0 = metric_from_potential(grid, phi0) if curved else MetricField.flat(grid)
    u = random_bandlimited(grid, 2 if n == 1 else 1, 0.003, seed)
    return metric_from_potential(grid, phi0 + u), g0


# -- finite-difference oracle with two Richardson levels (N = 128, 256, 512) --

def _fd_dz(grid, a, bar=False):
    fx, fy = fd_oracle(grid, a, 0), fd_oracle(grid, a, 1)
    return 0.5 * (fx + 1j * fy) if bar else 0.5 * (fx - 1j * fy)


def _richardson(build):
    f0, f1, f2 = (build(GridSpec(1, N)) for N in (128, 256, 512))
    r1 = (4 * f1[::2, ::2] - f0) / 3
    r2 = (4 * f2[::4, ::4] - f1[::2, ::2]) / 3
    return (16 * r2 - r1) / 15


def _closed_form_g(grid, eps):
    return (1 - eps * np.pi**2 * np.cos(2 * np.pi * grid.coord(0)) * np.ones(grid.shape)).astype(complex)


# -- metric assembly -----------------------------------------------------------

def test_zero_potential_gives_identity(grid2):
    g = metric_from_potential(grid2, np.zeros(grid2.shape, complex))
    eye = np.eye(2).reshape(2, 2, 1, 1, 1, 1)
    assert sup_abs(g.g - eye) == 0


def test_cosine_potential_closed_form(grid1):
    eps = 0.05
    g = metric_from_potential(grid1, cosine(grid1, eps))
    assert sup_abs(g.g[0, 0] - _closed_form_g(grid1, eps)) < 1e-13


def test_inadmissible_potential_raises(grid1):
    with pytest.raises(PositivityLoss) as info:
        metric_from_potential(grid1, cosine(grid1, 0.2))
    assert info.value.eigenvalue == pytest.approx(1 - 0.2 * np.pi**2, abs=1e-12)
    assert info.value.point == (0, 0)


def test_margin_is_configurable(grid1):
    # smallest eigenvalue 1 - 0.09 pi^2 = 0.112
    metric_from_potential(grid1, cosine(grid1, 0.09))
    with pytest.raises(PositivityLoss):
        metric_from_potential(grid1, cosine(grid1, 0.09), margin=0.2)


@given(seed=seeds)
def test_metric_invariants(seed):
    g, _ = random_pair(2, seed)
    G = np.moveaxis(g.g, (0, 1), (-2, -1))
    assert sup_abs(G - np.conj(np.swapaxes(G, -1, -2))) <= 1e-12
    inv = np.moveaxis(g.inv, (0, 1), (-2, -1))
    assert sup_abs(inv @ G - np.eye(2)) <= 1e-10
    assert sup_abs(g.det - np.linalg.det(G)) <= 1e-10
    assert np.min(np.linalg.eigvalsh(G)) > 0


# -- connection and covariant derivatives ----------------------------------------

def test_flat_christoffel_is_zero(grid2):
    assert sup_abs(christoffel_ref(MetricField.flat(grid2))) == 0


def test_christoffel_matches_fd_oracle():
    grid = make_grid(1, 128)
    g0 = metric_from_potential(grid, cosine(grid, 0.05))
    oracle = _richardson(lambda gr: _fd_dz(gr, _closed_form_g(gr, 0.05)) / _closed_form_g(gr, 0.05))
    assert sup_abs(christoffel_ref(g0)[0, 0, 0] - oracle) <= 1e-8


@given(seed=seeds)
def test_christoffel_symmetric(seed):
    g, _ = random_pair(2, seed)
    gam = christoffel_ref(g)
    assert sup_abs(gam - np.swapaxes(gam, 1, 2)) <= 1e-10 * sup_abs(gam)


def test_covderiv_flat_is_partial(grid2):
    u = random_bandlimited(grid2, 2, 0.1, 4)
    T = Tensor(np.stack([u, 2 * u]), "a")
    D = covderiv_ref(T, MetricField.flat(grid2), "a").values
    for a in range(2):
        for lam in range(2):
            assert sup_abs(D[a, lam] - grid2.dzbar(T.values[a], lam)) == 0


@given(seed=seeds, kind=st.sampled_from("ha"))
def test_metric_compatibility(seed, kind):
    g0, _ = random_pair(2, seed)
    D = covderiv_ref(g0.as_tensor(), g0, kind).values
    assert sup_abs(D) <= 1e-9 * (1 + sup_abs(g0.dg))


@pytest.mark.parametrize("sig", ["h", "a", "ha", "hh"])
def test_ricci_identity(sig):
    g, g0 = random_pair(2, 11)
    grid = g.grid
    parts = [random_bandlimited(grid, 1, 0.3, 100 + i) for i in range(2 ** len(sig))]
    T = Tensor(np.stack(parts).reshape((2,) * len(sig) + grid.shape), sig)
    lhs, rhs = ricci_commutator(T, g0)
    assert sup_abs(rhs) > 0
    # the commutator is a difference of mixed second derivatives; those set the scale
    scale = sup_abs(covderiv_ref(covderiv_ref(T, g0, "h"), g0, "a").values)
    assert sup_abs(lhs - rhs) <= 1e-8 * (1 + scale)


# -- curvature -----------------------------------------------------------------

def test_flat_curvature_zero(grid2):
    g = MetricField.flat(grid2)
    assert sup_abs(curvature_direct(g).values) == 0
    assert sup_abs(ricci(g).values) == 0


def test_curvature_matches_fd_oracle():
    eps = 0.02
    grid = make_grid(1, 128)
    R = curvature_direct(metric_from_potential(grid, cosine(grid, eps))).values[0, 0, 0, 0]

    def build(gr):
        G = _closed_form_g(gr, eps)
        lap = 0.25 * (fd_oracle(gr, G, 0, 2) + fd_oracle(gr, G, 1, 2))
        return -lap + _fd_dz(gr, G) * _fd_dz(gr, G, bar=True) / G

    assert sup_abs(R - _richardson(build)) <= 1e-8


@given(seed=seeds)
def test_kahler_symmetries(seed):
    g, _ = random_pair(2, seed)
    R = curvature_direct(g).values
    tol = 1e-9 * sup_abs(R)
    assert sup_abs(R - np.transpose(R, (2, 1, 0, 3) + tuple(range(4, 8)))) <= tol
    assert sup_abs(R - np.transpose(R, (0, 3, 2, 1) + tuple(range(4, 8)))) <= tol
    assert sup_abs(R - np.conj(np.transpose(R, (1, 0, 3, 2) + tuple(range(4, 8))))) <= tol


def test_via_ref_equals_R0_when_g_is_g0():
    _, g0 = random_pair(2, 0)
    R0 = curvature_direct(g0)
    R = curvature_via_ref(g0, g0, R0)
    assert sup_abs(R.values - R0.values) <= 1e-9 * (1 + sup_abs(R0.values))


@pytest.mark.parametrize("n", [1, 2])
@pytest.mark.parametrize("curved", [False, True])
def test_two_path_curvature(n, curved):
    for seed in range(3):
        g, g0 = random_pair(n, seed, curved)
        R = curvature_direct(g).values
        Rv = curvature_via_ref(g, g0).values
        assert sup_abs(R - Rv) <= 1e-8 * (1 + sup_abs(R))


def test_two_path_nonflat_reference_spec_example():
    grid = make_grid(1, 64)
    phi0 = cosine(grid, 0.05, axis=1)
    g0 = metric_from_potential(grid, phi0)
    g = metric_from_potential(grid, phi0 + random_bandlimited(grid, 2, 0.003, 9))
    R = curvature_direct(g).values
    assert sup_abs(R - curvature_via_ref(g, g0).values) <= 1e-8 * (1 + sup_abs(R))


@pytest.mark.parametrize("n", [1, 2])
def test_ricci_trace_consistency(n):
    for seed in range(3):
        g, _ = random_pair(n, seed)
        R = curvature_direct(g)
        assert sup_abs(ricci(g).values - ricci_trace(g, R).values) <= 1e-8 * (1 + sup_abs(R.values))


@given(seed=seeds)
def test_gauss_bonnet_n1(seed):
    g, _ = random_pair(1, seed)
    ric = ricci(g).values[0, 0]
    scal_vol = ric * g.inv[0, 0] * g.det
    assert abs(integrate(g.grid, scal_vol)) <= 1e-10


@pytest.mark.parametrize("curved", [False, True])
def test_trace_identity(curved):
    for n in (1, 2):
        g, g0 = random_pair(n, 5, curved)
        R = curvature_direct(g).values
        assert trace_identity_residual(g, g0) <= 1e-8 * (1 + sup_abs(R))


def test_trace_identity_flat_is_zero(grid1):
    g = MetricField.flat(grid1)
    assert trace_identity_residual(g, g) <= 1e-15


# -- Laplacian -------------------------------------------------------------------

def test_flat_laplacian_of_cosine(grid1):
    h = cosine(grid1, 1.0)
    assert sup_abs(laplacian(MetricField.flat(grid1), h) + np.pi**2 * h) < 1e-11


def test_laplacian_of_constant(grid2):
    g, _ = random_pair(2, 3)
    assert sup_abs(laplacian(g, np.full(g.grid.shape, 7.0, complex))) < 1e-12


@given(seed=seeds, n=st.sampled_from([1, 2]))
def test_laplacian_divergence_form(seed, n):
    g, _ = random_pair(n, seed)
    h = random_bandlimited(g.grid, 2, 1.0, seed + 1)
    assert abs(integrate(g.grid, laplacian(g, h) * g.det)) <= 1e-10


# -- pinch ------------------------------------------------------------------------

def test_pinch_scaled_reference():
    g, g0 = random_pair(2, 1)
    p = pinch_eigenvalues(g0.scaled(2.0), g0)
    assert p.lam_min == pytest.approx(2, abs=1e-12) and p.lam_max == pytest.approx(2, abs=1e-12)
    assert p.c_eq == pytest.approx(2, abs=1e-12)
    assert pinch_eigenvalues(g0, g0).c_eq == pytest.approx(1, abs=1e-12)


def test_pinch_lower_bound_arithmetic():
    assert pinch_lower_bound(5, 0.5, 2) == pytest.approx(0.1, abs=1e-15)


def test_pinch_matches_generalized_eigensolve():
    g, g0 = random_pair(2, 4)
    p = pinch_eigenvalues(g, g0)
    G = np.moveaxis(g.g, (0, 1), (-2, -1)).reshape(-1, 2, 2)
    H = np.moveaxis(g0.g, (0, 1), (-2, -1)).reshape(-1, 2, 2)
    L = np.linalg.cholesky(H)
    Li = np.linalg.inv(L)
    ref = np.linalg.eigvalsh(Li @ G @ np.conj(np.swapaxes(Li, -1, -2)))
    assert np.max(np.abs(p.eigenvalues.reshape(2, -1).T - ref)) < 1e-12
    assert np.all(p.eigenvalues[0] <= p.eigenvalues[1]) and p.c_eq >= 1


@given(seed=seeds, a=st.floats(0.1, 10.0))
def test_pinch_scale_invariance(seed, a):
    g, g0 = random_pair(2, seed)
    c1 = pinch_eigenvalues(g, g0).c_eq
    c2 = pinch_eigenvalues(g.scaled(a), g0.scaled(a)).c_eq
    assert abs(c1 - c2) <= 1e-12 * c1


# -- norms ------------------------------------------------------------------------

def test_norm_of_zero_and_of_g():
    g, _ = random_pair(2, 2)
    assert sup_abs(tensor_norm(Tensor(np.zeros_like(g.g), "ha"), g)) == 0
    assert sup_abs(tensor_norm(g.as_tensor(), g) - 2) < 1e-12


@given(seed=seeds)
def test_norm_scaling(seed):
    g, g0 = random_pair(2, seed)
    T = RefJet(g, g0).g_k
    assert sup_abs(tensor_norm(T.scaled(3), g) - 9 * tensor_norm(T, g)) <= 1e-12 * sup_abs(9 * tensor_norm(T, g))


@given(seed=seeds)
def test_norm_equivalence(seed):
    g, g0 = random_pair(2, seed)
    T = RefJet(g, g0).g_k
    c = pinch_eigenvalues(g, g0).c_eq
    a = tensor_norm(T, g).real
    b = tensor_norm(T, g0).real
    assert np.all(a >= b * c ** -3 * (1 - 1e-12)) and np.all(a <= b * c**3 * (1 + 1e-12))
    assert np.all(np.abs(tensor_norm(T, g).imag) <= 1e-12 * (1 + a))


# -- derivatives of curvature -------------------------------------------------------

def test_nabla_rm_k0_is_rm_norm():
    g, g0 = random_pair(1, 3)
    _, norm = nabla_rm_evolving(g, g0, 0)
    direct = tensor_norm(curvature_direct(g), g)
    assert sup_abs(norm - direct) <= 1e-8 * sup_abs(direct)


def test_nabla_rm_flat_is_zero(grid1):
    g = MetricField.flat(grid1)
    for k in range(3):
        _, norm = nabla_rm_evolving(g, g, k)
        assert sup_abs(norm) == 0


@pytest.mark.parametrize("k", [1, 2])
def test_nabla_rm_direct_vs_evolving(k):
    g, g0 = random_pair(1, 6)
    direct = nabla_rm_direct(g, k)
    blocks, _ = nabla_rm_evolving(g, g0, k)
    scale = 1 + max(sup_abs(T.values) for T in direct.values())
    for key, T in direct.items():
        assert sup_abs(T.values - blocks[key].values) <= 1e-7 * scale


def test_conversion_residual_n2():
    g, g0 = random_pair(2, 8)
    resid, scale = conversion_residual(g, g0)
    assert resid <= 1e-8 * (1 + scale)


def test_k_out_of_range():
    g, g0 = random_pair(1, 0)
    with pytest.raises(ValueError):
        nabla_rm_evolving(g, g0, 3)
