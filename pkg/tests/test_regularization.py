import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cfadapt.mesh import Flag, NodeLayout, create_base_mesh, execute_adaptation, refine_uniform
from cfadapt.regularization import (
    DensityChain,
    HelmholtzFilter,
    eps_relax,
    eps_relax_derivative,
    filter_length,
    heaviside_derivative,
    heaviside_project,
    helmholtz_filter,
)


def hanging_forest():
    f = refine_uniform(create_base_mesh(4, 2, 2.0, 1.0, max_level=3), 1)
    flags = np.where(f.centroids[:, 0] < 0.6, Flag.REFINE, Flag.KEEP)
    return execute_adaptation(f, flags)


def test_filter_length_convention():
    assert np.isclose(filter_length(0.1), 0.1 / (2 * np.sqrt(3)))


@pytest.mark.parametrize("c", [0.0, 0.3, 1.0])
def test_neumann_filter_preserves_constants(c):
    f = hanging_forest()
    out = helmholtz_filter(np.full(f.n_active, c), 0.2, 0.0, f)
    assert np.abs(out - c).max() <= 1e-10


def test_single_solid_cell_decays_monotonically():
    f = create_base_mesh(21, 21, 1.0, 1.0)
    rho = np.zeros(f.n_active)
    centre = f.index[(0, 10, 10)]
    rho[centre] = 1.0
    out = HelmholtzFilter(f, 0.15, 0.0).apply(rho)
    assert out.argmax() == centre
    # along the row through the centre the field decreases away from it
    row = out[[f.index[(0, i, 10)] for i in range(21)]]
    assert np.all(np.diff(row[10:]) < 0) and np.all(np.diff(row[:11]) > 0)
    assert np.all(out >= 0)


def test_robin_boundary_matches_1d_solution():
    f = create_base_mesh(64, 64, 1.0, 1.0)
    r = 0.2
    filt = HelmholtzFilter(f, r, boundary_coeff=0.5)
    nodal = filt.nodal(np.ones(f.n_active))
    X = filt.layout.coords
    mid = np.isclose(X[:, 1], 0.5)
    x = X[mid, 0]
    ell, kap = filt.length, filt.kappa
    s = 1.0 / (2 * ell)
    # -l^2 f'' + f = 1 on (0,1) with l^2 df/dn + kappa f = 0 at both ends
    B = kap / (ell * np.sinh(s) + kap * np.cosh(s))
    exact = 1 - B * np.cosh((x - 0.5) / ell)
    assert np.abs(nodal[mid] - exact).max() <= 5e-3
    cells = filt.apply(np.ones(f.n_active))
    boundary = np.array(sorted({n for n, _ in f.boundary_faces}))
    interior = np.abs(f.centroids - 0.5).max(axis=1) < 0.1
    assert cells[boundary].max() < 1.0
    assert np.abs(cells[interior] - 1.0).max() < 1e-3


def test_filter_self_adjoint_with_hanging_nodes(rng):
    f = hanging_forest()
    filt = HelmholtzFilter(f, 0.3)
    A = f.areas
    for _ in range(5):
        a, b = rng.random(f.n_active), rng.random(f.n_active)
        lhs = np.sum(A * filt.apply_unclipped(a) * b)
        rhs = np.sum(A * a * filt.apply_unclipped(b))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_transpose_is_gradient_of_filtered_functional(rng):
    f = hanging_forest()
    filt = HelmholtzFilter(f, 0.3)
    rho = rng.uniform(0.1, 0.9, f.n_active)
    w = rng.standard_normal(f.n_active)
    g = filt.transpose(w, rho)
    d = rng.standard_normal(f.n_active)
    h = 1e-6
    fd = (w @ filt.apply(rho + h * d) - w @ filt.apply(rho - h * d)) / (2 * h)
    assert np.isclose(fd, g @ d, rtol=1e-7)


def test_filter_bounds_and_validation():
    f = hanging_forest()
    with pytest.raises(ValueError):
        HelmholtzFilter(f, 0.0)
    with pytest.raises(ValueError):
        HelmholtzFilter(f, 0.1, boundary_coeff=-1)


def test_heaviside_endpoints_and_threshold():
    for beta in (1.0, 4.0, 16.0):
        assert np.isclose(heaviside_project(0.0, beta), 0.0, atol=1e-15)
        assert np.isclose(heaviside_project(1.0, beta), 1.0)
        assert np.isclose(heaviside_project(0.5, beta, 0.5), 0.5)
    b, e = 3.0, 0.3
    assert np.isclose(heaviside_project(e, b, e), np.tanh(b * e) / (np.tanh(b * e) + np.tanh(b * (1 - e))))


def test_heaviside_regression_value():
    # tanh(1) + tanh(0.5) over 2 tanh(1), evaluated once and pinned
    assert heaviside_project(0.75, 2.0, 0.5) == pytest.approx(0.80338806676, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.5, 16.0), st.floats(0.1, 0.9))
def test_heaviside_derivative_fd(x, beta, eta):
    h = 1e-6
    fd = (heaviside_project(x + h, beta, eta) - heaviside_project(x - h, beta, eta)) / (2 * h)
    d = heaviside_derivative(x, beta, eta)
    assert abs(fd - d) <= 1e-7 * max(abs(d), 1e-3)


def test_eps_relax_values():
    assert eps_relax(0.0, 0.1) == 0.0
    assert eps_relax(1.0, 0.1) == 1.0
    assert eps_relax(0.5, 0.1) == pytest.approx(10 / 11)
    grid = np.linspace(0, 1, 101)
    assert np.all(np.diff(eps_relax(grid, 0.1)) > 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 1.0))
def test_eps_relax_derivative_fd(x, eps):
    h = 1e-6
    fd = (eps_relax(x + h, eps) - eps_relax(x - h, eps)) / (2 * h)
    assert abs(fd - eps_relax_derivative(x, eps)) <= 1e-8 * max(1.0, abs(fd))


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, 36, elements=st.floats(0, 1)), st.floats(0.5, 16))
def test_chain_preserves_bounds(rho, beta):
    f = create_base_mesh(6, 6, 1.0, 1.0)
    fields = DensityChain(HelmholtzFilter(f, 0.3), beta).forward(rho)
    for arr in (fields.rho_tilde, fields.rho_hat):
        assert np.all(arr >= -1e-10) and np.all(arr <= 1 + 1e-10)


def test_chain_pullback_fd(rng):
    f = hanging_forest()
    chain = DensityChain(HelmholtzFilter(f, 0.3), beta=4.0)
    rho = rng.uniform(0.2, 0.8, f.n_active)
    w = rng.standard_normal(f.n_active)
    g = chain.pullback(w, chain.forward(rho))
    for e in (0, 7, 20):
        h = 1e-6
        rp, rm = rho.copy(), rho.copy()
        rp[e] += h
        rm[e] -= h
        fd = (w @ chain.forward(rp).rho_hat - w @ chain.forward(rm).rho_hat) / (2 * h)
        assert np.isclose(fd, g[e], rtol=1e-6, atol=1e-10)


def test_chain_validation():
    filt = HelmholtzFilter(create_base_mesh(2, 2, 1.0, 1.0), 0.3)
    with pytest.raises(ValueError):
        DensityChain(filt, 0.0)
    with pytest.raises(ValueError):
        DensityChain(filt, 1.0, eta=1.0)
