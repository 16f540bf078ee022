import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cfadapt.mechanics import (
    InvertedElementError,
    MaterialParams,
    cauchy_stress,
    eshelby_stress,
    material_tangent,
    piola_stress,
    strain_energy,
    stress_state,
    von_mises,
    von_mises_derivative,
)

from conftest import random_F

M = MaterialParams()
I2 = np.eye(2)

perturb = arrays(np.float64, (2, 2), elements=st.floats(-0.35, 0.35))


def fd_piola(F, h=1e-6):
    out = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            E = np.zeros((2, 2))
            E[i, j] = h
            out[i, j] = (strain_energy(F + E, M) - strain_energy(F - E, M)) / (2 * h)
    return out


def fd_tangent(F, h=1e-6):
    out = np.zeros((2, 2, 2, 2))
    for k in range(2):
        for L in range(2):
            E = np.zeros((2, 2))
            E[k, L] = h
            out[:, :, k, L] = (piola_stress(F + E, M) - piola_stress(F - E, M)) / (2 * h)
    return out


def test_default_material_constants():
    assert (M.lam, M.mu) == (2.66, 0.71)


@pytest.mark.parametrize("lam,mu", [(1.0, 0.0), (-1.0, 0.5), (1.0, -0.1)])
def test_material_validation(lam, mu):
    with pytest.raises(ValueError):
        MaterialParams(lam, mu)


def test_identity_is_stress_free():
    s = stress_state(I2, M)
    for arr in (s.P, s.sigma, s.sigma_vm, s.Sigma, s.W0):
        assert np.allclose(arr, 0.0, atol=1e-15)


def test_energy_isochoric_stretch():
    g = 1.3
    F = np.diag([g, 1 / g])
    assert np.isclose(strain_energy(F, M), 0.5 * M.mu * (g**2 + g**-2 - 2), rtol=1e-13)


def test_energy_simple_shear():
    g = 0.4
    F = np.array([[1, g], [0, 1.0]])
    assert np.isclose(strain_energy(F, M), 0.5 * M.mu * g**2, rtol=1e-13)


def test_inverted_element_raises():
    with pytest.raises(InvertedElementError):
        piola_stress(np.diag([1.0, -0.5]), M)
    with pytest.raises(InvertedElementError):
        strain_energy(np.zeros((2, 2)), M)


@settings(max_examples=40, deadline=None)
@given(perturb)
def test_piola_is_energy_gradient(D):
    F = I2 + D
    if np.linalg.det(F) < 0.3:
        return
    P = piola_stress(F, M)
    assert np.allclose(P, fd_piola(F), rtol=1e-6, atol=1e-9 * max(1.0, np.abs(P).max()))


@settings(max_examples=40, deadline=None)
@given(perturb)
def test_tangent_is_piola_gradient(D):
    F = I2 + D
    if np.linalg.det(F) < 0.3:
        return
    A = material_tangent(F, M)
    assert np.allclose(A, fd_tangent(F), rtol=1e-5, atol=1e-8)


def test_tangent_major_symmetry(rng):
    F = random_F(rng, 20)
    A = material_tangent(F, M)
    assert np.abs(A - np.einsum("...iJkL->...kLiJ", A)).max() <= 1e-12


def test_tangent_linearised_limit():
    d = np.eye(2)
    ref = (M.lam * np.einsum("iJ,kL->iJkL", d, d)
           + M.mu * (np.einsum("ik,JL->iJkL", d, d) + np.einsum("iL,kJ->iJkL", d, d)))
    assert np.allclose(material_tangent(I2, M), ref, atol=1e-14)


def test_simple_shear_piola_closed_form():
    g = 0.1
    F = np.array([[1.0, g], [0.0, 1.0]])
    # F^-T = [[1, 0], [-g, 1]], J = 1
    ref = M.mu * (F - np.array([[1.0, 0.0], [-g, 1.0]]))
    P = piola_stress(F, M)
    assert np.allclose(P, ref, atol=1e-15)
    assert np.isclose(P[0, 1], M.mu * g) and np.isclose(P[1, 0], M.mu * g)


def test_cauchy_symmetric(rng):
    s = cauchy_stress(random_F(rng, 50), M)
    assert np.abs(s - np.swapaxes(s, -1, -2)).max() <= 1e-12


def test_cauchy_uniaxial_stretch_closed_form():
    a = 1.1
    s = cauchy_stress(np.diag([a, 1.0]), M)
    lnJ = np.log(a)
    assert np.isclose(s[0, 0], (M.mu * (a * a - 1) + M.lam * lnJ) / a, rtol=1e-14)
    assert np.isclose(s[1, 1], M.lam * lnJ / a, rtol=1e-14)
    assert np.isclose(s[2, 2], M.lam * lnJ / a, rtol=1e-14)
    assert np.allclose(s[[0, 0, 1, 1, 2, 2], [1, 2, 0, 2, 0, 1]], 0.0)


def test_von_mises_analytic():
    s = 0.37
    shear = np.zeros((3, 3))
    shear[0, 1] = shear[1, 0] = s
    assert np.isclose(von_mises(shear), np.sqrt(3) * s, rtol=1e-14)
    assert abs(von_mises(2.5 * np.eye(3))) <= 1e-14
    assert von_mises(np.zeros((3, 3))) == 0.0
    uni = np.diag([1.7, 0.0, 0.0])
    assert np.isclose(von_mises(uni), 1.7)


def test_von_mises_derivative_fd(rng):
    for F in random_F(rng, 10):
        svm, d = von_mises_derivative(F, M)
        fd = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                E = np.zeros((2, 2))
                E[i, j] = 1e-6
                fd[i, j] = (von_mises(cauchy_stress(F + E, M)) - von_mises(cauchy_stress(F - E, M))) / 2e-6
        assert np.isclose(svm, von_mises(cauchy_stress(F, M)))
        assert np.allclose(d, fd, rtol=1e-6, atol=1e-9)


def test_eshelby_trace_identity(rng):
    F = random_F(rng, 50)
    S = eshelby_stress(F, M)
    lhs = np.trace(S, axis1=-2, axis2=-1)
    rhs = 2 * strain_energy(F, M) - np.einsum("...ij,...ij->...", F, piola_stress(F, M))
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_objectivity(rng):
    F = random_F(rng, 30)
    th = rng.uniform(0, 2 * np.pi, 30)
    Q = np.stack([np.stack([np.cos(th), -np.sin(th)], -1), np.stack([np.sin(th), np.cos(th)], -1)], -2)
    W0 = strain_energy(F, M)
    assert np.allclose(strain_energy(Q @ F, M), W0, rtol=1e-12, atol=1e-15)


def test_vectorised_shapes(rng):
    F = random_F(rng, 6).reshape(2, 3, 2, 2)
    assert strain_energy(F, M).shape == (2, 3)
    assert piola_stress(F, M).shape == (2, 3, 2, 2)
    assert material_tangent(F, M).shape == (2, 3, 2, 2, 2, 2)
    assert cauchy_stress(F, M).shape == (2, 3, 3, 3)
    assert eshelby_stress(F, M).shape == (2, 3, 2, 2)


# -- energy-release oracle for the Eshelby stress ---------------------------
# One isoparametric biquadratic element with fixed spatial node positions: the
# derivative of the stored energy with respect to a reference node position
# equals the nodal integral of Sigma . grad N.


def _q2(xi, eta):
    def one(t):
        return np.array([0.5 * t * (t - 1), 1 - t * t, 0.5 * t * (t + 1)]), np.array([t - 0.5, -2 * t, t + 0.5])

    nx, dx = one(xi)
    ny, dy = one(eta)
    N = np.outer(ny, nx).ravel()
    dN = np.stack([np.outer(ny, dx).ravel(), np.outer(dy, nx).ravel()], axis=1)
    return N, dN


def _element_energy(X, x, n=6):
    g, w = np.polynomial.legendre.leggauss(n)
    E = 0.0
    for a, wa in zip(g, w):
        for b, wb in zip(g, w):
            _, dN = _q2(a, b)
            JX = X.T @ dN  # dX/dxi
            Jx = x.T @ dN
            F = Jx @ np.linalg.inv(JX)
            E += wa * wb * np.linalg.det(JX) * strain_energy(F, M)
    return E


def _nodal_eshelby(X, x, n=6):
    g, w = np.polynomial.legendre.leggauss(n)
    out = np.zeros((9, 2))
    for a, wa in zip(g, w):
        for b, wb in zip(g, w):
            _, dN = _q2(a, b)
            JX = X.T @ dN
            F = (x.T @ dN) @ np.linalg.inv(JX)
            gradN = dN @ np.linalg.inv(JX)  # (9, 2) dN/dX
            S = eshelby_stress(F, M)
            out += wa * wb * np.linalg.det(JX) * gradN @ S.T
    return out


def test_eshelby_energy_release_simple_shear():
    gam = 0.1
    F = np.array([[1.0, gam], [0.0, 1.0]])
    t = np.array([0.0, 0.5, 1.0])
    X = np.stack(np.meshgrid(t, t, indexing="xy"), -1).reshape(9, 2)
    # curved spatial field so the element is not in a homogeneous state
    x = X @ F.T + 0.02 * np.stack([X[:, 1] ** 2, X[:, 0] * X[:, 1]], 1)
    G = _nodal_eshelby(X, x)
    h = 1e-6
    for node in range(9):
        for k in range(2):
            Xp, Xm = X.copy(), X.copy()
            Xp[node, k] += h
            Xm[node, k] -= h
            fd = (_element_energy(Xp, x) - _element_energy(Xm, x)) / (2 * h)
            assert abs(fd - G[node, k]) <= 1e-4 * np.abs(G).max()
