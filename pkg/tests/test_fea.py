import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import dense_solve, quadrature_element_stiffness
from topoldm.errors import DensityDomainError, SingularSystemError
from topoldm.fea import (
    FeaProblem, MaterialModel, StiffnessSystem, assemble_and_solve, element_dofs, element_stiffness,
    element_strain_energy, node_index, penalized_modulus, stress_invariants,
)


def cantilever(nx, ny, density=1.0):
    """Left edge clamped, unit downward load at the bottom-right node."""
    left = np.array([node_index(r, 0, nx) for r in range(ny + 1)])
    fixed = np.concatenate([2 * left, 2 * left + 1])
    load = np.zeros(2 * (nx + 1) * (ny + 1))
    load[2 * node_index(ny, nx, nx) + 1] = -1.0
    return FeaProblem(nx, ny, fixed, load, np.full((ny, nx), density))


def test_element_stiffness_symmetric_with_zero_row_sums():
    ke = element_stiffness(MaterialModel(nu=0.3))
    assert np.allclose(ke, ke.T, atol=1e-15)
    # x rows and y rows each sum to zero: rigid translations produce no force
    assert np.allclose(ke[:, 0::2].sum(axis=1), 0, atol=1e-15)
    assert np.allclose(ke[:, 1::2].sum(axis=1), 0, atol=1e-15)


@pytest.mark.parametrize("nu", [0.0, 0.2, 0.3, 0.45])
def test_element_stiffness_has_three_rigid_modes(nu):
    w = np.linalg.eigvalsh(element_stiffness(MaterialModel(nu=nu)))
    assert np.sum(np.abs(w) < 1e-12) == 3
    assert np.all(w > -1e-12)


@pytest.mark.parametrize("nu", [0.0, 0.3, 0.49])
def test_element_stiffness_matches_gauss_quadrature(nu):
    ke = element_stiffness(MaterialModel(nu=nu))
    assert abs(ke[0, 0] - quadrature_element_stiffness(nu)[0, 0]) < 1e-12
    assert np.allclose(ke, quadrature_element_stiffness(nu), atol=1e-12, rtol=0)


def test_penalized_modulus_values():
    m = MaterialModel(e0=1.0, e_min=1e-3, p=3.0)
    assert penalized_modulus(1.0, m) == 1.0
    assert penalized_modulus(0.0, m) == 1e-3
    assert penalized_modulus(0.5, m) == pytest.approx(0.125875, abs=1e-15)


def test_penalized_modulus_rejects_out_of_range():
    with pytest.raises(DensityDomainError):
        penalized_modulus(np.array([0.2, 1.2]))
    with pytest.raises(DensityDomainError):
        penalized_modulus(np.array([np.nan]))


def test_zero_load_gives_zero_response():
    p = cantilever(4, 4)
    p.load[:] = 0
    sol = assemble_and_solve(p)
    assert sol.compliance == 0.0
    assert not sol.u.any()
    assert not sol.von_mises.any() and not sol.sed.any()


@pytest.mark.parametrize("n", [4, 8])
def test_cantilever_matches_dense_oracle(n):
    p = cantilever(n, n)
    sol = assemble_and_solve(p)
    u_ref, c_ref = dense_solve(n, n, p.fixed_dofs, p.load, p.densities)
    assert abs(sol.compliance - c_ref) / c_ref < 1e-9
    assert np.allclose(sol.u, u_ref, rtol=0, atol=1e-9 * np.abs(u_ref).max())


def test_graded_density_matches_dense_oracle():
    rng = np.random.default_rng(3)
    p = cantilever(6, 5)
    p = p.with_densities(rng.uniform(0.05, 1.0, (5, 6)))
    _, c_ref = dense_solve(6, 5, p.fixed_dofs, p.load, p.densities)
    assert abs(assemble_and_solve(p).compliance - c_ref) / c_ref < 1e-9


def test_uniform_scaling_of_stiffness():
    m = MaterialModel()
    c_half = assemble_and_solve(cantilever(6, 6, 0.5), m).compliance
    c_full = assemble_and_solve(cantilever(6, 6, 1.0), m).compliance
    ratio = float(penalized_modulus(1.0, m) / penalized_modulus(0.5, m))
    assert c_half / c_full == pytest.approx(ratio, rel=1e-10)


def test_patch_test_uniform_extension():
    # 2x2 solid patch, roller-supported left edge, consistent traction s on the right edge
    nx = ny = 2
    s, m = 0.7, MaterialModel(e0=1.0, e_min=1e-3, nu=0.3)
    left = [node_index(r, 0, nx) for r in range(ny + 1)]
    fixed = np.array([2 * n for n in left] + [2 * node_index(ny, 0, nx) + 1])
    load = np.zeros(2 * (nx + 1) * (ny + 1))
    for r, share in zip(range(ny + 1), (0.5, 1.0, 0.5)):
        load[2 * node_index(r, nx, nx)] = s * share
    sol = assemble_and_solve(FeaProblem(nx, ny, fixed, load, np.ones((ny, nx))), m)
    assert np.allclose(sol.von_mises, s, atol=1e-10, rtol=0)
    assert np.allclose(sol.sed, s**2 / 2, atol=1e-10, rtol=0)
    for r in range(ny + 1):
        for c in range(nx + 1):
            n = node_index(r, c, nx)
            x, y = c, ny - r
            assert sol.u[2 * n] == pytest.approx(s * x, abs=1e-10)
            assert sol.u[2 * n + 1] == pytest.approx(-m.nu * s * y, abs=1e-10)


def test_von_mises_of_uniaxial_stress():
    m = MaterialModel(nu=0.3)
    s = 2.5
    strain = np.array([s, -m.nu * s, 0.0])  # uniaxial stress s with unit modulus
    vm, sed = stress_invariants(strain, 1.0, m)
    assert vm == pytest.approx(s, rel=1e-13)
    assert sed == pytest.approx(s**2 / 2, rel=1e-13)


def test_zero_displacement_fields_vanish():
    vm, sed = stress_invariants(np.zeros((3, 3, 3)), np.ones((3, 3)), MaterialModel())
    assert not vm.any() and not sed.any()


def test_compliance_equals_twice_strain_energy():
    rng = np.random.default_rng(0)
    p = cantilever(7, 5).with_densities(rng.uniform(0, 1, (5, 7)))
    sol = assemble_and_solve(p)
    energy = element_strain_energy(p, sol.u).sum()
    assert 2 * energy == pytest.approx(sol.compliance, rel=1e-8)


def test_fixed_dofs_carry_zero_displacement():
    p = cantilever(5, 5)
    sol = assemble_and_solve(p)
    assert np.all(sol.u[p.fixed_dofs] == 0.0)


def test_assembly_is_invariant_to_element_order():
    rng = np.random.default_rng(1)
    p = cantilever(5, 4).with_densities(rng.uniform(0.1, 1, (4, 5)))
    system = StiffnessSystem(5, 4, p.fixed_dofs)
    moduli = penalized_modulus(p.densities)
    K = system.full_matrix(moduli).toarray()
    perm = rng.permutation(20)
    edofs = element_dofs(5, 4)[perm]
    ke = element_stiffness()
    K2 = np.zeros_like(K)
    for e, dofs in zip(perm, edofs):
        K2[np.ix_(dofs, dofs)] += moduli.ravel()[e] * ke
    assert np.allclose(K, K2, atol=1e-12)
    free = system.free
    u2 = np.zeros(system.ndof)
    u2[free] = np.linalg.solve(K2[np.ix_(free, free)], p.load[free])
    assert np.allclose(system.solve(moduli, p.load), u2, atol=1e-10)


def test_mesh_refinement_is_monotone():
    # soft regression guard: a clamped beam stiffens from below as the mesh refines
    c = []
    for n in (4, 8, 16):
        left = np.array([node_index(r, 0, 2 * n) for r in range(n + 1)])
        load = np.zeros(2 * (2 * n + 1) * (n + 1))
        load[2 * node_index(n, 2 * n, 2 * n) + 1] = -1.0 / n  # keep the load per unit length fixed
        p = FeaProblem(2 * n, n, np.concatenate([2 * left, 2 * left + 1]), load, np.ones((n, 2 * n)))
        c.append(assemble_and_solve(p).compliance * n**2)
    assert c[0] < c[1] < c[2]
    assert (c[2] - c[1]) < (c[1] - c[0])


def test_underconstrained_problem_is_rejected():
    load = np.zeros(2 * 9)
    load[2 * 8] = 1.0
    with pytest.raises(SingularSystemError):
        assemble_and_solve(FeaProblem(2, 2, [0, 1], load, np.ones((2, 2))))


def test_interior_load_is_rejected():
    load = np.zeros(2 * 16)
    load[2 * node_index(1, 1, 3)] = 1.0
    with pytest.raises(ValueError):
        FeaProblem(3, 3, [0, 1, 2, 3], load, np.ones((3, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_random_problems_match_dense_oracle(nx, ny, seed):
    rng = np.random.default_rng(seed)
    p = cantilever(nx, ny).with_densities(rng.uniform(0, 1, (ny, nx)))
    u_ref, c_ref = dense_solve(nx, ny, p.fixed_dofs, p.load, p.densities)
    sol = assemble_and_solve(p)
    assert abs(sol.compliance - c_ref) <= 1e-8 * abs(c_ref)
    assert 2 * element_strain_energy(p, sol.u).sum() == pytest.approx(sol.compliance, rel=1e-8)
