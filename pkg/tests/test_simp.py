import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_difference, reference_simp
from topoldm.fea import FeaProblem, MaterialModel, StiffnessSystem, node_index, penalized_modulus
from topoldm.simp import (
    OptimizerConfig, apply_filter, build_filter, compliance_sensitivity, filter_chain_rule, optimize,
    update_densities,
)


def mbb(nx=32, ny=16, f=0.5):
    """Half MBB beam: symmetry rollers on the left edge, support at bottom right, load at top left."""
    fixed = [2 * node_index(r, 0, nx) for r in range(ny + 1)] + [2 * node_index(ny, nx, nx) + 1]
    load = np.zeros(2 * (nx + 1) * (ny + 1))
    load[2 * node_index(0, 0, nx) + 1] = -1.0
    return FeaProblem(nx, ny, fixed, load, np.full((ny, nx), f))


def mbb_reference_inputs(nx=32, ny=16):
    # the same physical problem in column-major numbering
    fixed = np.union1d(np.arange(0, 2 * (ny + 1), 2), [2 * (nx + 1) * (ny + 1) - 1])
    force = np.zeros(2 * (nx + 1) * (ny + 1))
    force[1] = -1.0
    return fixed, force


def cantilever(n=16, f=0.4):
    left = np.array([node_index(r, 0, n) for r in range(n + 1)])
    load = np.zeros(2 * (n + 1) ** 2)
    load[2 * node_index(n // 2, n, n) + 1] = -1.0
    return FeaProblem(n, n, np.concatenate([2 * left, 2 * left + 1]), load, np.full((n, n), f))


@pytest.fixture(scope="module")
def mbb_result():
    return optimize(mbb(), config=OptimizerConfig(volfrac=0.5, r_min=2.0))


def test_mbb_matches_reference_optimizer(mbb_result):
    fixed, force = mbb_reference_inputs()
    x_ref, hist = reference_simp(32, 16, 0.5, 3.0, 2.0, fixed, force)
    assert abs(mbb_result.compliance - hist[-1]) / hist[-1] < 0.02
    assert abs(mbb_result.physical.mean() - 0.5) < 1e-3


def test_mbb_trace_non_increasing_after_five(mbb_result):
    h = np.asarray(mbb_result.history)
    assert np.all(np.diff(h[4:]) <= 1e-9 * h[4:-1])


def test_cantilever_properties():
    res = optimize(cantilever(), config=OptimizerConfig(volfrac=0.4))
    h = np.asarray(res.history)
    assert np.all(np.diff(h[4:]) <= 1e-9 * h[4:-1])
    assert abs(res.physical.mean() - 0.4) < 1e-3
    assert np.all(np.asarray(res.volumes[1:]) == pytest.approx(0.4, abs=1e-4))


def test_reported_compliance_matches_fresh_solve():
    res = optimize(cantilever(12, 0.4), config=OptimizerConfig(volfrac=0.4))
    p = cantilever(12, 0.4)
    u = StiffnessSystem(12, 12, p.fixed_dofs).solve(penalized_modulus(res.physical), p.load)
    assert float(p.load @ u) == pytest.approx(res.compliance, rel=1e-8)


def test_zero_iterations_returns_uniform_field():
    res = optimize(cantilever(8, 0.3), config=OptimizerConfig(volfrac=0.3, max_iters=0))
    assert np.all(res.design == 0.3)
    assert res.iterations == 0


def test_densities_stay_in_unit_interval():
    seen = []

    def record(it, c, change):
        seen.append(change)

    res = optimize(cantilever(10, 0.35), config=OptimizerConfig(volfrac=0.35, max_iters=30), callback=record)
    assert seen
    assert res.design.min() >= 0 and res.design.max() <= 1
    assert res.physical.min() >= 0 and res.physical.max() <= 1


def test_filter_identity_for_small_radius():
    k = build_filter(6, 5, 1.0)
    assert k.is_identity
    x = np.random.default_rng(0).uniform(size=(5, 6))
    assert np.array_equal(apply_filter(k, x), x)


def brute_force_neighbors(nx, ny, e, r_min):
    i, j = divmod(e, nx)
    out = {}
    for a in range(ny):
        for b in range(nx):
            d = math.hypot(a - i, b - j)
            if d < r_min:
                out[a * nx + b] = r_min - d
    return out


def test_filter_neighborhood_matches_enumeration():
    k = build_filter(9, 9, 2.0)
    for e in (40, 0, 4, 80):
        idx, w = k.neighborhood(e)
        ref = brute_force_neighbors(9, 9, e, 2.0)
        assert dict(zip(idx.tolist(), w.tolist())) == pytest.approx(ref)
    # interior: self, 4 at distance 1 and 4 at distance sqrt(2); distance 2 carries zero weight
    assert len(k.neighborhood(40)[0]) == 9
    assert len(k.neighborhood(0)[0]) == 4


def test_filter_single_pixel_blob():
    nx = ny = 7
    x = np.zeros((ny, nx))
    x[3, 3] = 1.0
    out = apply_filter(build_filter(nx, ny, 2.0), x)
    for e in range(nx * ny):
        nb = brute_force_neighbors(nx, ny, e, 2.0)
        ref = sum(w * x.ravel()[k] for k, w in nb.items()) / sum(nb.values())
        assert out.ravel()[e] == pytest.approx(ref, abs=1e-14)


@given(st.floats(0, 1), st.integers(2, 9), st.integers(2, 9), st.floats(0.5, 3.5))
def test_filter_preserves_constants(v, nx, ny, r):
    out = apply_filter(build_filter(nx, ny, r), np.full((ny, nx), v))
    assert np.allclose(out, v, atol=1e-14)


def test_filter_chain_rule_is_adjoint():
    k = build_filter(6, 4, 2.0)
    rng = np.random.default_rng(0)
    x, g = rng.uniform(size=(4, 6)), rng.standard_normal((4, 6))
    xt = k.H @ x.ravel() / k.hs
    assert np.dot(g.ravel(), xt) == pytest.approx(np.dot(filter_chain_rule(k, g).ravel(), x.ravel()), rel=1e-12)


def _compliance(p, x):
    system = StiffnessSystem(p.nx, p.ny, p.fixed_dofs)
    return float(p.load @ system.solve(penalized_modulus(x), p.load))


def test_sensitivities_match_finite_differences():
    rng = np.random.default_rng(5)
    p = cantilever(4, 0.5).with_densities(rng.uniform(0.2, 0.9, (4, 4)))
    u = StiffnessSystem(4, 4, p.fixed_dofs).solve(penalized_modulus(p.densities), p.load)
    dc = compliance_sensitivity(p, u)
    fd = central_difference(lambda x: _compliance(p, x), p.densities, h=1e-6)
    assert np.abs(dc - fd).max() / np.abs(fd).max() < 1e-4


def test_sensitivity_of_void_element_is_zero():
    p = cantilever(4, 0.0).with_densities(np.zeros((4, 4)))
    dc = compliance_sensitivity(p, np.zeros(p.ndof))
    assert not dc.any()


def test_sensitivities_scale_quadratically_with_load():
    rng = np.random.default_rng(6)
    p = cantilever(5).with_densities(rng.uniform(0.2, 0.9, (5, 5)))
    s = StiffnessSystem(5, 5, p.fixed_dofs)
    mod = penalized_modulus(p.densities)
    d1 = compliance_sensitivity(p, s.solve(mod, p.load))
    d2 = compliance_sensitivity(p, s.solve(mod, 2 * p.load))
    assert np.allclose(d2, 4 * d1, rtol=1e-10)


def test_uniform_sensitivities_keep_uniform_field():
    cfg = OptimizerConfig(volfrac=0.4)
    x = update_densities(np.full((6, 6), 0.4), -np.ones((6, 6)), 0.4, cfg)
    assert np.allclose(x, 0.4, atol=1e-6)


def test_strong_sensitivity_moves_by_move_limit():
    cfg = OptimizerConfig(volfrac=0.5, move_limit=0.2)
    dc = -np.ones((5, 5))
    dc[2, 2] = -1e6
    x = update_densities(np.full((5, 5), 0.5), dc, 0.5, cfg)
    assert x[2, 2] == 0.5 + 0.2
    assert abs(x.mean() - 0.5) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 0.6), st.booleans())
def test_oc_update_hits_volume(seed, f, filtered):
    rng = np.random.default_rng(seed)
    x = np.clip(rng.uniform(f - 0.15, f + 0.15, (6, 7)), 0, 1)
    dc = -rng.exponential(size=(6, 7))
    k = build_filter(7, 6, 2.0) if filtered else None
    xn = update_densities(x, dc, f, OptimizerConfig(volfrac=f), kernel=k)
    vol = (apply_filter(k, xn) if k else xn).mean()
    assert abs(vol - f) < 1e-4
    assert xn.min() >= 0 and xn.max() <= 1
    assert np.abs(xn - x).max() <= 0.2 + 1e-12


def test_filtered_sensitivity_of_uniform_field_is_uniform_inside():
    k = build_filter(9, 9, 2.0)
    g = filter_chain_rule(k, np.ones((9, 9)))
    inner = g[2:-2, 2:-2]
    assert np.allclose(inner, inner[0, 0], atol=1e-14)


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(move_limit=0)
    with pytest.raises(ValueError):
        OptimizerConfig(volfrac=1.5)
    with pytest.raises(ValueError):
        build_filter(4, 4, 0)


def test_material_validation():
    with pytest.raises(ValueError):
        MaterialModel(e_min=0)
    with pytest.raises(ValueError):
        MaterialModel(nu=0.5)
