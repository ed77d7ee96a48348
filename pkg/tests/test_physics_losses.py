import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, flood_fill_count, flood_fill_labels
from topoldm.autodiff import Tensor, default_dtype
from topoldm.physics_losses import (
    TopologyBatch, auxiliary_losses, fm_hard, fm_loss, label_components, ld_loss, stray_mask, vf_loss,
)


def batch(x, vf=0.3, load=(0, 0), vec=(1.0, 0.0)):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    lx, ly = np.zeros_like(x), np.zeros_like(x)
    lx[:, load[0], load[1]], ly[:, load[0], load[1]] = vec
    with default_dtype(np.float64):
        return TopologyBatch(Tensor(x, requires_grad=True), lx, ly, np.full(len(x), vf))


def test_vf_loss_values():
    assert vf_loss(batch(np.full((4, 4), 0.3), 0.3)).data[0] == pytest.approx(0.0, abs=1e-15)
    assert vf_loss(batch(np.ones((4, 4)), 0.3)).data[0] == pytest.approx(0.7)


def test_vf_loss_gradient_is_plus_minus_inverse_area():
    b = batch(np.full((4, 5), 0.6), 0.3)
    vf_loss(b).sum().backward()
    assert np.allclose(b.densities.grad, 1 / 20)
    b = batch(np.full((4, 5), 0.1), 0.3)
    vf_loss(b).sum().backward()
    assert np.allclose(b.densities.grad, -1 / 20)


def test_ld_loss_values():
    x = np.zeros((4, 4))
    x[0, 0] = 1.0
    assert ld_loss(batch(x)).data[0] == 0.0
    assert ld_loss(batch(np.zeros((4, 4)))).data[0] == 1.0
    x[0, 0] = 0.4
    assert ld_loss(batch(x, vec=(0.6, 0.8))).data[0] == pytest.approx(0.6)


def _fd_loss(loss_fn, x, **kw):
    def f(arr):
        return float(loss_fn(batch(arr, **kw)).data.sum())

    b = batch(x, **kw)
    loss_fn(b).sum().backward()
    return b.densities.grad, central_difference(f, x, h=1e-6)


def test_vf_and_ld_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.05, 0.95, (2, 5, 5))
    g, fd = _fd_loss(vf_loss, x, vf=0.3)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-4
    x[:, 1, 2] = 0.3  # keep away from the clamp kink
    g, fd = _fd_loss(ld_loss, x, load=(1, 2), vec=(0.6, -0.8))
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-4


def test_fm_surrogate_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = np.full((1, 6, 6), 0.1) + rng.uniform(0, 0.05, (1, 6, 6))
    x[0, :3, :3] = rng.uniform(0.7, 0.9, (3, 3))
    x[0, 5, 5] = 0.7  # stray pixel
    g, fd = _fd_loss(lambda b: fm_loss(b)[0], x)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-4
    assert g[0, 5, 5] > 0


def test_labels_of_simple_shapes():
    rect = np.zeros((6, 6))
    rect[1:4, 2:5] = 1
    assert label_components(rect)[1] == 2
    diag = np.zeros((2, 2))
    diag[0, 0] = diag[1, 1] = 1
    assert label_components(diag)[1] == 3
    checker = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    assert label_components(checker)[1] == flood_fill_count(checker > 0.5) + 1 == 9


def test_labeling_matches_flood_fill_on_random_fields():
    rng = np.random.default_rng(7)
    for k in range(1000):
        h, w = rng.integers(1, 24, size=2)
        field = (rng.uniform(size=(h, w)) < rng.uniform(0.2, 0.8)).astype(float)
        labels, count = label_components(field)
        assert count == flood_fill_count(field > 0.5) + 1
        assert np.array_equal(labels, flood_fill_labels(field > 0.5))


def test_labeling_of_batches():
    rng = np.random.default_rng(8)
    fields = (rng.uniform(size=(5, 10, 10)) < 0.5).astype(float)
    _, counts = label_components(fields)
    assert counts.tolist() == [flood_fill_count(f > 0.5) + 1 for f in fields]


def test_fm_hard_cases():
    one = np.zeros((6, 6))
    one[1:5, 1:5] = 1
    two = one.copy()
    two[2:4, 2:4] = 0
    two[:, 3] = 0
    assert fm_hard(one)[0] == 0
    assert fm_hard(two)[0] == 1
    assert fm_hard(np.zeros((4, 4)))[0] == 0  # empty foreground has a single label


def test_fm_one_blob_surrogate_zero():
    x = np.zeros((5, 5))
    x[1:4, 1:4] = 1.0
    s, h = fm_loss(batch(x))
    assert s.data[0] == 0.0 and h[0] == 0.0


def test_fm_surrogate_stray_mass_ratio():
    x = np.zeros((6, 6))
    x[0:3, 0:3] = 1.0          # main blob, mass 9
    x[5, 5] = 0.5              # stray pixel at the threshold, mass 0.5
    s, h = fm_loss(batch(x))
    assert s.data[0] == pytest.approx(0.5 / 9.5, abs=1e-12)
    assert s.data[0] == pytest.approx(0.0526, abs=1e-4)
    assert h[0] == 1.0


def test_stray_mask_keeps_heaviest_component():
    x = np.zeros((1, 5, 7))
    x[0, :, 0] = 0.6     # 5 pixels, mass 3.0
    x[0, 0:2, 5:7] = 1.0  # 4 pixels, mass 4.0
    m = stray_mask(x)
    assert m[0, :, 0].all() and not m[0, 0:2, 5:7].any()


def test_auxiliary_losses_are_batch_means():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(3, 6, 6))
    b = batch(x)
    aux = auxiliary_losses(b)
    assert aux["vf"].data == pytest.approx(vf_loss(b).data.mean())
    assert aux["ld"].data == pytest.approx(ld_loss(b).data.mean())
    assert aux["fm"].data == pytest.approx(fm_loss(b)[0].data.mean())
    assert aux["fm_hard"] == pytest.approx(fm_hard(x).mean())


def test_from_conditions_reads_channels():
    rng = np.random.default_rng(0)
    cond = np.zeros((2, 5, 4, 4))
    cond[:, 0] = 0.35
    cond[:, 3, 0, 1] = 0.5
    cond[:, 4, 0, 1] = -0.5
    b = TopologyBatch.from_conditions(rng.uniform(size=(2, 4, 4)), cond)
    assert np.allclose(b.vf, 0.35)
    assert b.load_x[0, 0, 1] == 0.5 and b.load_y[1, 0, 1] == -0.5


def test_batch_validation():
    with pytest.raises(ValueError):
        TopologyBatch(Tensor(np.zeros((2, 3, 3))), np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        TopologyBatch(Tensor(np.zeros((2, 3, 3))), np.zeros((2, 3, 4)), np.zeros((2, 3, 3)), np.zeros(2))


binary_fields = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                       elements=st.sampled_from([0.0, 1.0]))


@settings(max_examples=200, deadline=None)
@given(binary_fields)
def test_labeling_property_matches_flood_fill(field):
    assert label_components(field)[1] == flood_fill_count(field > 0.5) + 1


@settings(max_examples=100, deadline=None)
@given(binary_fields, st.integers(0, 3), st.booleans())
def test_fm_hard_invariant_under_rotation_and_transpose(field, k, flip):
    g = np.rot90(field, k)
    if flip:
        g = g.T
    assert fm_hard(g)[0] == fm_hard(field)[0]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 10), st.integers(2, 10)), elements=st.floats(0, 1)))
def test_surrogate_zero_iff_hard_zero(field):
    if not (field >= 0.5).any():
        return
    s, h = fm_loss(batch(field))
    assert (s.data[0] == 0) == (h[0] == 0)
    assert 0 <= s.data[0] < 1


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)), st.integers(0, 4), st.integers(0, 4),
       st.floats(0, 2 * np.pi))
def test_ld_loss_in_unit_interval(field, i, j, theta):
    v = ld_loss(batch(field, load=(i, j), vec=(np.cos(theta), np.sin(theta)))).data[0]
    assert 0 <= v <= 1
