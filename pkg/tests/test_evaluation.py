import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from topoldm.dataset import generate_records, stack_channels
from topoldm.errors import FEAError
from topoldm.evaluation import (
    GRID_BETA1, GRID_BETA2, GRID_LATENT_DIMS, GridCell, beta_table, compliance_error, design_compliance, evaluate,
    fm_error_rate, format_grid, grid_runner, histogram, latent_dim_table, ld_rate, plot_designs, plot_histogram,
    vf_error,
)
from topoldm.problems import sample_problem
from topoldm.vae import VAEConfig

RES = 12


@pytest.fixture(scope="module")
def records():
    return generate_records(6, RES, seed=21)


def test_ground_truth_has_zero_compliance_error(records):
    for r in records:
        assert compliance_error(r.topology, r.topology, r.problem) == (0.0, False)


def test_removing_material_raises_compliance(records):
    r = records[0]
    design = (r.topology >= 0.5).astype(float)
    i, j = divmod(r.problem.load_element, RES)
    solid = np.argwhere(design > 0)
    # drop the solid pixels nearest the load element, except the load element itself
    d = np.hypot(solid[:, 0] - i, solid[:, 1] - j)
    for a, b in solid[np.argsort(d)][1:4]:
        design[a, b] = 0
    err, defective = compliance_error(design, r.topology, r.problem)
    assert not defective and err > 0


def test_void_design_is_defective(records):
    r = records[0]
    err, defective = compliance_error(np.zeros((RES, RES)), r.topology, r.problem)
    assert defective and math.isinf(err)
    with pytest.raises(FEAError):
        design_compliance(np.zeros((RES, RES)), r.problem)


def test_fm_rate_cases():
    one = np.zeros((10, 8, 8))
    one[:, 2:6, 2:6] = 1
    assert fm_error_rate(one) == 0.0
    one[3, 0, 7] = 1
    assert fm_error_rate(one) == pytest.approx(10.0)
    defective = np.zeros(10, bool)
    defective[5] = True
    assert fm_error_rate(one, defective) == pytest.approx(20.0)
    assert fm_error_rate(np.zeros((0, 8, 8))) == 0.0


def test_ld_rate_and_vf_error():
    probs = [sample_problem(s, 8) for s in range(4)]
    d = np.zeros((4, 8, 8))
    for k, p in enumerate(probs):
        d[k].flat[p.load_element] = 1.0
    rate, soft = ld_rate(d, probs)
    assert rate == 0.0 and soft == pytest.approx(0.0)
    d[0].flat[probs[0].load_element] = 0.0
    rate, soft = ld_rate(d, probs)
    assert rate == 25.0 and soft == pytest.approx(0.25)

    exact = np.stack([np.full((8, 8), p.target_vf) for p in probs])
    assert vf_error(exact, [p.target_vf for p in probs]) == pytest.approx((0.0, 0.0), abs=1e-12)
    rel, pts = vf_error(np.full((1, 8, 8), 0.45), [0.40])
    assert rel == pytest.approx(12.5) and pts == pytest.approx(5.0)


def test_histogram_cases():
    empty = histogram([])
    assert empty.counts.sum() == 0 and len(empty.counts) == 31
    h = histogram([5.0])
    rows = dict(h.rows())
    assert rows["[5,6)"] == 1 and sum(rows.values()) == 1
    h = histogram([2.0, 50.0, 31.0])
    assert h.pooled == 2
    assert dict(h.rows())["[2,3)"] == 1
    assert histogram([30.0]).pooled == 0
    assert histogram([math.inf]).pooled == 1
    with pytest.raises(ValueError):
        histogram([math.nan])


def test_histogram_negative_errors_extend_bins():
    h = histogram([-2.5, 1.0])
    assert h.edges[0] == -3.0
    assert h.counts.sum() == 2


@given(st.lists(st.one_of(st.floats(-50, 200), st.just(math.inf)), max_size=60), st.sampled_from([0.5, 1.0, 2.0]))
def test_histogram_conserves_counts(errors, width):
    h = histogram(errors, width)
    assert h.counts.sum() == len(errors)
    assert h.pooled == sum(e > 30 for e in errors)


def test_ground_truth_as_generated_reports_zero(records):
    report = evaluate(stack_channels(records)[:, 0], records)
    assert report.n == len(records)
    for key in ("compliance_error_mean", "compliance_error_mean_unpruned", "compliance_error_median",
                "share_above_30", "fm_rate", "ld_rate"):
        assert getattr(report, key) == 0.0, key
    # the optimizer meets the volume target up to its bisection tolerance
    assert report.vf_error < 1e-4 and report.vf_error_abs < 1e-4
    assert report.n_defective == 0
    assert "floating_material_%" in report.table()
    assert "fm_rate: 0" in report.text()


def test_report_counts_defective_as_above_threshold(records):
    gen = stack_channels(records)[:, 0].copy()
    gen[0] = 0
    report = evaluate(gen, records)
    assert report.n_defective == 1
    assert report.share_above_30 == pytest.approx(100 / len(records))
    assert report.fm_rate == pytest.approx(100 / len(records))
    assert histogram(report.errors).pooled >= 1


def test_metrics_are_order_independent(records):
    gen = stack_channels(records)[:, 0].copy()
    gen[1] = np.clip(gen[1] * 0.6, 0, 1)
    a = evaluate(gen, records)
    perm = [3, 1, 5, 0, 2, 4]
    b = evaluate(gen[perm], [records[k] for k in perm])
    assert a.summary() == pytest.approx(b.summary())


def fake_fit(channels, cfg):
    return {"fm": cfg.latent_dim / 1000, "ld": cfg.beta1, "vf": cfg.beta2, "mse": 1 / cfg.latent_dim}


def test_grid_single_cell():
    cells = grid_runner(np.zeros((2, 6, 16, 16)), [64], [0.075], [0.1], fit=fake_fit)
    table = format_grid(cells).strip().splitlines()
    assert len(table) == 2


def test_grid_marks_column_minima():
    cells = grid_runner(np.zeros((2, 6, 16, 16)), [64, 128], [0.075, 0.15], [0.1], fit=fake_fit)
    lines = format_grid(cells).strip().splitlines()
    assert len(lines) == 5
    head = lines[0].split("\t")
    rows = [dict(zip(head, ln.split("\t"))) for ln in lines[1:]]
    assert [r["FM"].endswith("*") for r in rows] == [True, True, False, False]
    assert [r["MSE"].endswith("*") for r in rows] == [False, False, True, True]
    assert [r["LD"].endswith("*") for r in rows] == [True, False, True, False]


def test_full_grid_has_24_cells_and_summary_tables():
    cells = grid_runner(np.zeros((2, 6, 16, 16)), fit=fake_fit)
    assert len(cells) == 24 == len(GRID_LATENT_DIMS) * len(GRID_BETA1) * len(GRID_BETA2)
    ld_rows = latent_dim_table(cells).strip().splitlines()
    assert len(ld_rows) == 1 + 4 and ld_rows[0].split("\t")[0] == "D"
    b_rows = beta_table(cells).strip().splitlines()
    assert len(b_rows) == 1 + 6 and b_rows[0].split("\t")[:2] == ["beta1", "beta2"]
    assert [("*" in r.split("\t")[1]) for r in ld_rows[1:]] == [True, False, False, False]


def test_grid_records_failures_and_continues():
    def flaky(channels, cfg):
        if cfg.latent_dim == 128:
            raise FloatingPointError("diverged")
        return fake_fit(channels, cfg)

    cells = grid_runner(np.zeros((1, 6, 16, 16)), [64, 128, 192], [0.075], [0.1], fit=flaky)
    assert [c.status for c in cells] == ["ok", "failed", "ok"]
    assert "diverged" in cells[1].error
    assert "failed" in format_grid(cells)


def test_grid_with_real_training_runs():
    rng = np.random.default_rng(0)
    ch = rng.uniform(size=(4, 6, 16, 16)).astype(np.float32)
    base = VAEConfig(resolution=16, width=4, cond_width=4, batch_size=4, steps=2)
    cells = grid_runner(ch, [4, 8], [0.075], [0.3], vae_config=base)
    assert all(c.status == "ok" for c in cells)
    assert all(math.isfinite(c.mse) and 0 <= c.fm <= 1 for c in cells)


def test_plots_write_images(tmp_path, records):
    plot_histogram(histogram([1, 2, 40]), tmp_path / "h.png")
    plot_designs(stack_channels(records)[:, 0], tmp_path / "d.png")
    assert (tmp_path / "h.png").read_bytes()[:4] == b"\x89PNG"
    assert (tmp_path / "d.png").stat().st_size > 0


def test_empty_batch_report():
    report = evaluate(np.zeros((0, 4, 4)), [])
    assert report.n == 0 and math.isnan(report.compliance_error_mean)
    assert isinstance(GridCell(64, 0.1, 0.1).mse, float)
