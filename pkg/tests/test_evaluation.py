import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from skimage.metrics import structural_similarity

from cdinet.evaluation import (BudgetError, DegenerateTestError, MetricReport, ReferenceCache, SweepConfig,
                               comparison_table, evaluate_baseline, evaluate_method, nmae, nmse,
                               paired_t_statistic, paired_ttest, psnr, ssim, sweep, write_table)
from cdinet.phantom import Dataset, DatasetConfig, build_dataset
from cdinet.training import TrainConfig, train

from conftest import SMALL


# ------------------------------------------------------------------ metrics

def test_nmse_nmae_hand_values():
    ref = np.array([[1.0, 2.0], [3.0, 4.0]])
    x = ref + np.array([[1.0, 0.0], [0.0, -1.0]])
    assert nmse(x, ref) == pytest.approx(100 * 2 / 30)
    assert nmae(x, ref) == pytest.approx(100 * 2 / 10)


def test_identical_inputs():
    ref = np.random.default_rng(0).uniform(0.1, 1, (32, 32))
    assert nmse(ref, ref) == 0.0 and nmae(ref, ref) == 0.0
    assert ssim(ref, ref) == pytest.approx(1.0, abs=1e-12)
    assert psnr(ref, ref) == math.inf


def test_psnr_twenty_db():
    ref = np.zeros((16, 16))
    ref[0, 0] = 1.0
    x = ref + 0.1  # MSE = 0.01, peak 1 -> 20 dB
    assert psnr(x, ref) == pytest.approx(20.0)


def test_metric_errors():
    with pytest.raises(ValueError):
        nmse(np.ones(3), np.zeros(3))
    with pytest.raises(ValueError):
        nmse(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        psnr(np.ones(3), -np.ones(3))


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    ref = rng.uniform(0, 1, (48, 48))
    x = ref + rng.normal(0, 0.1, ref.shape)
    _, smap = structural_similarity(x, ref, data_range=ref.max(), gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, full=True)
    assert ssim(x, ref) == pytest.approx(smap[5:-5, 5:-5].mean(), abs=1e-6)


def test_ssim_negative_for_inverted_checkerboard():
    board = (np.indices((32, 32)).sum(axis=0) % 2).astype(float)
    assert ssim(1.0 - board, board) < 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ssim_bounded_and_nmse_nonnegative(seed):
    rng = np.random.default_rng(seed)
    ref = rng.uniform(0.01, 1, (24, 24))
    x = rng.uniform(0, 1, (24, 24))
    assert -1.0 <= ssim(x, ref) <= 1.0
    assert nmse(x, ref) >= 0 and nmae(x, ref) >= 0


# ---------------------------------------------------------------- t-tests

def test_paired_t_statistic_hand_value():
    t, df = paired_t_statistic([2, 2, 2, 3], [1, 1, 1, 1])
    # d = [1,1,1,2], mean 1.25, sd 0.5 -> t = 1.25 / 0.25
    assert t == pytest.approx(5.0) and df == 3


def test_p_value_matches_closed_form_t3():
    # Student t with 3 degrees of freedom has an elementary CDF
    t = 5.0
    cdf = 0.5 + (t / (math.sqrt(3) * (1 + t * t / 3)) + math.atan(t / math.sqrt(3))) / math.pi
    assert paired_ttest([2, 2, 2, 3], [1, 1, 1, 1]) == pytest.approx(2 * (1 - cdf), rel=1e-10)


def test_shifted_pairs_highly_significant():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 1, 50)
    assert paired_ttest(a + 1.0 + rng.normal(0, 0.1, 50), a) < 1e-10


def test_noise_pairs_not_significant():
    rng = np.random.default_rng(3)
    a = rng.normal(0, 1, 50)
    assert paired_ttest(a + rng.normal(0, 0.1, 50), a) > 1e-3


def test_degenerate_and_invalid_tests():
    with pytest.raises(DegenerateTestError):
        paired_ttest([1, 2, 3], [1, 2, 3])
    with pytest.raises(ValueError):
        paired_ttest([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        paired_ttest([1], [2])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=30))
def test_p_value_symmetric_and_agrees_with_scipy(pairs):
    a, b = map(np.array, zip(*pairs))
    d = a - b
    if np.std(d) < 1e-6 * (1 + np.abs(d).max()):
        return
    p = paired_ttest(a, b)
    assert 0.0 <= p <= 1.0
    assert p == pytest.approx(paired_ttest(b, a), rel=1e-9, abs=1e-300)
    t, _ = paired_t_statistic(a, b)
    assert t == pytest.approx(stats.ttest_rel(a, b).statistic, rel=1e-9)


# ---------------------------------------------------------------- reports

def _report(name, vals):
    rep = MetricReport(name)
    for i, v in enumerate(vals):
        rep.rows.append({"id": f"s{i}", "domain": "projection", "nmse": v, "nmae": v, "ssim": 0.5, "psnr": 30.0})
    return rep


def test_comparison_table_p_values(tmp_path):
    full = _report("full", [1.0, 2.0, 3.0, 4.0])
    other = _report("other", [2.0, 3.0, 4.0, 6.0])
    same = _report("same", [1.0, 2.0, 3.0, 4.0])
    rows = comparison_table([full, other, same])
    assert [r["method"] for r in rows] == ["full", "other", "same"]
    assert rows[0]["p_value"] == "" and rows[2]["p_value"] == "degenerate"
    assert rows[1]["p_value"] == pytest.approx(paired_ttest([2, 3, 4, 6], [1, 2, 3, 4]))
    assert rows[1]["nmse_mean"] == pytest.approx(3.75)
    path = write_table(rows, tmp_path / "t.csv")
    with open(path) as fh:
        assert len(list(csv.DictReader(fh))) == 3


def test_comparison_table_rejects_mismatched_ids():
    a, b = _report("full", [1.0, 2.0]), _report("b", [1.0, 3.0])
    b.rows[0]["id"] = "other"
    with pytest.raises(ValueError):
        comparison_table([a, b])


def test_report_files(tmp_path):
    rep = _report("full", [1.0, 2.0])
    rep.write(tmp_path)
    summary = json.loads((tmp_path / "report_full.json").read_text())
    assert summary["n"] == {"projection": 2}
    assert summary["summary"]["projection"]["nmse"]["mean"] == 1.5
    assert "nmse" in summary["conventions"]
    assert (tmp_path / "report_full.csv").read_text().splitlines()[0] == "method,id,domain,nmse,nmae,ssim,psnr"


# ------------------------------------------------------------- evaluation

@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    cfg = TrainConfig(iterations=2, epochs=1, batch_size=2, depth=2, base_width=4, seed=0)
    return train(cfg, tmp_path_factory.mktemp("eval") / "run", tiny_dataset)


def test_method_report_rows(trained, tiny_dataset):
    rep = evaluate_method(trained.checkpoint, tiny_dataset)
    n = len(tiny_dataset.ids("test"))
    assert rep.method == "full" and len(rep.rows) == 3 * n
    assert rep.domains() == ["projection", "mu_map", "ac_recon"]
    assert all(math.isfinite(r["nmse"]) for r in rep.rows)


def test_baseline_report_rows(tiny_dataset):
    rep = evaluate_baseline(tiny_dataset)
    n = len(tiny_dataset.ids("test"))
    assert rep.domains() == ["projection", "ac_recon"] and len(rep.rows) == 2 * n


def test_ground_truth_reference_scores_perfectly(tiny_dataset):
    refs = ReferenceCache(tiny_dataset.geometry)
    s = tiny_dataset.split("test")[0]
    r = refs.get(s)
    assert refs.get(s) is r
    assert nmse(r, r) == 0.0 and psnr(r, r) == math.inf and ssim(r, r) == pytest.approx(1.0)


def test_missing_samples_reported(tmp_path):
    build_dataset(tmp_path / "ds", 4, 3, DatasetConfig(geometry=SMALL, split=(0.5, 0.0, 0.5)))
    ds = Dataset(tmp_path / "ds")
    victim = ds.ids("test")[0]
    for f in (tmp_path / "ds").rglob(f"*{victim}*"):
        if f.is_file():
            f.unlink()
    with pytest.raises(FileNotFoundError, match=victim):
        evaluate_baseline(ds)


def test_baseline_projection_error_falls_with_dose(tmp_path):
    means = []
    for dose in (0.05, 0.1, 0.5):
        build_dataset(tmp_path / f"d{dose}", 6, 4, DatasetConfig(geometry=SMALL, dose_fraction=dose,
                                                                 split=(0.0, 0.0, 1.0)))
        rep = evaluate_baseline(Dataset(tmp_path / f"d{dose}"))
        means.append(np.mean(rep.values("projection", "nmse")))
    assert means[0] > means[1] > means[2]


# ----------------------------------------------------------------- sweeps

def _sweep_base(**kw):
    tcfg = TrainConfig(epochs=1, batch_size=2, depth=2, base_width=2, seed=0)
    return SweepConfig(count=4, base_seed=2, dataset=DatasetConfig(geometry=SMALL, split=(0.5, 0.25, 0.25)),
                       train=tcfg, **kw)


def test_iteration_sweep_rows(tmp_path):
    path, _ = sweep("iterations", [1, 2], _sweep_base(), tmp_path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["value", "method", "domain", "metric", "mean", "std", "n"]
    # per value: baseline 2 domains + full 3 domains, 4 metrics each
    assert len(rows) == 2 * (2 + 3) * 4
    assert {r["method"] for r in rows} == {"baseline_ld_la", "full"}


def test_sweep_budget_guard(tmp_path):
    base = _sweep_base(max_total_epochs=1)
    with pytest.raises(BudgetError):
        sweep("dose", [0.1, 0.5], base, tmp_path)
    assert not any(tmp_path.iterdir())


@pytest.mark.parametrize("dim,values", [("iterations", [0]), ("iterations", [1.5]), ("dose", [0.0]),
                                        ("dose", [1.2]), ("width", [1]), ("dose", [])])
def test_sweep_rejects_bad_values(dim, values, tmp_path):
    with pytest.raises(ValueError):
        sweep(dim, values, _sweep_base(), tmp_path)


def test_comparison_table_single_sample():
    rows = comparison_table([_report("full", [1.0]), _report("b", [2.0])])
    assert rows[1]["p_value"] == "insufficient"
