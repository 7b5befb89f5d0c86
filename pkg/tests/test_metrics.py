"""Correlation, error, and logistic-compensation metrics."""

import numpy as np
import pytest

from vq360 import metrics
from vq360.errors import ShapeError, UndefinedCorrelationError

import oracles


# ---------------------------------------------------------------------------
# pinned values


def test_plcc_perfect_linear_relation():
    assert metrics.plcc([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == pytest.approx(1.0, abs=1e-12)


def test_srocc_of_strictly_increasing_map_is_one():
    x = np.array([0.3, 1.7, 2.2, 5.9, 8.4])
    assert metrics.srocc(x, np.exp(x)) == pytest.approx(1.0, abs=1e-12)
    assert metrics.srocc(x, x**3 + 2.0) == pytest.approx(1.0, abs=1e-12)


def test_krocc_full_reversal_is_minus_one():
    assert metrics.krocc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)


def test_rmse_and_mae_pinned_example():
    assert metrics.rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(3.5355339059327378, abs=1e-9)
    assert metrics.mae([0.0, 0.0], [3.0, 4.0]) == pytest.approx(3.5, abs=1e-12)


def test_krocc_tie_example_matches_brute_force():
    x = [1.0, 2.0, 2.0, 3.0]
    y = [1.0, 3.0, 2.0, 4.0]
    assert metrics.krocc(x, y) == oracles.tau_b_bruteforce(x, y)


def test_krocc_matches_brute_force_on_random_tied_lists():
    """Pair counting must agree exactly with the O(n^2) definition."""
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 100:
        n = int(rng.integers(2, 11))
        x = rng.integers(0, 5, size=n).astype(np.float64)
        y = rng.integers(0, 5, size=n).astype(np.float64)
        if x.min() == x.max() or y.min() == y.max():
            continue
        assert metrics.krocc(x, y) == oracles.tau_b_bruteforce(x, y)
        checked += 1


# ---------------------------------------------------------------------------
# invariances


def test_plcc_affine_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=30)
    y = rng.normal(size=30)
    base = metrics.plcc(x, y)
    assert metrics.plcc(2.5 * x + 7.0, y) == pytest.approx(base, abs=1e-12)
    assert metrics.plcc(x, 0.1 * y - 3.0) == pytest.approx(base, abs=1e-12)
    assert metrics.plcc(-4.0 * x + 1.0, y) == pytest.approx(-base, abs=1e-12)


def test_rank_correlations_invariant_under_monotone_transforms():
    rng = np.random.default_rng(4)
    x = rng.normal(size=25)
    y = rng.normal(size=25)
    for fn in (np.exp, lambda v: v**3, lambda v: 10.0 * v + 2.0):
        assert metrics.srocc(fn(x), y) == pytest.approx(metrics.srocc(x, y), abs=1e-12)
        assert metrics.krocc(fn(x), y) == pytest.approx(metrics.krocc(x, y), abs=1e-12)


def test_srocc_equals_pearson_on_average_ranks():
    rng = np.random.default_rng(5)
    x = rng.integers(0, 6, size=40).astype(np.float64)
    y = rng.integers(0, 6, size=40).astype(np.float64)
    expected = metrics.plcc(metrics.average_ranks(x), metrics.average_ranks(y))
    assert metrics.srocc(x, y) == expected


def test_average_ranks_ties_share_mean_position():
    np.testing.assert_array_equal(
        metrics.average_ranks([10.0, 30.0, 20.0, 30.0]),
        np.array([1.0, 3.5, 2.0, 3.5]),
    )


# ---------------------------------------------------------------------------
# undefined cases


def test_constant_axis_is_undefined():
    with pytest.raises(UndefinedCorrelationError, match="constant"):
        metrics.plcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(UndefinedCorrelationError, match="constant"):
        metrics.srocc([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
    with pytest.raises(UndefinedCorrelationError, match="constant"):
        metrics.krocc([2.0, 2.0], [1.0, 3.0])


def test_single_observation_is_undefined_for_correlations():
    with pytest.raises(UndefinedCorrelationError, match="at least 2"):
        metrics.plcc([1.0], [2.0])


def test_length_mismatch_is_a_shape_error():
    with pytest.raises(ShapeError, match="differ in length"):
        metrics.rmse([1.0, 2.0], [1.0, 2.0, 3.0])


# ---------------------------------------------------------------------------
# logistic compensation


def test_logistic_fit_recovers_planted_parameters():
    beta_true = np.array([92.0, 8.0, 0.45, 0.12])
    x = np.linspace(0.0, 1.0, 40)
    y = metrics.logistic_curve(beta_true, x)
    fit = metrics.logistic_fit(x, y)
    assert fit.converged and not fit.identity
    got = fit.params.copy()
    got[3] = abs(got[3])
    np.testing.assert_allclose(got, beta_true, rtol=1e-4)
    assert metrics.rmse(fit.apply(x), y) < 1e-6


def test_logistic_fit_degenerate_inputs_fall_back_to_identity():
    few = metrics.logistic_fit([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])
    assert few.identity and not few.converged
    flat = metrics.logistic_fit([2.0] * 6, [1, 2, 3, 4, 5, 6])
    assert flat.identity and not flat.converged
    x = np.array([0.4, 0.1, 0.8])
    np.testing.assert_array_equal(few.apply(x), x)


def test_fitting_preserves_rank_order():
    rng = np.random.default_rng(6)
    x = rng.uniform(0.0, 1.0, size=20)
    y = metrics.logistic_curve([85.0, 15.0, 0.5, 0.2], x)
    fit = metrics.logistic_fit(x, y)
    assert fit.converged
    assert metrics.srocc(fit.apply(x), y) == metrics.srocc(x, y)


# ---------------------------------------------------------------------------
# aggregate evaluation


def test_perfect_predictions_score_plcc_one():
    gt = np.array([12.0, 55.0, 31.0, 78.0, 44.0, 90.0, 23.0, 67.0])
    report, fitted = metrics.evaluate_scores(gt, gt)
    assert abs(report.plcc - 1.0) <= 1e-9
    assert report.srocc == pytest.approx(1.0, abs=1e-12)
    assert report.krocc == pytest.approx(1.0, abs=1e-12)
    assert report.rmse <= 1e-9
    np.testing.assert_allclose(fitted, gt, atol=1e-9)


def test_single_video_report_has_errors_but_no_correlations():
    report, fitted = metrics.evaluate_scores([0.4], [0.5])
    assert report.count == 1
    assert report.rmse == pytest.approx(0.1, abs=1e-12)
    assert report.mae == pytest.approx(0.1, abs=1e-12)
    assert report.plcc is None and report.srocc is None and report.krocc is None
    assert any("plcc undefined" in note for note in report.notes)
    assert fitted.shape == (1,)


def test_report_is_order_independent():
    rng = np.random.default_rng(7)
    pred = rng.uniform(0.0, 1.0, size=16)
    gt = 100.0 * pred + rng.normal(0.0, 2.0, size=16)
    base, _ = metrics.evaluate_scores(pred, gt)
    perm = rng.permutation(16)
    shuffled, _ = metrics.evaluate_scores(pred[perm], gt[perm])
    for name in ("rmse", "mae", "plcc", "srocc", "krocc"):
        assert getattr(shuffled, name) == pytest.approx(getattr(base, name), abs=1e-9)


def test_report_and_scatter_files(tmp_path):
    pred = np.array([0.2, 0.8, 0.5, 0.9, 0.1, 0.6])
    gt = np.array([25.0, 75.0, 50.0, 88.0, 14.0, 61.0])
    report, fitted = metrics.evaluate_scores(pred, gt)
    ids = [f"v{i}" for i in range(6)]

    report_path = tmp_path / "report.txt"
    metrics.write_report(str(report_path), report, ids, pred, fitted, gt)
    lines = report_path.read_text().splitlines()
    assert lines[0] == "videos: 6"
    assert any(line.startswith("plcc: ") for line in lines)
    assert "# id predicted fitted subjective" in lines
    tail = lines[lines.index("# id predicted fitted subjective") + 1:]
    assert len(tail) == 6 and tail[0].startswith("v0 ")

    scatter_path = tmp_path / "scatter.txt"
    metrics.write_scatter(str(scatter_path), pred, fitted, gt)
    slines = scatter_path.read_text().splitlines()
    assert slines[0] == "# predicted fitted subjective"
    assert len(slines) == 7
    assert all(len(line.split()) == 3 for line in slines[1:])
