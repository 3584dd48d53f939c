import math

import numpy as np
import pytest

from app.core.errors import NoOverlap, ShapeMismatch, UsageError
from app.models.image import DepthMap
from app.models.metrics import MetricsReport
from app.models.pipeline import PipelineConfig
from app.models.stack import SparseDepthMap
from app.services.metrics import (
    METRIC_COLUMNS,
    DepthEvaluator,
    compare_reports,
    evaluate,
    random_depth_baseline,
    read_metrics_report,
    render_table,
    write_comparison_csv,
    write_metrics_report,
)


def dense(values, valid=None) -> DepthMap:
    values = np.asarray(values, dtype=np.float64).reshape(1, -1)
    mask = np.ones(values.shape, dtype=bool) if valid is None else np.asarray(valid).reshape(1, -1)
    return DepthMap(values=values, valid=mask)


def brute_force(pred, gt, threshold=0.25):
    """Metric definitions evaluated pixel by pixel."""
    n = len(gt)
    sq = sum(((p - g) * 100.0) ** 2 for p, g in zip(pred, gt)) / n
    ratios = [max(p / g, g / p) for p, g in zip(pred, gt)]
    return {
        "mse": sq,
        "rmse": math.sqrt(sq),
        "mare": 100.0 * sum(abs(p - g) / g for p, g in zip(pred, gt)) / n,
        "msre": sum((p - g) ** 2 / g ** 2 for p, g in zip(pred, gt)) / n,
        "delta1": 100.0 * sum(r < 1.25 for r in ratios) / n,
        "delta2": 100.0 * sum(r < 1.25 ** 2 for r in ratios) / n,
        "delta3": 100.0 * sum(r < 1.25 ** 3 for r in ratios) / n,
        "bpr": sum(abs(p - g) / g > threshold for p, g in zip(pred, gt)) / n,
    }


def make_report(**values) -> MetricsReport:
    base = dict(mse=1.0, rmse=1.0, mare=1.0, msre=0.1, delta1=90.0, delta2=95.0, delta3=99.0, bpr=0.1, valid_count=10)
    base.update(values)
    return MetricsReport(**base)


def test_perfect_prediction():
    """Test that identical maps give zero errors and full accuracy."""
    gt = dense([1.0, 2.0, 3.5])
    report = evaluate(gt, gt)
    for column in ("mse", "rmse", "mare", "msre", "bpr"):
        assert getattr(report, column) == 0.0
    assert report.delta1 == report.delta2 == report.delta3 == 100.0
    assert report.valid_count == 3


def test_hand_derived_fixture():
    """Test the two-pixel fixture against hand-evaluated values."""
    report = evaluate(dense([2.0, 4.0]), dense([1.0, 4.0]))
    assert report.mse == pytest.approx(5000.0, rel=1e-12)
    assert report.rmse == pytest.approx(math.sqrt(5000.0), rel=1e-12)
    assert report.mare == pytest.approx(50.0, rel=1e-12)
    assert report.msre == pytest.approx(0.5, rel=1e-12)
    # ratios are 2 and 1; 2 is above 1.25, 1.5625 and 1.953125
    assert report.delta1 == report.delta2 == report.delta3 == 50.0
    assert report.bpr == 0.5

    expected = brute_force([2.0, 4.0], [1.0, 4.0])
    for column in METRIC_COLUMNS:
        assert getattr(report, column) == pytest.approx(expected[column], rel=1e-12)


def test_uniform_relative_error():
    """Test a prediction 20% above the truth everywhere."""
    gt = np.array([0.5, 1.0, 2.0, 4.0])
    report = evaluate(dense(1.2 * gt), dense(gt))
    assert report.mare == pytest.approx(20.0, rel=1e-12)
    assert report.delta1 == 100.0
    assert report.bpr == 0.0


def test_matches_brute_force_oracle():
    """Test every metric against the pixel loop on random data."""
    rng = np.random.default_rng(0)
    gt = rng.uniform(0.5, 5.0, 300)
    pred = gt * rng.uniform(0.5, 1.8, 300)
    report = evaluate(dense(pred), dense(gt))
    expected = brute_force(pred.tolist(), gt.tolist())
    for column in METRIC_COLUMNS:
        assert getattr(report, column) == pytest.approx(expected[column], rel=1e-10)


def test_metric_invariants():
    """Test delta nesting, swap symmetry, permutation invariance and rmse^2 = mse."""
    rng = np.random.default_rng(1)
    gt = rng.uniform(0.5, 5.0, 200)
    pred = gt * rng.uniform(0.4, 2.2, 200)
    forward = evaluate(dense(pred), dense(gt))
    swapped = evaluate(dense(gt), dense(pred))

    assert forward.delta1 <= forward.delta2 <= forward.delta3
    assert (forward.delta1, forward.delta2, forward.delta3) == (swapped.delta1, swapped.delta2, swapped.delta3)
    assert forward.mare != swapped.mare
    assert forward.rmse ** 2 == pytest.approx(forward.mse, rel=1e-12)

    order = rng.permutation(200)
    permuted = evaluate(dense(pred[order]), dense(gt[order]))
    for column in METRIC_COLUMNS:
        assert getattr(permuted, column) == pytest.approx(getattr(forward, column), rel=1e-12)


def test_only_jointly_valid_pixels_count():
    """Test that pixels invalid in either map are ignored."""
    pred = dense([1.0, 9.0, 2.0, 0.0], valid=[True, True, True, False])
    gt = dense([1.0, 3.0, 2.0, 2.0], valid=[True, False, True, True])
    report = evaluate(pred, gt)
    assert report.valid_count == 2
    assert report.mse == 0.0


def test_no_overlap_and_shape_errors():
    """Test disjoint masks and mismatched inputs."""
    pred = dense([1.0, 2.0], valid=[True, False])
    gt = dense([1.0, 2.0], valid=[False, True])
    with pytest.raises(NoOverlap):
        evaluate(pred, gt)
    with pytest.raises(ShapeMismatch):
        evaluate(dense([1.0, 2.0]), dense([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeMismatch):
        evaluate(dense([1.0]), SparseDepthMap.empty())


def test_sparse_maps_join_on_keys():
    """Test that sparse maps are paired by microlens key."""
    pred = SparseDepthMap(
        coords=np.array([[0, 0], [1, 0], [5, 5]]), centroids=np.zeros((3, 2)), depths=np.array([2.0, 4.0, 9.0])
    )
    gt = SparseDepthMap(
        coords=np.array([[1, 0], [0, 0]]), centroids=np.zeros((2, 2)), depths=np.array([4.0, 1.0]), source="stereo-gt"
    )
    report = evaluate(pred, gt)
    assert report.valid_count == 2
    assert report.mse == pytest.approx(5000.0, rel=1e-12)


def test_pooled_and_per_image_modes():
    """Test the two aggregation modes on images of unequal size."""
    preds = [dense([2.0, 4.0]), dense([1.0, 1.0, 1.0, 1.0])]
    gts = [dense([1.0, 4.0]), dense([1.0, 1.0, 1.0, 1.0])]
    pooled = evaluate(preds, gts, mode="pooled")
    per_image = evaluate(preds, gts, mode="per-image-mean")

    assert pooled.mode == "pooled" and per_image.mode == "per-image-mean"
    assert pooled.valid_count == per_image.valid_count == 6
    assert pooled.mse == pytest.approx(10000.0 / 6, rel=1e-12)
    assert per_image.mse == pytest.approx(2500.0, rel=1e-12)
    assert per_image.rmse == pytest.approx(math.sqrt(5000.0) / 2, rel=1e-12)

    with pytest.raises(ShapeMismatch):
        evaluate(preds, gts[:1])


def test_bpr_threshold_is_configurable():
    """Test the bad-pixel threshold."""
    report = evaluate(dense([1.3, 1.1]), dense([1.0, 1.0]), bpr_threshold=0.2)
    assert report.bpr == 0.5
    assert evaluate(dense([1.3, 1.1]), dense([1.0, 1.0]), bpr_threshold=0.5).bpr == 0.0


def test_compare_single_report():
    """Test that one report gives one row that is best everywhere."""
    table = compare_reports([("only", make_report())])
    assert [row.name for row in table.rows] == ["only"]
    assert table.rows[0].best == list(METRIC_COLUMNS)


def test_compare_ties_keep_input_order():
    """Test the stable ordering of equal reports."""
    table = compare_reports([("first", make_report()), ("second", make_report())])
    assert [row.name for row in table.rows] == ["first", "second"]
    assert table.rows[0].best == table.rows[1].best == list(METRIC_COLUMNS)


def test_compare_best_flags_match_brute_force():
    """Test best-per-column marks against argmin/argmax."""
    rng = np.random.default_rng(2)
    named = []
    for name in ("a", "b", "c"):
        d = np.sort(rng.uniform(0, 100, 3))
        named.append((name, make_report(
            mse=rng.uniform(1, 10), rmse=rng.uniform(1, 10), mare=rng.uniform(1, 10), msre=rng.uniform(0, 1),
            delta1=d[0], delta2=d[1], delta3=d[2], bpr=rng.uniform(0, 1),
        )))
    table = compare_reports(named, sort_by="mare")

    mare = [r.mare for _, r in named]
    assert [row.name for row in table.rows] == [named[i][0] for i in np.argsort(mare)]
    for column in METRIC_COLUMNS:
        values = [getattr(r, column) for _, r in named]
        pick = int(np.argmax(values)) if column.startswith("delta") else int(np.argmin(values))
        flagged = [row.name for row in table.rows if column in row.best]
        assert flagged == [named[pick][0]]


def test_compare_sorts_deltas_descending():
    """Test that accuracy columns rank the highest value first."""
    table = compare_reports([("low", make_report(delta1=10.0)), ("high", make_report(delta1=80.0))], sort_by="delta1")
    assert [row.name for row in table.rows] == ["high", "low"]

    with pytest.raises(UsageError):
        compare_reports([("x", make_report())], sort_by="accuracy")


def test_render_table_and_csv(tmp_path):
    """Test the plain-text table and the CSV export."""
    table = compare_reports([("net", make_report(rmse=0.5)), ("random", make_report(rmse=9.0))])
    text = render_table(table)
    lines = text.splitlines()
    assert lines[0].split()[0] == "method"
    assert set(lines[1]) <= {"-", " "}
    assert "0.5000*" in lines[2]
    assert lines[3].startswith("random")

    path = tmp_path / "comparison.csv"
    write_comparison_csv(path, table)
    rows = path.read_text().splitlines()
    assert rows[0].startswith("method,mse,rmse")
    assert rows[1].startswith("net,")
    assert len(rows) == 3


def test_metrics_report_round_trip(tmp_path):
    """Test the JSON metrics report."""
    report = evaluate(dense([2.0, 4.0]), dense([1.0, 4.0]))
    path = tmp_path / "metrics.json"
    write_metrics_report(path, report)
    assert read_metrics_report(path) == report


def test_random_baseline_is_seeded_and_in_range():
    """Test the random reference prediction."""
    gt = dense([1.0, 2.0, 3.0, 4.0])
    first = random_depth_baseline(gt, seed=3)
    second = random_depth_baseline(gt, seed=3)
    assert np.array_equal(first.values, second.values)
    assert first.values.min() >= 1.0 and first.values.max() <= 4.0

    sparse = SparseDepthMap(coords=np.array([[0, 0], [1, 0]]), centroids=np.zeros((2, 2)), depths=np.array([1.0, 2.0]))
    baseline = random_depth_baseline(sparse)
    assert baseline.keys() == sparse.keys()

    with pytest.raises(NoOverlap):
        random_depth_baseline(SparseDepthMap.empty())


def test_evaluator_uses_config():
    """Test that the evaluator forwards mode and threshold."""
    evaluator = DepthEvaluator(PipelineConfig(metrics_mode="per-image-mean", bpr_threshold=0.5))
    report = evaluator.evaluate(dense([1.3, 1.1]), dense([1.0, 1.0]))
    assert report.mode == "per-image-mean"
    assert report.bpr == 0.0

    table = evaluator.compare([("good", dense([1.0, 1.0])), ("bad", dense([3.0, 3.0]))], dense([1.0, 1.0]))
    assert [row.name for row in table.rows] == ["good", "bad"]
