import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dstf.data import SplitSpec, compute_time_features, make_windows, split_windows
from dstf.evaluation import HistoricalAverage, evaluate, historical_average, masked_mae, metrics
from dstf.synthetic import weekly_periodic

from conftest import make_dataset


def arr(v):
    return np.asarray(v, dtype=float).reshape(1, -1, 1, 1)


def test_perfect_prediction():
    m = metrics(arr([1, 2]), arr([1, 2])).horizons
    assert all((h.mae, h.rmse, h.mape) == (0, 0, 0) for h in m)


def test_hand_example_unmasked():
    y_hat, y = np.array([1.0, 6.0]).reshape(1, 1, 2, 1), np.array([2.0, 4.0]).reshape(1, 1, 2, 1)
    h = metrics(y_hat, y, mask_zeros=False).at(1)
    assert h.mae == pytest.approx(1.5)
    assert h.rmse == pytest.approx(math.sqrt(2.5))
    assert h.mape == pytest.approx(50.0)
    assert h.n_samples == 2


def test_hand_example_masked():
    y_hat, y = np.array([5.0, 3.0]).reshape(1, 1, 2, 1), np.array([0.0, 2.0]).reshape(1, 1, 2, 1)
    h = metrics(y_hat, y, mask_zeros=True).at(1)
    assert (h.mae, h.rmse, h.mape, h.n_samples) == (1.0, 1.0, 50.0, 1)


def test_zero_targets_without_mask_rejected():
    with pytest.raises(ValueError, match="enable zero masking"):
        metrics(arr([1, 2]), arr([0, 2]), mask_zeros=False)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        metrics(arr([1, 2]), arr([1, 2, 3]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_masked_cells_do_not_matter(seed):
    g = np.random.default_rng(seed)
    y = g.uniform(1, 5, size=(3, 4, 2, 1)) * (g.uniform(size=(3, 4, 2, 1)) < 0.7)
    a = g.normal(size=y.shape)
    b = np.where(y == 0, g.normal(size=y.shape) * 100, a)
    ra, rb = metrics(a, y), metrics(b, y)
    for ha, hb in zip(ra.horizons, rb.horizons):
        if ha.n_samples:
            assert (ha.mae, ha.rmse, ha.mape) == (hb.mae, hb.rmse, hb.mape)
            assert ha.rmse >= ha.mae


def test_masked_mae_matches_report():
    g = np.random.default_rng(2)
    y = g.uniform(1, 5, size=(4, 3, 2, 1))
    y[0, 0] = 0
    y_hat = g.normal(size=y.shape)
    assert masked_mae(y_hat, y) == pytest.approx(metrics(y_hat, y).overall.mae, rel=1e-12)


def test_report_rendering(tmp_path):
    g = np.random.default_rng(3)
    y = g.uniform(1, 5, size=(5, 12, 3, 1))
    report = metrics(y + 0.1, y)
    assert len(report) == 12
    assert [m.horizon for m in report.highlighted()] == [3, 6, 12]
    text = report.table("model")
    assert "Horizon 3" in text and "Horizon 12" in text
    rows = list(csv.reader(report.to_csv(tmp_path / "r.csv").open()))
    assert rows[0] == ["horizon", "mae", "rmse", "mape_pct", "n_samples"]
    assert len(rows) == 13


# Historical Average


def weekly_setup(weeks=3):
    ds = weekly_periodic(num_nodes=3, weeks=weeks, interval_minutes=60)
    tf = compute_time_features(ds)
    windows = make_windows(ds, 12, 12, tf)
    train, val, test = split_windows(windows, SplitSpec(0.7, 0.1, 0.2))
    return ds, tf, val, test


def test_ha_zero_error_on_weekly_data():
    ds, tf, val, test = weekly_setup()
    report, _ = historical_average(ds.readings, tf, int(val.anchors.max()) + 1, test)
    assert all(h.mae < 1e-9 for h in report.horizons)


def test_ha_constant_data():
    ds = make_dataset(np.full((24 * 8 + 30, 2, 1), 7.0), interval=60)
    tf = compute_time_features(ds)
    ha = HistoricalAverage(24).fit(ds.readings, tf, 24 * 8)
    assert np.all(ha.table == 7.0)


def test_ha_needs_a_week():
    ds, tf, val, test = weekly_setup()
    with pytest.raises(ValueError, match="week"):
        historical_average(ds.readings, tf, 24 * 6, test)


def test_ha_empty_slot_falls_back_to_node_mean():
    r = np.arange(1, 24 * 7 + 1, dtype=float)[:, None, None].repeat(2, axis=1)
    r[5, 0, 0] = 0.0  # masked reading leaves node 0's slot 5 empty
    ds = make_dataset(r, interval=60)
    tf = compute_time_features(ds)
    ha = HistoricalAverage(24).fit(ds.readings, tf)
    valid = r[:, 0, 0][r[:, 0, 0] != 0]
    slot = tf.dow_index[5] * 24 + tf.tod_index[5]
    assert ha.table[slot, 0, 0] == pytest.approx(valid.mean())
    assert ha.table[slot, 1, 0] == 6.0


def test_ha_through_evaluate_path_matches():
    ds = weekly_periodic(num_nodes=3, weeks=4, interval_minutes=60, seed=2)
    noisy = ds.readings + np.random.default_rng(0).normal(size=ds.readings.shape)
    ds = make_dataset(noisy, start="2012-03-05", interval=60)
    tf = compute_time_features(ds)
    _, val, test = split_windows(make_windows(ds, 12, 12, tf), SplitSpec())
    direct, ha = historical_average(ds.readings, tf, int(val.anchors.max()) + 1, test)
    via_eval, _ = evaluate(ha, test, batch_size=7)
    for a, b in zip(direct.horizons, via_eval.horizons):
        assert a.mae == pytest.approx(b.mae, abs=1e-12) and a.mape == pytest.approx(b.mape, abs=1e-12)


def test_evaluate_order_invariant():
    ds = weekly_periodic(num_nodes=2, weeks=3, interval_minutes=60, seed=4)
    tf = compute_time_features(ds)
    windows = make_windows(ds, 12, 12, tf)
    g = np.random.default_rng(1)

    def noisy_predictor(x, tod, dow, horizon):
        return np.repeat(x[:, -1:], horizon, axis=1) * 1.1

    base, preds = evaluate(noisy_predictor, windows)
    shuffled, preds2 = evaluate(noisy_predictor, windows, order=g.permutation(len(windows)), batch_size=5)
    np.testing.assert_array_equal(preds, preds2)
    for a, b in zip(base.horizons, shuffled.horizons):
        assert abs(a.mae - b.mae) <= 1e-9 and abs(a.rmse - b.rmse) <= 1e-9
