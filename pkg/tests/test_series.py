import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossmodal_kd.series import (
    Series, SeriesError, SplitSpec, WindowBatch, denormalize, instance_normalize, load_csv,
    make_windows, patch_count, patchify, save_csv, split, synth_generate, window_count,
)


def test_load_csv_basic(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("a,b\n1,2\n3,4\n5,6\n")
    s = load_csv(p)
    assert (s.length, s.n_channels) == (3, 2)
    assert s.columns == ["a", "b"]


def test_load_csv_timestamp_column_excluded(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("date,x,y\n2020-01-01 00:00,1,2\n2020-01-01 01:00,3,4\n")
    s = load_csv(p, timestamp_column=0)
    assert s.n_channels == 2
    assert s.timestamps == ["2020-01-01 00:00", "2020-01-01 01:00"]
    np.testing.assert_array_equal(s.values, [[1, 2], [3, 4]])


def test_load_csv_ett_layout(tmp_path):
    cols = ["date", "HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"]
    rows = [",".join(["2016-07-01 00:00:00"] + [str(i + j) for j in range(7)]) for i in range(5)]
    p = tmp_path / "ETTh1.csv"
    p.write_text(",".join(cols) + "\n" + "\n".join(rows) + "\n")
    assert load_csv(p, timestamp_column=0).n_channels == 7


def test_load_csv_errors_name_location(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n3,oops\n")
    with pytest.raises(SeriesError, match="row 3, column 2"):
        load_csv(p)
    q = tmp_path / "ragged.csv"
    q.write_text("a,b\n1,2\n3\n")
    with pytest.raises(SeriesError, match="row 3"):
        load_csv(q)
    e = tmp_path / "empty.csv"
    e.write_text("")
    with pytest.raises(SeriesError, match="empty"):
        load_csv(e)


def test_csv_round_trip(tmp_path):
    s = synth_generate("sine_mix", 50, 2, 10, seed=1)
    save_csv(s, tmp_path / "s.csv")
    back = load_csv(tmp_path / "s.csv")
    assert back.values.tobytes() == s.values.tobytes()


def test_split_lengths():
    s = Series(np.arange(100.0))
    tr, va, te = split(s, SplitSpec(0.7, 0.1, 0.2))
    assert (tr.length, va.length, te.length) == (70, 10, 20)


def test_few_shot_keeps_leading_share():
    s = Series(np.arange(100.0))
    tr, _, _ = split(s, SplitSpec(0.7, 0.1, 0.2, few_shot=0.1))
    assert tr.length == 7
    np.testing.assert_array_equal(tr.values[:, 0], np.arange(7.0))


def test_zero_fraction_rejected():
    with pytest.raises(SeriesError):
        split(Series(np.arange(100.0)), SplitSpec(1.0, 0.0, 0.0))


def test_short_part_named():
    with pytest.raises(SeriesError, match="val"):
        split(Series(np.arange(20.0)), SplitSpec(0.7, 0.1, 0.2), min_length=3)


@settings(max_examples=50, deadline=None)
@given(st.integers(20, 500), st.floats(0.2, 0.8), st.floats(0.05, 0.15))
def test_splits_never_leak(T, ftr, fva):
    s = Series(np.arange(float(T)))
    tr, va, te = split(s, SplitSpec(ftr, fva, 1.0 - ftr - fva))
    assert tr.values[-1, 0] < va.values[0, 0] < te.values[0, 0]
    assert tr.length + va.length + te.length == T


def test_few_shot_full_fraction_is_identity():
    s = synth_generate("sine_mix", 300, 2, 12, seed=3)
    a = split(s, SplitSpec(few_shot=1.0))
    b = split(s, SplitSpec())
    for x, y in zip(a, b):
        assert x.values.tobytes() == y.values.tobytes()


def test_instance_normalize_examples():
    w = instance_normalize(np.array([[0.0], [2.0]]), np.zeros((1, 1)), 0.4)
    np.testing.assert_allclose(w.mean, [1.0])
    np.testing.assert_allclose(w.std, [1.0])
    np.testing.assert_allclose(w.lookback[:, 0], [-0.4, 0.4], atol=1e-8)
    c = instance_normalize(np.full((5, 1), 3.0), np.full((2, 1), 3.0))
    assert np.all(c.lookback == 0)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-1e3, 1e3)), st.booleans())
def test_normalize_round_trip(x, flat):
    if flat:
        x[:, 1] = x[0, 1]
    # channels are either exactly constant or have a spread well above round-off
    spread = np.ptp(x, axis=0)
    assume(np.all((spread == 0) | (spread > 1e-6 * (1 + np.abs(x).max(axis=0)))))
    w = instance_normalize(x, x[:4], 0.4)
    np.testing.assert_allclose(w.denormalize(w.lookback), x, atol=1e-9, rtol=0)
    np.testing.assert_allclose(w.lookback.mean(axis=0), 0.0, atol=1e-9)


def test_window_examples():
    s = Series(np.arange(10.0))
    ws = make_windows(s, 4, 2)
    assert len(ws) == 5
    assert len(make_windows(Series(np.arange(6.0)), 4, 2)) == 1
    first = make_windows(Series(np.arange(10.0)), 4, 2, norm_const=1.0)[0]
    raw_h = first.denormalize(first.horizon)
    assert raw_h[0, 0] == pytest.approx(4.0)
    with pytest.raises(SeriesError):
        make_windows(Series(np.arange(5.0)), 4, 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 80), st.integers(1, 20), st.integers(1, 20), st.integers(1, 7))
def test_window_count_formula(T, seq, pred, stride):
    assume(T >= seq + pred)
    ws = make_windows(Series(np.arange(float(T))), seq, pred, stride)
    assert len(ws) == (T - seq - pred) // stride + 1 == window_count(T, seq, pred, stride)
    assert [w.start for w in ws] == sorted(w.start for w in ws)


def test_window_batch_denormalizes():
    s = synth_generate("trend_sine", 60, 2, 8, seed=0)
    b = WindowBatch.from_windows(make_windows(s, 16, 4, stride=5))
    np.testing.assert_allclose(b.raw_lookback()[1], s.values[5:21], atol=1e-9)
    np.testing.assert_allclose(b.raw_horizon()[1], s.values[21:25], atol=1e-9)


def test_patch_counts():
    assert patch_count(512, 16, 8, 8) == 64
    assert patchify(np.zeros((1, 512, 1)), 16, 8, 8).shape == (1, 64, 16)


def test_patch_whole_input():
    x = np.arange(4.0).reshape(1, 4, 1)
    p = patchify(x, 4, 1, 0)
    assert p.shape == (1, 1, 4)
    np.testing.assert_array_equal(p.data[0, 0], [0, 1, 2, 3])


def test_patch_slicing_and_padding():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1)
    np.testing.assert_array_equal(patchify(x, 2, 2, 0).data[0], [[1, 2], [3, 4]])
    # padding replicates the last step
    np.testing.assert_array_equal(patchify(x, 2, 2, 2).data[0, -1], [4, 4])


def test_patch_layout_time_major():
    x = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]).reshape(1, 3, 2)
    np.testing.assert_array_equal(patchify(x, 2, 1, 0).data[0, 0], [1, 10, 2, 20])


def test_patch_too_long():
    with pytest.raises(SeriesError):
        patchify(np.zeros((1, 4, 1)), 9, 1, 4)


def test_synth_periodic_when_noiseless():
    s = synth_generate("sine_mix", 200, 3, 24, seed=5, noise=0.0)
    np.testing.assert_allclose(s.values[24:], s.values[:-24], atol=1e-9)


def test_synth_deterministic():
    a = synth_generate("trend_sine", 100, 2, 10, seed=9)
    b = synth_generate("trend_sine", 100, 2, 10, seed=9)
    assert a.values.tobytes() == b.values.tobytes()


def test_synth_noise_mean_bound():
    T = 5000
    s = synth_generate("noise", T, 1, 1, seed=2, noise=1.0)
    assert abs(s.values.mean()) < 5 / np.sqrt(T)


def test_synth_rejects_bad_args():
    with pytest.raises(SeriesError):
        synth_generate("sine_mix", 0, 1, 1, 0)
    with pytest.raises(SeriesError):
        synth_generate("square", 10, 1, 1, 0)
