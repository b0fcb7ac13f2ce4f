import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amsl.data import (ANOMALY_KIND_IDS, DataError, LabeledSeries, SynthConfig, anomalies_for_ratio,
                       anomaly_deviation_fraction, inject_noise, load_csv, partition_by_class, split,
                       synth_generate, write_csv)
from amsl.signal import Window

SMALL = SynthConfig(series_per_class=3, n_anomalies=6)


def series(n, t=100, ch=3, seed=0):
    rng = np.random.default_rng(seed)
    return [LabeledSeries(rng.standard_normal((t, ch)), i % 2, series_id=i) for i in range(n)]


# -- csv -------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    src = series(2)
    write_csv(src, tmp_path / "c.csv")
    back = load_csv(tmp_path / "c.csv")
    assert len(back) == 2
    for a, b in zip(src, back):
        assert b.values.shape == (100, 3)
        np.testing.assert_array_equal(a.values, b.values)
        assert (a.class_id, a.series_id) == (b.class_id, b.series_id)


def test_csv_channel_order_follows_schema(tmp_path):
    write_csv(series(1, t=4), tmp_path / "c.csv", channels=["x", "y", "z"])
    plain = load_csv(tmp_path / "c.csv")[0].values
    swapped = load_csv(tmp_path / "c.csv", channels=["z", "x", "y"])[0].values
    np.testing.assert_array_equal(swapped, plain[:, [2, 0, 1]])


def test_csv_groups_interleaved_rows(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("series_id,label,a\n7,1,1.0\n3,0,2.0\n7,1,3.0\n")
    out = load_csv(p)
    assert [s.series_id for s in out] == [7, 3]
    np.testing.assert_array_equal(out[0].values[:, 0], [1.0, 3.0])


@pytest.mark.parametrize("body,match", [
    ("series_id,label,a\n0,0,1.0\n0,0,nan\n", ":3:"),
    ("series_id,label,a\n0,0,1.0\n0,0,\n", ":3:"),
    ("series_id,label,a\n0,0,1.0,2.0\n", ":2:"),
    ("series_id,label,a\n0,0,abc\n", ":2:"),
    ("series_id,label,a\n0,0,1\n0,1,2\n", "changes label"),
    ("series_id,a\n0,1\n", "missing column"),
    ("", "empty"),
])
def test_csv_errors(tmp_path, body, match):
    p = tmp_path / "c.csv"
    p.write_text(body)
    with pytest.raises(DataError, match=match):
        load_csv(p)


def test_csv_unknown_and_missing_channels(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("series_id,label,a,b\n0,0,1,2\n")
    with pytest.raises(DataError, match="unknown"):
        load_csv(p, channels=["a"])
    with pytest.raises(DataError, match="missing channel"):
        load_csv(p, channels=["a", "b", "c"])
    with pytest.raises(DataError, match="cannot open"):
        load_csv(tmp_path / "nope.csv")


def test_partition_by_class():
    s = [LabeledSeries(np.zeros((2, 1)), c) for c in (0, -1, 2, -2)]
    normals, anomalies = partition_by_class(s)
    assert [x.class_id for x in normals] == [0, 2]
    assert [x.class_id for x in partition_by_class(s, [2])[0]] == [2]


# -- splitting -------------------------------------------------------------------

def test_split_hundred():
    sp = split(list(range(100)), seed=0)
    assert (len(sp.train), len(sp.val), len(sp.test)) == (50, 10, 40)
    assert sorted(sp.train + sp.val + sp.test) == list(range(100))
    again = split(list(range(100)), seed=0)
    assert (sp.train, sp.val, sp.test) == (again.train, again.val, again.test)
    assert split(list(range(100)), seed=1).train != sp.train


@given(st.integers(1, 300), st.integers(0, 50))
def test_split_disjoint_and_covering(n, seed):
    sp = split(list(range(n)), ["a1", "a2"], seed=seed)
    parts = sp.train + sp.val + sp.test
    assert sorted(parts) == list(range(n))
    assert "a1" not in sp.train + sp.val and sp.test_anomalies == ["a1", "a2"]


def test_split_per_class_tags():
    sp = split(series(20), seed=0)
    assert {s.split_tag for s in sp.train} == {"train"}
    assert sorted(s.class_id for s in sp.val) == [0, 1]


def test_anomaly_ratio():
    assert anomalies_for_ratio(40, 0.1) == 5
    sp = split(list(range(100)), [f"a{i}" for i in range(20)], seed=0, anomaly_ratio=0.1)
    assert len(sp.test_anomalies) == 5
    with pytest.raises(DataError):
        split(list(range(100)), ["a"], seed=0, anomaly_ratio=0.1)
    with pytest.raises(DataError):
        split([])


# -- noise injection -------------------------------------------------------------

def _windows(n):
    return [Window(np.zeros((4, 2)), str(i), 0) for i in range(n)]


def test_inject_noise_counts_and_determinism():
    ws = _windows(100)
    out, idx = inject_noise(ws, 0.3, seed=4)
    assert len(idx) == 30
    changed = [i for i, w in enumerate(out) if np.any(w.values != 0)]
    assert changed == list(idx)
    out2, idx2 = inject_noise(ws, 0.3, seed=4)
    np.testing.assert_array_equal(idx, idx2)
    np.testing.assert_array_equal(out[idx[0]].values, out2[idx[0]].values)
    same, none = inject_noise(ws, 0.0)
    assert len(none) == 0 and all(a is b for a, b in zip(same, ws))
    with pytest.raises(DataError):
        inject_noise(ws, 1.5)


# -- synthetic corpus ------------------------------------------------------------

def test_synth_sizes():
    normals, anomalies = synth_generate(SMALL, seed=0)
    assert len(normals) == 12 and len(anomalies) == 6
    assert all(s.values.shape == (SMALL.series_length, 3) for s in normals)
    assert all(a.values.shape == (64, 3) for a in anomalies)
    assert {a.class_id for a in anomalies} == {ANOMALY_KIND_IDS["burst"], ANOMALY_KIND_IDS["shift"]}


def test_synth_default_corpus_window_counts():
    cfg = SynthConfig()
    assert cfg.n_classes * cfg.series_per_class * cfg.windows_per_series + cfg.n_anomalies == 2000


def test_synth_bit_stable():
    a, b = synth_generate(SMALL, seed=3), synth_generate(SMALL, seed=3)
    for x, y in zip(a[0] + a[1], b[0] + b[1]):
        np.testing.assert_array_equal(x.values, y.values)


def test_synth_dominant_frequency():
    normals, _ = synth_generate(SMALL, seed=1)
    for s in normals:
        spectrum = np.abs(np.fft.rfft(s.values[:, 0] - s.values[:, 0].mean()))
        cycles = np.argmax(spectrum) * SMALL.window_length / len(s.values)
        # the FFT bin grid is 64/352 cycles per window
        assert abs(cycles - SMALL.class_cycles(s.class_id)) <= SMALL.window_length / len(s.values)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 1000))
def test_synth_anomalies_depart_from_carriers(seed):
    _, anomalies, carriers = synth_generate(SMALL, seed=seed, return_carriers=True)
    for a, c in zip(anomalies, carriers):
        assert anomaly_deviation_fraction(a.values, c.values, SMALL.noise_std) >= 0.05


def test_deviation_fraction_oracle():
    base = np.zeros((10, 2))
    bumped = base.copy()
    bumped[0, 0] = 1.0
    assert anomaly_deviation_fraction(bumped, base, 0.1) == 0.05
