"""Ingestion, transforms, windowing, synthetic generators, and the cache."""

import numpy as np
import pytest

from seqgame.data import (
    DataError,
    RawSeries,
    SynthSpec,
    TimeSeriesDataset,
    load_csv_series,
    load_dataset,
    pct_change,
    save_dataset,
    synth_generate,
    window_split,
    window_split_many,
)


def series(values, name="s", channels=None):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    channels = channels or tuple(f"c{i}" for i in range(values.shape[1]))
    return RawSeries(name=name, channels=channels, values=values)


# ---------------------------------------------------------------------------
# RawSeries / TimeSeriesDataset validation


def test_raw_series_validation():
    with pytest.raises(DataError):
        RawSeries("bad", ("a",), np.ones(5))  # 1-D
    with pytest.raises(DataError):
        RawSeries("bad", ("a", "b"), np.ones((5, 1)))  # channel count
    with pytest.raises(DataError):
        RawSeries("bad", ("a",), np.zeros((0, 1)))  # empty
    with pytest.raises(DataError):
        RawSeries("bad", ("a",), np.array([[1.0], [np.nan]]))


def test_dataset_window_shape_enforced():
    with pytest.raises(DataError):
        TimeSeriesDataset([np.ones((5, 1))], input_len=3, output_len=3, n_channels=1, split="train")


# ---------------------------------------------------------------------------
# CSV loading


CSV_TEXT = """date,ticker,close,volume
2020-01-01,AAA,100.0,10
2020-01-02,AAA,110.0,11
2020-01-03,AAA,99.0,12
2020-01-01,BBB,50.0,20
2020-01-02,BBB,55.0,21
2020-01-01,CCC,7.0,30
2020-01-02,DDD,not_a_number,40
2020-01-03,DDD,3.0,41
"""


@pytest.fixture
def csv_file(tmp_path):
    path = tmp_path / "prices.csv"
    path.write_text(CSV_TEXT)
    return str(path)


def test_csv_grouped_loading(csv_file, caplog):
    with caplog.at_level("WARNING"):
        out = load_csv_series(csv_file, ["close"], group_column="ticker")
    # CCC has 1 row, DDD has 1 usable row: both skipped with a warning
    assert [s.name for s in out] == ["AAA", "BBB"]
    np.testing.assert_allclose(out[0].values[:, 0], [100.0, 110.0, 99.0])
    np.testing.assert_allclose(out[1].values[:, 0], [50.0, 55.0])
    assert sum("skipped" in r.message for r in caplog.records) == 2


def test_csv_whole_file_is_one_series(csv_file):
    out = load_csv_series(csv_file, ["close", "volume"])
    assert len(out) == 1
    assert out[0].channels == ("close", "volume")
    # the unparseable DDD row is dropped, the rest keep file order
    assert out[0].values.shape == (7, 2)
    np.testing.assert_allclose(out[0].values[0], [100.0, 10.0])


def test_csv_missing_column_raises(csv_file):
    with pytest.raises(DataError, match="missing columns"):
        load_csv_series(csv_file, ["nope"])
    with pytest.raises(DataError, match="missing columns"):
        load_csv_series(csv_file, ["close"], group_column="nope")


def test_csv_no_usable_group_raises(tmp_path):
    path = tmp_path / "thin.csv"
    path.write_text("g,x\na,1.0\nb,2.0\n")
    with pytest.raises(DataError, match="at least 2 usable rows"):
        load_csv_series(str(path), ["x"], group_column="g")


# ---------------------------------------------------------------------------
# pct_change


def test_pct_change_example():
    out = pct_change(series([100.0, 110.0, 99.0]))
    np.testing.assert_allclose(out.values[:, 0], [0.1, -0.1])
    assert len(out) == 2


def test_pct_change_reconstruction_property():
    gen = np.random.default_rng(0)
    vals = 1.0 + gen.random((50, 3))  # bounded away from zero
    s = series(vals)
    r = pct_change(s)
    rebuilt = vals[:-1] * (1.0 + r.values)
    np.testing.assert_allclose(rebuilt, vals[1:], rtol=1e-12)


def test_pct_change_zero_value_raises():
    with pytest.raises(DataError, match="zero value"):
        pct_change(series([1.0, 0.0, 2.0]))
    with pytest.raises(DataError):
        pct_change(series([5.0]))


# ---------------------------------------------------------------------------
# windowing


def test_window_count_disjoint():
    # 74 rows, window 37: exactly two disjoint windows
    bundle = window_split(series(np.arange(74.0)), 30, 7, fractions=(1.0, 0.0, 0.0))
    assert len(bundle.train) == 2 and len(bundle.val) == 0 and len(bundle.test) == 0
    np.testing.assert_allclose(bundle.train.subsequences[0][:, 0], np.arange(37.0))
    np.testing.assert_allclose(bundle.train.subsequences[1][:, 0], np.arange(37.0, 74.0))


def test_window_count_stride_one():
    bundle = window_split(series(np.arange(10.0)), 3, 1, stride=1, fractions=(1.0, 0.0, 0.0))
    assert len(bundle.train) == 10 - 4 + 1
    # consecutive windows shift by one row
    np.testing.assert_allclose(
        bundle.train.subsequences[1][:, 0], bundle.train.subsequences[0][:, 0] + 1.0
    )


def test_window_split_filters_and_counts():
    bundle = window_split_many(
        [series(np.arange(100.0)), series(np.arange(50.0), name="t")],
        8,
        2,
        fractions=(0.6, 0.2, 0.2),
        seed=4,
    )
    assert len(bundle.train) + len(bundle.val) + len(bundle.test) == 10 + 5
    assert bundle.channel_names == ("c0",)


def test_window_split_deterministic():
    kwargs = dict(input_len=5, output_len=2, fractions=(0.5, 0.25, 0.25), seed=9)
    a = window_split(series(np.arange(70.0)), **kwargs)
    b = window_split(series(np.arange(70.0)), **kwargs)
    for tag in ("train", "val", "test"):
        assert len(a.split(tag)) == len(b.split(tag))
        for wa, wb in zip(a.split(tag).subsequences, b.split(tag).subsequences):
            assert np.array_equal(wa, wb)


def test_window_split_errors():
    with pytest.raises(DataError):
        window_split_many([], 3, 1)
    with pytest.raises(DataError):
        window_split(series(np.arange(3.0)), 5, 2)  # nothing fits
    with pytest.raises(DataError):
        window_split(series(np.arange(10.0)), 3, 1, fractions=(0.5, 0.5, 0.5))
    with pytest.raises(DataError):
        window_split_many(
            [series(np.ones((5, 1))), series(np.ones((5, 2)))], 2, 1
        )  # channel mismatch
    with pytest.raises(DataError):
        window_split(series(np.arange(10.0)), 3, 1, stride=0)


def test_bundle_split_lookup():
    bundle = window_split(series(np.arange(10.0)), 3, 1)
    assert bundle.split("train") is bundle.train
    with pytest.raises(DataError):
        bundle.split("holdout")


# ---------------------------------------------------------------------------
# synthetic generators


def test_sinusoid_closed_form():
    s = synth_generate(SynthSpec(kind="sinusoid_mix", length=40, periods=(8.0,)))
    t = np.arange(40.0)
    np.testing.assert_allclose(s.values[:, 0], np.sin(2 * np.pi * t / 8.0), atol=1e-12)


def test_sinusoid_mix_sums_components():
    s = synth_generate(
        SynthSpec(kind="sinusoid_mix", length=30, periods=(5.0, 20.0), channels=2)
    )
    t = np.arange(30.0)
    expected = np.sin(2 * np.pi * t / 5.0) + np.sin(2 * np.pi * t / 20.0)
    for c in range(2):
        np.testing.assert_allclose(s.values[:, c], expected, atol=1e-12)


def test_piecewise_linear_interpolates_between_knots():
    s = synth_generate(
        SynthSpec(kind="piecewise_linear", length=21, breakpoints=(10,), seed=2)
    )
    v = s.values[:, 0]
    # linear on each segment: second differences vanish away from the knot
    second = np.diff(v, 2)
    mask = np.ones(len(second), dtype=bool)
    mask[9] = False  # the knot at t=10 may bend
    np.testing.assert_allclose(second[mask], 0.0, atol=1e-12)


def test_piecewise_linear_bad_breakpoint():
    with pytest.raises(DataError):
        synth_generate(SynthSpec(kind="piecewise_linear", length=10, breakpoints=(12,)))


def test_ar_process_closed_form():
    # x[t] = 0.5 x[t-1] from x[0] = 1 is exactly the halving sequence
    s = synth_generate(
        SynthSpec(kind="ar_process", length=5, ar_coeffs=(0.5,), ar_init=(1.0,))
    )
    np.testing.assert_allclose(s.values[:, 0], [1.0, 0.5, 0.25, 0.125, 0.0625])


def test_ar_process_order_two_recursion():
    spec = SynthSpec(
        kind="ar_process",
        length=30,
        ar_coeffs=(0.5, 0.25),
        ar_intercept=(0.1,),
        ar_init=(1.0, 2.0),
    )
    v = synth_generate(spec).values[:, 0]
    for t in range(2, 30):
        assert v[t] == pytest.approx(0.1 + 0.5 * v[t - 1] + 0.25 * v[t - 2], abs=1e-12)


def test_ar_process_matrix_coefficients():
    a1 = (0.3, 0.1, 0.0, 0.2)  # row-major 2x2
    spec = SynthSpec(kind="ar_process", channels=2, length=10, ar_coeffs=a1)
    v = synth_generate(spec).values
    m = np.asarray(a1).reshape(2, 2)
    start = np.zeros(2)
    assert np.allclose(v[0], start)
    # zero init keeps the zero fixed point without an intercept
    assert np.allclose(v, 0.0)
    spec2 = SynthSpec(
        kind="ar_process", channels=2, length=10, ar_coeffs=a1, ar_init=(1.0, 1.0)
    )
    v2 = synth_generate(spec2).values
    np.testing.assert_allclose(v2[1], m @ v2[0], atol=1e-12)


def test_ar_process_rejects_nonstationary():
    with pytest.raises(DataError, match="spectral radius"):
        synth_generate(SynthSpec(kind="ar_process", length=10, ar_coeffs=(1.0,)))
    with pytest.raises(DataError, match="spectral radius"):
        synth_generate(SynthSpec(kind="ar_process", length=10, ar_coeffs=(0.9, 0.2)))


def test_synth_noise_deterministic_per_seed():
    spec = SynthSpec(kind="sinusoid_mix", length=50, noise_sd=0.1, seed=7)
    a = synth_generate(spec)
    b = synth_generate(spec)
    assert np.array_equal(a.values, b.values)
    c = synth_generate(SynthSpec(kind="sinusoid_mix", length=50, noise_sd=0.1, seed=8))
    assert not np.array_equal(a.values, c.values)


def test_synth_spec_validation():
    with pytest.raises(DataError):
        SynthSpec(kind="mystery")
    with pytest.raises(DataError):
        SynthSpec(kind="sinusoid_mix", periods=())
    with pytest.raises(DataError):
        SynthSpec(kind="sinusoid_mix", periods=(0.0,))
    with pytest.raises(DataError):
        SynthSpec(kind="ar_process")
    with pytest.raises(DataError):
        SynthSpec(kind="sinusoid_mix", length=1)


# ---------------------------------------------------------------------------
# cache round trip


def _cache_bytes(directory):
    import os

    out = {}
    for name in sorted(os.listdir(directory)):
        with open(os.path.join(directory, name), "rb") as fh:
            out[name] = fh.read()
    return out


def test_cache_round_trip_bit_exact(tmp_path):
    bundle = window_split(
        series(np.random.default_rng(1).normal(size=(120, 2))),
        10,
        3,
        fractions=(0.6, 0.2, 0.2),
        seed=5,
    )
    d = str(tmp_path / "cache")
    save_dataset(bundle, d, extra={"config": "demo"})
    loaded = load_dataset(d)
    assert loaded.input_len == 10 and loaded.output_len == 3
    assert loaded.channel_names == bundle.channel_names
    assert loaded.fractions == bundle.fractions
    for tag in ("train", "val", "test"):
        orig, back = bundle.split(tag), loaded.split(tag)
        assert len(orig) == len(back)
        for a, b in zip(orig.subsequences, back.subsequences):
            assert np.array_equal(a, b)

    # a second save of the reloaded bundle writes identical bytes
    d2 = str(tmp_path / "cache2")
    save_dataset(loaded, d2, extra={"config": "demo"})
    assert _cache_bytes(d) == _cache_bytes(d2)


def test_cache_handles_empty_split(tmp_path):
    bundle = window_split(series(np.arange(30.0)), 4, 2, fractions=(1.0, 0.0, 0.0))
    d = str(tmp_path / "cache")
    save_dataset(bundle, d)
    loaded = load_dataset(d)
    assert len(loaded.val) == 0 and len(loaded.test) == 0
    assert len(loaded.train) == len(bundle.train)


def test_cache_load_errors(tmp_path):
    with pytest.raises(DataError, match="no dataset manifest"):
        load_dataset(str(tmp_path))
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataError, match="corrupt"):
        load_dataset(str(tmp_path))
    (tmp_path / "manifest.json").write_text('{"format": "other"}')
    with pytest.raises(DataError, match="unrecognized"):
        load_dataset(str(tmp_path))


def test_cache_count_mismatch_detected(tmp_path):
    bundle = window_split(series(np.arange(30.0)), 4, 2, fractions=(1.0, 0.0, 0.0))
    d = tmp_path / "cache"
    save_dataset(bundle, str(d))
    import json

    manifest = json.loads((d / "manifest.json").read_text())
    manifest["splits"]["train"]["count"] += 1
    (d / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DataError, match="manifest says"):
        load_dataset(str(d))
