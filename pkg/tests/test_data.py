import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from timae.data import (
    Normalizer,
    SplitSpec,
    SyntheticSpec,
    TimeSeries,
    augment,
    count_windows,
    equidistant_subsample,
    generate_synthetic,
    iter_batches,
    load_csv,
    make_windows,
    prepare,
    save_csv,
    split,
)
from timae.errors import ConfigError, FormatError, ParameterError, ParseError


def write(tmp_path, text, name="s.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# -------------------------------------------------------------------- csv
def test_load_csv_three_rows_two_channels(tmp_path):
    ts = load_csv(write(tmp_path, "a,b\n1,2\n3,4\n5,6\n"))
    assert ts.values.shape == (3, 2)
    assert ts.channel_names == ["a", "b"]


def test_load_csv_timestamp_column_excluded(tmp_path):
    ts = load_csv(write(tmp_path, "date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n"), timestamp_col=True)
    assert ts.n_channels == 2
    assert ts.timestamps == ["2020-01-01", "2020-01-02"]


def test_load_csv_bad_cell_names_row(tmp_path):
    rows = "\n".join(f"{i},{i}" for i in range(4))
    with pytest.raises(ParseError, match=r"row 5\b.*column 'b'"):
        load_csv(write(tmp_path, f"a,b\n{rows}\n4,abc\n"))


def test_load_csv_empty_file(tmp_path):
    with pytest.raises(FormatError):
        load_csv(write(tmp_path, ""))


def test_load_csv_missing_values(tmp_path):
    p = write(tmp_path, "a\n1\n\n3\nnan\n")
    with pytest.raises(ParseError):
        load_csv(p)
    assert load_csv(p, forward_fill=True).values.ravel().tolist() == [1.0, 3.0, 3.0]


def test_save_load_round_trip(tmp_path):
    v = np.random.default_rng(0).normal(size=(7, 3))
    save_csv(tmp_path / "x.csv", v, ["p", "q", "r"])
    assert np.array_equal(load_csv(tmp_path / "x.csv").values, v)


# -------------------------------------------------------------- synthetic
def test_synthetic_at_origin():
    ts = generate_synthetic(SyntheticSpec(alpha=300, beta=0, noise_sigma=0, length=50))
    assert ts.values[0, 0] == 3.0


def test_synthetic_noiseless_is_seed_free():
    spec = SyntheticSpec(noise_sigma=0.0)
    assert np.array_equal(generate_synthetic(spec, 1).values, generate_synthetic(spec, 99).values)


def test_synthetic_default_series():
    spec = SyntheticSpec()
    assert (spec.alpha, spec.beta, spec.noise_sigma, spec.length) == (300, 3, 0.1, 2000)
    t = spec.grid()
    clean = np.cos(300 * t) + np.cos(150 * t) + np.cos(75 * t) + 3 * t
    resid = generate_synthetic(spec, 0).values[:, 0] - clean
    assert abs(resid.std() - 0.1) < 0.01


def test_period_steps():
    spec = SyntheticSpec()
    assert spec.slowest_period_steps() == pytest.approx(4 * spec.dominant_period_steps())
    assert spec.dominant_period_steps() == pytest.approx(2 * np.pi / 300 * 1999)


# ------------------------------------------------------------------ split
@pytest.mark.parametrize(
    "T,spec,lengths",
    [(1000, SplitSpec(0.6, 0.2, 0.2), (600, 200, 200)), (10, SplitSpec(0.7, 0.1, 0.2), (7, 1, 2))],
)
def test_split_lengths(T, spec, lengths):
    ts = TimeSeries(np.arange(T, dtype=float)[:, None], ["x"])
    parts = split(ts, spec)
    assert tuple(p.length for p in parts) == lengths
    assert np.array_equal(np.concatenate([p.values for p in parts]), ts.values)


def test_split_all_train():
    ts = TimeSeries(np.zeros((10, 1)), ["x"])
    tr, va, te = split(ts, SplitSpec(1.0, 0.0, 0.0))
    assert tr.length == 10 and va is None and te is None


def test_split_too_short_for_window():
    with pytest.raises(ConfigError):
        split(TimeSeries(np.zeros((10, 1)), ["x"]), SplitSpec(0.7, 0.1, 0.2), min_len=2)


def test_split_ratios_must_sum_to_one():
    with pytest.raises(ConfigError):
        SplitSpec(0.5, 0.1, 0.1)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5000), st.sampled_from([SplitSpec(0.7, 0.1, 0.2), SplitSpec(0.6, 0.2, 0.2)]))
def test_split_partitions_every_step(T, spec):
    b1, b2 = spec.boundaries(T)
    assert 0 <= b1 <= b2 <= T
    assert b1 == int(np.floor(spec.train * T + 1e-9))


# ---------------------------------------------------------------- windows
def test_window_counts():
    v = np.arange(5.0)
    assert len(make_windows(v, 3)) == 3
    wb = make_windows(v, 3, horizon=2)
    assert len(wb) == 1
    assert wb.targets[0, :, 0].tolist() == [3.0, 4.0]


def test_window_tiling_with_stride_equal_length():
    v = np.arange(12.0)
    wb = make_windows(v, 4, stride=4)
    assert np.array_equal(wb.inputs.reshape(-1), v)


def test_window_too_long():
    with pytest.raises(ConfigError):
        make_windows(np.arange(5.0), 6)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(1, 20), st.integers(1, 7), st.integers(0, 5))
def test_window_count_formula(T, L, stride, k):
    n = count_windows(T, L, stride, k)
    assert n == (max(0, (T - L - k) // stride + 1) if L + k <= T else 0)
    if n:
        wb = make_windows(np.arange(float(T)), L, stride, k or None)
        assert len(wb) == n
        assert wb.inputs[-1, 0, 0] == (n - 1) * stride


def test_iter_batches_cover_once():
    idx = np.concatenate(list(iter_batches(10, 3, np.random.default_rng(0))))
    assert sorted(idx.tolist()) == list(range(10))


# ---------------------------------------------------------- normalisation
def test_constant_channel_passthrough():
    v = np.column_stack([np.full(10, 4.0), np.arange(10.0)])
    with pytest.warns(UserWarning):
        norm = Normalizer.fit(v)
    assert np.array_equal(norm.transform(v)[:, 0], v[:, 0])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (20, 3), elements=st.floats(-1e3, 1e3)))
def test_normalize_round_trip(v):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        norm = Normalizer.fit(v)
    assert np.allclose(norm.inverse(norm.transform(v)), v, atol=1e-9, rtol=0)


def test_normalizer_uses_train_only():
    v = np.concatenate([np.random.default_rng(0).normal(size=70), np.random.default_rng(1).normal(50, 1, size=30)])
    data = prepare(TimeSeries(v[:, None], ["x"]), SplitSpec(0.7, 0.1, 0.2))
    assert abs(data.normalizer.mean[0] - v[:70].mean()) < 1e-12
    assert data.test.mean() > 10


# ------------------------------------------------------------ augmentation
def test_augment_identities():
    x = np.random.default_rng(0).normal(size=(4, 10, 2))
    rng = np.random.default_rng(1)
    assert np.array_equal(augment(x, "scaling", rng, {"scale_low": 1, "scale_high": 1}), x)
    assert np.array_equal(augment(x, "jittering", rng, {"jitter": 0}), x)


def test_shift_is_constant_per_window():
    x = np.random.default_rng(0).normal(size=(4, 10, 2))
    d = augment(x, "shifting", np.random.default_rng(1)) - x
    assert np.allclose(d, d[:, :1, :])


def test_augment_unknown_kind():
    with pytest.raises(ParameterError):
        augment(np.zeros((1, 2, 1)), "warp", np.random.default_rng(0))


# ------------------------------------------------------------- subsample
def test_subsample_short_series_unchanged():
    ts = TimeSeries(np.zeros((500, 1)), ["x"])
    assert equidistant_subsample(ts) is ts


def test_subsample_keeps_endpoints():
    v = np.arange(2048.0)
    out = equidistant_subsample(v, 1024)
    assert out.shape[0] == 1024 and out[0] == 0 and out[-1] == 2047


def test_subsample_of_ramp_is_ramp():
    out = equidistant_subsample(np.arange(4097.0), 1025)
    assert np.allclose(np.diff(out), 4.0)
