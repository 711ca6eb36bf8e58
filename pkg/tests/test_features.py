import statistics

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from engae import features as F
from engae.errors import InputError


def series_from(columns=None, T=300, fps=30.0, **kw):
    v = np.zeros((T, 11))
    for name, col in (columns or {}).items():
        v[:, F.FEATURE_COLUMNS.index(name)] = col
    return F.FrameSeries(v, fps, **kw)


def brute_peaks(x, threshold):
    return sum(1 for i in range(1, len(x) - 1)
               if x[i] > threshold and x[i] > x[i - 1] and x[i] >= x[i + 1])


# -- schema -------------------------------------------------------------------------

def test_column_counts():
    assert len(F.FEATURE_COLUMNS) == 11
    assert len(F.SEGMENT_COLUMNS) == 37 and len(set(F.SEGMENT_COLUMNS)) == 37
    assert len(F.feature_names("behavioral", "segment")) == 33
    assert F.FRAME_CSV_COLUMNS == ("frame", "confidence", "valence", "arousal", "au45", "gaze_x", "gaze_y",
                                   "head_x", "head_y", "head_z", "pitch", "yaw", "roll")


def test_select_features_widths():
    s = series_from({"valence": 0.5, "roll": 2.0}, T=10)
    full, beh = F.select_features(s, "behavioral+affect"), F.select_features(s, "behavioral")
    assert full.shape == (10, 11) and beh.shape == (10, 9)
    assert np.array_equal(beh, full[:, 2:])
    assert full[0, 0] == 0.5 and beh[0, -1] == 2.0
    with pytest.raises(InputError):
        F.select_features(s, "affect")


def test_frame_series_validation():
    with pytest.raises(InputError):
        F.FrameSeries(np.zeros((5, 10)))
    with pytest.raises(InputError):
        F.FrameSeries(np.zeros((5, 11)), fps=0)
    with pytest.raises(InputError):
        F.FrameSeries(np.zeros((3, 11)), frames=np.array([0, 2, 1]))


# -- velocity / acceleration ----------------------------------------------------------------

def test_velocity_examples():
    assert F.velocity([0, 1, 3, 6]).tolist() == [1, 2, 3]
    assert F.acceleration([0, 1, 3, 6]).tolist() == [1, 1]
    ramp = 0.2 * np.arange(50)
    np.testing.assert_allclose(F.velocity(ramp, 30), 6.0, rtol=1e-12)
    np.testing.assert_allclose(F.acceleration(ramp, 30), 0.0, atol=1e-9)
    assert not F.velocity(np.full(10, 4.2), 30).any()
    assert not F.acceleration(np.full(10, 4.2), 30).any()
    with pytest.raises(InputError):
        F.velocity([1.0, 2.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=30), st.floats(0.5, 60))
def test_velocity_lengths_and_definition(xs, fps):
    v, a = F.velocity(xs, fps), F.acceleration(xs, fps)
    assert len(v) == len(xs) - 1 and len(a) == len(xs) - 2
    np.testing.assert_allclose(v, [(xs[i + 1] - xs[i]) * fps for i in range(len(xs) - 1)], rtol=1e-12)


# -- blink rate ---------------------------------------------------------------------------

def test_blink_examples():
    assert F.blink_rate(np.zeros(300)) == 0.0
    x = np.zeros(300)
    for c in (50, 150, 250):
        x[c - 2:c + 3] = [0.5, 1.25, 2.0, 1.25, 0.5]
    assert F.blink_rate(x, 1.0) == pytest.approx(0.01)
    plateau = np.array([0, 0, 2, 2, 0, 0], dtype=float)
    assert F.blink_rate(plateau, 1.0) * len(plateau) == 1
    with pytest.raises(InputError):
        F.blink_rate([])


@settings(max_examples=100)
@given(st.lists(st.floats(0, 5), min_size=3, max_size=60), st.floats(0, 5))
def test_blink_matches_brute_force(xs, threshold):
    assert F.blink_rate(xs, threshold) == brute_peaks(xs, threshold) / len(xs)


@given(st.lists(st.floats(0, 5), min_size=3, max_size=60), st.floats(0, 5), st.floats(0, 5))
def test_blink_monotone_in_threshold(xs, t1, t2):
    lo, hi = sorted((t1, t2))
    r = F.blink_rate(xs, hi)
    assert r <= F.blink_rate(xs, lo)
    assert 0 <= r <= 0.5


# -- segment features ----------------------------------------------------------------------

def test_segment_constant_series():
    consts = {name: float(i + 1) for i, name in enumerate(F.FEATURE_COLUMNS)}
    seg = F.segment_features(series_from(consts))
    named = dict(zip(F.SEGMENT_COLUMNS, seg))
    assert named["mean_valence"] == 1.0 and named["mean_arousal"] == 2.0
    others = [v for k, v in named.items() if not k.startswith("mean_")]
    assert all(v == 0 for v in others)
    assert len(F.segment_features(series_from(consts), mode="behavioral")) == 33


def test_segment_matches_direct_statistics():
    rng = np.random.default_rng(0)
    cols = {name: rng.normal(size=40) for name in F.FEATURE_COLUMNS}
    cols["valence"] = np.r_[0.2, 0.4, np.full(38, 0.4)]
    fps = 30.0
    seg = dict(zip(F.SEGMENT_COLUMNS, F.segment_features(series_from(cols, T=40, fps=fps))))
    val = list(cols["valence"])
    assert 0.2 < seg["mean_valence"] < 0.4
    assert seg["mean_valence"] == pytest.approx(statistics.fmean(val), abs=1e-12)
    assert seg["std_valence"] == pytest.approx(statistics.pstdev(val), abs=1e-12)
    for name in ("gaze_y", "head_z", "roll"):
        x = list(cols[name])
        vel = [(x[i + 1] - x[i]) * fps for i in range(len(x) - 1)]
        acc = [(vel[i + 1] - vel[i]) * fps for i in range(len(vel) - 1)]
        assert seg[f"{name}_vel_mean"] == pytest.approx(statistics.fmean(vel), rel=1e-9, abs=1e-9)
        assert seg[f"{name}_vel_std"] == pytest.approx(statistics.pstdev(vel), rel=1e-9)
        assert seg[f"{name}_acc_mean"] == pytest.approx(statistics.fmean(acc), rel=1e-9, abs=1e-9)
        assert seg[f"{name}_acc_std"] == pytest.approx(statistics.pstdev(acc), rel=1e-9)
    assert seg["blink_rate"] == brute_peaks(list(cols["au45"]), 1.0) / 40


def test_segment_reversal_flips_velocity_mean_only():
    ramp = np.arange(30.0) ** 1.5
    fwd = dict(zip(F.SEGMENT_COLUMNS, F.segment_features(series_from({"yaw": ramp}, T=30))))
    rev = dict(zip(F.SEGMENT_COLUMNS, F.segment_features(series_from({"yaw": ramp[::-1]}, T=30))))
    assert rev["yaw_vel_mean"] == pytest.approx(-fwd["yaw_vel_mean"])
    assert rev["yaw_vel_std"] == pytest.approx(fwd["yaw_vel_std"])
    assert fwd["yaw_vel_mean"] != rev["yaw_vel_mean"]


@settings(max_examples=25, deadline=None)
@given(T=st.integers(3, 80), seed=st.integers(0, 10_000), mode=st.sampled_from(F.MODES))
def test_segment_length_and_nonnegative_std(T, seed, mode):
    v = np.random.default_rng(seed).normal(size=(T, 11))
    seg = F.segment_features(F.FrameSeries(v), mode=mode)
    names = F.feature_names(mode, "segment")
    assert len(seg) == len(names)
    assert all(val >= 0 for n, val in zip(names, seg) if "std" in n)
    assert np.array_equal(seg, F.segment_features(F.FrameSeries(v), mode=mode))


def test_segment_too_short():
    with pytest.raises(InputError):
        F.segment_features(series_from(T=2))


# -- windowing ---------------------------------------------------------------------------

def test_window_examples():
    assert len(F.window(series_from(T=300))) == 1
    assert len(F.window(series_from(T=9000), 10, 0.5)) == 59
    wins = F.window(series_from({"yaw": np.arange(600.0)}, T=600), 10, 0.0)
    assert len(wins) == 2
    assert wins[0].column("yaw")[-1] == 299 and wins[1].column("yaw")[0] == 300
    with pytest.raises(InputError):
        F.window(series_from(T=299), 10, 0.5)
    with pytest.raises(InputError):
        F.window(series_from(T=300), 10, 1.0)


@given(T=st.integers(1, 2000), w=st.integers(1, 400), overlap=st.sampled_from([0.0, 0.25, 0.5, 0.75, 0.9]))
def test_window_count_matches_enumeration(T, w, overlap):
    assume(w <= T)
    got_w, s, count = F.window_params(T, 1.0, float(w), overlap)
    assert got_w == w
    starts = [i for i in range(0, T) if i % s == 0 and i + w <= T]
    assert count == len(starts)


def test_segment_matrix_shape():
    rng = np.random.default_rng(1)
    m = F.segment_matrix(F.FrameSeries(rng.normal(size=(900, 11))), "behavioral", 10, 0.5)
    assert m.shape == (5, 33)


# -- imputation ---------------------------------------------------------------------------

def test_impute_examples():
    v = np.arange(55.0).reshape(5, 11)
    s = F.FrameSeries(v, confidence=np.ones(5))
    out, n = F.impute(s, 0.5)
    assert n == 0 and np.array_equal(out.values, v)
    out, n = F.impute(F.FrameSeries(v, confidence=[1, 1, 0.1, 1, 1]), 0.5)
    assert n == 1 and np.array_equal(out.values[2], v[1])
    out, n = F.impute(F.FrameSeries(v, confidence=[0, 0.2, 1, 1, 0]), 0.5)
    assert n == 3
    assert np.array_equal(out.values[0], v[2]) and np.array_equal(out.values[1], v[2])
    assert np.array_equal(out.values[4], v[3])
    with pytest.raises(InputError):
        F.impute(F.FrameSeries(v, confidence=np.zeros(5)), 0.5)


# -- normalisation ------------------------------------------------------------------------

def test_normalizer_round_trip_and_double_application():
    rng = np.random.default_rng(2)
    data = [rng.normal(3, 2, size=(50, 4)) for _ in range(4)]
    norm = F.Normalizer.fit(data, list("abcd"))
    z = norm.transform(np.concatenate(data))
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-12)
    again = F.Normalizer.from_dict(norm.to_dict())
    assert np.array_equal(again.transform(data[0]), norm.transform(data[0]))
    sample = F.normalize(F.SequenceSample("s", data[0], "engaged"), norm)
    with pytest.raises(InputError):
        F.normalize(sample, norm)


def test_normalizer_constant_feature():
    norm = F.Normalizer.fit([np.ones((10, 2))], ["a", "b"])
    assert np.array_equal(norm.transform(np.ones((3, 2))), np.zeros((3, 2)))
