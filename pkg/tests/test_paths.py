import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicSpline

from nqde.paths import (
    PathDomainWarning,
    TimeSeries,
    eval_derivative,
    eval_path,
    fit_natural_cubic,
    generate_spirals,
    read_dataset_csv,
    stack_paths,
    write_dataset_csv,
)


def random_series(rng, T=12, q=3):
    ts = np.cumsum(rng.uniform(0.05, 1.0, T))
    vals = rng.standard_normal((T, q))
    vals[:, 0] = ts
    return TimeSeries(ts, vals)


# ------------------------------------------------------------------ spirals


def test_spirals_start_point():
    data = generate_spirals(4, 50, sigma=0.0)
    for s in data.series:
        np.testing.assert_allclose(s.values[0, 1:], [0.2, 0.0], atol=1e-15)


def test_spirals_mirror_images():
    data = generate_spirals(2, 60, sigma=0.0)
    a, b = data.series[0].values, data.series[1].values
    assert data.labels.tolist() == [0, 1]
    np.testing.assert_array_equal(a[:, 1], b[:, 1])
    np.testing.assert_array_equal(a[:, 2], -b[:, 2])


def test_spirals_endpoint_and_time_channel():
    s = generate_spirals(2, 100, sigma=0.0).series[0]
    np.testing.assert_allclose(s.values[-1, 1:], [1.0, 0.0], atol=1e-12)
    np.testing.assert_array_equal(s.values[:, 0], s.timestamps)
    assert s.timestamps[0] == 0.0 and s.timestamps[-1] == 1.0


def test_spirals_deterministic():
    a, b = generate_spirals(128, 100, 0.02, seed=0), generate_spirals(128, 100, 0.02, seed=0)
    assert np.array_equal(a.values(), b.values())
    assert np.array_equal(a.labels, b.labels)
    c = generate_spirals(128, 100, 0.02, seed=1)
    assert not np.array_equal(a.values(), c.values())


def test_spirals_balanced():
    data = generate_spirals(128)
    assert data.values().shape == (128, 100, 3)
    assert int(data.labels.sum()) == 64


def test_noise_free_independent_of_seed():
    a, b = generate_spirals(6, 20, 0.0, seed=3), generate_spirals(6, 20, 0.0, seed=99)
    assert np.array_equal(a.values(), b.values())


@pytest.mark.parametrize("kwargs", [dict(n=3), dict(n=0), dict(steps=1), dict(sigma=-0.1)])
def test_spirals_invalid(kwargs):
    with pytest.raises(ValueError):
        generate_spirals(**kwargs)


def test_chirality_witness():
    data = generate_spirals(8, 100, sigma=0.0)
    for s, label in zip(data.series, data.labels):
        d = np.diff(s.values[:, 1:], axis=0)
        cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
        expected = 1.0 if label == 0 else -1.0
        assert np.all(np.sign(cross) == expected)


def test_timeseries_validation():
    with pytest.raises(ValueError):
        TimeSeries([0.0, 0.0, 1.0], np.zeros((3, 3)))
    with pytest.raises(ValueError):
        TimeSeries([0.0], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        TimeSeries([0.0, 1.0], np.zeros((3, 3)))


def test_csv_round_trip(tmp_path):
    data = generate_spirals(6, 25, 0.02, seed=5)
    out = tmp_path / "d.csv"
    write_dataset_csv(data, out)
    assert out.read_text().splitlines()[0] == "sample_id,label,t,x,y"
    back = read_dataset_csv(out)
    assert np.array_equal(back.values(), data.values())
    assert np.array_equal(back.labels, data.labels)


def test_csv_bad_header(tmp_path):
    out = tmp_path / "bad.csv"
    out.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        read_dataset_csv(out)


# ------------------------------------------------------------------ splines


def test_spline_reproduces_line():
    ts = np.linspace(0, 2, 7)
    vals = np.stack([ts, 3 * ts - 1, -0.5 * ts + 2], axis=1)
    path = fit_natural_cubic(TimeSeries(ts, vals))
    for t in np.linspace(0, 2, 31):
        np.testing.assert_allclose(eval_path(path, t), [t, 3 * t - 1, -0.5 * t + 2], atol=1e-13)
        np.testing.assert_allclose(eval_derivative(path, t), [1.0, 3.0, -0.5], atol=1e-12)


def test_two_point_spline_is_linear():
    path = fit_natural_cubic(TimeSeries([0.0, 1.0], [[0.0, 1.0, 4.0], [1.0, 3.0, 0.0]]))
    np.testing.assert_allclose(eval_path(path, 0.5), [0.5, 2.0, 2.0], atol=1e-15)


def test_spline_matches_scipy_natural(rng):
    s = random_series(rng, T=15)
    path = fit_natural_cubic(s)
    ref = CubicSpline(s.timestamps, s.values, bc_type="natural")
    for t in np.linspace(s.timestamps[0], s.timestamps[-1], 97):
        np.testing.assert_allclose(path.evaluate(t), ref(t), atol=1e-12)
        np.testing.assert_allclose(path.derivative(t), ref(t, 1), atol=1e-10)


def test_spline_boundary_and_continuity(rng):
    s = random_series(rng, T=20)
    path = fit_natural_cubic(s)
    assert np.abs(path.second_derivative(path.t0)).max() <= 1e-9
    # second derivative of the final interval at its right end
    h = s.timestamps[-1] - s.timestamps[-2]
    end = 2 * path.c[-1] + 6 * h * path.d[-1]
    assert np.abs(end).max() <= 1e-9
    for i in range(1, len(s.timestamps) - 1):
        h = s.timestamps[i] - s.timestamps[i - 1]
        left = path.b[i - 1] + h * (2 * path.c[i - 1] + 3 * h * path.d[i - 1])
        right = path.b[i]
        assert np.abs(left - right).max() <= 1e-9


def test_time_channel_derivative_is_one():
    path = fit_natural_cubic(generate_spirals(2, 100).series[0])
    for t in np.linspace(0, 1, 23):
        assert path.derivative(t)[0] == pytest.approx(1.0, abs=1e-10)


def test_clamped_evaluation_warns():
    path = fit_natural_cubic(generate_spirals(2, 10, sigma=0.0).series[0])
    with pytest.warns(PathDomainWarning):
        v = path.evaluate(1.5)
    np.testing.assert_allclose(v, path.evaluate(1.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        path.evaluate(0.0)
        path.evaluate(1.0)


def test_fit_rejects_mismatched_timestamps():
    a = TimeSeries([0.0, 1.0], np.zeros((2, 3)))
    b = TimeSeries([0.0, 2.0], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        fit_natural_cubic([a, b])


def test_batched_fit_matches_single(rng):
    data = generate_spirals(4, 30, 0.05, seed=2)
    batch = fit_natural_cubic(data.series)
    stacked = stack_paths([fit_natural_cubic(s) for s in data.series])
    for t in (0.0, 0.137, 0.5, 0.999):
        np.testing.assert_allclose(batch.evaluate(t), stacked.evaluate(t), atol=1e-14)
        assert batch.derivative(t).shape == (4, 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 25))
def test_interpolates_knots_property(seed, T):
    s = random_series(np.random.default_rng(seed), T=T)
    path = fit_natural_cubic(s)
    for t, v in zip(s.timestamps, s.values):
        assert np.abs(path.evaluate(t) - v).max() <= 1e-12 * max(1.0, np.abs(v).max())
