import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import jensenshannon
from scipy.stats import entropy
from sklearn.base import clone

from kmsig.detector import (DeltaScoreSeries, KMDeltaScorer, NormalizedKM, WindowConfig,
                            delta_scores, divergence, error_sequence, normalize_two_step,
                            run_stream, score_window)
from kmsig.frames import Channel, TimeSeriesFrame, sample_times
from kmsig.gridsim import GridSimulator, build_network
from kmsig.koopman import KoopmanDMD

from conftest import toy_network


def test_error_sequence_examples():
    A = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(error_sequence(A, A), np.zeros((2, 3)))
    np.testing.assert_array_equal(error_sequence(A + 1, A), np.ones((2, 3)))
    with pytest.raises(ValueError, match="shape"):
        error_sequence(A, A[:, :2])


def test_normalize_all_ones():
    nkm = normalize_two_step(np.ones((2, 3)))
    np.testing.assert_allclose(nkm.rows, np.full((2, 3), 1 / 3))
    np.testing.assert_allclose(nkm.centroid, np.full(3, 1 / 3))


def test_normalize_zero_row_becomes_uniform():
    V = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    nkm = normalize_two_step(V)
    np.testing.assert_allclose(nkm.rows[1], np.full(3, 1 / 3))


def test_normalize_zero_column_becomes_uniform():
    V = np.array([[1.0, 0.0], [3.0, 0.0]])
    nkm = normalize_two_step(V)
    # step 1 gives [[.25, .5], [.75, .5]]
    np.testing.assert_allclose(nkm.rows, [[1 / 3, 2 / 3], [0.6, 0.4]])


def test_normalize_identity_hand_evaluated():
    nkm = normalize_two_step(np.eye(2))
    np.testing.assert_array_equal(nkm.rows, np.eye(2))
    np.testing.assert_array_equal(nkm.centroid, [0.5, 0.5])


def test_normalize_rejects_negative():
    with pytest.raises(ValueError):
        normalize_two_step(np.array([[1.0, -1.0]]))


def test_js_hand_value():
    d = divergence([1.0, 0.0], [0.5, 0.5], "js")
    assert d == pytest.approx(0.75 * math.log(4 / 3), abs=1e-15)
    assert d == pytest.approx(0.21576155433883565, abs=1e-15)
    assert d == pytest.approx(jensenshannon([1.0, 0.0], [0.5, 0.5]) ** 2, abs=1e-12)


def test_kl_matches_scipy_entropy():
    a = np.array([0.2, 0.5, 0.3])
    b = np.array([0.4, 0.4, 0.2])
    assert divergence(a, b, "kl") == pytest.approx(entropy(a, b), abs=1e-10)


def test_kl_smoothing_handles_zero_in_centroid():
    d = divergence([0.5, 0.5], [1.0, 0.0], "kl", epsilon=1e-12)
    assert np.isfinite(d) and d > 10


def test_identical_pmfs_have_zero_divergence():
    p = np.array([0.1, 0.6, 0.3])
    assert divergence(p, p, "js") == 0.0
    assert divergence(p, p, "kl") == pytest.approx(0.0, abs=1e-12)


def test_divergence_rejects_non_pmf():
    with pytest.raises(ValueError):
        divergence([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError, match="kind"):
        divergence([0.5, 0.5], [0.5, 0.5], "hellinger")


def test_delta_scores_two_opposite_rows():
    nkm = normalize_two_step(np.eye(2))
    d, s = delta_scores(nkm, "js", tau=1.0)
    expected = 0.75 * math.log(4 / 3)
    np.testing.assert_allclose(d, [expected, expected], atol=1e-15)
    assert s[0] == s[1] < 1


def test_identical_rows_score_one():
    nkm = normalize_two_step(np.tile([1.0, 2.0, 3.0], (4, 1)))
    d, s = delta_scores(nkm, "kl")
    np.testing.assert_allclose(d, 0.0, atol=1e-12)
    np.testing.assert_allclose(s, 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", ["kl", "js"])
def test_single_perturbed_row_is_strict_minimum(kind):
    V = np.tile([1.0, 1.0, 1.0, 1.0], (6, 1))
    V[4] = [4.0, 1.0, 0.5, 0.1]
    _, s = delta_scores(normalize_two_step(V), kind)
    assert np.argmin(s) == 4
    assert np.sum(s == s.min()) == 1


def test_window_count_default():
    assert WindowConfig().n_windows(900) == 125
    assert WindowConfig().anchors(900)[0] == 240
    assert WindowConfig().anchors(900)[-1] == 860


@pytest.mark.parametrize("kwargs", [
    {"learning_len": 1}, {"prediction_len": 1}, {"stride": 0}, {"tau": 0.0},
    {"epsilon": 0.0}, {"divergence": "tv"}, {"backend": "pca"},
])
def test_window_config_invariants(kwargs):
    with pytest.raises(ValueError):
        WindowConfig(**kwargs)


def test_zero_error_window_scores_one():
    learn = np.tile(np.array([[1.0], [2.0], [3.0]]), (1, 30))
    observed = np.tile(np.array([[1.0], [2.0], [3.0]]), (1, 10))
    d, s = score_window(learn, observed, WindowConfig(learning_len=30, prediction_len=10))
    np.testing.assert_array_equal(d, 0.0)
    np.testing.assert_array_equal(s, 1.0)


def test_clean_steady_state_scores_near_one():
    sim = GridSimulator(build_network())
    frames = sim.simulate(duration=20.0)
    series = run_stream(frames, WindowConfig())
    assert series.n_windows == WindowConfig().n_windows(400)
    assert np.nanmin(series.scores) >= 0.9


def test_run_stream_window_times_and_shapes():
    frames = GridSimulator(toy_network()).simulate(duration=3.0)
    cfg = WindowConfig(learning_len=20, prediction_len=10, stride=5)
    series = run_stream(frames[Channel.VOLTAGE_ANGLE], cfg)
    assert series.scores.shape == (cfg.n_windows(60), 2)
    np.testing.assert_allclose(series.window_times, np.array(cfg.anchors(60)) * 0.05)


def test_run_stream_rejects_short_frames():
    frame = TimeSeriesFrame(["a"], "voltage_angle", sample_times(10, 0.05), np.ones((1, 10)))
    with pytest.raises(ValueError, match="learning_len"):
        run_stream(frame, WindowConfig())


def test_stacked_channels():
    frames = GridSimulator(toy_network()).simulate(duration=3.0)
    cfg = WindowConfig(learning_len=20, prediction_len=10, stride=10)
    series = run_stream(frames, cfg, channel=[Channel.VOLTAGE_ANGLE, Channel.FREQUENCY])
    assert series.sensor_ids == ("voltage_angle:bus1", "voltage_angle:bus2",
                                 "frequency:bus1", "frequency:bus2")


def test_attack_onset_error_concentrates_on_target(step_run):
    attacked = step_run.attacked[Channel.VOLTAGE_ANGLE]
    clean = step_run.clean[Channel.VOLTAGE_ANGLE]
    target = attacked.sensor_ids.index("bus30")
    # prediction span 19-21 s straddles the onset at 20 s
    s = int(round(19.0 / 0.05))

    def window_error(frame):
        learn, observed = frame.values[:, s - 240:s], frame.values[:, s:s + 40]
        return error_sequence(observed, KoopmanDMD().fit(learn.T).forecast(40).T)

    shift = np.linalg.norm(window_error(attacked) - window_error(clean), axis=1)
    assert np.argmax(shift) == target
    assert np.max(np.delete(shift, target)) < 0.01 * shift[target]


def test_series_outputs(tmp_path):
    series = DeltaScoreSeries(
        window_times=np.array([12.0, 12.25]),
        scores=np.array([[1.0, 0.5], [np.nan, np.nan]]),
        distances=np.array([[0.0, np.log(2) / 5], [np.nan, np.nan]]),
        sensor_ids=("a", "b"),
    )
    np.testing.assert_array_equal(series.argmin_sensors(), [1, -1])
    series.write_csv(tmp_path / "s.csv", tmp_path / "d.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "window_time,a,b"
    assert lines[1] == "12,1,0.5"
    series.write_summary(tmp_path / "summary.json")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["windows"][0]["argmin_sensor"] == "b"
    assert summary["windows"][0]["margin"] == pytest.approx(0.5)
    assert summary["windows"][1]["flagged"] is True


def test_scorer_transform_matches_run_stream():
    frames = GridSimulator(toy_network()).simulate(
        events=[], duration=4.0, noise_std={"voltage_angle": 1e-3}, seed=3)
    frame = frames[Channel.VOLTAGE_ANGLE]
    scorer = KMDeltaScorer(learning_len=30, prediction_len=10, stride=5)
    scores = scorer.fit(frame.values.T).transform(frame.values.T)
    ref = run_stream(frame, scorer.window_config())
    np.testing.assert_array_equal(scores, ref.scores)
    assert scorer.n_features_in_ == 2
    assert clone(scorer).get_params() == scorer.get_params()


def test_scorer_validates_input():
    with pytest.raises(ValueError):
        KMDeltaScorer().fit(np.ones((10, 2)))


def test_coherent_option_changes_km_rows():
    rng = np.random.default_rng(5)
    t = np.arange(80) * 0.05
    X = np.vstack([np.sin(2 * t + k) * np.exp(-0.1 * k * t) for k in range(4)])
    X = X + 1e-3 * rng.standard_normal(X.shape)
    a = score_window(X[:, :60], X[:, 60:], WindowConfig(learning_len=60, prediction_len=20))
    b = score_window(X[:, :60], X[:, 60:],
                     WindowConfig(learning_len=60, prediction_len=20, coherent=True))
    assert not np.allclose(a[0], b[0])


# -- properties ---------------------------------------------------------------

nonneg_matrices = arrays(
    np.float64, st.tuples(st.integers(1, 8), st.integers(2, 12)),
    elements=st.floats(0.0, 1e3, allow_nan=False, allow_infinity=False),
)


def pmfs(size):
    return arrays(np.float64, size, elements=st.floats(0.0, 1.0)).filter(
        lambda v: v.sum() > 1e-6).map(lambda v: v / v.sum())


@settings(max_examples=150, deadline=None)
@given(nonneg_matrices)
def test_normalized_rows_are_pmfs(V):
    nkm = normalize_two_step(V)
    assert np.all(nkm.rows >= 0)
    np.testing.assert_allclose(nkm.rows.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(nkm.centroid, nkm.rows.mean(axis=0), atol=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 10).flatmap(lambda w: st.tuples(pmfs(w), pmfs(w))))
def test_js_symmetric_and_bounded(pair):
    a, b = pair
    ab = divergence(a, b, "js")
    assert ab == pytest.approx(divergence(b, a, "js"), abs=1e-12)
    assert 0.0 <= ab <= math.log(2) + 1e-12


@settings(max_examples=100, deadline=None)
@given(nonneg_matrices, st.floats(0.1, 20.0), st.sampled_from(["kl", "js"]))
def test_scores_in_unit_interval_and_exp_identity(V, tau, kind):
    d, s = delta_scores(normalize_two_step(V), kind, tau)
    assert np.all(d >= 0)
    assert np.all((s > 0) & (s <= 1))
    np.testing.assert_allclose(s, np.exp(-tau * d), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(nonneg_matrices, st.floats(0.1, 5.0), st.floats(1.01, 3.0))
def test_scores_decrease_in_tau(V, tau, factor):
    nkm = normalize_two_step(V)
    d, lo = delta_scores(nkm, "kl", tau)
    _, hi = delta_scores(nkm, "kl", tau * factor)
    positive = d > 1e-9
    assert np.all(hi[positive] < lo[positive])


@settings(max_examples=60, deadline=None)
@given(nonneg_matrices, st.randoms(use_true_random=False))
def test_permutation_equivariance(V, rnd):
    perm = list(range(V.shape[0]))
    rnd.shuffle(perm)
    d, s = delta_scores(normalize_two_step(V), "kl")
    dp, sp = delta_scores(normalize_two_step(V[perm]), "kl")
    np.testing.assert_allclose(sp, s[perm], atol=1e-12)


def test_normalized_km_type():
    nkm = normalize_two_step(np.ones((3, 4)))
    assert isinstance(nkm, NormalizedKM)
