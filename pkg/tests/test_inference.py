import numpy as np
import pytest

from otrdet import inference as I
from otrdet import model as M
from otrdet import numkernel as nk
from otrdet.records import FeatureSequence

SMALL = M.ModelConfig(feature_dim=6, model_dim=8, state_dim=4, conv_kernel=3, num_layers=2)


def video(T, seed=0, vid="v", dim=6):
    return FeatureSequence(vid, np.random.default_rng(seed).normal(size=(T, dim)).astype(np.float32), 4.0)


@pytest.fixture(scope="module")
def params():
    return M.init_model(SMALL, 0)


def test_streaming_matches_sequence(params):
    fs = video(150)
    stream = I.infer_streaming(params, fs).probs
    seq = nk.softmax(M.forward_sequence(params, fs.features)).data
    assert np.abs(stream - seq).max() < 1e-4
    np.testing.assert_allclose(stream.sum(axis=1), 1.0, atol=1e-5)


def test_single_frame_video(params):
    assert I.infer_streaming(params, video(1)).probs.shape == (1, 3)


def test_streaming_many_equals_one_by_one(params):
    seqs = [video(30, 1, "a"), video(45, 2, "b"), video(30, 3, "c")]
    many = I.infer_streaming_many(params, seqs)
    for fs, fp in zip(seqs, many):
        assert fp.video_id == fs.video_id
        np.testing.assert_array_equal(fp.probs, I.infer_streaming(params, fs).probs)


def test_dimension_mismatch(params):
    with pytest.raises(nk.DimensionError):
        I.infer_streaming(params, video(5, dim=7))


@pytest.mark.parametrize("window,stride", [(100, 1), (57, 3), (10**6, 10**6)])
def test_window_covering_video_equals_streaming(params, window, stride):
    fs = video(57)
    np.testing.assert_array_equal(I.infer_sliding(params, fs, window, stride).probs,
                                  I.infer_streaming(params, fs).probs)


def test_reset_discontinuity_at_window_starts(params):
    fs = video(80, 4)
    stream = I.infer_streaming(params, fs).probs
    slide = I.infer_sliding(params, fs, 20, 20).probs
    np.testing.assert_array_equal(slide[:20], stream[:20])
    for start in (20, 40, 60):
        assert np.abs(slide[start] - stream[start]).max() > 1e-4
        fresh = I.infer_streaming(params, FeatureSequence("w", fs.features[start:start + 20])).probs
        np.testing.assert_array_equal(slide[start:start + 20], fresh)


def test_overlapping_windows_take_most_context(params):
    fs = video(30, 5)
    slide = I.infer_sliding(params, fs, 20, 5).probs
    spans = I.sliding_windows(30, 20, 5)
    assert spans == [(0, 20), (5, 25), (10, 30)]
    owner = I.owner_window(spans, 30)
    assert owner.tolist() == [0] * 20 + [1] * 5 + [2] * 5
    second = I.infer_streaming(params, FeatureSequence("w", fs.features[5:25])).probs
    np.testing.assert_array_equal(slide[20:25], second[15:20])


def test_window_spans():
    assert I.sliding_windows(45, 20, 20) == [(0, 20), (20, 40), (40, 45)]
    assert I.sliding_windows(5, 20, 7) == [(0, 5)]
    with pytest.raises(ValueError):
        I.sliding_windows(10, 0, 1)


@pytest.mark.parametrize("T,window,stride", [(100, 20, 20), (100, 20, 5), (37, 10, 3), (10, 20, 1)])
def test_frame_step_count(T, window, stride):
    spans = I.sliding_windows(T, window, stride)
    assert I.frame_steps(T, window, stride) == sum(b - a for a, b in spans)
    if stride < window and T > window:
        assert I.frame_steps(T, window, stride) > T
    if stride == window or T <= window:
        assert I.frame_steps(T, window, stride) == T


def test_benchmark_report(params):
    rep = I.benchmark(params, video(60), "streaming", repeats=3)
    d = rep.to_dict()
    for key in ("video_time_s", "frame_mean_s", "frame_median_s", "frame_p99_s", "peak_state_bytes"):
        assert np.isfinite(d[key]) and d[key] > 0
    assert rep.frame_steps == 60 and len(rep.video_times_s) == 3
    assert "step_times_s" not in d
    slide = I.benchmark(params, video(60), "sliding", repeats=3, window=20, stride=5)
    assert slide.frame_steps == I.frame_steps(60, 20, 5)
    with pytest.raises(ValueError):
        I.benchmark(params, video(60), repeats=2)
    with pytest.raises(ValueError):
        I.benchmark(params, video(60), mode="batch")


def test_sliding_overlap_slower_than_streaming(params):
    fs = video(200)
    stream = I.benchmark(params, fs, "streaming", repeats=3)
    slide = I.benchmark(params, fs, "sliding", repeats=3, window=20, stride=2)
    assert slide.video_time_s > stream.video_time_s


def test_state_bytes_do_not_grow(params):
    a = I.benchmark(params, video(50), repeats=3).peak_state_bytes
    b = I.benchmark(params, video(2000), repeats=3).peak_state_bytes
    assert a == b == M.reset_state(SMALL).nbytes()
