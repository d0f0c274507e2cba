import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvstream.dtd import DtdConfig, FrameFeatures, mask_frame, prune_stream, score_frame
from kvstream.harness import StreamSpec, gen_stream

# P(cos > 0.5) for independent uniform directions in 16-D:
# 0.5 * (1 - I_{0.25}(1/2, 15/2)), evaluated once with scipy.special.betainc.
RANDOM_DROP_RATE_D16 = 0.02048447797791808


def frame(t, X):
    return FrameFeatures(t, np.asarray(X, dtype=float))


def test_score_identical_orthogonal_antipodal():
    X = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_allclose(score_frame(frame(2, X), frame(1, X)), 1.0, atol=1e-12)
    np.testing.assert_allclose(score_frame(frame(2, -X), frame(1, X)), -1.0, atol=1e-12)
    A = np.array([[1.0, 0.0], [0.0, 2.0]])
    B = np.array([[0.0, 3.0], [1.0, 0.0]])
    np.testing.assert_array_equal(score_frame(frame(2, A), frame(1, B)), [0.0, 0.0])


def test_score_rejects_mismatch():
    with pytest.raises(ValueError):
        score_frame(frame(2, np.ones((3, 2))), frame(1, np.ones((2, 2))))
    with pytest.raises(ValueError):
        score_frame(frame(3, np.ones((3, 2))), frame(1, np.ones((3, 2))))


@pytest.mark.parametrize(
    "scores,expected",
    [
        ((0.9, 0.3, 0.5), [False, True, False]),
        ((1.0, 1.0, 1.0), [True, False, False]),
        ((0.2, 0.2), [True, True]),
        ((0.9, 0.7, 0.8), [False, True, False]),
    ],
)
def test_mask_examples(scores, expected):
    assert mask_frame(scores, DtdConfig(0.5), 2).bits.tolist() == expected


@pytest.mark.parametrize("T,P", [(1, 5), (4, 3), (30, 7)])
def test_static_stream_keeps_one_per_frame(T, P):
    X = np.random.default_rng(T).standard_normal((P, 6))
    frames = [frame(t + 1, X) for t in range(T)]
    pruned, stats = prune_stream(frames, DtdConfig(0.5))
    assert stats.kept_tokens == P + T - 1
    assert stats.drop_percent == pytest.approx(100 * (1 - (P + T - 1) / (T * P)))
    assert len(pruned[0]) == P
    assert all(len(f) == 1 and f.patch_indices[0] == 0 for f in pruned[1:])


def test_empty_stream_rejected():
    with pytest.raises(ValueError):
        prune_stream([], DtdConfig())


def test_compares_against_raw_previous_frame():
    # patch 0 drifts slowly: every step is similar to the previous raw frame,
    # although frame 3 is far from frame 1 (the last kept version)
    a = np.array([1.0, 0.0])
    b = np.array([np.cos(0.6), np.sin(0.6)])
    c = np.array([np.cos(1.2), np.sin(1.2)])
    other = [[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]
    frames = [frame(1, [a, other[0]]), frame(2, [b, other[1]]), frame(3, [c, other[2]])]
    pruned, _ = prune_stream(frames, DtdConfig(0.7))
    assert pruned[2].patch_indices.tolist() == [1]


def test_random_frames_rarely_dropped():
    drops = []
    for seed in range(100):
        frames = gen_stream(StreamSpec(frames=20, patches=32, dim=16, rho=0.0, seed=seed))
        _, stats = prune_stream(frames, DtdConfig(0.5))
        drops.append(stats.drop_percent)
        assert stats.drop_percent < 5.0
    scored_fraction = 19 / 20
    assert np.mean(drops) == pytest.approx(100 * RANDOM_DROP_RATE_D16 * scored_fraction, abs=0.3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.integers(-20, 20))
def test_monotone_in_tau_deterministic_and_scale_invariant(seed, rho, exponent):
    # power-of-two scales are exact, so cosine scores keep their exact bits
    scale = 2.0**exponent
    frames = gen_stream(StreamSpec(frames=8, patches=6, dim=8, rho=rho, seed=seed))
    drops = [prune_stream(frames, DtdConfig(t))[1].drop_percent for t in (0.25, 0.5, 0.75)]
    assert drops[0] >= drops[1] >= drops[2]
    a, _ = prune_stream(frames, DtdConfig(0.5))
    b, _ = prune_stream(frames, DtdConfig(0.5))
    scaled = [FrameFeatures(f.frame_index, f.features * scale) for f in frames]
    c, _ = prune_stream(scaled, DtdConfig(0.5))
    for x, y, z in zip(a, b, c):
        assert x.patch_indices.tolist() == y.patch_indices.tolist() == z.patch_indices.tolist()
        np.testing.assert_array_equal(x.features, y.features)
        assert len(x) >= 1
