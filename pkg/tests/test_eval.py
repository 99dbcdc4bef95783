import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from psd.errors import InputError, PreconditionError, ShapeError
from psd.eval import (
    ApproxEncoder,
    BenchReport,
    ExactEncoder,
    OptimalEncoder,
    TransitionStats,
    abs_rectify,
    avg_downsample,
    avg_l1,
    bench_inference,
    calibrate_threshold,
    compare_representations,
    encode_convolutional,
    exact_lambda,
    extract_features,
    random_pair_transition_matrix,
    sign_transition_matrix,
    snr,
    snr_report,
    time_call,
    train_linear_classifier,
    zero_fraction,
)
from psd.model import Hyperparams, Predictor, init_model
from psd.solvers import Bpdn, SolveOptions, infer_approx, solve_oracle

small = st.floats(-100, 100, allow_nan=False)


class TestSnr:
    def test_identical_is_infinite(self, rng):
        c = rng.standard_normal((4, 6))
        assert snr(c, c) == np.inf
        assert snr_report(c, c).n_zero_noise == 4

    def test_zero_approximation_is_zero_db(self, rng):
        c = rng.standard_normal((4, 6))
        assert snr(c, np.zeros_like(c)) == pytest.approx(0.0, abs=1e-12)

    def test_hand_example(self):
        assert snr([[1.0, -1.0]], [[0.9, -0.9]]) == pytest.approx(20.0, abs=1e-9)

    def test_misaligned(self):
        with pytest.raises(InputError):
            snr(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_excluded_pairs_counted(self):
        ref = np.array([[1.0, -1.0], [1.0, -1.0], [0.5, 0.5]])
        approx = np.array([[1.0, -1.0], [0.9, -0.9], [0.0, 1.0]])
        rep = snr_report(ref, approx)
        assert rep.n_zero_noise == 1 and rep.n_zero_signal == 1
        assert rep.mean_db == pytest.approx(20.0)

    def test_monte_carlo_noise_level(self, rng):
        for v in (0.01, 0.1, 0.5):
            ref = rng.standard_normal((1, 10_000))
            noisy = ref + np.sqrt(v) * rng.standard_normal(ref.shape)
            assert abs(snr(ref, noisy) - (-10 * np.log10(v))) <= 0.5

    def test_pooled_reported(self, rng):
        ref = rng.standard_normal((5, 8))
        rep = snr_report(ref, 0.5 * ref)
        assert rep.pooled_db == pytest.approx(10 * np.log10(4.0))


class TestSparsity:
    def test_examples(self):
        assert avg_l1(np.zeros((3, 4))) == 0
        assert avg_l1([[1.0, -2.0, 0.0]]) == 3

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=small), st.floats(-10, 10))
    def test_homogeneous(self, codes, c):
        assert avg_l1(c * codes) == pytest.approx(abs(c) * avg_l1(codes), rel=1e-12, abs=1e-12)

    def test_zero_fraction(self):
        assert zero_fraction([[0.0, 1e-13, 0.5, -1.0]]) == 0.5


class TestCalibrate:
    def test_examples(self):
        mags = np.array([[0.1, -0.2, 0.3, -0.4]])
        assert calibrate_threshold(mags, 0.5) == 0.2
        assert zero_fraction(mags, 0.2) == 0.5
        assert calibrate_threshold(mags, 0.0) == 0.0
        assert calibrate_threshold(mags, 1.0) >= 0.4

    def test_out_of_range(self):
        with pytest.raises(PreconditionError):
            calibrate_threshold([[1.0]], 1.5)

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, (4, 5), elements=st.sampled_from([0.0, 0.1, -0.1, 0.3, 2.0, -5.0])),
        st.floats(0, 1),
    )
    def test_closest_achievable(self, codes, target):
        theta = calibrate_threshold(codes, target)
        best = abs(zero_fraction(codes, theta) - target)
        for cand in np.concatenate([[0.0], np.abs(codes).ravel(), [10.0]]):
            assert abs(zero_fraction(codes, cand) - target) >= best - 1e-15


class TestTransitions:
    def test_identical_frames(self, rng):
        f = rng.standard_normal((5, 4))
        f[f < 0.2] = 0
        st_ = sign_transition_matrix([f, f, f], 0.0)
        present = st_.counts.sum(axis=1) > 0
        assert np.array_equal(st_.probs[present], np.eye(3)[present])
        assert st_.change_probability == 0.0

    def test_flip(self):
        st_ = sign_transition_matrix([np.array([[0.5]]), np.array([[-0.5]])], 0.0)
        assert st_.probs[2, 0] == 1.0

    def test_needs_two_frames(self):
        with pytest.raises(InputError):
            sign_transition_matrix([np.zeros((2, 2))], 0.0)

    def test_iid_rows_converge(self, rng):
        frames = rng.choice([-1.0, 0.0, 1.0], size=(1001, 10, 10))
        st_ = sign_transition_matrix(list(frames), 0.0)
        assert st_.counts.sum() == 100_000
        assert np.abs(st_.probs - 1 / 3).max() <= 0.02
        assert st_.row_tv_from_marginal().max() <= 0.02

    def test_rows_sum_to_one(self, rng):
        frames = list(rng.standard_normal((6, 3, 4)))
        st_ = sign_transition_matrix(frames, 0.5)
        np.testing.assert_allclose(st_.probs.sum(axis=1), 1.0, atol=1e-12)

    def test_unit_permutation_invariant(self, rng):
        frames = rng.standard_normal((6, 3, 4))
        perm = rng.permutation(4)
        a = sign_transition_matrix(list(frames), 0.3)
        b = sign_transition_matrix(list(frames[:, ::-1, perm]), 0.3)
        assert np.array_equal(a.counts, b.counts)

    def test_random_pairs_use_all_frames(self, rng):
        frames = list(rng.standard_normal((8, 3, 4)))
        st_ = random_pair_transition_matrix(frames, 0.1, seed=0)
        assert st_.counts.sum() == 7 * 12

    def test_table_layout(self):
        t = TransitionStats(np.eye(3, dtype=int)).table()
        assert t[0] == ["prev\\next", "-", "0", "+"] and t[1][1] == "1.000000"


class TestBench:
    def test_self_speedup_and_statistics(self, rng):
        _, p = init_model(81, 64, 0)
        Y = rng.standard_normal((5000, 81))
        fn = lambda: infer_approx(Y, p)  # noqa: E731
        rep = BenchReport({"a": time_call(fn, 7), "b": time_call(fn, 7)}, 5000, 64, 81, fast="a", slow="b")
        assert 0.5 <= rep.speedup <= 2.0
        for name in rep.timings:
            assert all(t > 0 for t in rep.timings[name])
            assert rep.median(name) <= rep.mean(name) + 3 * rep.std(name)

    def test_default_report(self, rng):
        b, p = init_model(16, 12, 0)
        rep = bench_inference(rng.standard_normal((200, 16)), (b, p), Hyperparams(), repetitions=3)
        assert rep.speedup == rep.median("exact_cd") / rep.median("approx")
        assert (rep.batch_size, rep.m, rep.n) == (200, 12, 16)

    def test_includes_optimal(self, rng):
        b, p = init_model(16, 12, 0)
        rep = bench_inference(rng.standard_normal((20, 16)), (b, p), Hyperparams(), repetitions=3,
                              include_optimal=True)
        assert set(rep.timings) == {"approx", "exact_cd", "optimal"}
        header, rows = rep.raw_rows()
        assert header == ["repetition", "approx_s", "exact_cd_s", "optimal_s"] and len(rows) == 3

    def test_needs_three_repetitions(self, rng):
        b, p = init_model(4, 4, 0)
        with pytest.raises(PreconditionError):
            bench_inference(np.zeros((2, 4)), (b, p), Hyperparams(), repetitions=2)


class TestFeaturePipeline:
    def test_single_window(self, rng):
        _, p = init_model(9, 5, 1)
        img = rng.standard_normal((3, 3))
        maps = encode_convolutional(img, ApproxEncoder(p), 3)
        assert maps.shape == (5, 1, 1)
        np.testing.assert_array_equal(maps[:, 0, 0], ApproxEncoder(p).encode(img.ravel()))

    def test_zero_predictor(self, rng):
        p = Predictor(np.ones(4), np.zeros((4, 9)), np.zeros(4))
        assert not np.any(encode_convolutional(rng.standard_normal((6, 6)), ApproxEncoder(p), 3))

    @pytest.mark.parametrize("kind", ["approx", "exact", "optimal"])
    def test_per_window_oracle(self, rng, kind):
        b, p = init_model(81, 8, 2)
        h = Hyperparams(lam=0.3)
        enc = {
            "approx": ApproxEncoder(p),
            "exact": ExactEncoder(b, 0.15),
            "optimal": OptimalEncoder(b, p, h, SolveOptions(tol=1e-6, max_iter=200)),
        }[kind]
        img = rng.standard_normal((11, 11))
        maps = encode_convolutional(img, enc, 9)
        assert maps.shape == (8, 3, 3)
        for r in range(3):
            for c in range(3):
                assert np.array_equal(maps[:, r, c], enc.encode(img[r : r + 9, c : c + 9].ravel()))

    def test_exact_encoder_matches_oracle(self, rng):
        b = rng.standard_normal((9, 6))
        b /= np.linalg.norm(b, axis=0)
        img = rng.standard_normal((4, 4))
        maps = encode_convolutional(img, ExactEncoder(b, 0.2), 3)
        for r in range(2):
            for c in range(2):
                ref = solve_oracle(img[r : r + 3, c : c + 3].ravel(), b, Bpdn(0.2))
                assert np.abs(maps[:, r, c] - ref).max() <= 1e-6

    def test_size_mismatch(self, rng):
        _, p = init_model(16, 4, 0)
        with pytest.raises(ShapeError):
            encode_convolutional(np.zeros((5, 5)), ApproxEncoder(p), 3)

    def test_abs_rectify(self, rng):
        assert abs_rectify([-1.0, 2.0]).tolist() == [1.0, 2.0]
        t = rng.standard_normal((2, 3, 3))
        assert np.array_equal(abs_rectify(abs_rectify(t)), abs_rectify(t))
        assert abs_rectify(t).min() >= 0

    def test_downsample_examples(self, rng):
        t = np.arange(1.0, 17.0).reshape(4, 4)
        assert avg_downsample(t, 2, 2).tolist() == [[3.5, 5.5], [11.5, 13.5]]
        m = rng.standard_normal((2, 5, 7))
        assert np.array_equal(avg_downsample(m, 5, 7), m)
        np.testing.assert_allclose(avg_downsample(np.full((7, 9), 2.5), 3, 4), 2.5, rtol=1e-15)

    def test_downsample_uneven_cells(self):
        t = np.arange(5.0)[None, :].repeat(2, axis=0)
        # cell edges at 0, 3, 5: halves round up
        assert avg_downsample(t, 1, 2).tolist() == [[1.0, 3.5]]

    def test_downsample_preserves_mean(self, rng):
        t = rng.standard_normal((3, 12, 18))
        assert abs(avg_downsample(t, 4, 6).mean() - t.mean()) <= 1e-12

    def test_downsample_too_large(self):
        with pytest.raises(PreconditionError):
            avg_downsample(np.zeros((3, 3)), 4, 2)

    def test_extract_features_shape(self, rng):
        _, p = init_model(9, 4, 0)
        f = extract_features(rng.standard_normal((12, 12)), ApproxEncoder(p), 3, grid=5)
        assert f.shape == (4 * 5 * 5,) and f.min() >= 0


def two_clusters(rng, n_each=100, counts=None):
    counts = counts or (n_each, n_each)
    a = rng.normal([-2.0, 0.0], 0.3, (counts[0], 2))
    b = rng.normal([2.0, 0.0], 0.3, (counts[1], 2))
    # make the margin explicit
    a[:, 0] = np.minimum(a[:, 0], -0.5)
    b[:, 0] = np.maximum(b[:, 0], 0.5)
    return np.vstack([a, b]), np.array([0] * counts[0] + [1] * counts[1])


class TestClassifier:
    def test_separable(self, rng):
        X, y = two_clusters(rng)
        clf = train_linear_classifier(X, y, seed=0)
        assert clf.accuracy(X, y) >= 0.99

    def test_heavy_penalty_gives_majority(self, rng):
        X, y = two_clusters(rng, counts=(150, 50))
        clf = train_linear_classifier(X, y, l2_weight=1e6, seed=0)
        assert np.abs(clf.weights).max() < 1e-3
        assert clf.accuracy(X, y) == pytest.approx(0.75)

    def test_feature_permutation(self, rng):
        X = rng.standard_normal((120, 5))
        y = (X @ rng.standard_normal(5) > 0).astype(int) + (X[:, 0] > 1)
        perm = rng.permutation(5)
        a = train_linear_classifier(X, y, seed=3)
        b = train_linear_classifier(X[:, perm], y, seed=3)
        test = rng.standard_normal((50, 5))
        assert np.array_equal(a.predict(test), b.predict(test[:, perm]))

    def test_deterministic(self, rng):
        X, y = two_clusters(rng)
        a = train_linear_classifier(X, y, seed=1)
        b = train_linear_classifier(X, y, seed=1)
        assert np.array_equal(a.weights, b.weights)

    def test_single_class(self):
        with pytest.raises(InputError):
            train_linear_classifier(np.zeros((3, 2)), [1, 1, 1])


def test_compare_representations_keys(rng):
    b, p = init_model(9, 6, 0)
    Y = rng.standard_normal((20, 9))
    h = Hyperparams(lam=0.4)
    out = compare_representations(Y, b, p, h, SolveOptions(tol=1e-6), posthoc=p)
    assert set(out["snr"]) == {"optimal/predictor", "exact/optimal", "exact/predictor", "exact/regressor"}
    assert out["snr"]["exact/predictor"].mean_db == out["snr"]["exact/regressor"].mean_db
    assert exact_lambda(h) == 0.2
    assert set(out["sparsity"]) == {"exact", "optimal", "predictor", "regressor"}
