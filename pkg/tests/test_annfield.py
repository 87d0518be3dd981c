import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchattn.annfield import (BINARY_LAYOUT, EXACT_CAP, ANNField, ConfigurationError,
                                OracleCapError, SearchParams, candidate_scores, exact_nn,
                                init_random, propagate_jumpflood, random_search, run)
from patchattn.core import PatchView
from patchattn.similarity import Metric

from helpers import FIXTURES, MonotonicityRecorder, unique_patch_image


def views(a, b, p=3):
    return PatchView(a, p), PatchView(b, p)


def test_three_key_toy():
    Q, K = views(np.array([[0.0]]), np.array([[1.0, 0.1, 5.0]]), p=1)
    field = exact_nn(Q, K, k=2)
    np.testing.assert_array_equal(field.indices, [[1, 0]])
    np.testing.assert_allclose(field.scores, [[-0.01, -1.0]], rtol=1e-12)


def test_exact_nn_ties_prefer_smaller_index():
    Q, K = views(np.zeros((1, 1)), np.array([[1.0, -1.0, 1.0]]), p=1)
    np.testing.assert_array_equal(exact_nn(Q, K, k=3).indices, [[0, 1, 2]])


def test_exact_identity_on_self_pair():
    X = unique_patch_image(10, 0)
    Q, K = views(X, X)
    field = exact_nn(Q, K)
    np.testing.assert_array_equal(field.best(), np.arange(100))
    assert np.all(field.best_scores() == 0.0)


def test_init_exhaustive_when_k_equals_keys():
    Q, K = views(np.random.default_rng(0).random((3, 4)), np.random.default_rng(1).random((2, 3)))
    field = init_random(Q, K, SearchParams(k=6), np.random.default_rng(5))
    assert all(sorted(row) == list(range(6)) for row in field.indices.tolist())
    field.validate()


def test_init_rejects_large_k():
    Q, K = views(np.zeros((3, 3)), np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        init_random(Q, K, SearchParams(k=5), np.random.default_rng(0))


def test_init_is_uniform():
    Q, K = views(np.zeros((16, 16)), np.zeros((16, 16)))
    counts = np.zeros(256)
    draws = 0
    while draws < 10_000:
        field = init_random(Q, K, SearchParams(k=3), np.random.default_rng(draws))
        counts += np.bincount(field.indices.ravel(), minlength=256)
        draws += field.indices.size
    expected = draws / 256
    chi2 = np.sum((counts - expected) ** 2 / expected)
    df = 255
    assert abs(chi2 - df) < 3 * np.sqrt(2 * df), chi2


def test_params_validation():
    for bad in (dict(n_iter=-1), dict(k=0), dict(window_decay=1.0), dict(window_max=0),
                dict(n_threads=0)):
        with pytest.raises(ConfigurationError):
            SearchParams(**bad)
    with pytest.raises(ValueError):
        SearchParams(metric="hamming")


def test_determinism_same_seed():
    X, Y = unique_patch_image(20, 1), unique_patch_image(20, 2)
    Q, K = views(X, Y)
    a = run(Q, K, SearchParams(seed=9))
    b = run(Q, K, SearchParams(seed=9))
    assert a.to_bytes() == b.to_bytes()
    assert run(Q, K, SearchParams(seed=10)).to_bytes() != a.to_bytes()


def test_parallel_mode_is_reproducible():
    X, Y = unique_patch_image(20, 1), unique_patch_image(20, 2)
    Q, K = views(X, Y)
    a = run(Q, K, SearchParams(seed=3, n_threads=2))
    b = run(Q, K, SearchParams(seed=3, n_threads=4))
    assert a.to_bytes() == b.to_bytes()
    a.validate()


def test_propagation_keeps_exact_field():
    X, Y = unique_patch_image(12, 3), unique_patch_image(12, 4)
    Q, K = views(X, Y)
    exact = exact_nn(Q, K)
    after = propagate_jumpflood(Q, K, exact)
    np.testing.assert_array_equal(after.indices, exact.indices)
    np.testing.assert_array_equal(after.scores, exact.scores)


def test_propagation_spreads_seeded_shift():
    X = unique_patch_image(8, 5)
    Q, K = views(X, X)
    field = init_random(Q, K, SearchParams(k=1), np.random.default_rng(0))
    field.indices[0, 0] = 0
    field.scores[:] = candidate_scores(Q, K, field)
    for _ in range(2):
        field = propagate_jumpflood(Q, K, field)
    grid = field.best_scores().reshape(8, 8)
    assert np.all(grid[0, :] == 0.0) and np.all(grid[:, 0] == 0.0)
    idx = field.best().reshape(8, 8)
    np.testing.assert_array_equal(idx[0, :], np.arange(8))
    np.testing.assert_array_equal(idx[:, 0], np.arange(0, 64, 8))


def test_constant_keys_tie_everywhere():
    Q, K = views(unique_patch_image(8, 6), np.full((8, 8), 0.3))
    field = run(Q, K, SearchParams(k=2, n_iter=2))
    assert np.all(field.scores == field.scores[:, :1])


def _window_case(n_side):
    keys = np.zeros((9, 9))
    keys[4, 4] = 0.5
    keys[6, 3] = 1.0  # global optimum, Chebyshev distance 2 from the seeded candidate
    Q, K = views(np.ones((n_side, n_side)), keys, p=1)
    field = ANNField(np.full((n_side * n_side, 1), 4 * 9 + 4, dtype=np.int64),
                     np.full((n_side * n_side, 1), -0.25), Q.shape, K.shape)
    return Q, K, field


def test_random_search_window_probability():
    Q, K, field = _window_case(100)
    params = SearchParams(k=1, window_max=2, window_decay=0.5)
    out = random_search(Q, K, field, params, np.random.default_rng(0))
    rate = np.mean(out.best() == 6 * 9 + 3)
    sigma = np.sqrt(0.04 * 0.96 / out.n_queries)
    assert abs(rate - 1 / 25) < 4 * sigma, rate


def test_random_search_radius_one_schedule():
    Q, K, field = _window_case(30)
    out = random_search(Q, K, field, SearchParams(k=1, window_max=1), np.random.default_rng(0))
    # radius 1 cannot reach a point two pixels away
    assert not np.any(out.best() == 6 * 9 + 3)


def test_random_search_deterministic():
    Q, K, field = _window_case(20)
    params = SearchParams(k=1, window_max=4)
    a = random_search(Q, K, field, params, np.random.default_rng(11))
    b = random_search(Q, K, field, params, np.random.default_rng(11))
    np.testing.assert_array_equal(a.indices, b.indices)


def test_self_pair_reaches_zero():
    X = unique_patch_image(32, 7)
    Q, K = views(X, X)
    field = run(Q, K, SearchParams(n_iter=5, k=1))
    assert np.mean(field.best_scores() == 0.0) >= 0.99


def test_seed_stability_on_textured_pair():
    from patchattn.core import load_image
    Q = PatchView(load_image(FIXTURES / "pair1_a_64.png"), 7)
    K = PatchView(load_image(FIXTURES / "pair1_b_64.png"), 7)
    a = run(Q, K, SearchParams(seed=1))
    b = run(Q, K, SearchParams(seed=2))
    assert not np.array_equal(a.indices, b.indices)
    ma, mb = a.best_scores().mean(), b.best_scores().mean()
    assert abs(ma - mb) / abs(ma) < 0.05


@pytest.mark.parametrize("metric", list(Metric))
def test_cached_scores_match_recomputation(metric):
    rng = np.random.default_rng(8)
    Q, K = views(rng.random((10, 12, 2)) + 0.1, rng.random((9, 11, 2)) + 0.1)
    field = run(Q, K, SearchParams(k=3, n_iter=3, metric=metric))
    field.validate()
    np.testing.assert_array_equal(field.scores, candidate_scores(Q, K, field))
    exact = exact_nn(Q, K, 1, metric)
    assert np.all(exact.best_scores() >= field.best_scores())


def test_monotone_hook():
    X, Y = unique_patch_image(24, 9), unique_patch_image(24, 10)
    rec = MonotonicityRecorder()
    run(*views(X, Y), SearchParams(n_iter=6, k=3), hook=rec)
    assert rec.calls == 13
    assert rec.violations == 0


def test_exact_cap():
    big = PatchView(np.zeros((91, 91)), 1)
    assert big.n_patches ** 2 > EXACT_CAP
    with pytest.raises(OracleCapError, match="2\\*\\*26"):
        exact_nn(big, big)


def test_mismatched_views():
    with pytest.raises(ConfigurationError):
        run(PatchView(np.zeros((4, 4)), 3), PatchView(np.zeros((4, 4)), 5))
    with pytest.raises(ConfigurationError):
        run(PatchView(np.zeros((4, 4, 2)), 3), PatchView(np.zeros((4, 4)), 3))


def test_serialization_round_trip(tmp_path):
    X, Y = unique_patch_image(9, 11), unique_patch_image(7, 12)
    field = run(*views(X, Y), SearchParams(k=2, metric="cosine"))
    back = ANNField.from_bytes(field.to_bytes())
    np.testing.assert_array_equal(back.indices, field.indices)
    np.testing.assert_array_equal(back.scores, field.scores)
    assert (back.query_shape, back.key_shape, back.metric) == ((9, 9), (7, 7), Metric.COSINE)
    field.save(tmp_path / "f.annf")
    assert ANNField.load(tmp_path / "f.annf").to_bytes() == field.to_bytes()
    field.save(tmp_path / "f.txt")
    lines = (tmp_path / "f.txt").read_text().splitlines()
    assert len(lines) == 1 + 81 * 2
    q, key, s = lines[1].split()
    assert (int(q), int(key), float(s)) == (0, field.indices[0, 0], field.scores[0, 0])
    assert len(field.to_bytes()) == 32 + 81 * 2 * 16
    assert "ANNF" in BINARY_LAYOUT
    with pytest.raises(ValueError):
        ANNField.from_bytes(field.to_bytes()[:-16])


def test_positions():
    field = ANNField(np.array([[7, 2]]), np.zeros((1, 2)), (1, 1), (3, 5))
    np.testing.assert_array_equal(field.positions(), [[[2, 1], [2, 0]]])


@settings(max_examples=40, deadline=None)
@given(hq=st.integers(1, 9), wq=st.integers(1, 9), hk=st.integers(1, 9), wk=st.integers(1, 9),
       p=st.sampled_from([1, 3, 5]), k=st.integers(1, 4), n_iter=st.integers(0, 3),
       seed=st.integers(0, 2**32), metric=st.sampled_from(["dot", "l2", "cosine"]))
def test_search_invariants(hq, wq, hk, wk, p, k, n_iter, seed, metric):
    rng = np.random.default_rng(seed)
    Q = PatchView(rng.random((hq, wq, 2)) + 0.05, p)
    K = PatchView(rng.random((hk, wk, 2)) + 0.05, p)
    k = min(k, K.n_patches)
    rec = MonotonicityRecorder()
    field = run(Q, K, SearchParams(n_iter=n_iter, k=k, seed=seed, metric=metric), hook=rec)
    field.validate()
    assert rec.violations == 0
    np.testing.assert_array_equal(field.scores, candidate_scores(Q, K, field))
    exact = exact_nn(Q, K, k, metric)
    assert np.all(exact.best_scores() >= field.best_scores())
