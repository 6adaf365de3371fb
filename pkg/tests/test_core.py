import numpy as np
import pytest

from dkm import autodiff as ad
from dkm import baselines, core
from dkm.core import Codebook, DkmConfig, SubvectorMatrix
from dkm.errors import DataError, NumericError, ParameterError, ShapeError

from helpers import pairwise_sq_dists


def subvectors(values) -> SubvectorMatrix:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    return SubvectorMatrix(values, values.size)


# ---------------------------------------------------------------------------
# config and containers
# ---------------------------------------------------------------------------


def test_config_defaults():
    cfg = DkmConfig(bits=4)
    assert cfg.epsilon == 1e-4
    assert cfg.max_iterations == 5
    assert cfg.clusters == 16


@pytest.mark.parametrize(
    "kwargs",
    [
        {"bits": 0},
        {"bits": 17},
        {"bits": 2, "dim": 0},
        {"bits": 2, "temperature": 0.0},
        {"bits": 2, "epsilon": -1e-9},
        {"bits": 2, "max_iterations": 0},
        {"bits": 2, "metric": "manhattan"},
        {"bits": 2, "init": "zeros"},
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ParameterError):
        DkmConfig(**kwargs)


def test_subvector_matrix_bookkeeping():
    sub = SubvectorMatrix(np.array([[1.0, 2.0], [3.0, 0.0]]), original_length=3, pad_count=1)
    assert sub.count == 2 and sub.dim == 2
    np.testing.assert_array_equal(sub.flatten(), [1.0, 2.0, 3.0])
    with pytest.raises(ShapeError):
        SubvectorMatrix(np.zeros((2, 2)), original_length=5, pad_count=1)
    with pytest.raises(ShapeError):
        SubvectorMatrix(np.zeros((2, 2)), original_length=2, pad_count=2)


# ---------------------------------------------------------------------------
# init_centroids
# ---------------------------------------------------------------------------


def test_random_sample_with_k_equal_count_uses_all_points():
    w = subvectors([3.0, 1.0, 4.0, 1.5])
    cfg = DkmConfig(bits=2, init=core.RANDOM_SAMPLE)
    book = core.init_centroids(w, cfg, seed=9)
    # mirror the documented draw protocol
    idx = np.random.default_rng(9).choice(4, size=4, replace=False)
    np.testing.assert_array_equal(book.centroids, w.values[idx])
    assert sorted(book.centroids.ravel().tolist()) == [1.0, 1.5, 3.0, 4.0]


def test_kmeans_pp_forced_second_seed():
    w = subvectors([0.0, 10.0])
    cfg = DkmConfig(bits=1, init=core.KMEANS_PP)
    for seed in range(5):
        book = core.init_centroids(w, cfg, seed=seed)
        assert sorted(book.centroids.ravel().tolist()) == [0.0, 10.0]


def test_kmeans_pp_matches_scripted_reference():
    rng = np.random.default_rng(123)
    points = rng.uniform(-3, 3, 64)
    w = subvectors(points)
    cfg = DkmConfig(bits=2, init=core.KMEANS_PP)
    seed = 321
    book = core.init_centroids(w, cfg, seed=seed)

    # independent re-implementation: naive loops, same documented rng protocol
    ref_rng = np.random.default_rng(seed)
    chosen = [float(points[ref_rng.integers(64)])]
    for _ in range(3):
        d2 = np.array([min((p - c) ** 2 for c in chosen) for p in points])
        if d2.sum() <= 0:
            idx = ref_rng.integers(64)
        else:
            idx = ref_rng.choice(64, p=d2 / d2.sum())
        chosen.append(float(points[idx]))

    np.testing.assert_allclose(book.centroids.ravel(), chosen, atol=0)


def test_init_requires_enough_subvectors():
    w = subvectors([1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        core.init_centroids(w, DkmConfig(bits=2), seed=0)


def test_init_is_deterministic():
    rng = np.random.default_rng(5)
    w = subvectors(rng.normal(size=32))
    for init in core.INITS:
        cfg = DkmConfig(bits=3, init=init)
        a = core.init_centroids(w, cfg, seed=77).centroids
        b = core.init_centroids(w, cfg, seed=77).centroids
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# distance_matrix
# ---------------------------------------------------------------------------


def test_distance_matrix_scalar_case():
    d = core.distance_matrix(subvectors([1.0]), Codebook(np.array([[3.0]])))
    np.testing.assert_allclose(d.value, [[-4.0]], atol=1e-12)


def test_distance_matrix_zero_at_coincident_points():
    w = subvectors(np.array([[1.0, 2.0], [0.5, -0.5]]))
    c = Codebook(np.array([[1.0, 2.0], [3.0, 3.0]]))
    d = core.distance_matrix(w, c)
    assert d.value[0, 0] == 0.0
    assert np.all(d.value <= 0.0)


def test_distance_matrix_against_bruteforce():
    rng = np.random.default_rng(21)
    w = rng.uniform(-2, 2, (8, 2))
    c = rng.uniform(-2, 2, (4, 2))
    d = core.distance_matrix(SubvectorMatrix(w, w.size), Codebook(c))
    np.testing.assert_allclose(d.value, -pairwise_sq_dists(w, c), atol=1e-12)


def test_distance_matrix_euclidean_is_sqrt_of_squared():
    rng = np.random.default_rng(22)
    w = SubvectorMatrix(rng.uniform(-2, 2, (6, 3)), 18)
    c = Codebook(rng.uniform(-2, 2, (4, 3)))
    sq = core.distance_matrix(w, c, core.SQUARED_EUCLIDEAN).value
    eu = core.distance_matrix(w, c, core.EUCLIDEAN).value
    np.testing.assert_allclose(eu, -np.sqrt(-sq), atol=1e-12)


def test_distance_matrix_dim_mismatch():
    with pytest.raises(ShapeError):
        core.distance_matrix(
            SubvectorMatrix(np.ones((4, 2)), 8), Codebook(np.ones((2, 3)))
        )


def test_distance_matrix_rejects_unknown_metric():
    with pytest.raises(ParameterError):
        core.distance_matrix(subvectors([1.0]), Codebook(np.array([[1.0]])), "cosine")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def test_attention_equidistant_centroids():
    w = subvectors([1.0])
    c = Codebook(np.array([[0.0], [2.0]]))
    a = core.attention(core.distance_matrix(w, c), temperature=0.7)
    np.testing.assert_allclose(a.value, [[0.5, 0.5]], atol=1e-15)


def test_attention_closed_form():
    dist = ad.constant([[-1.0, -9.0]])
    a = core.attention(dist, temperature=4.0)
    expected = np.array([[1.0, np.exp(-2.0)]]) / (1.0 + np.exp(-2.0))
    np.testing.assert_allclose(a.value, expected, atol=1e-12)
    np.testing.assert_allclose(a.value, [[0.8808, 0.1192]], atol=1e-4)


def test_attention_matches_em_responsibilities():
    rng = np.random.default_rng(31)
    tau = 0.5
    w = SubvectorMatrix(rng.normal(size=(20, 2)), 40)
    c = Codebook(rng.normal(size=(4, 2)))
    a = core.attention(core.distance_matrix(w, c), temperature=tau)
    resp, _, _ = baselines.em_gmm_step(w, baselines.GmmState(c.centroids, tau / 2.0))
    np.testing.assert_allclose(a.value, resp, atol=1e-10)


def test_attention_argmax_is_nearest_centroid():
    rng = np.random.default_rng(32)
    w = rng.uniform(-1, 1, (40, 3))
    c = rng.uniform(-1, 1, (8, 3))
    dist = core.distance_matrix(SubvectorMatrix(w, w.size), Codebook(c))
    a = core.attention(dist, temperature=0.3)
    d2 = pairwise_sq_dists(w, c)
    gaps = np.partition(d2, 1, axis=1)
    clear = (gaps[:, 1] - gaps[:, 0]) > 1e-9
    assert clear.any()
    np.testing.assert_array_equal(
        np.argmax(a.value[clear], axis=1), np.argmin(d2[clear], axis=1)
    )


# ---------------------------------------------------------------------------
# centroid_update
# ---------------------------------------------------------------------------


def test_centroid_update_onehot_gives_cluster_means():
    rng = np.random.default_rng(41)
    w = rng.normal(size=(12, 2))
    labels = rng.integers(0, 3, 12)
    labels[:3] = [0, 1, 2]  # every cluster occupied
    a = np.zeros((12, 3))
    a[np.arange(12), labels] = 1.0

    got = core.centroid_update(ad.constant(a), ad.constant(w)).value
    for j in range(3):
        np.testing.assert_allclose(got[j], w[labels == j].mean(axis=0), atol=1e-12)


def test_centroid_update_uniform_gives_global_mean():
    rng = np.random.default_rng(42)
    w = rng.normal(size=(10, 2))
    a = np.full((10, 4), 0.25)
    got = core.centroid_update(ad.constant(a), ad.constant(w)).value
    np.testing.assert_allclose(got, np.tile(w.mean(axis=0), (4, 1)), atol=1e-12)


def test_centroid_update_matches_naive_weighted_means():
    rng = np.random.default_rng(43)
    w = rng.normal(size=(15, 3))
    raw = rng.uniform(0.05, 1.0, (15, 4))
    a = raw / raw.sum(axis=1, keepdims=True)

    got = core.centroid_update(ad.constant(a), ad.constant(w)).value
    expected = np.zeros((4, 3))
    for j in range(4):
        num = np.zeros(3)
        den = 0.0
        for i in range(15):
            num += a[i, j] * w[i]
            den += a[i, j]
        expected[j] = num / den
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_centroid_update_empty_cluster_keeps_previous():
    w = ad.constant(np.array([[1.0], [3.0]]))
    a = ad.constant(np.array([[1.0, 0.0], [1.0, 0.0]]))  # cluster 1 empty
    prev = ad.constant(np.array([[0.0], [42.0]]))
    got = core.centroid_update(a, w, prev=prev).value
    np.testing.assert_allclose(got, [[2.0], [42.0]], atol=1e-12)


# ---------------------------------------------------------------------------
# dkm_forward
# ---------------------------------------------------------------------------


def test_forward_fixed_point_converges_in_one_iteration():
    w = subvectors([0.0, 1.0, 4.0, 9.0])
    cfg = DkmConfig(bits=2, temperature=0.01)
    warm = Codebook(w.values.copy())
    res = core.dkm_forward(w, warm_start=warm, config=cfg, seed=0)
    assert res.telemetry.iterations_used == 1
    assert res.telemetry.converged
    assert res.telemetry.final_delta <= cfg.epsilon
    np.testing.assert_allclose(res.w_tilde.value, w.values, atol=1e-8)


def test_forward_high_temperature_collapses_to_mean():
    rng = np.random.default_rng(51)
    w = subvectors(rng.uniform(-1, 1, 24))
    cfg = DkmConfig(bits=2, temperature=1e6, epsilon=0.0, max_iterations=3)
    res = core.dkm_forward(w, config=cfg, seed=1)
    np.testing.assert_allclose(res.w_tilde.value, np.full_like(w.values, w.values.mean()), atol=1e-4)


def test_forward_trajectory_matches_em_oracle():
    rng = np.random.default_rng(52)
    tau = 0.5
    w = subvectors(rng.normal(size=32))
    cfg = DkmConfig(bits=2, temperature=tau, epsilon=0.0, max_iterations=5, init=core.KMEANS_PP)
    res = core.dkm_forward(w, config=cfg, seed=7, record_trajectory=True)
    assert len(res.trajectory) == 6  # init + 5 iterations

    centers = res.trajectory[0]
    for step in range(1, 6):
        _, centers, _ = baselines.em_gmm_step(w, baselines.GmmState(centers, tau / 2.0))
        np.testing.assert_allclose(res.trajectory[step], centers, atol=1e-8)
        centers = res.trajectory[step]  # stay on the dkm trajectory


def test_forward_gmm_log_likelihood_is_nondecreasing():
    rng = np.random.default_rng(53)
    tau = 0.3
    w = subvectors(rng.normal(size=40))
    cfg = DkmConfig(bits=3, temperature=tau, epsilon=0.0, max_iterations=5)
    res = core.dkm_forward(w, config=cfg, seed=3, record_trajectory=True)
    lls = [baselines.gmm_log_likelihood(w, c, tau / 2.0) for c in res.trajectory]
    for prev, nxt in zip(lls, lls[1:]):
        assert nxt >= prev - 1e-9


def test_forward_is_deterministic():
    rng = np.random.default_rng(54)
    w = subvectors(rng.normal(size=(16, 2)))
    cfg = DkmConfig(bits=2, dim=2, temperature=0.4)
    a = core.dkm_forward(w, config=cfg, seed=11)
    b = core.dkm_forward(w, config=cfg, seed=11)
    assert np.array_equal(a.w_tilde.value, b.w_tilde.value)
    assert np.array_equal(a.attention, b.attention)
    assert np.array_equal(a.codebook.centroids, b.codebook.centroids)
    assert a.telemetry == b.telemetry


def test_forward_zero_epsilon_runs_all_iterations():
    w = subvectors([0.0, 1.0, 4.0, 9.0])
    cfg = DkmConfig(bits=2, temperature=0.01, epsilon=0.0, max_iterations=4)
    warm = Codebook(w.values.copy())
    res = core.dkm_forward(w, warm_start=warm, config=cfg, seed=0)
    assert res.telemetry.iterations_used == 4
    assert not res.telemetry.converged


def test_forward_attention_invariants():
    rng = np.random.default_rng(55)
    w = subvectors(rng.normal(size=30))
    cfg = DkmConfig(bits=3, temperature=0.2)
    res = core.dkm_forward(w, config=cfg, seed=2)
    np.testing.assert_allclose(res.attention.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(res.attention >= 0.0) and np.all(res.attention <= 1.0)
    assert 1 <= res.telemetry.iterations_used <= cfg.max_iterations


def test_forward_warm_start_shape_checked():
    w = subvectors(np.arange(8.0))
    cfg = DkmConfig(bits=2)
    with pytest.raises(ShapeError):
        core.dkm_forward(w, warm_start=Codebook(np.zeros((3, 1))), config=cfg, seed=0)


def test_forward_nonfinite_iterate_names_iteration():
    w = subvectors(np.full(8, 1e200))  # distance expansion overflows
    cfg = DkmConfig(bits=2, temperature=0.5)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericError, match="iteration 1"):
            core.dkm_forward(w, config=cfg, seed=0)


def test_forward_warm_start_values_are_detached():
    w = subvectors(np.arange(8.0))
    cfg = DkmConfig(bits=2, epsilon=0.0, max_iterations=2)
    warm = Codebook(np.array([[0.0], [2.0], [4.0], [6.0]]))
    snapshot = warm.centroids.copy()
    core.dkm_forward(w, warm_start=warm, config=cfg, seed=0)
    np.testing.assert_array_equal(warm.centroids, snapshot)


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------


def test_gradient_check_single_iteration():
    rng = np.random.default_rng(61)
    w = subvectors(rng.uniform(-1, 1, 16))
    cfg = DkmConfig(bits=2, temperature=1.0, max_iterations=1)
    assert core.dkm_gradient_check(w, cfg, seed=5) <= 1e-5


def test_gradient_check_five_iterations():
    rng = np.random.default_rng(62)
    w = subvectors(rng.uniform(-1, 1, (16, 2)))
    cfg = DkmConfig(bits=2, dim=2, temperature=0.5, max_iterations=5)
    assert core.dkm_gradient_check(w, cfg, seed=6) <= 1e-4


def test_gradient_check_near_hard_with_saturation_mask():
    rng = np.random.default_rng(63)
    w = subvectors(rng.uniform(0, 1, 24))
    cfg = DkmConfig(bits=2, temperature=1e-3, max_iterations=1, init=core.KMEANS_PP)
    err = core.dkm_gradient_check(w, cfg, seed=8, saturation_tol=1e-9)
    assert err <= 1e-4


def test_gradient_flows_back_to_weight_node():
    rng = np.random.default_rng(64)
    values = rng.normal(size=(12, 1))
    w_node = ad.leaf(values)
    cfg = DkmConfig(bits=2, temperature=0.5, epsilon=0.0, max_iterations=3)
    res = core.dkm_forward(w_node, config=cfg, seed=4)
    ad.backward(ad.sum_all(ad.square(res.w_tilde)))
    assert w_node.grad is not None
    assert w_node.grad.shape == values.shape
    assert np.any(w_node.grad != 0)
