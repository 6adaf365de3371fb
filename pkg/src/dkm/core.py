"""Iterative attention-based soft clustering with a differentiable unrolled loop.

A weight vector is viewed as (count, dim) sub-vectors. Each forward pass
alternates distance -> temperature softmax -> attention-weighted centroid
means until the codebook moves less than epsilon in Frobenius norm or an
iteration cap is hit, then emits soft-reconstructed weights A @ C built on
the autodiff tape of every executed iteration. The converged codebook is
returned detached so the caller can warm-start the next batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import DataError, NumericError, ParameterError, ShapeError

SQUARED_EUCLIDEAN = "squared_euclidean"
EUCLIDEAN = "euclidean"
METRICS = (SQUARED_EUCLIDEAN, EUCLIDEAN)

RANDOM_SAMPLE = "random_sample"
KMEANS_PP = "kmeans_pp"
INITS = (RANDOM_SAMPLE, KMEANS_PP)

# Attention column sums below this keep the previous centroid for that row
# instead of dividing by dust.
EMPTY_CLUSTER_THRESHOLD = 1e-30


@dataclass(frozen=True)
class DkmConfig:
    """Clustering hyper-parameters: 2^bits centroids of ``dim`` components.

    epsilon = 0 disables the early exit and always runs max_iterations.
    """

    bits: int
    dim: int = 1
    temperature: float = 0.5
    epsilon: float = 1e-4
    max_iterations: int = 5
    metric: str = SQUARED_EUCLIDEAN
    init: str = RANDOM_SAMPLE

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ParameterError(f"bits must be in [1, 16], got {self.bits}")
        if self.dim < 1:
            raise ParameterError(f"dim must be >= 1, got {self.dim}")
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if self.epsilon < 0:
            raise ParameterError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.max_iterations < 1:
            raise ParameterError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.metric not in METRICS:
            raise ParameterError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.init not in INITS:
            raise ParameterError(f"init must be one of {INITS}, got {self.init!r}")

    @property
    def clusters(self) -> int:
        return 1 << self.bits


@dataclass
class SubvectorMatrix:
    """Flat weights reshaped to (count, dim) contiguous sub-vectors.

    The final row may be zero-padded; pad_count records how many trailing
    entries are synthetic so the original vector can be restored exactly.
    """

    values: np.ndarray
    original_length: int
    pad_count: int = 0

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values)
        if self.values.ndim != 2:
            raise ShapeError(f"subvectors must be 2-D, got shape {self.values.shape}")
        if self.count * self.dim != self.original_length + self.pad_count:
            raise ShapeError("count * dim must equal original_length + pad_count")
        if not 0 <= self.pad_count < self.dim:
            raise ShapeError(f"pad_count must be in [0, dim), got {self.pad_count}")

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def flatten(self) -> np.ndarray:
        """Original flat weight vector, padding dropped."""
        return self.values.reshape(-1)[: self.original_length].copy()


@dataclass
class Codebook:
    """The shared centroids: one row per cluster."""

    centroids: np.ndarray

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids)
        if self.centroids.ndim != 2:
            raise ShapeError(f"codebook must be 2-D, got shape {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise NumericError("codebook contains NaN or Inf")

    @property
    def clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class DkmTelemetry:
    """Per-invocation loop diagnostics."""

    iterations_used: int
    final_delta: float
    converged: bool


@dataclass
class DkmResult:
    """Everything one clustering pass produces.

    w_tilde stays attached to the tape; attention and codebook are detached
    value copies (the codebook is the next batch's warm start). trajectory,
    when recorded, holds the initial centroids followed by each iterate.
    """

    w_tilde: Node
    attention: np.ndarray
    codebook: Codebook
    telemetry: DkmTelemetry
    input_node: Node
    trajectory: list[np.ndarray] = field(default_factory=list)


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, SubvectorMatrix):
        return ad.constant(x.values)
    if isinstance(x, Codebook):
        return ad.constant(x.centroids)
    return ad.constant(x)


def init_centroids(w: SubvectorMatrix, config: DkmConfig, seed: int) -> Codebook:
    """Seed 2^bits centroids from the sub-vectors, deterministically.

    random_sample draws k distinct rows: ``rng.choice(count, k, replace=False)``.
    kmeans_pp draws the first row uniformly (``rng.integers(count)``) and each
    next one with probability proportional to its squared distance from the
    nearest already-chosen centroid (``rng.choice(count, p=d2 / d2.sum())``).
    """
    k = config.clusters
    if w.count < k:
        raise DataError(f"need at least {k} sub-vectors to seed {k} clusters, got {w.count}")
    rng = np.random.default_rng(seed)
    points = w.values

    if config.init == RANDOM_SAMPLE:
        idx = rng.choice(w.count, size=k, replace=False)
        return Codebook(points[idx].copy())

    chosen = np.empty((k, w.dim), dtype=points.dtype)
    chosen[0] = points[rng.integers(w.count)]
    d2 = np.sum((points - chosen[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(w.count)
        else:
            idx = rng.choice(w.count, p=d2 / total)
        chosen[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - chosen[j]) ** 2, axis=1))
    return Codebook(chosen)


def distance_matrix(w, c, metric: str = SQUARED_EUCLIDEAN) -> Node:
    """Negated pairwise distances, differentiable w.r.t. both operands.

    Entry (i, j) is -||w_i - c_j||^2 (or the plain norm), so larger means
    closer. Uses the |w|^2 + |c|^2 - 2 w.c expansion; tiny negative squared
    distances from cancellation are clamped to zero.
    """
    if metric not in METRICS:
        raise ParameterError(f"metric must be one of {METRICS}, got {metric!r}")
    wn, cn = _as_node(w), _as_node(c)
    if wn.shape[1] != cn.shape[1]:
        raise ShapeError(f"sub-vector dim {wn.shape[1]} != centroid dim {cn.shape[1]}")
    m, k = wn.shape[0], cn.shape[0]

    sq_w = ad.broadcast_col(ad.sum_rows(ad.square(wn)), k)
    sq_c = ad.broadcast_row(ad.transpose(ad.sum_rows(ad.square(cn))), m)
    cross = ad.scalar_mul(ad.matmul(wn, ad.transpose(cn)), -2.0)
    d2 = ad.relu(ad.add(ad.add(sq_w, sq_c), cross))
    if metric == EUCLIDEAN:
        return ad.scalar_mul(ad.sqrt(d2), -1.0)
    return ad.scalar_mul(d2, -1.0)


def attention(dist: Node, temperature: float) -> Node:
    """Row-stochastic soft assignments from negated distances."""
    return ad.row_softmax(_as_node(dist), temperature)


def centroid_update(a, w, prev: Node | None = None) -> Node:
    """Attention-weighted means: candidate row j = sum_i a_ij w_i / sum_i a_ij.

    Rows whose attention column-sum underflows keep the corresponding row of
    ``prev`` (required whenever that can happen; without ``prev`` such rows
    come out zero).
    """
    an, wn = _as_node(a), _as_node(w)
    if an.shape[0] != wn.shape[0]:
        raise ShapeError(f"attention rows {an.shape[0]} != sub-vector count {wn.shape[0]}")
    k, d = an.shape[1], wn.shape[1]

    weighted = ad.matmul(ad.transpose(an), wn)
    col_sums = ad.transpose(ad.sum_cols(an))
    occupied = col_sums.value >= EMPTY_CLUSTER_THRESHOLD
    if occupied.all():
        return ad.div(weighted, ad.broadcast_col(col_sums, d))

    mask = occupied.astype(an.value.dtype)
    safe = ad.add(col_sums, ad.constant(1.0 - mask))
    update = ad.div(weighted, ad.broadcast_col(safe, d))
    keep = ad.broadcast_col(ad.constant(mask), d)
    if prev is None:
        return ad.mul(update, keep)
    inv = ad.broadcast_col(ad.constant(1.0 - mask), d)
    return ad.add(ad.mul(update, keep), ad.mul(_as_node(prev), inv))


def dkm_forward(
    w,
    warm_start: Codebook | None = None,
    config: DkmConfig | None = None,
    seed: int = 0,
    record_trajectory: bool = False,
) -> DkmResult:
    """Run the clustering loop and return soft weights on the tape.

    ``w`` may be a SubvectorMatrix or an existing graph Node of shape
    (count, dim). Initial centroids come from ``warm_start`` (detached copy)
    or from ``init_centroids``; gradients flow through every executed
    iteration back to ``w`` but never across batches.
    """
    if config is None:
        raise ParameterError("config is required")
    if isinstance(w, Node):
        w_node = w
        values = w.value
    else:
        w_node = ad.leaf(w.values)
        values = w.values
    k = config.clusters
    if values.shape[1] != config.dim:
        raise ShapeError(f"sub-vector dim {values.shape[1]} != config dim {config.dim}")

    if warm_start is not None:
        if warm_start.centroids.shape != (k, config.dim):
            raise ShapeError(
                f"warm start shape {warm_start.centroids.shape} != ({k}, {config.dim})"
            )
        start = warm_start.centroids.astype(values.dtype, copy=True)
    else:
        sub = w if isinstance(w, SubvectorMatrix) else SubvectorMatrix(values, values.size)
        start = init_centroids(sub, config, seed).centroids.astype(values.dtype, copy=True)

    c_node = ad.constant(start, checked=False)
    trajectory = [start.copy()] if record_trajectory else []
    delta = np.inf
    converged = False
    iterations = 0

    for it in range(1, config.max_iterations + 1):
        dist = distance_matrix(w_node, c_node, config.metric)
        attn = attention(dist, config.temperature)
        candidate = centroid_update(attn, w_node, prev=c_node)
        if not np.all(np.isfinite(candidate.value)):
            raise NumericError(f"non-finite centroids at iteration {it}")
        delta = float(np.linalg.norm(candidate.value - c_node.value))
        c_node = candidate
        iterations = it
        if record_trajectory:
            trajectory.append(c_node.value.copy())
        if config.epsilon > 0 and delta <= config.epsilon:
            converged = True
            break

    final_attn = attention(distance_matrix(w_node, c_node, config.metric), config.temperature)
    w_tilde = ad.matmul(final_attn, c_node)

    return DkmResult(
        w_tilde=w_tilde,
        attention=final_attn.value.copy(),
        codebook=Codebook(c_node.value.copy()),
        telemetry=DkmTelemetry(iterations_used=iterations, final_delta=delta, converged=converged),
        input_node=w_node,
        trajectory=trajectory,
    )


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max abs difference scaled by the largest magnitude in either array."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def dkm_gradient_check(
    w: SubvectorMatrix,
    config: DkmConfig,
    seed: int,
    saturation_tol: float | None = None,
    step: float = 1e-6,
) -> float:
    """Compare loop gradients against central finite differences.

    Builds loss = ||w_tilde - T||^2 for a fixed random target T and returns
    the max relative error of d(loss)/dw. The early exit is disabled so
    every probe runs the same number of iterations. ``saturation_tol``
    excludes rows whose attention is within that tolerance of one-hot
    (their gradients are numerically degenerate at near-hard temperatures).
    """
    cfg = replace(config, epsilon=0.0)
    rng = np.random.default_rng(seed)
    target = rng.standard_normal(w.values.shape)
    # pin the initial codebook: gradients flow through the loop, not through
    # the seeding, so both probes must start from the same centroids
    start = init_centroids(w, cfg, seed)

    def loss_value(values: np.ndarray) -> float:
        res = dkm_forward(ad.constant(values, checked=False), start, cfg, seed)
        return float(np.sum((res.w_tilde.value - target) ** 2))

    w_node = ad.leaf(w.values)
    res = dkm_forward(w_node, start, cfg, seed)
    diff = ad.sub(res.w_tilde, ad.constant(target))
    ad.backward(ad.sum_all(ad.square(diff)))
    grad_ad = w_node.grad

    grad_fd = np.zeros_like(w.values)
    for i in range(w.count):
        for j in range(w.dim):
            plus = w.values.copy()
            minus = w.values.copy()
            plus[i, j] += step
            minus[i, j] -= step
            grad_fd[i, j] = (loss_value(plus) - loss_value(minus)) / (2.0 * step)

    if saturation_tol is not None:
        rows = res.attention.max(axis=1) < 1.0 - saturation_tol
        if not rows.any():
            return 0.0
        return relative_error(grad_ad[rows], grad_fd[rows])
    return relative_error(grad_ad, grad_fd)
