"""Differentiable k-means weight clustering for train-time model compression.

Soft, temperature-controlled cluster assignments keep the clustering loop
differentiable end to end, so task gradients shape both the weights and the
shared codebook; snapping and bit-packed serialization then turn the result
into a compact inference artifact.
"""

from .core import (
    Codebook,
    DkmConfig,
    DkmResult,
    DkmTelemetry,
    SubvectorMatrix,
    attention,
    centroid_update,
    distance_matrix,
    dkm_forward,
    dkm_gradient_check,
    init_centroids,
)
from .compression import (
    CompressedLayer,
    CompressionReport,
    LayerPolicy,
    build_report,
    compression_ratio,
    deserialize,
    effective_bits_per_weight,
    empirical_entropy,
    reshape_to_subvectors,
    serialize,
    snap,
)

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "CompressedLayer",
    "CompressionReport",
    "DkmConfig",
    "DkmResult",
    "DkmTelemetry",
    "LayerPolicy",
    "SubvectorMatrix",
    "attention",
    "build_report",
    "centroid_update",
    "compression_ratio",
    "deserialize",
    "distance_matrix",
    "dkm_forward",
    "dkm_gradient_check",
    "effective_bits_per_weight",
    "empirical_entropy",
    "init_centroids",
    "reshape_to_subvectors",
    "serialize",
    "snap",
]
