"""Expert construction: shared low-rank compensation, NPMI-driven spectral
clustering of routed channels, per-cluster routed adapters, and the router.

The shared expert exempts the token-independent channels from quantization,
folds an activation-balancing scale into those weight columns, and captures
the resulting error with an activation-whitened truncated SVD. Each routed
expert re-weights the remaining error toward one channel cluster before its
own truncated SVD; the router column for an expert is the per-input-channel
mean of its leftover error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .linalg import as_matrix, cholesky, eigh, kmeans, solve_lower_transposed, svd_truncated
from .quantizer import QuantScheme, QuantizedWeight, dequantize_weight, quantize_weight

log = logging.getLogger(__name__)

__all__ = [
    "LowRankAdapter",
    "SharedExpert",
    "RoutedExperts",
    "Router",
    "ExpertPack",
    "build_shared_expert",
    "spectral_cluster",
    "build_routed_experts",
    "assemble_pack",
]


@dataclass
class LowRankAdapter:
    """Factored correction ``up @ down`` applied alongside the main GEMM."""

    up: np.ndarray        # d_out x rank
    down: np.ndarray      # rank x d_in

    @property
    def rank(self) -> int:
        return self.up.shape[1]

    def matrix(self) -> np.ndarray:
        return self.up @ self.down

    def apply(self, x: np.ndarray) -> np.ndarray:
        """x is tokens x d_in; returns tokens x d_out (factored order)."""
        return (x @ self.down.T) @ self.up.T


@dataclass
class SharedExpert:
    """Global error compensation plus the channel smoothing it assumes.

    ``smooth_scale`` is >= 1 on the shared channels and exactly 1 elsewhere;
    the runtime divides incoming activations by it.
    """

    adapter: LowRankAdapter
    smooth_scale: np.ndarray   # d_in


@dataclass
class RoutedExperts:
    """One adapter per channel cluster; clusters partition the routed set."""

    adapters: list[LowRankAdapter]
    clusters: list[np.ndarray]


@dataclass
class Router:
    """Score matrix (d_in x n_experts); lower score means better expert.

    Built as per-channel mean residual magnitudes, hence nonnegative at
    construction time.
    """

    matrix: np.ndarray


@dataclass
class ExpertPack:
    """Everything needed to run one compensated layer."""

    quantized: QuantizedWeight
    shared: SharedExpert
    routed: RoutedExperts
    router: Router
    shared_rank: int
    routed_rank: int
    k: int
    scheme: QuantScheme
    shared_channels: list[int]
    routed_channels: list[int]

    @property
    def n_experts(self) -> int:
        return len(self.routed.adapters)

    @property
    def d_out(self) -> int:
        return self.quantized.codes.shape[0]

    @property
    def d_in(self) -> int:
        return self.quantized.codes.shape[1]


def _positive_min_ratio(values: np.ndarray, what: str) -> np.ndarray:
    """values / min(positive values); zero entries map to 1.

    Channels that never activate carry no signal to balance, so they keep a
    unit scale instead of dividing by zero.
    """
    out = np.ones_like(values)
    positive = values > 0.0
    if not positive.any():
        log.warning("%s has zero mean activation on every channel; "
                    "falling back to uniform scaling", what)
        return out
    out[positive] = values[positive] / values[positive].min()
    return out


def build_shared_expert(w_f, x, shared_channels, shared_rank: int,
                        scheme: QuantScheme, damping: float | None = None,
                        ) -> tuple[QuantizedWeight, SharedExpert, np.ndarray]:
    """Quantize with the shared channels exempted and build their adapter.

    Returns ``(quantized, shared_expert, residual)`` where ``residual`` is
    the error left for the routed experts. The adapter minimizes the error in
    the activation-weighted norm: with G the Gram matrix of the smoothed
    activations and L its Cholesky factor, the best rank-r M for
    ||(E - M) L||_F is trunc_r(E L) L^{-1}, factored here as up @ down.
    """
    w_f = as_matrix(w_f, "weight")
    x = as_matrix(x, "calibration activations")
    d_out, d_in = w_f.shape
    if x.shape[1] != d_in:
        raise InvalidInputError("calibration width does not match weight d_in")
    shared = [int(c) for c in shared_channels]
    if not shared:
        raise InvalidInputError("shared channel set is empty")
    if len(set(shared)) != len(shared):
        raise InvalidInputError("shared channel set has duplicates")
    if len(shared) > d_in or min(shared) < 0 or max(shared) >= d_in:
        raise InvalidInputError("shared channels out of range")
    if not 1 <= shared_rank <= min(d_out, d_in):
        raise InvalidInputError(f"shared_rank must be in [1, {min(d_out, d_in)}]")

    mean_abs = np.abs(x).mean(axis=0)
    smooth = np.ones(d_in)
    smooth[shared] = _positive_min_ratio(mean_abs[shared], "shared channel set")

    w_smoothed = w_f * smooth[None, :]
    quantized = quantize_weight(w_smoothed, scheme, skip_cols=shared)
    err = w_smoothed - dequantize_weight(quantized)

    # Whitening over the activations the quantized GEMM actually sees (x / smooth).
    x_scaled = x / smooth[None, :]
    gram = x_scaled.T @ x_scaled
    lower = cholesky(gram, damping)

    svd = svd_truncated(err @ lower, shared_rank)
    up = svd.u * svd.s
    down = solve_lower_transposed(lower, svd.vt.T).T
    adapter = LowRankAdapter(up=up, down=down)
    residual = err - adapter.matrix()
    return quantized, SharedExpert(adapter=adapter, smooth_scale=smooth), residual


def spectral_cluster(similarity, n_clusters: int, seed: int) -> np.ndarray:
    """Cluster channels from a symmetric similarity matrix.

    The similarity is clamped to [0, 1] with a unit diagonal and turned into
    a normalized Laplacian. The degree-weighted constant direction (the
    Laplacian's trivial null vector) is pushed out of the low end of the
    spectrum, and the remaining n_clusters - 1 bottom eigenvectors embed the
    channels for k-means. For a connected affinity graph these are exactly
    the eigenvectors after the first; deflating explicitly also keeps
    disconnected affinities (e.g. exact co-occurrence blocks) separable.
    """
    s = as_matrix(similarity, "similarity")
    n = s.shape[0]
    if s.shape[0] != s.shape[1]:
        raise InvalidInputError("similarity must be square")
    if n_clusters < 1:
        raise InvalidInputError("n_clusters must be >= 1")
    if n < n_clusters:
        raise InvalidInputError(f"{n} channels cannot form {n_clusters} clusters")

    affinity = np.clip(0.5 * (s + s.T), 0.0, 1.0)
    np.fill_diagonal(affinity, 1.0)
    degree = affinity.sum(axis=1)
    degree[degree <= 0.0] = 1.0
    inv_sqrt = 1.0 / np.sqrt(degree)
    laplacian = np.eye(n) - inv_sqrt[:, None] * affinity * inv_sqrt[None, :]
    trivial = np.sqrt(degree)
    trivial /= np.linalg.norm(trivial)
    # Normalized-Laplacian eigenvalues sit in [0, 2]; 3 clears the spectrum.
    _, vecs = eigh(laplacian + 3.0 * np.outer(trivial, trivial))
    n_cols = min(max(n_clusters - 1, 1), n)
    return kmeans(vecs[:, :n_cols], n_clusters, seed)


def build_routed_experts(residual, x, routed_channels, labels, routed_rank: int,
                         ) -> tuple[RoutedExperts, Router]:
    """Build one adapter per cluster plus the router scores.

    Each cluster re-weights the residual columns by mean-activation ratios on
    its own channels (unit weight elsewhere, then a global sqrt(min*max)
    normalization), takes a truncated SVD of the weighted residual, and
    unweights the right factor so the adapter approximates the residual
    itself. Router column i is the column-wise mean |residual - adapter_i|.
    """
    residual = as_matrix(residual, "residual")
    x = as_matrix(x, "calibration activations")
    d_out, d_in = residual.shape
    if x.shape[1] != d_in:
        raise InvalidInputError("calibration width does not match residual d_in")
    channels = np.asarray([int(c) for c in routed_channels], dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if channels.size != labels.size:
        raise InvalidInputError("labels must cover the routed channels")
    if routed_rank < 1 or routed_rank > min(d_out, d_in):
        raise InvalidInputError(f"routed_rank must be in [1, {min(d_out, d_in)}]")

    mean_abs = np.abs(x).mean(axis=0)
    n_experts = int(labels.max()) + 1 if labels.size else 0
    adapters: list[LowRankAdapter] = []
    clusters: list[np.ndarray] = []
    router_cols = np.zeros((d_in, n_experts))
    for i in range(n_experts):
        members = channels[labels == i]
        if members.size == 0:
            raise InvalidInputError(f"cluster {i} is empty")
        clusters.append(members)
        weights = np.ones(d_in)
        cluster_scale = _positive_min_ratio(mean_abs[members], f"cluster {i}")
        weights[members] = cluster_scale
        weights = weights / np.sqrt(weights.min() * weights.max())
        svd = svd_truncated(residual * weights[None, :], routed_rank)
        adapter = LowRankAdapter(up=svd.u * svd.s, down=svd.vt / weights[None, :])
        adapters.append(adapter)
        router_cols[:, i] = np.abs(residual - adapter.matrix()).mean(axis=0)
    return RoutedExperts(adapters=adapters, clusters=clusters), Router(matrix=router_cols)


def _require(cond: bool, member: str, detail: str):
    if not cond:
        raise InvalidInputError(f"pack member {member!r}: {detail}")


def assemble_pack(quantized: QuantizedWeight, shared: SharedExpert,
                  routed: RoutedExperts, router: Router, shared_rank: int,
                  routed_rank: int, k: int, scheme: QuantScheme,
                  shared_channels, routed_channels) -> ExpertPack:
    """Dimension-check all members and produce the serializable pack."""
    d_out, d_in = quantized.codes.shape
    shared_channels = [int(c) for c in shared_channels]
    routed_channels = [int(c) for c in routed_channels]

    _require(shared.adapter.up.shape == (d_out, shared_rank), "shared.up",
             f"expected {(d_out, shared_rank)}, got {shared.adapter.up.shape}")
    _require(shared.adapter.down.shape == (shared_rank, d_in), "shared.down",
             f"expected {(shared_rank, d_in)}, got {shared.adapter.down.shape}")
    _require(shared.smooth_scale.shape == (d_in,), "shared.smooth_scale",
             f"expected {(d_in,)}, got {shared.smooth_scale.shape}")
    for i, adapter in enumerate(routed.adapters):
        _require(adapter.up.shape == (d_out, routed_rank), f"routed.adapters[{i}].up",
                 f"expected {(d_out, routed_rank)}, got {adapter.up.shape}")
        _require(adapter.down.shape == (routed_rank, d_in), f"routed.adapters[{i}].down",
                 f"expected {(routed_rank, d_in)}, got {adapter.down.shape}")
    n_experts = len(routed.adapters)
    _require(router.matrix.shape == (d_in, n_experts), "router",
             f"expected {(d_in, n_experts)}, got {router.matrix.shape}")
    _require(len(routed.clusters) == n_experts, "routed.clusters",
             f"expected {n_experts} clusters, got {len(routed.clusters)}")

    seen: set[int] = set()
    for i, cluster in enumerate(routed.clusters):
        members = {int(c) for c in cluster}
        _require(len(members) == len(cluster), f"routed.clusters[{i}]", "duplicate channels")
        _require(not members & seen, f"routed.clusters[{i}]", "overlaps another cluster")
        seen |= members
    _require(seen == set(routed_channels), "routed.clusters",
             "clusters do not partition the routed channel set")
    _require(not set(shared_channels) & set(routed_channels), "shared_channels",
             "shared and routed channel sets overlap")
    for c in shared_channels + routed_channels:
        _require(0 <= c < d_in, "channels", f"channel {c} out of range [0, {d_in})")

    return ExpertPack(quantized=quantized, shared=shared, routed=routed,
                      router=router, shared_rank=shared_rank, routed_rank=routed_rank,
                      k=k, scheme=scheme, shared_channels=shared_channels,
                      routed_channels=routed_channels)
