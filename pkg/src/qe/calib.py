"""Calibration statistics: important channels, frequencies, partitioning,
co-occurrence and NPMI similarity, plus a synthetic two-modality generator.

A channel is "important" for a token when |x_c| * importance_c lands in the
token's top-k. Channels are split by how often that happens: the most
frequent k become the shared (token-independent) set, the next n_experts*k
the routed (token-dependent) set.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .linalg import as_matrix, as_vector

__all__ = [
    "ChannelStats",
    "CoOccurrence",
    "OutlierProfile",
    "importance_vector",
    "token_topk",
    "topk_sets",
    "channel_frequency",
    "partition_channels",
    "co_occurrence",
    "npmi_similarity",
    "channel_stats",
    "synth_calibration",
]


@dataclass
class ChannelStats:
    """Per-layer channel statistics and the resulting partition.

    ``shared_channels`` holds the top-k channels by frequency (descending,
    ties to the lowest index); ``routed_channels`` the next n_experts*k,
    truncated to whatever was actually observed.
    """

    importance: np.ndarray            # d_in, row-mean of |W|
    freq: dict[int, float]            # observed channels only
    ordered_channels: list[int]       # by frequency descending
    shared_channels: list[int]
    routed_channels: list[int]

    def to_dict(self) -> dict:
        """JSON form; keys follow the exported stats-file schema."""
        return {
            "w_vec": self.importance.tolist(),
            "freq": {str(c): f for c, f in self.freq.items()},
            "C_s": list(self.shared_channels),
            "C_r": list(self.routed_channels),
        }


@dataclass
class CoOccurrence:
    """Binary tokens x routed-channels incidence matrix."""

    matrix: np.ndarray                # T x |routed|, uint8 in {0, 1}
    channels: list[int]               # column order


def importance_vector(w_f) -> np.ndarray:
    """Column means of |weight|: one importance score per input channel."""
    w_f = as_matrix(w_f, "weight")
    return np.abs(w_f).mean(axis=0)


def token_topk(x_t, importance, k: int) -> np.ndarray:
    """Indices of the k largest |x| * importance scores, ties broken by
    lowest channel index. Returned sorted ascending."""
    x_t = as_vector(x_t, "token")
    importance = as_vector(importance, "importance")
    if x_t.shape != importance.shape:
        raise InvalidInputError("token and importance lengths differ")
    d_in = x_t.size
    if not 1 <= k <= d_in:
        raise InvalidInputError(f"k must be in [1, {d_in}], got {k}")
    scores = np.abs(x_t) * importance
    order = np.argsort(-scores, kind="stable")[:k]
    return np.sort(order)


def topk_sets(x, importance, k: int) -> np.ndarray:
    """Vectorized :func:`token_topk` over all rows of ``x``; returns T x k."""
    x = as_matrix(x, "activations")
    importance = as_vector(importance, "importance")
    if x.shape[1] != importance.size:
        raise InvalidInputError("activation width and importance length differ")
    if not 1 <= k <= x.shape[1]:
        raise InvalidInputError(f"k must be in [1, {x.shape[1]}], got {k}")
    scores = np.abs(x) * importance[None, :]
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def channel_frequency(sets, k: int, d_in: int) -> dict[int, float]:
    """Occurrence frequency per observed channel: k * count / total count.

    Frequencies sum to k exactly; channels never observed are absent.
    """
    sets = list(sets)
    if not sets:
        raise InvalidInputError("channel_frequency needs at least one token")
    counts: Counter[int] = Counter()
    for s in sets:
        counts.update(int(c) for c in s)
    if counts and (min(counts) < 0 or max(counts) >= d_in):
        raise InvalidInputError(f"channel index out of range [0, {d_in})")
    total = sum(counts.values())
    return {c: k * m / total for c, m in sorted(counts.items())}


def partition_channels(freq: dict[int, float], k: int, n_experts: int
                       ) -> tuple[list[int], list[int]]:
    """Split observed channels into (shared, routed) by descending frequency.

    Shared takes the first k, routed the next n_experts * k; both truncate
    when fewer channels were observed.
    """
    if k < 1 or n_experts < 1:
        raise InvalidInputError("k and n_experts must be >= 1")
    if not freq:
        raise InvalidInputError("no observed channels to partition")
    order = sorted(freq, key=lambda c: (-freq[c], c))
    shared = order[:k]
    routed = order[k:k + n_experts * k]
    return shared, routed


def co_occurrence(sets, routed_channels) -> CoOccurrence:
    """Token/channel incidence over the routed channel set."""
    channels = [int(c) for c in routed_channels]
    if not channels:
        raise InvalidInputError("routed channel set is empty")
    sets = list(sets)
    width = max(max((max(s) for s in sets if len(s)), default=0), max(channels)) + 1
    presence = np.zeros((len(sets), width), dtype=np.uint8)
    for t, s in enumerate(sets):
        presence[t, np.asarray(list(s), dtype=np.int64)] = 1
    return CoOccurrence(matrix=presence[:, channels].copy(), channels=channels)


def npmi_similarity(occ: CoOccurrence) -> np.ndarray:
    """Normalized pointwise mutual information between channel columns.

    Entries lie in [-1, 1]; pairs that never co-occur get -1, pairs that
    always co-occur get 1, and the diagonal is 1.
    """
    o = occ.matrix.astype(np.float64)
    n_tokens = o.shape[0]
    if n_tokens < 1:
        raise InvalidInputError("co-occurrence matrix has no tokens")
    p = o.mean(axis=0)
    pij = (o.T @ o) / n_tokens
    outer = p[:, None] * p[None, :]
    s = np.full(pij.shape, -1.0)
    interior = (pij > 0.0) & (pij < 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s[interior] = np.log(pij[interior] / outer[interior]) / (-np.log(pij[interior]))
    s[pij >= 1.0] = 1.0
    np.fill_diagonal(s, 1.0)
    return s


def channel_stats(w_f, x, k: int, n_experts: int) -> ChannelStats:
    """Full statistics pass: importance, top-k sets, frequency, partition."""
    importance = importance_vector(w_f)
    sets = topk_sets(x, importance, k)
    freq = channel_frequency(sets, k, importance.size)
    shared, routed = partition_channels(freq, k, n_experts)
    order = sorted(freq, key=lambda c: (-freq[c], c))
    return ChannelStats(importance=importance, freq=freq, ordered_channels=order,
                        shared_channels=shared, routed_channels=routed)


@dataclass(frozen=True)
class OutlierProfile:
    """Knobs for the synthetic calibration generator.

    Hot channels are drawn with magnitude gain * (1 + |N(0,1)|), so a gain
    comfortably above the base noise ceiling makes their top-k membership
    deterministic.
    """

    base_scale: float = 1.0
    always_hot: int = 0               # channels hot in every token
    always_gain: float = 10.0
    modality_hot: int = 0             # channels hot per modality
    modality_gain: float = 10.0
    token_hot: int = 0                # channels hot per individual token
    token_gain: float = 4.0


def synth_calibration(d_in: int, n_tokens: int, n_modalities: int, seed: int,
                      profile: OutlierProfile) -> tuple[np.ndarray, np.ndarray]:
    """Generate tokens with layered outlier structure.

    Returns ``(x, modality_labels)``; tokens are grouped by modality in
    contiguous blocks. Hot-channel sets (always / per-modality) are disjoint
    draws from a seeded permutation, token-hot channels are drawn per token
    from the leftover pool. Byte-identical output for a fixed seed.
    """
    if n_modalities < 1:
        raise InvalidInputError("n_modalities must be >= 1")
    if n_tokens % n_modalities != 0:
        raise InvalidInputError("n_tokens must be divisible by n_modalities")
    need = profile.always_hot + n_modalities * profile.modality_hot
    if need > d_in:
        raise InvalidInputError("outlier profile needs more channels than d_in")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(d_in)
    always = perm[:profile.always_hot]
    pos = profile.always_hot
    modality_sets = []
    for _ in range(n_modalities):
        modality_sets.append(perm[pos:pos + profile.modality_hot])
        pos += profile.modality_hot
    pool = perm[pos:]

    x = rng.normal(0.0, profile.base_scale, size=(n_tokens, d_in))
    labels = np.repeat(np.arange(n_modalities), n_tokens // n_modalities)

    def hot(shape, gain):
        mag = gain * (1.0 + np.abs(rng.normal(size=shape)))
        sign = rng.choice([-1.0, 1.0], size=shape)
        return sign * mag

    if always.size:
        x[:, always] = hot((n_tokens, always.size), profile.always_gain)
    for m, chans in enumerate(modality_sets):
        if chans.size:
            rows = np.flatnonzero(labels == m)
            x[np.ix_(rows, chans)] = hot((rows.size, chans.size), profile.modality_gain)
    if profile.token_hot:
        if profile.token_hot > pool.size:
            raise InvalidInputError("token_hot exceeds the leftover channel pool")
        for t in range(n_tokens):
            picks = rng.choice(pool, size=profile.token_hot, replace=False)
            x[t, picks] = hot((profile.token_hot,), profile.token_gain)
    return x, labels
