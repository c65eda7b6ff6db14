"""Pipeline orchestration: per-layer build, evaluation, and analysis.

Each layer is built independently (statistics -> shared expert -> clustering
-> routed experts -> optional refinement), so layers can run in parallel;
serialization stays single-writer and ordered for determinism.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .calib import (OutlierProfile, channel_stats, co_occurrence, npmi_similarity,
                    synth_calibration, topk_sets)
from .errors import InvalidInputError, NumericFailureError, QEError
from .experts import (ExpertPack, Router, RoutedExperts, assemble_pack,
                      build_routed_experts, build_shared_expert, spectral_cluster)
from .linalg import as_matrix
from .package import LayerBuild
from .quantizer import QuantScheme
from .refine import RefineConfig, refine_layer
from .runtime import VARIANTS, forward_baselines, forward_compensated, layer_metrics

log = logging.getLogger(__name__)

__all__ = ["RunConfig", "quantize_layer", "build_layers", "evaluate_layer",
           "analyze_channels", "DEFAULT_PROFILE", "default_profile_for"]

# Two-modality synthetic default: a small always-hot core, per-modality hot
# bands, and a sprinkle of token-specific outliers.
DEFAULT_PROFILE = OutlierProfile(base_scale=1.0, always_hot=4, always_gain=16.0,
                                 modality_hot=8, modality_gain=16.0,
                                 token_hot=2, token_gain=6.0)


def default_profile_for(d_in: int, n_modalities: int = 2) -> OutlierProfile:
    """DEFAULT_PROFILE scaled down so the hot sets fit a narrow layer."""
    always = max(1, d_in // 16)
    modality = max(1, d_in // 8)
    while always + n_modalities * modality > d_in and modality > 1:
        modality -= 1
    while always + n_modalities * modality > d_in and always > 1:
        always -= 1
    pool = d_in - always - n_modalities * modality
    return OutlierProfile(base_scale=1.0, always_hot=always, always_gain=16.0,
                          modality_hot=modality, modality_gain=16.0,
                          token_hot=min(2, max(pool, 0)), token_gain=6.0)


@dataclass(frozen=True)
class RunConfig:
    """Resolved pipeline configuration; defaults follow the evaluation setup
    (k=32, 8 routed experts, total rank 64 split evenly, 128 calibration
    samples)."""

    scheme: QuantScheme = field(default_factory=QuantScheme.w4a8)
    k: int = 32
    n_experts: int = 8
    rank: int = 64
    calib_tokens: int = 128
    n_modalities: int = 2
    profile: OutlierProfile = DEFAULT_PROFILE
    refine: RefineConfig | None = None
    seed: int = 0
    damping: float | None = None

    def __post_init__(self):
        if self.k < 1 or self.n_experts < 1:
            raise InvalidInputError("k and n_experts must be >= 1")
        if self.rank < 2:
            raise InvalidInputError("rank must be >= 2 (split across expert types)")

    def rank_split(self) -> tuple[int, int]:
        return self.rank // 2, self.rank - self.rank // 2

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.to_dict(),
            "k": self.k,
            "n_experts": self.n_experts,
            "rank": self.rank,
            "calib_tokens": self.calib_tokens,
            "n_modalities": self.n_modalities,
            "refine": self.refine.to_dict() if self.refine else None,
            "seed": self.seed,
        }


def quantize_layer(name: str, w_f, x, cfg: RunConfig) -> LayerBuild:
    """Run the full build for one layer."""
    w_f = as_matrix(w_f, f"{name} weight")
    x = as_matrix(x, f"{name} calibration")
    d_out, d_in = w_f.shape
    r_s, r_r = cfg.rank_split()
    r_s = min(r_s, d_out, d_in)
    r_r = min(r_r, d_out, d_in)

    if (cfg.n_experts + 1) * cfg.k > d_in:
        log.warning("%s: (n_experts+1)*k = %d exceeds d_in = %d; "
                    "routed channel set will be truncated",
                    name, (cfg.n_experts + 1) * cfg.k, d_in)

    stats = channel_stats(w_f, x, cfg.k, cfg.n_experts)
    quantized, shared, residual = build_shared_expert(
        w_f, x, stats.shared_channels, r_s, cfg.scheme, cfg.damping)
    if not np.isfinite(residual).all():
        raise NumericFailureError(f"{name}: non-finite residual after shared expert")

    routed_channels = stats.routed_channels
    n_experts = cfg.n_experts
    if len(routed_channels) < n_experts:
        n_experts = max(len(routed_channels), 0)
        if n_experts < cfg.n_experts:
            log.warning("%s: only %d routed channels observed; reducing experts "
                        "from %d to %d", name, len(routed_channels),
                        cfg.n_experts, n_experts)
    if n_experts > 0:
        sets = topk_sets(x, stats.importance, cfg.k)
        occ = co_occurrence(sets, routed_channels)
        similarity = npmi_similarity(occ)
        labels = spectral_cluster(similarity, n_experts, cfg.seed)
        routed, router = build_routed_experts(residual, x, routed_channels,
                                              labels, r_r)
    else:
        routed = RoutedExperts(adapters=[], clusters=[])
        router = Router(matrix=np.zeros((d_in, 0)))

    pack = assemble_pack(quantized, shared, routed, router, r_s, r_r, cfg.k,
                         cfg.scheme, stats.shared_channels, routed_channels)

    history = None
    if cfg.refine is not None and pack.n_experts >= 2:
        result = refine_layer(pack, x, w_f, cfg.refine)
        pack = result.pack
        history = result.history
        if result.aborted:
            log.warning("%s: refinement aborted on non-finite loss; "
                        "last good parameters restored", name)

    w_norm = float(np.linalg.norm(w_f))
    summary = {
        "n_shared_channels": len(stats.shared_channels),
        "n_routed_channels": len(routed_channels),
        "cluster_sizes": [int(c.size) for c in pack.routed.clusters],
        "weight_norm": w_norm,
        "shared_residual_norm": float(np.linalg.norm(residual)),
        "refined": history is not None,
    }
    return LayerBuild(name=name, weight=w_f, pack=pack, stats=stats,
                      history=history, summary=summary)


def build_layers(named_layers: list[tuple[str, np.ndarray, np.ndarray]],
                 cfg: RunConfig, jobs: int = 1) -> list[LayerBuild]:
    """Build every layer, optionally spreading layers across worker threads."""
    if jobs <= 1 or len(named_layers) <= 1:
        return [quantize_layer(name, w, x, cfg) for name, w, x in named_layers]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(quantize_layer, name, w, x, cfg)
                   for name, w, x in named_layers]
        return [f.result() for f in futures]


def evaluate_layer(name: str, w_f, pack: ExpertPack, x_eval,
                   variants: list[str], seed: int = 0) -> dict:
    """Error metrics per variant against the full-precision output, plus the
    routing histogram of the compensated path."""
    w_f = as_matrix(w_f, f"{name} weight")
    x_eval = as_matrix(x_eval, f"{name} eval activations")
    for v in variants:
        if v not in VARIANTS:
            raise InvalidInputError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    y_ref = x_eval @ w_f.T
    report: dict = {"name": name, "tokens": int(x_eval.shape[0]), "variants": {}}
    for v in variants:
        y = forward_baselines(w_f, x_eval, v, pack=pack, seed=seed)
        if not np.isfinite(y).all():
            raise NumericFailureError(f"{name}: variant {v} produced non-finite output")
        report["variants"][v] = layer_metrics(y_ref, y)
    trace = forward_compensated(pack, x_eval)
    hist = np.bincount(trace.chosen_expert[trace.chosen_expert >= 0],
                       minlength=max(pack.n_experts, 0))
    report["routing"] = {"histogram": hist.tolist()}
    return report


def analyze_channels(w_f, x, k: int) -> dict:
    """Observation statistics: frequency curve, per-channel activation means,
    and cross-token Jaccard overlap of the top-k sets."""
    w_f = as_matrix(w_f, "weight")
    x = as_matrix(x, "activations")
    stats = channel_stats(w_f, x, k, 1)
    mean_abs = np.abs(x).mean(axis=0)
    curve = [{"rank": i, "channel": int(c), "freq": stats.freq[c],
              "mean_abs_activation": float(mean_abs[c])}
             for i, c in enumerate(stats.ordered_channels)]

    sets = topk_sets(x, stats.importance, k)
    n_tokens = sets.shape[0]
    presence = np.zeros((n_tokens, w_f.shape[1]), dtype=np.float64)
    rows = np.repeat(np.arange(n_tokens), sets.shape[1])
    presence[rows, sets.ravel()] = 1.0
    inter = presence @ presence.T
    union = 2.0 * k - inter
    iu = np.triu_indices(n_tokens, 1)
    if iu[0].size:
        jac = inter[iu] / union[iu]
        overlap = {
            "pairs": int(jac.size),
            "mean_jaccard": float(jac.mean()),
            "p10_jaccard": float(np.quantile(jac, 0.10)),
            "median_jaccard": float(np.quantile(jac, 0.50)),
            "p90_jaccard": float(np.quantile(jac, 0.90)),
        }
    else:
        overlap = {"pairs": 0, "mean_jaccard": math.nan, "p10_jaccard": math.nan,
                   "median_jaccard": math.nan, "p90_jaccard": math.nan}
    return {"curve": curve, "overlap": overlap}


def synth_layers(n_layers: int, d_in: int, d_out: int, cfg: RunConfig,
                 tokens: int | None = None
                 ) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Deterministic synthetic model + calibration for demos and tests."""
    tokens = cfg.calib_tokens if tokens is None else tokens
    out = []
    for i in range(n_layers):
        rng = np.random.default_rng(cfg.seed + 1000 * i)
        w = rng.normal(size=(d_out, d_in))
        x, _ = synth_calibration(d_in, tokens, cfg.n_modalities,
                                 cfg.seed + 1000 * i + 1, cfg.profile)
        out.append((f"layer{i}", w, x))
    return out
