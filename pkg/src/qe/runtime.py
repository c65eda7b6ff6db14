"""Compensated forward pass and evaluation baselines.

The quantized GEMM is simulated in real arithmetic from dequantized codes.
Per token: divide by the smoothing scale, quantize-dequantize, run the main
GEMM plus the shared adapter, route on |activation| scores (argmin, lowest
index on ties), and add the selected routed adapter. Adapter paths stay
factored (down then up) in full precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, MissingMemberError
from .experts import ExpertPack, Router
from .linalg import as_matrix, as_vector
from .quantizer import dequantize_weight, quantize_activations, quantize_weight

__all__ = [
    "VARIANTS",
    "ForwardTrace",
    "route",
    "route_scores",
    "prepare_activations",
    "forward_compensated",
    "forward_baselines",
    "layer_metrics",
    "shared_residual_matrix",
]

VARIANTS = ("fp", "rtn", "shared_only", "qe", "qe_random_route", "qe_oracle_route")


@dataclass
class ForwardTrace:
    """Per-token routing decisions and the layer output."""

    chosen_expert: np.ndarray   # (T,) int, -1 when the pack has no routed experts
    scores: np.ndarray          # (T, n_experts)
    output: np.ndarray          # (T, d_out)


def route_scores(router: Router, x_abs: np.ndarray) -> np.ndarray:
    """Batched router scores: |x| weighted by each expert's column."""
    return x_abs @ router.matrix


def route(router: Router, x_t) -> tuple[np.ndarray, int]:
    """Scores and argmin expert for one token (lowest index wins ties)."""
    x_t = as_vector(x_t, "token")
    if x_t.size != router.matrix.shape[0]:
        raise InvalidInputError("token length does not match router")
    scores = route_scores(router, np.abs(x_t)[None, :])[0]
    if scores.size == 0:
        return scores, -1
    return scores, int(np.argmin(scores))


def prepare_activations(pack: ExpertPack, x: np.ndarray) -> np.ndarray:
    """Smooth and quantize-dequantize activations as the pack's GEMM sees them."""
    x = as_matrix(x, "activations")
    if x.shape[1] != pack.d_in:
        raise InvalidInputError(f"activation width {x.shape[1]} != pack d_in {pack.d_in}")
    return quantize_activations(x / pack.shared.smooth_scale[None, :], pack.scheme.act_bits)


def _routed_output(pack: ExpertPack, x_hat: np.ndarray, chosen: np.ndarray,
                   base: np.ndarray) -> np.ndarray:
    out = base
    for i, adapter in enumerate(pack.routed.adapters):
        mask = chosen == i
        if mask.any():
            out[mask] += adapter.apply(x_hat[mask])
    return out


def forward_compensated(pack: ExpertPack, x) -> ForwardTrace:
    """Quantized GEMM + shared adapter + routed adapter chosen per token."""
    x_hat = prepare_activations(pack, x)
    w_hat = dequantize_weight(pack.quantized)
    base = x_hat @ w_hat.T + pack.shared.adapter.apply(x_hat)
    scores = route_scores(pack.router, np.abs(x_hat))
    if pack.n_experts == 0:
        chosen = np.full(x_hat.shape[0], -1, dtype=np.int64)
        return ForwardTrace(chosen_expert=chosen, scores=scores, output=base)
    chosen = np.argmin(scores, axis=1)
    output = _routed_output(pack, x_hat, chosen, base)
    return ForwardTrace(chosen_expert=chosen, scores=scores, output=output)


def shared_residual_matrix(pack: ExpertPack, w_f: np.ndarray) -> np.ndarray:
    """Reconstruct the error left after the shared expert from the original
    weight (the builder's residual, recomputed)."""
    w_f = as_matrix(w_f, "weight")
    if w_f.shape != pack.quantized.codes.shape:
        raise InvalidInputError("weight shape does not match pack")
    w_smoothed = w_f * pack.shared.smooth_scale[None, :]
    err = w_smoothed - dequantize_weight(pack.quantized)
    return err - pack.shared.adapter.matrix()


def forward_baselines(w_f, x, variant: str, pack: ExpertPack | None = None,
                      seed: int = 0) -> np.ndarray:
    """Reference outputs for ablation variants.

    ``fp`` needs no pack; ``rtn`` reuses the pack's scheme on the raw weight
    with no exemptions; the remaining variants replay the compensated path
    with different expert selection (none / learned / random / true-residual
    oracle).
    """
    w_f = as_matrix(w_f, "weight")
    x = as_matrix(x, "activations")
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "fp":
        return x @ w_f.T
    if pack is None:
        raise MissingMemberError(f"variant {variant!r} requires an expert pack")
    if w_f.shape != pack.quantized.codes.shape:
        raise InvalidInputError("weight shape does not match pack")

    if variant == "rtn":
        q = quantize_weight(w_f, pack.scheme)
        x_hat = quantize_activations(x, pack.scheme.act_bits)
        return x_hat @ dequantize_weight(q).T

    x_hat = prepare_activations(pack, x)
    w_hat = dequantize_weight(pack.quantized)
    base = x_hat @ w_hat.T + pack.shared.adapter.apply(x_hat)
    if variant == "shared_only":
        return base
    if pack.n_experts == 0:
        raise MissingMemberError(f"variant {variant!r} requires routed experts")

    if variant == "qe":
        chosen = np.argmin(route_scores(pack.router, np.abs(x_hat)), axis=1)
    elif variant == "qe_random_route":
        rng = np.random.default_rng(seed)
        chosen = rng.integers(pack.n_experts, size=x_hat.shape[0])
    else:  # qe_oracle_route
        residual = shared_residual_matrix(pack, w_f)
        per_expert = np.empty((x_hat.shape[0], pack.n_experts))
        for i, adapter in enumerate(pack.routed.adapters):
            leftover = residual - adapter.matrix()
            per_expert[:, i] = np.linalg.norm(x_hat @ leftover.T, axis=1)
        chosen = np.argmin(per_expert, axis=1)
    return _routed_output(pack, x_hat, chosen, base)


def layer_metrics(y_ref, y_test) -> dict[str, float]:
    """Per-token L2 error statistics plus the overall relative Frobenius error."""
    y_ref = as_matrix(y_ref, "reference output")
    y_test = as_matrix(y_test, "test output")
    if y_ref.shape != y_test.shape:
        raise InvalidInputError(f"shape mismatch {y_ref.shape} vs {y_test.shape}")
    diff = y_test - y_ref
    per_token = np.linalg.norm(diff, axis=1)
    ref_norm = float(np.linalg.norm(y_ref))
    diff_norm = float(np.linalg.norm(diff))
    if ref_norm > 0.0:
        rel = diff_norm / ref_norm
    else:
        rel = 0.0 if diff_norm == 0.0 else float("inf")
    return {
        "mean_l2": float(per_token.mean()),
        "max_l2": float(per_token.max()),
        "rel_fro": rel,
    }
