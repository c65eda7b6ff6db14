"""Analytic FLOPs and parameter counts for a compensated linear layer.

The compensated layer adds two rank-r adapter paths (shared + one routed)
and an n_experts-wide router product on top of the original GEMM. The
"paper" parameter mode evaluates the closed-form square-layer formula
d^2 + r*d*(1 + n_experts); the "detailed" mode counts the actual members
(shared adapter, all routed adapters, router).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidInputError

__all__ = ["LayerShape", "flops", "params"]

COST_VARIANTS = ("origin", "qe")
PARAM_MODES = ("paper", "detailed")


@dataclass(frozen=True)
class LayerShape:
    seq_len: int
    d_in: int
    d_out: int
    rank: int          # total adapter rank, split evenly between shared/routed
    n_experts: int

    def __post_init__(self):
        if self.seq_len < 1 or self.d_in < 1 or self.d_out < 1:
            raise InvalidInputError("seq_len, d_in and d_out must be >= 1")
        if self.rank < 0 or self.n_experts < 0:
            raise InvalidInputError("rank and n_experts must be >= 0")

    @property
    def square(self) -> bool:
        return self.d_in == self.d_out

    def rank_split(self) -> tuple[int, int]:
        return self.rank // 2, self.rank - self.rank // 2


def _check_variant(variant: str):
    if variant not in COST_VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}; expected {COST_VARIANTS}")


def flops(shape: LayerShape, variant: str) -> int:
    """Multiply-accumulate count for one forward pass.

    origin: s * d_in * d_out. qe adds s*(d_in + d_out)*r for the two adapter
    paths and s*d_in*n_experts for the router; for square layers this is the
    closed form s*d^2 + s*d*(2r + n_experts).
    """
    _check_variant(variant)
    base = shape.seq_len * shape.d_in * shape.d_out
    if variant == "origin":
        return base
    extra = shape.seq_len * (shape.d_in + shape.d_out) * shape.rank \
        + shape.seq_len * shape.d_in * shape.n_experts
    return base + extra


def params(shape: LayerShape, variant: str, mode: str = "paper") -> int:
    """Stored parameter count.

    ``mode="paper"`` uses the square-layer closed form and rejects
    rectangular shapes; ``mode="detailed"`` counts the exact members with the
    rank split evenly between the shared and routed adapters.
    """
    _check_variant(variant)
    if mode not in PARAM_MODES:
        raise InvalidInputError(f"unknown mode {mode!r}; expected {PARAM_MODES}")
    base = shape.d_in * shape.d_out
    if variant == "origin":
        return base
    if mode == "paper":
        if not shape.square:
            raise InvalidInputError(
                "paper-formula params need d_in == d_out; use mode='detailed'")
        return base + shape.rank * shape.d_in * (1 + shape.n_experts)
    r_s, r_r = shape.rank_split()
    shared = shape.d_out * r_s + r_s * shape.d_in
    routed = shape.n_experts * (shape.d_out * r_r + r_r * shape.d_in)
    router = shape.d_in * shape.n_experts
    return base + shared + routed + router
