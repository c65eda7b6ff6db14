"""Round-to-nearest weight and activation quantizers.

Two weight layouts: per-output-channel symmetric (one scale per row) and
group-wise asymmetric (scale + zero point per row/group slice). Activation
quantization is simulated per token in real arithmetic. Rounding is
half-away-from-zero everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import InvalidInputError
from .linalg import as_matrix

__all__ = [
    "PER_CHANNEL_SYMMETRIC",
    "GROUP_ASYMMETRIC",
    "QuantScheme",
    "QuantizedWeight",
    "quantize_weight",
    "dequantize_weight",
    "quantize_activations",
    "quant_error",
    "round_half_away",
]

PER_CHANNEL_SYMMETRIC = "per_output_channel_symmetric"
GROUP_ASYMMETRIC = "group_asymmetric"
ACT_PER_TOKEN = "per_token_symmetric"
ACT_NONE = "none"


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantScheme:
    """Quantizer configuration for one layer.

    ``act_bits == 0`` means full-precision activations. ``group_size`` only
    applies to the group-asymmetric weight mode; a trailing short group is
    allowed when it does not divide ``d_in``.
    """

    weight_bits: int
    act_bits: int = 0
    weight_mode: str = PER_CHANNEL_SYMMETRIC
    act_mode: str = ACT_PER_TOKEN
    group_size: int = 128

    def __post_init__(self):
        if not 2 <= self.weight_bits <= 8:
            raise InvalidInputError(f"weight_bits must be in 2..8, got {self.weight_bits}")
        if self.act_bits != 0 and not 4 <= self.act_bits <= 16:
            raise InvalidInputError(f"act_bits must be 0 or in 4..16, got {self.act_bits}")
        if self.weight_mode not in (PER_CHANNEL_SYMMETRIC, GROUP_ASYMMETRIC):
            raise InvalidInputError(f"unknown weight_mode {self.weight_mode!r}")
        if self.act_mode not in (ACT_PER_TOKEN, ACT_NONE):
            raise InvalidInputError(f"unknown act_mode {self.act_mode!r}")
        if self.weight_mode == GROUP_ASYMMETRIC and self.group_size < 1:
            raise InvalidInputError(f"group_size must be >= 1, got {self.group_size}")

    @classmethod
    def from_bits(cls, wbits: int, abits: int, weight_mode: str = PER_CHANNEL_SYMMETRIC,
                  group_size: int = 128) -> "QuantScheme":
        """Build a scheme from a WxAy pair; abits 0 or 16 keeps activations
        in full precision."""
        if abits in (0, 16):
            return cls(wbits, 0, weight_mode, ACT_NONE, group_size)
        return cls(wbits, abits, weight_mode, ACT_PER_TOKEN, group_size)

    @classmethod
    def w4a6(cls) -> "QuantScheme":
        return cls(4, 6)

    @classmethod
    def w4a8(cls) -> "QuantScheme":
        return cls(4, 8)

    @classmethod
    def w3a16(cls) -> "QuantScheme":
        return cls(3, 0, GROUP_ASYMMETRIC, ACT_NONE, 128)

    def to_dict(self) -> dict:
        return {
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "weight_mode": self.weight_mode,
            "act_mode": self.act_mode,
            "group_size": self.group_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantScheme":
        return cls(d["weight_bits"], d["act_bits"], d["weight_mode"],
                   d["act_mode"], d["group_size"])


@dataclass
class QuantizedWeight:
    """Integer codes plus the affine parameters needed to dequantize.

    Symmetric: ``codes`` in [-(2^(b-1)-1), 2^(b-1)-1], ``scales`` has one
    entry per output row, ``zero_points`` is None. Asymmetric: ``codes`` in
    [0, 2^b-1], ``scales``/``zero_points`` have one entry per (row, group).
    """

    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray | None
    scheme: QuantScheme

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape


def _group_bounds(d_in: int, group_size: int) -> list[tuple[int, int]]:
    return [(g, min(g + group_size, d_in)) for g in range(0, d_in, group_size)]


def _validate_skip_cols(skip_cols, d_in: int) -> np.ndarray:
    idx = np.asarray(sorted(set(int(c) for c in skip_cols)), dtype=np.int64)
    if idx.size and (idx[0] < 0 or idx[-1] >= d_in):
        raise InvalidInputError(f"skip_cols out of range [0, {d_in})")
    return idx


def quantize_weight(w, scheme: QuantScheme, skip_cols: Iterable[int] = ()) -> QuantizedWeight:
    """Quantize a weight matrix, exempting ``skip_cols``.

    Skipped columns are zeroed before scales are computed and before
    quantization, so they dequantize to exactly zero (in the asymmetric mode
    their stored code equals the group zero point).
    """
    w = as_matrix(w, "weight")
    d_out, d_in = w.shape
    skip = _validate_skip_cols(skip_cols, d_in)
    wz = w.copy()
    if skip.size:
        wz[:, skip] = 0.0

    b = scheme.weight_bits
    if scheme.weight_mode == PER_CHANNEL_SYMMETRIC:
        qmax = float(2 ** (b - 1) - 1)
        amax = np.abs(wz).max(axis=1)
        scales = np.where(amax > 0.0, amax / qmax, 1.0)
        codes = round_half_away(wz / scales[:, None])
        np.clip(codes, -qmax, qmax, out=codes)
        return QuantizedWeight(codes.astype(np.int32), scales, None, scheme)

    bounds = _group_bounds(d_in, scheme.group_size)
    levels = float(2**b - 1)
    codes = np.zeros((d_out, d_in), dtype=np.int32)
    scales = np.ones((d_out, len(bounds)))
    zero_points = np.zeros((d_out, len(bounds)), dtype=np.int32)
    for gi, (lo, hi) in enumerate(bounds):
        block = wz[:, lo:hi]
        mn = block.min(axis=1)
        mx = block.max(axis=1)
        span = mx - mn
        constant = span == 0.0
        # Constant groups: zero blocks get scale 1; a nonzero constant c is
        # reproduced exactly with scale |c| and zero point -sign(c).
        scale = np.where(constant, np.where(mn == 0.0, 1.0, np.abs(mn)),
                         span / levels)
        zp = round_half_away(-mn / scale)
        q = round_half_away(block / scale[:, None]) + zp[:, None]
        np.clip(q, 0.0, levels, out=q)
        codes[:, lo:hi] = q.astype(np.int32)
        scales[:, gi] = scale
        zero_points[:, gi] = zp.astype(np.int32)
    return QuantizedWeight(codes, scales, zero_points, scheme)


def dequantize_weight(q: QuantizedWeight) -> np.ndarray:
    """Map stored codes back to real values."""
    if q.scheme.weight_mode == PER_CHANNEL_SYMMETRIC:
        return q.codes.astype(np.float64) * q.scales[:, None]
    d_in = q.codes.shape[1]
    out = np.empty(q.codes.shape, dtype=np.float64)
    for gi, (lo, hi) in enumerate(_group_bounds(d_in, q.scheme.group_size)):
        out[:, lo:hi] = (q.codes[:, lo:hi] - q.zero_points[:, gi:gi + 1]) \
            * q.scales[:, gi:gi + 1]
    return out


def quantize_activations(x, act_bits: int) -> np.ndarray:
    """Per-token symmetric quantize-dequantize; ``act_bits == 0`` is identity.

    Each token row gets its own scale max|row| / (2^(b-1)-1); all-zero rows
    fall back to scale 1 and stay zero.
    """
    x = as_matrix(x, "activations")
    if act_bits == 0:
        return x.copy()
    if not 4 <= act_bits <= 16:
        raise InvalidInputError(f"act_bits must be 0 or in 4..16, got {act_bits}")
    qmax = float(2 ** (act_bits - 1) - 1)
    amax = np.abs(x).max(axis=1)
    scales = np.where(amax > 0.0, amax / qmax, 1.0)
    codes = round_half_away(x / scales[:, None])
    np.clip(codes, -qmax, qmax, out=codes)
    return codes * scales[:, None]


def quant_error(w_f, q: QuantizedWeight) -> np.ndarray:
    """Error matrix ``w_f - dequantize(q)``.

    Columns that were exempted at quantization time dequantize to zero, so
    they reappear whole in the error.
    """
    w_f = as_matrix(w_f, "weight")
    if w_f.shape != q.codes.shape:
        raise InvalidInputError(
            f"weight shape {w_f.shape} does not match codes shape {q.codes.shape}")
    return w_f - dequantize_weight(q)
