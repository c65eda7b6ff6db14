"""Layer-wise refinement of routed adapters and the router.

Loss per token: the L1 reconstruction error of the best expert (regression
term) plus a temperature-scaled KL divergence aligning the router's score
distribution with the standardized error distribution (classification term).
Only the routed adapters and the router move; the quantized weight and the
shared adapter stay frozen. Gradients are analytic: L1 via its sign
subgradient (0 at 0), the min via the active expert only, and the KL through
both softmaxes including the per-token mean/std standardization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInputError
from .experts import ExpertPack, LowRankAdapter, RoutedExperts, Router
from .linalg import as_matrix
from .quantizer import dequantize_weight
from .runtime import prepare_activations

__all__ = [
    "RefineConfig",
    "LossBreakdown",
    "HistoryRow",
    "RefineResult",
    "cosine_lr",
    "classification_loss",
    "refine_losses",
    "refine_layer",
    "grad_check",
    "finite_diff_max_rel_error",
]

# Below this population std the standardization divisor is replaced by 1.
STD_FLOOR = 1e-12


@dataclass(frozen=True)
class RefineConfig:
    tau: float = 0.5
    alpha: float = 1.0
    beta: float = 0.05
    lr: float = 1e-4
    epochs: int = 16
    iters_per_epoch: int = 100
    batch_size: int = 32
    seed: int = 0
    # The error distribution is standardized by its std; router logits are
    # only centered. Set True to standardize both sides identically.
    symmetric_standardize: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lr < 0.0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau, "alpha": self.alpha, "beta": self.beta,
            "lr": self.lr, "epochs": self.epochs,
            "iters_per_epoch": self.iters_per_epoch,
            "batch_size": self.batch_size, "seed": self.seed,
            "symmetric_standardize": self.symmetric_standardize,
        }


@dataclass
class LossBreakdown:
    l_reg: float
    l_cls: float
    distances: np.ndarray   # (T, n_experts) L1 reconstruction errors
    logits: np.ndarray      # (T, n_experts) router scores

    def total(self, alpha: float, beta: float) -> float:
        return alpha * self.l_reg + beta * self.l_cls


@dataclass
class HistoryRow:
    iteration: int
    lr: float
    loss: float
    l_reg: float
    l_cls: float


@dataclass
class RefineResult:
    pack: ExpertPack
    history: list[HistoryRow]
    initial_loss: float
    final_loss: float
    aborted: bool = False


def cosine_lr(lr: float, step: int, total: int) -> float:
    """Cosine annealing: full lr at step 0, exactly 0 at step == total."""
    if total <= 0:
        return lr
    return 0.5 * lr * (1.0 + math.cos(math.pi * step / total))


def _softmax_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    return expz / denom, shifted - np.log(denom)


def _standardized_logits(values: np.ndarray, tau: float, divide_by_std: bool
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-row -(v - mean)/std/tau (std optional). Returns (logits, centered,
    effective std, substituted-row mask)."""
    mu = values.mean(axis=1, keepdims=True)
    centered = values - mu
    if divide_by_std:
        std = values.std(axis=1)
        substituted = std < STD_FLOOR
        std_eff = np.where(substituted, 1.0, std)
    else:
        substituted = np.zeros(values.shape[0], dtype=bool)
        std_eff = np.ones(values.shape[0])
    return -centered / (std_eff[:, None] * tau), centered, std_eff, substituted


def classification_loss(distances, logits, tau: float,
                        symmetric_standardize: bool = False
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token tau^2 * KL(P || Q).

    P is the softmax of the negated standardized distances, Q the softmax of
    the negated centered router logits (also divided by their std when
    ``symmetric_standardize``). Returns ``(per_token_loss, P, Q)``.
    """
    d = as_matrix(distances, "distances")
    l = as_matrix(logits, "logits")
    if d.shape != l.shape:
        raise InvalidInputError("distances and logits shapes differ")
    if d.shape[1] < 2:
        raise ConfigError("classification loss needs at least 2 experts")
    g, _, _, _ = _standardized_logits(d, tau, divide_by_std=True)
    h, _, _, _ = _standardized_logits(l, tau, divide_by_std=symmetric_standardize)
    p, log_p = _softmax_rows(g)
    q, log_q = _softmax_rows(h)
    kl = (p * (log_p - log_q)).sum(axis=1)
    return tau * tau * kl, p, q


@dataclass
class _Params:
    """Mutable view of the trainable tensors."""

    ups: list[np.ndarray]
    downs: list[np.ndarray]
    router: np.ndarray

    @classmethod
    def from_pack(cls, pack: ExpertPack) -> "_Params":
        return cls(ups=[a.up.copy() for a in pack.routed.adapters],
                   downs=[a.down.copy() for a in pack.routed.adapters],
                   router=pack.router.matrix.copy())

    def tensors(self) -> list[np.ndarray]:
        return [*self.ups, *self.downs, self.router]

    def copy(self) -> "_Params":
        return _Params(ups=[u.copy() for u in self.ups],
                       downs=[d.copy() for d in self.downs],
                       router=self.router.copy())


@dataclass
class _Signature:
    """Active-set fingerprint used to certify kink-free neighborhoods."""

    argmin: bytes
    signs: bytes
    substituted: bytes

    def __eq__(self, other) -> bool:
        return (self.argmin == other.argmin and self.signs == other.signs
                and self.substituted == other.substituted)


def _evaluate(params: _Params, base: np.ndarray, x_hat: np.ndarray,
              x_abs: np.ndarray, y_fp: np.ndarray, cfg: RefineConfig,
              need_grads: bool):
    """Loss pieces, optional gradients, and the active-set signature."""
    n_tokens = x_hat.shape[0]
    n_experts = len(params.ups)
    zs, diffs, signs = [], [], []
    d = np.empty((n_tokens, n_experts))
    for i in range(n_experts):
        z = x_hat @ params.downs[i].T
        diff = base + z @ params.ups[i].T - y_fp
        zs.append(z)
        diffs.append(diff)
        signs.append(np.sign(diff))
        d[:, i] = np.abs(diff).sum(axis=1)
    logits = x_abs @ params.router

    argmin = np.argmin(d, axis=1)
    l_reg = float(d[np.arange(n_tokens), argmin].mean())

    tau = cfg.tau
    g, d_centered, d_std, d_sub = _standardized_logits(d, tau, divide_by_std=True)
    h, l_centered, l_std, l_sub = _standardized_logits(
        logits, tau, divide_by_std=cfg.symmetric_standardize)
    p, log_p = _softmax_rows(g)
    q, log_q = _softmax_rows(h)
    kl = (p * (log_p - log_q)).sum(axis=1)
    l_cls = float(tau * tau * kl.mean())

    breakdown = LossBreakdown(l_reg=l_reg, l_cls=l_cls, distances=d, logits=logits)
    signature = _Signature(
        argmin=argmin.tobytes(),
        signs=b"".join(s.tobytes() for s in signs),
        substituted=d_sub.tobytes() + l_sub.tobytes(),
    )
    if not need_grads:
        return breakdown, None, signature

    n = float(n_experts)
    # d/dg of KL, then back through the standardization onto the distances.
    a = p * ((log_p - log_q) - kl[:, None])
    a_centered = a - a.mean(axis=1, keepdims=True)
    grad_d_cls = -a_centered / (d_std[:, None] * tau)
    proj = (a * d_centered).sum(axis=1) / (n * d_std**3 * tau)
    grad_d_cls += proj[:, None] * d_centered
    grad_d_cls[d_sub] = (-a_centered / tau)[d_sub]
    grad_d_cls *= tau * tau

    b = q - p
    b_centered = b - b.mean(axis=1, keepdims=True)
    if cfg.symmetric_standardize:
        grad_l_cls = -b_centered / (l_std[:, None] * tau)
        proj_l = (b * l_centered).sum(axis=1) / (n * l_std**3 * tau)
        grad_l_cls += proj_l[:, None] * l_centered
        grad_l_cls[l_sub] = (-b_centered / tau)[l_sub]
    else:
        grad_l_cls = -b_centered / tau
    grad_l_cls *= tau * tau

    grad_d = cfg.beta * grad_d_cls
    grad_d[np.arange(n_tokens), argmin] += cfg.alpha
    grad_d /= n_tokens
    grad_l = cfg.beta * grad_l_cls / n_tokens

    grad_ups, grad_downs = [], []
    for i in range(n_experts):
        d_dy = grad_d[:, i:i + 1] * signs[i]          # (T, d_out)
        grad_ups.append(d_dy.T @ zs[i])
        grad_downs.append((params.ups[i].T @ d_dy.T) @ x_hat)
    grad_router = x_abs.T @ grad_l
    grads = _Params(ups=grad_ups, downs=grad_downs, router=grad_router)
    return breakdown, grads, signature


def _pack_with_params(pack: ExpertPack, params: _Params) -> ExpertPack:
    adapters = [LowRankAdapter(up=u.copy(), down=d.copy())
                for u, d in zip(params.ups, params.downs)]
    routed = RoutedExperts(adapters=adapters,
                           clusters=[c.copy() for c in pack.routed.clusters])
    return ExpertPack(
        quantized=pack.quantized, shared=pack.shared, routed=routed,
        router=Router(matrix=params.router.copy()),
        shared_rank=pack.shared_rank, routed_rank=pack.routed_rank,
        k=pack.k, scheme=pack.scheme,
        shared_channels=list(pack.shared_channels),
        routed_channels=list(pack.routed_channels))


def _forward_base(pack: ExpertPack, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_hat = prepare_activations(pack, x)
    w_hat = dequantize_weight(pack.quantized)
    base = x_hat @ w_hat.T + pack.shared.adapter.apply(x_hat)
    return x_hat, np.abs(x_hat), base


def refine_losses(pack: ExpertPack, x_hat, y_fp, tau: float,
                  symmetric_standardize: bool = False) -> LossBreakdown:
    """Loss components for a prepared activation batch.

    ``x_hat`` must already be smoothed and quantize-dequantized (see
    :func:`qe.runtime.prepare_activations`); ``y_fp`` is the full-precision
    layer output being reconstructed.
    """
    if pack.n_experts < 2:
        raise ConfigError("refinement needs at least 2 routed experts")
    x_hat = as_matrix(x_hat, "activations")
    y_fp = as_matrix(y_fp, "reference output")
    if x_hat.shape[0] == 0:
        raise InvalidInputError("batch is empty")
    cfg = RefineConfig(tau=tau, symmetric_standardize=symmetric_standardize)
    params = _Params.from_pack(pack)
    w_hat = dequantize_weight(pack.quantized)
    base = x_hat @ w_hat.T + pack.shared.adapter.apply(x_hat)
    breakdown, _, _ = _evaluate(params, base, x_hat, np.abs(x_hat), y_fp, cfg,
                                need_grads=False)
    return breakdown


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for lo in range(0, n - size + 1, size):
            yield order[lo:lo + size]


def refine_layer(pack: ExpertPack, x_calib, w_f, config: RefineConfig) -> RefineResult:
    """Adam over the routed adapters and router with a cosine lr schedule.

    The quantized weight and shared adapter are untouched. Aborts restoring
    the last finite-loss parameters if the loss ever goes non-finite.
    """
    if pack.n_experts < 2:
        raise ConfigError("refinement needs at least 2 routed experts")
    x_calib = as_matrix(x_calib, "calibration activations")
    w_f = as_matrix(w_f, "weight")
    y_fp = x_calib @ w_f.T
    x_hat, x_abs, base = _forward_base(pack, x_calib)

    params = _Params.from_pack(pack)

    def full_breakdown() -> LossBreakdown:
        return _evaluate(params, base, x_hat, x_abs, y_fp, config,
                         need_grads=False)[0]

    initial_loss = full_breakdown().total(config.alpha, config.beta)

    total = config.epochs * config.iters_per_epoch
    rng = np.random.default_rng(config.seed)
    batches = _batch_indices(x_calib.shape[0], config.batch_size, rng)
    m_state = [np.zeros_like(t) for t in params.tensors()]
    v_state = [np.zeros_like(t) for t in params.tensors()]
    history: list[HistoryRow] = []
    last_good = params.copy()
    aborted = False
    for step in range(total):
        # History tracks the loss over the whole calibration set; gradient
        # steps come from minibatches.
        breakdown = full_breakdown()
        loss = breakdown.total(config.alpha, config.beta)
        if not math.isfinite(loss):
            params = last_good
            aborted = True
            break
        last_good = params.copy()
        idx = next(batches)
        _, grads, _ = _evaluate(params, base[idx], x_hat[idx], x_abs[idx],
                                y_fp[idx], config, need_grads=True)
        lr_t = cosine_lr(config.lr, step, total)
        history.append(HistoryRow(iteration=step, lr=lr_t, loss=loss,
                                  l_reg=breakdown.l_reg, l_cls=breakdown.l_cls))
        t = step + 1
        bc1 = 1.0 - config.adam_beta1**t
        bc2 = 1.0 - config.adam_beta2**t
        for tensor, grad, m, v in zip(params.tensors(), grads.tensors(),
                                      m_state, v_state):
            m *= config.adam_beta1
            m += (1.0 - config.adam_beta1) * grad
            v *= config.adam_beta2
            v += (1.0 - config.adam_beta2) * grad * grad
            tensor -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)

    final_loss = full_breakdown().total(config.alpha, config.beta)
    return RefineResult(pack=_pack_with_params(pack, params), history=history,
                        initial_loss=initial_loss, final_loss=final_loss,
                        aborted=aborted)


def finite_diff_max_rel_error(loss_fn, grad_fn, tensors: list[np.ndarray],
                              epsilon: float, n_samples: int, seed: int,
                              signature_fn=None, magnitude_floor: float = 1e-3,
                              ) -> float:
    """Central-difference check of ``grad_fn`` against ``loss_fn``.

    Samples coordinates across ``tensors`` (mutated in place around each
    probe). A coordinate is skipped and resampled when ``signature_fn``
    reports a different active set at either probe point (a kink within
    epsilon) or when its analytic gradient is negligible relative to the
    largest one in its tensor.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise InvalidInputError("epsilon must be in [1e-7, 1e-4]")
    rng = np.random.default_rng(seed)
    grads = grad_fn()
    base_sig = signature_fn() if signature_fn is not None else None
    worst = 0.0
    accepted = 0
    attempts = 0
    while accepted < n_samples and attempts < 50 * n_samples:
        attempts += 1
        ti = int(rng.integers(len(tensors)))
        tensor = tensors[ti]
        if tensor.size == 0:
            continue
        flat = int(rng.integers(tensor.size))
        analytic = float(grads[ti].flat[flat])
        tensor_scale = float(np.abs(grads[ti]).max())
        if tensor_scale > 0.0 and abs(analytic) < magnitude_floor * tensor_scale:
            continue
        orig = float(tensor.flat[flat])
        tensor.flat[flat] = orig + epsilon
        up = loss_fn()
        sig_up = signature_fn() if signature_fn is not None else None
        tensor.flat[flat] = orig - epsilon
        down = loss_fn()
        sig_down = signature_fn() if signature_fn is not None else None
        tensor.flat[flat] = orig
        if base_sig is not None and (sig_up != base_sig or sig_down != base_sig):
            continue
        numeric = (up - down) / (2.0 * epsilon)
        denom = max(abs(analytic), abs(numeric))
        if denom < 1e-10:
            err = abs(analytic - numeric)
        else:
            err = abs(analytic - numeric) / denom
        worst = max(worst, err)
        accepted += 1
    if accepted == 0:
        raise InvalidInputError("no kink-free coordinates found for grad check")
    return worst


def grad_check(pack: ExpertPack, w_f, x_batch, epsilon: float,
               n_samples: int = 24, seed: int = 0,
               config: RefineConfig | None = None) -> float:
    """Max relative error between analytic and central-difference gradients
    of the refinement loss at the pack's current parameters."""
    if pack.n_experts < 2:
        raise ConfigError("grad check needs at least 2 routed experts")
    cfg = config or RefineConfig()
    x_batch = as_matrix(x_batch, "activations")
    w_f = as_matrix(w_f, "weight")
    y_fp = x_batch @ w_f.T
    x_hat, x_abs, base = _forward_base(pack, x_batch)
    params = _Params.from_pack(pack)

    def run(need_grads: bool):
        return _evaluate(params, base, x_hat, x_abs, y_fp, cfg, need_grads)

    loss_fn = lambda: run(False)[0].total(cfg.alpha, cfg.beta)
    grad_fn = lambda: run(True)[1].tensors()
    signature_fn = lambda: run(False)[2]
    return finite_diff_max_rel_error(loss_fn, grad_fn, params.tensors(),
                                     epsilon, n_samples, seed, signature_fn)
