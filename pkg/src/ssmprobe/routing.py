"""Learned soft permutations via entropy-regularized 1D optimal transport.

A per-token linear scorer (no bias) maps tokens to scalars, the scores are
standardized across the sequence, and each standardized score is matched
against canonical positions p_j = j/(N-1) through the squared distance cost
C[i][j] = (s_i - p_j)^2.  Alternating row/column scaling of exp(-C/tau)
(u update first, v second, K times from v=1) yields an approximately
doubly-stochastic plan used to reorder the tokens, T_out = P^T T.

Iterations run on log-potentials: exp(-C/tau) underflows f64 once C/tau
exceeds ~700, while the log-domain updates are exact for any tau >= 1e-3.
The backward pass replays all K unrolled iterations, so scorer gradients
are exact rather than implicit-function approximations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derive_rng


@dataclass
class Scorer:
    """Linear token scorer without bias: score(h) = w . h."""

    w: np.ndarray  # (d,)


def init_scorer(d: int, rng: np.random.Generator) -> Scorer:
    # 1/sqrt(d) normal keeps unit-variance scores on unit-variance tokens.
    return Scorer(rng.normal(size=d) / np.sqrt(d))


@dataclass
class SinkhornConfig:
    iterations: int = 20
    tau: float = 0.1
    epsilon_std: float = 1e-6

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.epsilon_std <= 0:
            raise ValueError("epsilon_std must be positive")


@dataclass
class SinkhornTape:
    log_kernel: np.ndarray  # (B, N, N): -C/tau
    log_u: np.ndarray  # (K, B, N)
    log_v: np.ndarray  # (K+1, B, N); log_v[0] is the all-zero start
    tau: float


@dataclass
class TransportPlan:
    """Approximately doubly-stochastic plan with its marginal residuals."""

    P: np.ndarray  # (N, N), nonnegative
    row_marginal_err: float
    col_marginal_err: float
    tape: SinkhornTape | None = field(default=None, repr=False, compare=False)


# ---------------------------------------------------------------------------
# batched core


def standardize_scores_batch(scores: np.ndarray, eps: float) -> tuple[np.ndarray, dict]:
    """Zero-mean unit-variance scores per sample (population std, eps-guarded)."""
    bsz, n = scores.shape
    if n == 1:
        zeros = np.zeros_like(scores)
        return zeros, {"passthrough": True, "n": n}
    mu = scores.mean(axis=1, keepdims=True)
    centered = scores - mu
    sigma = np.sqrt((centered**2).mean(axis=1, keepdims=True))
    denom = sigma + eps
    out = centered / denom
    return out, {"passthrough": False, "centered": centered, "sigma": sigma,
                 "denom": denom, "n": n}


def standardize_scores_backward(tape: dict, grad_out: np.ndarray) -> np.ndarray:
    if tape["passthrough"]:
        return np.zeros_like(grad_out)
    centered, sigma, denom, n = tape["centered"], tape["sigma"], tape["denom"], tape["n"]
    g_mean = grad_out.mean(axis=1, keepdims=True)
    grad = (grad_out - g_mean) / denom
    # Sigma term vanishes for constant inputs (sigma == 0); the eps guard
    # already sent the forward output to zero there.
    dot = (grad_out * centered).sum(axis=1, keepdims=True)
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    sigma_term = centered * dot / (n * safe_sigma * denom**2)
    grad -= np.where(sigma > 0, sigma_term, 0.0)
    return grad


def build_cost_batch(s_tilde: np.ndarray) -> np.ndarray:
    bsz, n = s_tilde.shape
    if n < 2:
        raise ValueError("cost needs N >= 2 (N == 1 bypasses routing)")
    positions = np.arange(n, dtype=np.float64) / (n - 1)
    return (s_tilde[:, :, None] - positions[None, None, :]) ** 2


def build_cost_backward(s_tilde: np.ndarray, grad_cost: np.ndarray) -> np.ndarray:
    n = s_tilde.shape[1]
    positions = np.arange(n, dtype=np.float64) / (n - 1)
    return 2.0 * ((s_tilde[:, :, None] - positions[None, None, :]) * grad_cost).sum(axis=2)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def sinkhorn_batch(cost: np.ndarray, cfg: SinkhornConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, SinkhornTape]:
    """K alternating scalings in the log domain.

    Returns (P (B,N,N), row_err (B,), col_err (B,), tape).
    """
    cfg.validate()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 3 or cost.shape[1] != cost.shape[2]:
        raise ValueError("expected (B, N, N) costs")
    if not np.isfinite(cost).all():
        raise ValueError("non-finite cost")
    bsz, n, _ = cost.shape
    log_k = -cost / cfg.tau
    k_iters = cfg.iterations
    log_u = np.zeros((k_iters, bsz, n))
    log_v = np.zeros((k_iters + 1, bsz, n))
    for t in range(1, k_iters + 1):
        log_u[t - 1] = -_logsumexp(log_k + log_v[t - 1][:, None, :], axis=2)
        log_v[t] = -_logsumexp(log_k + log_u[t - 1][:, :, None], axis=1)
    # The closing column normalization exp(x + log_v) with log_v = -LSE(x) is
    # written as an explicit softmax ratio: identical algebra, but shared
    # rounding cancels, so a zero cost yields exactly the uniform plan.
    x = log_k + log_u[-1][:, :, None]
    e = np.exp(x - x.max(axis=1, keepdims=True))
    plan = e / e.sum(axis=1, keepdims=True)
    row_err = np.abs(plan.sum(axis=2) - 1.0).max(axis=1)
    col_err = np.abs(plan.sum(axis=1) - 1.0).max(axis=1)
    tape = SinkhornTape(log_k, log_u, log_v, cfg.tau)
    return plan, row_err, col_err, tape


def sinkhorn_backward_batch(tape: SinkhornTape, grad_plan: np.ndarray) -> np.ndarray:
    """Exact gradient of the plan w.r.t. the cost through all K iterations."""
    log_k, log_u, log_v = tape.log_kernel, tape.log_u, tape.log_v
    k_iters = log_u.shape[0]
    plan = np.exp(log_k + log_u[-1][:, :, None] + log_v[-1][:, None, :])
    g_logp = grad_plan * plan
    g_logk = g_logp.copy()
    g_lu = g_logp.sum(axis=2)
    g_lv = g_logp.sum(axis=1)
    for t in range(k_iters, 0, -1):
        # log_v[t] = -LSE_i(log_k + log_u[t-1]); its softmax is column-stochastic.
        col_soft = np.exp(log_k + log_u[t - 1][:, :, None] + log_v[t][:, None, :])
        g_logk -= col_soft * g_lv[:, None, :]
        g_lu -= np.einsum("bij,bj->bi", col_soft, g_lv)
        # log_u[t-1] = -LSE_j(log_k + log_v[t-1]); its softmax is row-stochastic.
        row_soft = np.exp(log_k + log_u[t - 1][:, :, None] + log_v[t - 1][:, None, :])
        g_logk -= g_lu[:, :, None] * row_soft
        g_lv = -np.einsum("bij,bi->bj", row_soft, g_lu)
        g_lu = np.zeros_like(g_lu)
    return -g_logk / tape.tau


def soft_reorder_batch(plan: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """T_out = P^T T: output row k mixes token rows with the plan's column k."""
    if plan.shape[1] != tokens.shape[1]:
        raise ValueError("plan and tokens disagree on N")
    return np.einsum("bik,bid->bkd", plan, tokens)


def soft_reorder_backward(plan: np.ndarray, tokens: np.ndarray,
                          grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    grad_plan = np.einsum("bkd,bid->bik", grad_out, tokens)
    grad_tokens = np.einsum("bik,bkd->bid", plan, grad_out)
    return grad_plan, grad_tokens


@dataclass
class RouteTape:
    passthrough: bool
    tokens: np.ndarray
    w: np.ndarray
    std_tape: dict | None = None
    s_tilde: np.ndarray | None = None
    sink_tape: SinkhornTape | None = None
    plan: np.ndarray | None = None


def route_sinkhorn_batch(scorer: Scorer, cfg: SinkhornConfig, tokens: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, RouteTape]:
    """score -> standardize -> cost -> sinkhorn -> reorder over a batch.

    Returns (reordered (B,N,d), plans (B,N,N), row_err (B,), col_err (B,), tape).
    Length-1 sequences bypass routing entirely (positions are undefined).
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if not np.isfinite(tokens).all():
        raise ValueError("non-finite input tokens")
    bsz, n, d = tokens.shape
    if n == 1:
        plans = np.ones((bsz, 1, 1))
        zero = np.zeros(bsz)
        return tokens.copy(), plans, zero, zero, RouteTape(True, tokens, scorer.w)
    scores = np.einsum("bnd,d->bn", tokens, scorer.w)
    s_tilde, std_tape = standardize_scores_batch(scores, cfg.epsilon_std)
    cost = build_cost_batch(s_tilde)
    plans, row_err, col_err, sink_tape = sinkhorn_batch(cost, cfg)
    reordered = soft_reorder_batch(plans, tokens)
    tape = RouteTape(False, tokens, scorer.w.copy(), std_tape, s_tilde,
                     sink_tape, plans)
    return reordered, plans, row_err, col_err, tape


def route_sinkhorn_backward(tape: RouteTape, grad_reordered: np.ndarray
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (w, tokens) for the full routing chain.

    Token gradients combine the direct mixing path through P^T T with the
    score path through the plan itself.
    """
    if tape.passthrough:
        return np.zeros_like(tape.w), grad_reordered.copy()
    grad_plan, grad_tokens = soft_reorder_backward(tape.plan, tape.tokens,
                                                   grad_reordered)
    grad_cost = sinkhorn_backward_batch(tape.sink_tape, grad_plan)
    grad_s_tilde = build_cost_backward(tape.s_tilde, grad_cost)
    grad_scores = standardize_scores_backward(tape.std_tape, grad_s_tilde)
    grad_w = np.einsum("bnd,bn->d", tape.tokens, grad_scores)
    grad_tokens += grad_scores[:, :, None] * tape.w[None, None, :]
    return grad_w, grad_tokens


# ---------------------------------------------------------------------------
# single-sample operations


def score_and_standardize(scorer: Scorer, tokens: np.ndarray,
                          eps: float = 1e-6) -> np.ndarray:
    """Standardized scores for one (N, d) token matrix; [0] when N == 1."""
    tokens = np.asarray(tokens, dtype=np.float64)
    scores = tokens @ scorer.w
    out, _ = standardize_scores_batch(scores[None], eps)
    return out[0]


def build_cost(s_tilde: np.ndarray) -> np.ndarray:
    """Squared distances between standardized scores and canonical positions."""
    return build_cost_batch(np.asarray(s_tilde, dtype=np.float64)[None])[0]


def sinkhorn(cost: np.ndarray, cfg: SinkhornConfig) -> TransportPlan:
    """Entropy-regularized transport plan for one cost matrix."""
    plan, row_err, col_err, tape = sinkhorn_batch(
        np.asarray(cost, dtype=np.float64)[None], cfg)
    return TransportPlan(plan[0], float(row_err[0]), float(col_err[0]), tape)


def sinkhorn_backward(tape: SinkhornTape, grad_plan: np.ndarray) -> np.ndarray:
    """Cost gradient for a single-sample plan."""
    return sinkhorn_backward_batch(tape, np.asarray(grad_plan, dtype=np.float64)[None])[0]


def soft_reorder(plan: TransportPlan | np.ndarray, tokens: np.ndarray) -> np.ndarray:
    p = plan.P if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    return soft_reorder_batch(p[None], np.asarray(tokens, dtype=np.float64)[None])[0]


def route_sinkhorn(scorer: Scorer, cfg: SinkhornConfig, tokens: np.ndarray
                   ) -> tuple[np.ndarray, TransportPlan]:
    reordered, plans, row_err, col_err, tape = route_sinkhorn_batch(
        scorer, cfg, np.asarray(tokens, dtype=np.float64)[None])
    plan = TransportPlan(plans[0], float(row_err[0]), float(col_err[0]),
                         tape.sink_tape)
    return reordered[0], plan


def scramble_after_routing(reordered: np.ndarray, seed: int) -> np.ndarray:
    """Randomly permute an already-routed sequence (seeded, reproducible)."""
    reordered = np.asarray(reordered, dtype=np.float64)
    n = reordered.shape[-2]
    perm = derive_rng(seed, "scramble").permutation(n)
    return reordered[..., perm, :]


# ---------------------------------------------------------------------------
# plan export (binary, for diagnostics and external visualization)

_PLAN_HEADER = struct.Struct("<I")


def save_plan(path: str | Path, plan: np.ndarray) -> None:
    """Dense f32 row-major dump with a u32 N header."""
    p = np.asarray(plan, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("plan must be square")
    with open(path, "wb") as fh:
        fh.write(_PLAN_HEADER.pack(p.shape[0]))
        fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_plan(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _PLAN_HEADER.size:
        raise ValueError("truncated plan file")
    (n,) = _PLAN_HEADER.unpack_from(raw, 0)
    expected = _PLAN_HEADER.size + 4 * n * n
    if len(raw) != expected:
        raise ValueError(f"truncated plan payload: {len(raw)} != {expected}")
    return (np.frombuffer(raw, dtype="<f4", offset=_PLAN_HEADER.size)
            .astype(np.float64).reshape(n, n))
