"""Order-sensitive state-space readout head.

A single-input single-output linear state-space system is shared across all
feature channels: continuous parameters (A, B, C, D) are discretized with a
learnable step size via the bilinear transform,

    A_bar = (I - Delta/2 A)^-1 (I + Delta/2 A)
    B_bar = (I - Delta/2 A)^-1 Delta B,

then unrolled as h_k = A_bar h_{k-1} + B_bar u_k, y_k = C h_k + D u_k with
h_0 = 0.  The probe reads the final step, z_out[c] = y_N for channel c.
Backward passes are hand-derived reverse mode over the explicit forward
tape, including the bilinear-transform pullback for a trainable A and the
softplus/clamp step-size reparameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scans import ScanFamily, apply_order

DELTA_MIN = 1e-3
DELTA_MAX = 1e-1
DELTA_INIT = 5e-2


def hippo_legs(n_state: int) -> np.ndarray:
    """Lower-triangular memory matrix: entry (n, k) is -sqrt(2n+1)sqrt(2k+1)
    below the diagonal and -(n+1) on it.  All eigenvalues are the diagonal,
    hence strictly negative."""
    if n_state < 1:
        raise ValueError("n_state must be >= 1")
    idx = np.arange(n_state, dtype=np.float64)
    root = np.sqrt(2.0 * idx + 1.0)
    a = -np.tril(np.outer(root, root), k=-1)
    a -= np.diag(idx + 1.0)
    return a


def softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def delta_raw_for(target: float = DELTA_INIT) -> float:
    """Pre-activation giving softplus(raw) == target."""
    return float(np.log(np.expm1(target)))


def effective_delta(delta_raw: float) -> tuple[float, float]:
    """(clamped step size, d(step)/d(raw)); the derivative is zero outside
    the clamp band."""
    sp = softplus(delta_raw)
    delta = min(max(sp, DELTA_MIN), DELTA_MAX)
    if DELTA_MIN < sp < DELTA_MAX:
        grad = 1.0 / (1.0 + math.exp(-delta_raw))
    else:
        grad = 0.0
    return delta, grad


@dataclass
class S4Params:
    """Continuous-time system parameters plus the step-size pre-activation."""

    A: np.ndarray  # (n, n)
    B: np.ndarray  # (n,)
    C: np.ndarray  # (n,)
    D: float
    delta_raw: float
    n_state: int
    a_trainable: bool = True

    def copy(self) -> "S4Params":
        return S4Params(self.A.copy(), self.B.copy(), self.C.copy(),
                        self.D, self.delta_raw, self.n_state, self.a_trainable)


def init_s4_params(n_state: int, rng: np.random.Generator,
                   a_trainable: bool = True) -> S4Params:
    """Memory-matrix init for A, 1/sqrt(n) normal B and C, zero skip,
    step size starting at 5e-2."""
    scale = 1.0 / math.sqrt(n_state)
    return S4Params(
        A=hippo_legs(n_state),
        B=rng.normal(size=n_state) * scale,
        C=rng.normal(size=n_state) * scale,
        D=0.0,
        delta_raw=delta_raw_for(DELTA_INIT),
        n_state=n_state,
        a_trainable=a_trainable,
    )


@dataclass
class DiscretizedSystem:
    A_bar: np.ndarray  # (n, n)
    B_bar: np.ndarray  # (n,)
    minv: np.ndarray  # (I - Delta/2 A)^-1, cached for the backward pass
    delta: float
    delta_grad: float  # d(delta)/d(delta_raw)


def discretize(p: S4Params) -> DiscretizedSystem:
    """Bilinear-transform discretization with the resolvent cached."""
    delta, delta_grad = effective_delta(p.delta_raw)
    n = p.n_state
    m = np.eye(n) - 0.5 * delta * p.A
    try:
        minv = np.linalg.inv(m)
    except np.linalg.LinAlgError as exc:
        raise ValueError("I - Delta/2 A is singular") from exc
    a_bar = minv @ (np.eye(n) + 0.5 * delta * p.A)
    b_bar = minv @ (delta * p.B)
    return DiscretizedSystem(a_bar, b_bar, minv, delta, delta_grad)


def spectral_radius(a: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(a))))


@dataclass
class S4Tape:
    params: S4Params
    disc: DiscretizedSystem
    tokens: np.ndarray  # (B, N, d)
    states: np.ndarray  # (N+1, B, n, d); states[0] is the zero initial state


@dataclass
class S4HeadOutput:
    """Final-step readout, optional full output sequence, and the tape."""

    z_out: np.ndarray  # (d,)
    Z: np.ndarray | None = None  # (N, d) when materialized
    tape: S4Tape | None = field(default=None, repr=False, compare=False)


def s4_forward_batch(p: S4Params, tokens: np.ndarray,
                     want_full: bool = False) -> tuple[np.ndarray, np.ndarray | None, S4Tape]:
    """Run the recurrence over a (B, N, d) batch.

    Returns (z_out (B, d), Z (B, N, d) or None, tape).  All channels share
    the system; the state tensor carries one n-vector per (sample, channel).
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3:
        raise ValueError("expected (B, N, d) tokens")
    if not np.isfinite(tokens).all():
        raise ValueError("non-finite input tokens")
    bsz, n_seq, d = tokens.shape
    if n_seq < 1:
        raise ValueError("sequence must have at least one step")
    disc = discretize(p)
    n = p.n_state
    states = np.zeros((n_seq + 1, bsz, n, d))
    for k in range(1, n_seq + 1):
        u_k = tokens[:, k - 1, :]  # (B, d)
        states[k] = np.einsum("ij,bjd->bid", disc.A_bar, states[k - 1])
        states[k] += disc.B_bar[None, :, None] * u_k[:, None, :]
    z_out = np.einsum("i,bid->bd", p.C, states[n_seq]) + p.D * tokens[:, -1, :]
    full = None
    if want_full:
        full = np.einsum("i,kbid->bkd", p.C, states[1:]) + p.D * tokens
    tape = S4Tape(p, disc, tokens, states)
    return z_out, full, tape


def s4_backward_batch(tape: S4Tape, grad_z: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for a batched final-state readout.

    ``grad_z`` is (B, d).  Returns gradients summed over the batch for the
    parameters and per-sample for the inputs under key ``tokens``.  The
    gradient with respect to the continuous A flows through the bilinear
    transform via the resolvent identity d(M^-1) = -M^-1 dM M^-1 and is
    included only when the tape's parameters mark A trainable.
    """
    p, disc = tape.params, tape.disc
    tokens, states = tape.tokens, tape.states
    bsz, n_seq, d = tokens.shape
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if grad_z.shape != (bsz, d):
        raise ValueError("grad_z shape mismatch with tape")

    grad_c = np.einsum("bid,bd->i", states[n_seq], grad_z)
    grad_d = float(np.sum(grad_z * tokens[:, -1, :]))
    grad_tokens = np.zeros_like(tokens)
    grad_tokens[:, -1, :] = p.D * grad_z

    # lam is the adjoint of states[k]; walk it backward through the recurrence.
    lam = np.einsum("i,bd->bid", p.C, grad_z)
    grad_a_bar = np.zeros((p.n_state, p.n_state))
    grad_b_bar = np.zeros(p.n_state)
    a_bar_t = disc.A_bar.T
    for k in range(n_seq, 0, -1):
        u_k = tokens[:, k - 1, :]
        grad_a_bar += np.einsum("bid,bjd->ij", lam, states[k - 1])
        grad_b_bar += np.einsum("bid,bd->i", lam, u_k)
        grad_tokens[:, k - 1, :] += np.einsum("bid,i->bd", lam, disc.B_bar)
        lam = np.einsum("ij,bjd->bid", a_bar_t, lam)

    # Pull (A_bar, B_bar) gradients back to (A, B, Delta) through the
    # bilinear transform.
    minv_t = disc.minv.T
    g1 = minv_t @ grad_a_bar @ (disc.A_bar + np.eye(p.n_state)).T
    g2 = minv_t @ grad_b_bar
    grad_a = 0.5 * disc.delta * (g1 + np.outer(g2, disc.B_bar))
    grad_b = disc.delta * g2
    grad_delta = (
        0.5 * float(np.sum(g1 * p.A))
        + 0.5 * float(g2 @ (p.A @ disc.B_bar))
        + float(g2 @ p.B)
    )
    grad_delta_raw = grad_delta * disc.delta_grad

    grads = {
        "B": grad_b,
        "C": grad_c,
        "D": np.float64(grad_d),
        "delta_raw": np.float64(grad_delta_raw),
        "tokens": grad_tokens,
    }
    if p.a_trainable:
        grads["A"] = grad_a
    return grads


def s4_forward(p: S4Params, tokens: np.ndarray, want_full: bool = False) -> S4HeadOutput:
    """Single-sample readout over an (N, d) token matrix."""
    z, full, tape = s4_forward_batch(p, np.asarray(tokens, dtype=np.float64)[None],
                                     want_full=want_full)
    return S4HeadOutput(z[0], None if full is None else full[0], tape)


def s4_backward(tape: S4Tape, grad_z_out: np.ndarray) -> dict[str, np.ndarray]:
    """Single-sample gradients matching :func:`s4_forward`."""
    grad_z_out = np.asarray(grad_z_out, dtype=np.float64)
    grads = s4_backward_batch(tape, grad_z_out[None])
    grads["tokens"] = grads["tokens"][0]
    return grads


def multi_direction_readout(p_list: list[S4Params], family: ScanFamily,
                            tokens: np.ndarray) -> np.ndarray:
    """Average of per-direction final states over a scan family.

    Each direction reorders the tokens with its own ScanOrder and runs its
    own parameter set; the mean of the direction outputs is the head readout.
    """
    if len(p_list) != len(family.orders):
        raise ValueError(
            f"{len(p_list)} parameter sets for {len(family.orders)} directions"
        )
    outs = [
        s4_forward(p, apply_order(order, np.asarray(tokens, dtype=np.float64))).z_out
        for p, order in zip(p_list, family.orders)
    ]
    return np.mean(outs, axis=0)
