"""Permutation-invariant pooling baselines and the shared linear classifier.

Every probe ends in the same affine classifier; the baselines differ only in
how they collapse N patch tokens to a single vector.  GAP and CLS ignore
order and content, the attention and content-weighted pools learn token
weights without reordering, and top-k hard-selects tokens by score.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .features import FeatureSample


class PoolKind(str, Enum):
    GAP = "gap"
    CLS = "cls"
    ATTN = "attn-pool"
    CONTENT = "content-weighted"
    TOPK = "topk"


@dataclass
class PoolHead:
    kind: PoolKind
    q: np.ndarray | None = None  # attention query
    w_score: np.ndarray | None = None  # content / top-k scorer
    k: int = 16


@dataclass
class Classifier:
    W: np.ndarray  # (num_classes, d)
    b: np.ndarray  # (num_classes,)


def init_classifier(d: int, num_classes: int) -> Classifier:
    # Zero init keeps the initial loss at exactly ln(num_classes).
    return Classifier(np.zeros((num_classes, d)), np.zeros(num_classes))


def classify(c: Classifier, z: np.ndarray) -> np.ndarray:
    """Affine logits W z + b; accepts (d,) or batched (B, d)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != c.W.shape[1]:
        raise ValueError(f"feature dim {z.shape[-1]} != classifier dim {c.W.shape[1]}")
    return z @ c.W.T + c.b


def classify_backward(c: Classifier, z: np.ndarray, grad_logits: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(grad_W, grad_b, grad_z) for single or batched inputs (batch summed)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    g = np.atleast_2d(np.asarray(grad_logits, dtype=np.float64))
    grad_w = g.T @ z
    grad_b = g.sum(axis=0)
    grad_z = g @ c.W
    if np.asarray(grad_logits).ndim == 1:
        grad_z = grad_z[0]
    return grad_w, grad_b, grad_z


def gap(tokens: np.ndarray) -> np.ndarray:
    """Arithmetic mean over token rows."""
    tokens = np.asarray(tokens, dtype=np.float64)
    return tokens.mean(axis=-2)


def cls_head(sample: FeatureSample) -> np.ndarray:
    return np.asarray(sample.cls_token, dtype=np.float64)


def _softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def attention_pool(q: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Single-query dot-product attention, scaled by 1/sqrt(d)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    d = tokens.shape[-1]
    logits = tokens @ q / np.sqrt(d)
    alpha = _softmax(logits)
    return np.einsum("...n,...nd->...d", alpha, tokens)


def attention_pool_backward(q: np.ndarray, tokens: np.ndarray,
                            grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(grad_q, grad_tokens) for batched (B, N, d) input, batch-summed on q."""
    d = tokens.shape[-1]
    logits = np.einsum("bnd,d->bn", tokens, q) / np.sqrt(d)
    alpha = _softmax(logits)
    grad_alpha = np.einsum("bnd,bd->bn", tokens, grad_out)
    g_logits = alpha * (grad_alpha - (alpha * grad_alpha).sum(axis=1, keepdims=True))
    grad_q = np.einsum("bnd,bn->d", tokens, g_logits) / np.sqrt(d)
    grad_tokens = (alpha[:, :, None] * grad_out[:, None, :]
                   + g_logits[:, :, None] * q[None, None, :] / np.sqrt(d))
    return grad_q, grad_tokens


def content_weighted_pool(w_score: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Softmax token weights from the linear scorer, no reordering."""
    tokens = np.asarray(tokens, dtype=np.float64)
    alpha = _softmax(tokens @ w_score)
    return np.einsum("...n,...nd->...d", alpha, tokens)


def content_weighted_backward(w_score: np.ndarray, tokens: np.ndarray,
                              grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = np.einsum("bnd,d->bn", tokens, w_score)
    alpha = _softmax(logits)
    grad_alpha = np.einsum("bnd,bd->bn", tokens, grad_out)
    g_logits = alpha * (grad_alpha - (alpha * grad_alpha).sum(axis=1, keepdims=True))
    grad_w = np.einsum("bnd,bn->d", tokens, g_logits)
    grad_tokens = (alpha[:, :, None] * grad_out[:, None, :]
                   + g_logits[:, :, None] * w_score[None, None, :])
    return grad_w, grad_tokens


def topk_select(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores; ties go to the lower original index."""
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    # stable sort on -scores keeps the lower index first among equals
    return np.argsort(-scores, kind="stable", axis=-1)[..., :k]


def topk_pool(w_score: np.ndarray, k: int, tokens: np.ndarray) -> np.ndarray:
    """Mean of the k highest-scored tokens (hard selection)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    scores = tokens @ w_score
    sel = topk_select(scores, k)
    return np.take_along_axis(tokens, sel[..., None], axis=-2).mean(axis=-2)


def topk_pool_backward(w_score: np.ndarray, k: int, tokens: np.ndarray,
                       grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Selection is piecewise constant, so the scorer gets zero gradient a.e."""
    scores = np.einsum("bnd,d->bn", tokens, w_score)
    sel = topk_select(scores, k)
    grad_tokens = np.zeros_like(tokens)
    bsz = tokens.shape[0]
    contrib = grad_out / k
    for b in range(bsz):
        grad_tokens[b, sel[b]] += contrib[b]
    return np.zeros_like(w_score), grad_tokens


def pool_forward(head: PoolHead, sample: FeatureSample) -> np.ndarray:
    """Dispatch a configured pooling head over one sample."""
    if head.kind is PoolKind.GAP:
        return gap(sample.patch_tokens)
    if head.kind is PoolKind.CLS:
        return cls_head(sample)
    if head.kind is PoolKind.ATTN:
        return attention_pool(head.q, sample.patch_tokens)
    if head.kind is PoolKind.CONTENT:
        return content_weighted_pool(head.w_score, sample.patch_tokens)
    if head.kind is PoolKind.TOPK:
        return topk_pool(head.w_score, head.k, sample.patch_tokens)
    raise ValueError(f"unknown pool kind {head.kind}")


def count_params(params: dict[str, np.ndarray]) -> int:
    """Exact learnable-parameter count of a head's parameter dict."""
    return int(sum(int(np.asarray(v).size) for v in params.values()))
