"""Trainable probe heads: parameter dicts, batched forwards, exact backwards.

Each head owns a flat dict of f64 parameter arrays (disjoint from every other
head) and exposes forward/backward over a stacked batch.  The trainer treats
heads uniformly; all probe-specific wiring (scan reordering, soft routing,
scramble ablations, recurrence tapes) lives here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import Batch
from .heads import (
    attention_pool,
    attention_pool_backward,
    content_weighted_backward,
    content_weighted_pool,
    topk_pool,
    topk_pool_backward,
)
from .routing import (
    Scorer,
    SinkhornConfig,
    route_sinkhorn_backward,
    route_sinkhorn_batch,
)
from .scans import Family, ScanFamily, build_family, random_permutation
from .seeding import derive_rng
from .ssm import S4Params, delta_raw_for, init_s4_params, s4_backward_batch, s4_forward_batch


@dataclass
class PassContext:
    """Per-forward context for heads that draw per-sample randomness."""

    seed: int = 0
    epoch: int = 0
    phase: str = "train"


@dataclass
class HeadSpec:
    """Declarative head configuration used by the trainer and CLI."""

    kind: str
    name: str = ""
    n_state: int = 16
    family: str = "raster"
    a_trainable: bool = True
    shared_directions: bool = False
    k: int = 16
    sinkhorn_iterations: int = 20
    sinkhorn_tau: float = 0.1
    epsilon_std: float = 1e-6
    scramble: bool = False

    def resolved_name(self) -> str:
        if self.name:
            return self.name
        if self.kind == "s4-scan":
            return f"s4-{self.family}"
        return self.kind


KINDS = (
    "gap", "cls", "attn-pool", "content-weighted", "topk",
    "s4-scan", "s4-sinkhorn", "s4-random-fixed", "s4-random-dynamic",
    "s4-sinkhorn-scramble",
)


class ProbeHead:
    """Base: a named head with a private parameter dict."""

    def __init__(self, name: str, d: int, num_classes: int):
        self.name = name
        self.d = d
        self.num_classes = num_classes

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def forward(self, params, batch: Batch, ctx: PassContext):
        raise NotImplementedError

    def backward(self, params, cache, grad_logits) -> dict[str, np.ndarray]:
        raise NotImplementedError

    # -- shared classifier plumbing --------------------------------------

    def _classifier_params(self) -> dict[str, np.ndarray]:
        # zero init: initial loss is exactly ln(num_classes)
        return {"W": np.zeros((self.num_classes, self.d)),
                "b": np.zeros(self.num_classes)}

    def _classify(self, params, z):
        return z @ params["W"].T + params["b"]

    def _classify_backward(self, params, z, grad_logits):
        grads = {"W": grad_logits.T @ z, "b": grad_logits.sum(axis=0)}
        return grads, grad_logits @ params["W"]


class GapHead(ProbeHead):
    def init_params(self, rng):
        return self._classifier_params()

    def forward(self, params, batch, ctx):
        z = batch.tokens.mean(axis=1)
        return self._classify(params, z), z

    def backward(self, params, cache, grad_logits):
        grads, _ = self._classify_backward(params, cache, grad_logits)
        return grads


class ClsHead(ProbeHead):
    def init_params(self, rng):
        return self._classifier_params()

    def forward(self, params, batch, ctx):
        z = batch.cls
        return self._classify(params, z), z

    def backward(self, params, cache, grad_logits):
        grads, _ = self._classify_backward(params, cache, grad_logits)
        return grads


class AttnPoolHead(ProbeHead):
    def init_params(self, rng):
        params = self._classifier_params()
        params["q"] = rng.normal(size=self.d) / np.sqrt(self.d)
        return params

    def forward(self, params, batch, ctx):
        z = attention_pool(params["q"], batch.tokens)
        return self._classify(params, z), (batch.tokens, z)

    def backward(self, params, cache, grad_logits):
        tokens, z = cache
        grads, grad_z = self._classify_backward(params, z, grad_logits)
        grads["q"], _ = attention_pool_backward(params["q"], tokens, grad_z)
        return grads


class ContentWeightedHead(ProbeHead):
    def init_params(self, rng):
        params = self._classifier_params()
        params["w_score"] = rng.normal(size=self.d) / np.sqrt(self.d)
        return params

    def forward(self, params, batch, ctx):
        z = content_weighted_pool(params["w_score"], batch.tokens)
        return self._classify(params, z), (batch.tokens, z)

    def backward(self, params, cache, grad_logits):
        tokens, z = cache
        grads, grad_z = self._classify_backward(params, z, grad_logits)
        grads["w_score"], _ = content_weighted_backward(params["w_score"], tokens, grad_z)
        return grads


class TopKHead(ProbeHead):
    def __init__(self, name, d, num_classes, k=16):
        super().__init__(name, d, num_classes)
        self.k = k

    def init_params(self, rng):
        params = self._classifier_params()
        params["w_score"] = rng.normal(size=self.d) / np.sqrt(self.d)
        return params

    def forward(self, params, batch, ctx):
        k = min(self.k, batch.tokens.shape[1])
        z = topk_pool(params["w_score"], k, batch.tokens)
        return self._classify(params, z), (batch.tokens, z, k)

    def backward(self, params, cache, grad_logits):
        tokens, z, k = cache
        grads, grad_z = self._classify_backward(params, z, grad_logits)
        # hard selection: scorer gradient is zero almost everywhere
        grads["w_score"], _ = topk_pool_backward(params["w_score"], k, tokens, grad_z)
        return grads


# ---------------------------------------------------------------------------
# state-space heads


def _s4_block_init(n_state: int, rng: np.random.Generator, a_trainable: bool,
                   prefix: str) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    p = init_s4_params(n_state, rng, a_trainable)
    block = {
        f"{prefix}B": p.B,
        f"{prefix}C": p.C,
        f"{prefix}D": np.zeros(()),
        f"{prefix}delta_raw": np.asarray(delta_raw_for()),
    }
    frozen_a = None
    if a_trainable:
        block[f"{prefix}A"] = p.A
    else:
        frozen_a = p.A
    return block, frozen_a


def _s4_params_view(params, frozen_a, n_state, a_trainable, prefix) -> S4Params:
    a = params[f"{prefix}A"] if a_trainable else frozen_a
    return S4Params(
        A=a,
        B=params[f"{prefix}B"],
        C=params[f"{prefix}C"],
        D=float(params[f"{prefix}D"]),
        delta_raw=float(params[f"{prefix}delta_raw"]),
        n_state=n_state,
        a_trainable=a_trainable,
    )


def _accumulate_s4_grads(grads, s4_grads, prefix, a_trainable, scale=1.0):
    grads[f"{prefix}B"] = grads.get(f"{prefix}B", 0.0) + scale * s4_grads["B"]
    grads[f"{prefix}C"] = grads.get(f"{prefix}C", 0.0) + scale * s4_grads["C"]
    grads[f"{prefix}D"] = grads.get(f"{prefix}D", 0.0) + scale * np.asarray(s4_grads["D"])
    grads[f"{prefix}delta_raw"] = (grads.get(f"{prefix}delta_raw", 0.0)
                                   + scale * np.asarray(s4_grads["delta_raw"]))
    if a_trainable:
        grads[f"{prefix}A"] = grads.get(f"{prefix}A", 0.0) + scale * s4_grads["A"]


class S4ScanHead(ProbeHead):
    """Fixed-scan state-space probe; 4-direction families average their
    final states.  Directions hold their own parameters unless shared."""

    def __init__(self, name, d, num_classes, family: ScanFamily, n_state=16,
                 a_trainable=True, shared_directions=False):
        super().__init__(name, d, num_classes)
        self.family = family
        self.n_state = n_state
        self.a_trainable = a_trainable
        self.shared = shared_directions
        self._frozen_a: list[np.ndarray | None] = []

    def _prefix(self, i: int) -> str:
        return "s4." if self.shared else f"s4_{i}."

    def init_params(self, rng):
        params = self._classifier_params()
        self._frozen_a = []
        n_blocks = 1 if self.shared else len(self.family.orders)
        for i in range(n_blocks):
            block, frozen = _s4_block_init(self.n_state, rng, self.a_trainable,
                                           self._prefix(i))
            params.update(block)
            self._frozen_a.append(frozen)
        return params

    def _direction_params(self, params, i) -> S4Params:
        j = 0 if self.shared else i
        return _s4_params_view(params, self._frozen_a[j], self.n_state,
                               self.a_trainable, self._prefix(j))

    def forward(self, params, batch, ctx):
        n_dir = len(self.family.orders)
        tapes = []
        z = np.zeros((batch.tokens.shape[0], self.d))
        for i, order in enumerate(self.family.orders):
            reordered = batch.tokens[:, order.as_array(), :]
            z_i, _, tape = s4_forward_batch(self._direction_params(params, i), reordered)
            tapes.append(tape)
            z += z_i
        z /= n_dir
        return self._classify(params, z), (tapes, z)

    def backward(self, params, cache, grad_logits):
        tapes, z = cache
        grads, grad_z = self._classify_backward(params, z, grad_logits)
        scale = 1.0 / len(self.family.orders)
        for i in range(len(self.family.orders)):
            s4_grads = s4_backward_batch(tapes[i], grad_z)
            j = 0 if self.shared else i
            _accumulate_s4_grads(grads, s4_grads, self._prefix(j),
                                 self.a_trainable, scale)
        return grads


class RandomPermS4Head(ProbeHead):
    """State-space probe over a random token order.

    ``fixed`` draws one permutation per run (at init); ``dynamic`` draws a
    fresh permutation per sample per forward pass, keyed on (seed, head name,
    phase, epoch, sample id) so runs stay reproducible.
    """

    def __init__(self, name, d, num_classes, n_tokens, mode="fixed",
                 n_state=16, a_trainable=True):
        super().__init__(name, d, num_classes)
        if mode not in ("fixed", "dynamic"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.n_tokens = n_tokens
        self.n_state = n_state
        self.a_trainable = a_trainable
        self._frozen_a = None
        self._fixed_perm: np.ndarray | None = None

    def init_params(self, rng):
        params = self._classifier_params()
        block, self._frozen_a = _s4_block_init(self.n_state, rng,
                                               self.a_trainable, "s4.")
        params.update(block)
        if self.mode == "fixed":
            self._fixed_perm = rng.permutation(self.n_tokens)
        return params

    def _perms(self, batch: Batch, ctx: PassContext) -> np.ndarray:
        bsz, n = batch.tokens.shape[:2]
        if self.mode == "fixed":
            return np.tile(self._fixed_perm, (bsz, 1))
        perms = np.zeros((bsz, n), dtype=np.int64)
        for row, sample_id in enumerate(batch.indices):
            order = random_permutation(
                n, ctx.seed, mode="dynamic",
                sample_id=int(sample_id),
                epoch=ctx.epoch if ctx.phase == "train" else -1 - ctx.epoch)
            perms[row] = order.as_array()
        return perms

    def forward(self, params, batch, ctx):
        perms = self._perms(batch, ctx)
        reordered = np.take_along_axis(batch.tokens, perms[:, :, None], axis=1)
        p = _s4_params_view(params, self._frozen_a, self.n_state,
                            self.a_trainable, "s4.")
        z, _, tape = s4_forward_batch(p, reordered)
        return self._classify(params, z), (tape, z)

    def backward(self, params, cache, grad_logits):
        tape, z = cache
        grads, grad_z = self._classify_backward(params, z, grad_logits)
        s4_grads = s4_backward_batch(tape, grad_z)
        _accumulate_s4_grads(grads, s4_grads, "s4.", self.a_trainable)
        return grads


class SinkhornS4Head(ProbeHead):
    """Learned soft-permutation routing feeding the state-space readout.

    With ``scramble`` set, a fresh per-sample random permutation hits the
    routed sequence before the recurrence; gradients still flow through the
    routing chain (the scramble is a fixed reindexing per sample).
    """

    def __init__(self, name, d, num_classes, n_state=16, a_trainable=True,
                 sinkhorn_cfg: SinkhornConfig | None = None, scramble=False):
        super().__init__(name, d, num_classes)
        self.n_state = n_state
        self.a_trainable = a_trainable
        self.cfg = sinkhorn_cfg or SinkhornConfig()
        self.scramble = scramble
        self._frozen_a = None

    def init_params(self, rng):
        params = self._classifier_params()
        params["w"] = rng.normal(size=self.d) / np.sqrt(self.d)
        block, self._frozen_a = _s4_block_init(self.n_state, rng,
                                               self.a_trainable, "s4.")
        params.update(block)
        return params

    def _scramble_perms(self, batch: Batch, ctx: PassContext) -> np.ndarray:
        bsz, n = batch.tokens.shape[:2]
        perms = np.zeros((bsz, n), dtype=np.int64)
        for row, sample_id in enumerate(batch.indices):
            rng = derive_rng(ctx.seed, "head", self.name, "scramble",
                             ctx.phase, ctx.epoch, int(sample_id))
            perms[row] = rng.permutation(n)
        return perms

    def forward(self, params, batch, ctx):
        reordered, plans, row_err, col_err, route_tape = route_sinkhorn_batch(
            Scorer(params["w"]), self.cfg, batch.tokens)
        perms = None
        if self.scramble:
            perms = self._scramble_perms(batch, ctx)
            reordered = np.take_along_axis(reordered, perms[:, :, None], axis=1)
        p = _s4_params_view(params, self._frozen_a, self.n_state,
                            self.a_trainable, "s4.")
        z, _, s4_tape = s4_forward_batch(p, reordered)
        logits = self._classify(params, z)
        cache = (route_tape, perms, s4_tape, z, plans, row_err, col_err)
        return logits, cache

    def backward(self, params, cache, grad_logits):
        route_tape, perms, s4_tape, z, _, _, _ = cache
        grads, grad_z = self._classify_backward(params, z, grad_logits)
        s4_grads = s4_backward_batch(s4_tape, grad_z)
        _accumulate_s4_grads(grads, s4_grads, "s4.", self.a_trainable)
        grad_routed = s4_grads["tokens"]
        if perms is not None:
            # scatter the gradient back to pre-scramble positions
            unscrambled = np.zeros_like(grad_routed)
            np.put_along_axis(unscrambled, perms[:, :, None], grad_routed, axis=1)
            grad_routed = unscrambled
        grads["w"], _ = route_sinkhorn_backward(route_tape, grad_routed)
        return grads

    def route_only(self, params, tokens):
        """Routing side alone (reordered tokens + plans), for diagnostics."""
        return route_sinkhorn_batch(Scorer(params["w"]), self.cfg, tokens)

    def s4_view(self, params) -> S4Params:
        return _s4_params_view(params, self._frozen_a, self.n_state,
                               self.a_trainable, "s4.")


def build_head(spec: HeadSpec, grid_h: int, grid_w: int, d: int,
               num_classes: int) -> ProbeHead:
    """Instantiate a head from its declarative spec and the dataset geometry."""
    name = spec.resolved_name()
    n_tokens = grid_h * grid_w
    if spec.kind == "gap":
        return GapHead(name, d, num_classes)
    if spec.kind == "cls":
        return ClsHead(name, d, num_classes)
    if spec.kind == "attn-pool":
        return AttnPoolHead(name, d, num_classes)
    if spec.kind == "content-weighted":
        return ContentWeightedHead(name, d, num_classes)
    if spec.kind == "topk":
        return TopKHead(name, d, num_classes, k=spec.k)
    if spec.kind == "s4-scan":
        family = build_family(Family(spec.family), grid_h, grid_w)
        return S4ScanHead(name, d, num_classes, family, n_state=spec.n_state,
                          a_trainable=spec.a_trainable,
                          shared_directions=spec.shared_directions)
    if spec.kind == "s4-random-fixed":
        return RandomPermS4Head(name, d, num_classes, n_tokens, mode="fixed",
                                n_state=spec.n_state, a_trainable=spec.a_trainable)
    if spec.kind == "s4-random-dynamic":
        return RandomPermS4Head(name, d, num_classes, n_tokens, mode="dynamic",
                                n_state=spec.n_state, a_trainable=spec.a_trainable)
    if spec.kind in ("s4-sinkhorn", "s4-sinkhorn-scramble"):
        cfg = SinkhornConfig(spec.sinkhorn_iterations, spec.sinkhorn_tau,
                             spec.epsilon_std)
        scramble = spec.scramble or spec.kind == "s4-sinkhorn-scramble"
        return SinkhornS4Head(name, d, num_classes, n_state=spec.n_state,
                              a_trainable=spec.a_trainable, sinkhorn_cfg=cfg,
                              scramble=scramble)
    raise ValueError(f"unknown head kind {spec.kind!r}")
