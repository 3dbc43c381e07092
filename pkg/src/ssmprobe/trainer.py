"""Cross-entropy training of probe heads over frozen features.

All heads in a joint run share the batch stream but own disjoint parameters
and private AdamW state, so training any subset produces bit-identical
trajectories for the heads it contains.  Randomness is derived from the run
seed via tagged streams (init per head name, batch order per epoch), which
is what makes solo-vs-joint comparisons and reruns exactly reproducible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import FeatureSet, iterate_batches
from .probes import HeadSpec, PassContext, ProbeHead, SinkhornS4Head, build_head
from .seeding import derive_rng
from .ssm import s4_forward_batch

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Stable negative log-softmax of the true class and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} outside [0, {logits.shape[-1]})")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    loss = float(lse - logits[label])
    grad = np.exp(logits - lse)
    grad[label] -= 1.0
    return loss, grad


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch; gradient already carries the 1/B factor."""
    bsz, num_classes = logits.shape
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError("label outside [0, num_classes)")
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    loss = float((lse[:, 0] - logits[np.arange(bsz), labels]).mean())
    grad = np.exp(logits - lse)
    grad[np.arange(bsz), labels] -= 1.0
    return loss, grad / bsz


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total)); exact at both endpoints."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adamw(params: dict[str, np.ndarray]) -> AdamWState:
    return AdamWState(0, {k: np.zeros_like(v) for k, v in params.items()},
                      {k: np.zeros_like(v) for k, v in params.items()})


def adamw_step(state: AdamWState, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray], lr_t: float, wd: float = 0.0
               ) -> tuple[dict[str, np.ndarray], AdamWState]:
    """Decoupled-weight-decay Adam; wd=0 reduces exactly to Adam."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        state.m[key] = ADAM_BETA1 * state.m[key] + (1.0 - ADAM_BETA1) * g
        state.v[key] = ADAM_BETA2 * state.v[key] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[key] / bc1
        v_hat = state.v[key] / bc2
        params[key] = p - lr_t * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + wd * p)
    return params, state


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 0  # optimizer steps between evals; 0 = once per epoch
    schedule: str = "cosine"

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")
        if self.schedule != "cosine":
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainRun:
    """Outcome of a joint run: per-head best/final parameters and metrics."""

    config: TrainConfig
    head_names: list[str]
    final_params: dict[str, dict[str, np.ndarray]]
    best_params: dict[str, dict[str, np.ndarray]]
    best_eval_acc: dict[str, float]
    best_eval_step: dict[str, int]
    log: list[tuple[int, str, str, str, float]]  # (step, head, split, metric, value)
    total_steps: int


def _copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in params.items()}


def evaluate_head(head: ProbeHead, params, fset: FeatureSet, seed: int,
                  epoch: int, batch_size: int = 256) -> float:
    """Top-1 accuracy over a split, visited in natural order."""
    if len(fset) == 0:
        return 0.0
    ctx = PassContext(seed=seed, epoch=epoch, phase="eval")
    hits = 0
    for batch in iterate_batches(fset, batch_size, seed, epoch, shuffle=False):
        logits, _ = head.forward(params, batch, ctx)
        hits += int((np.argmax(logits, axis=1) == batch.labels).sum())
    return hits / len(fset)


def train_joint(heads: list[ProbeHead], train_set: FeatureSet,
                eval_set: FeatureSet, cfg: TrainConfig) -> TrainRun:
    """Single pass over shared batches; each head backprops and steps its own
    optimizer.  No state crosses heads, so dropping heads from the list leaves
    the remaining trajectories bit-identical."""
    cfg.validate()
    names = [h.name for h in heads]
    if len(set(names)) != len(names):
        raise ValueError("head names must be unique within a run")
    params = {h.name: h.init_params(derive_rng(cfg.seed, "init", h.name))
              for h in heads}
    opt = {h.name: init_adamw(params[h.name]) for h in heads}
    best_params = {h.name: _copy_params(params[h.name]) for h in heads}
    best_acc = {h.name: -1.0 for h in heads}
    best_step = {h.name: 0 for h in heads}
    log: list[tuple[int, str, str, str, float]] = []

    steps_per_epoch = max(1, math.ceil(len(train_set) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch

    def run_eval(step: int, epoch: int) -> None:
        for h in heads:
            acc = evaluate_head(h, params[h.name], eval_set, cfg.seed, epoch,
                                cfg.batch_size)
            log.append((step, h.name, "eval", "accuracy", acc))
            if acc > best_acc[h.name]:
                best_acc[h.name] = acc
                best_step[h.name] = step
                best_params[h.name] = _copy_params(params[h.name])

    step = 0
    last_eval = -1
    for epoch in range(cfg.epochs):
        ctx = PassContext(seed=cfg.seed, epoch=epoch, phase="train")
        for batch in iterate_batches(train_set, cfg.batch_size, cfg.seed, epoch):
            lr_t = cosine_lr(step, total_steps, cfg.lr)
            for h in heads:
                logits, cache = h.forward(params[h.name], batch, ctx)
                loss, grad_logits = cross_entropy_batch(logits, batch.labels)
                grads = h.backward(params[h.name], cache, grad_logits)
                adamw_step(opt[h.name], params[h.name], grads, lr_t,
                           cfg.weight_decay)
                log.append((step, h.name, "train", "loss", loss))
            step += 1
            if cfg.eval_every > 0 and step % cfg.eval_every == 0:
                run_eval(step, epoch)
                last_eval = step
        if cfg.eval_every == 0:
            run_eval(step, epoch)
            last_eval = step
    if last_eval != step:
        run_eval(step, cfg.epochs - 1)

    return TrainRun(cfg, names, params, best_params, best_acc, best_step, log,
                    total_steps)


# ---------------------------------------------------------------------------
# sweep drivers


def write_csv(path: str | Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _solo_run_best_acc(spec: HeadSpec, train_set: FeatureSet,
                       eval_set: FeatureSet, cfg: TrainConfig) -> float:
    head = build_head(spec, train_set.grid_h, train_set.grid_w, train_set.d,
                      train_set.num_classes)
    run = train_joint([head], train_set, eval_set, cfg)
    return run.best_eval_acc[head.name]


def sweep_sinkhorn_grid(train_set: FeatureSet, eval_set: FeatureSet,
                        base_cfg: TrainConfig, head_spec: HeadSpec,
                        iterations_list: list[int], tau_list: list[float],
                        seeds: list[int]) -> list[dict]:
    """Mean/std best-eval accuracy per (iterations, tau) cell over seeds."""
    rows = []
    for k_iters in iterations_list:
        for tau in tau_list:
            accs = []
            for seed in seeds:
                spec = replace(head_spec, sinkhorn_iterations=k_iters,
                               sinkhorn_tau=tau)
                cfg = replace(base_cfg, seed=seed)
                accs.append(_solo_run_best_acc(spec, train_set, eval_set, cfg))
            rows.append({
                "iterations": k_iters,
                "tau": tau,
                "mean_acc": float(np.mean(accs)),
                "std_acc": float(np.std(accs)),
                "n_seeds": len(seeds),
            })
    return rows


SINKHORN_GRID_FIELDS = ["iterations", "tau", "mean_acc", "std_acc", "n_seeds"]


def sweep_state_dim(train_set: FeatureSet, eval_set: FeatureSet,
                    base_cfg: TrainConfig, head_spec: HeadSpec,
                    n_state_list: list[int], seeds: list[int]) -> list[dict]:
    """Best-eval accuracy as the state dimension varies."""
    rows = []
    for n_state in n_state_list:
        accs = []
        for seed in seeds:
            spec = replace(head_spec, n_state=n_state)
            cfg = replace(base_cfg, seed=seed)
            accs.append(_solo_run_best_acc(spec, train_set, eval_set, cfg))
        rows.append({
            "n_state": n_state,
            "mean_acc": float(np.mean(accs)),
            "std_acc": float(np.std(accs)),
            "n_seeds": len(seeds),
        })
    return rows


STATE_DIM_FIELDS = ["n_state", "mean_acc", "std_acc", "n_seeds"]


# ---------------------------------------------------------------------------
# scramble ablation


ABLATION_CONDITIONS = ("normal", "scramble", "no_routing", "random_perm")


def ablate_scramble(head: SinkhornS4Head, params, eval_set: FeatureSet,
                    seed: int, batch_size: int = 256) -> dict[str, float]:
    """Eval accuracy of a trained routing head under four input regimes:
    learned routing, routing then a random scramble, raw order (no routing),
    and a random permutation of the raw tokens."""
    if len(eval_set) == 0:
        return {c: 0.0 for c in ABLATION_CONDITIONS}
    p_s4 = head.s4_view(params)
    results: dict[str, float] = {}
    for condition in ABLATION_CONDITIONS:
        hits = 0
        for batch in iterate_batches(eval_set, batch_size, seed, 0, shuffle=False):
            tokens = batch.tokens
            if condition in ("normal", "scramble"):
                reordered, _, _, _, _ = head.route_only(params, tokens)
            else:
                reordered = tokens
            if condition in ("scramble", "random_perm"):
                for row, sample_id in enumerate(batch.indices):
                    rng = derive_rng(seed, "ablate", condition, int(sample_id))
                    reordered[row] = reordered[row][rng.permutation(tokens.shape[1])]
            z, _, _ = s4_forward_batch(p_s4, reordered)
            logits = z @ params["W"].T + params["b"]
            hits += int((np.argmax(logits, axis=1) == batch.labels).sum())
        results[condition] = hits / len(eval_set)
    return results
