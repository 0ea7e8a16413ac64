"""Backdoor client behaviors: basic, alternate, distributed-trigger, sybil, adaptive.

Every attack degenerates to honest training when its knobs are neutral
(no poison, boost 1, pull 0), byte for byte under equal seeds. The
alternate family interleaves poison epochs with clean epochs that pull the
weights toward a benign-looking update; the adaptive variant additionally
edits the finished update's last-layer block to forge the server-side
class-sufficiency inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .data import LabeledDataset, TriggerPattern, concat_datasets
from .errors import ConfigError, TrainingError
from .inference import InferenceConfig, class_indicator, recover_last_layer_gradient
from .model import Batch, ModelParams, ModelUpdate, Shapes, last_layer_weight_block, local_train, loss_and_grad

ATTACK_KINDS = ("none", "basic", "alternate", "dba", "sybil", "adaptive")


@dataclass
class AttackSpec:
    """Attack family plus its shared knobs."""

    kind: str
    trigger: TriggerPattern
    poison_count: int = 125
    boost: float = 2.0
    stealth_rho: float = 0.1
    lambda_clean: float = 1.0
    dba_parts: int = 2

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.poison_count < 0:
            raise ConfigError("poison_count must be >= 0")
        if self.boost < 1:
            raise ConfigError("boost must be >= 1")
        if self.dba_parts < 1:
            raise ConfigError("dba_parts must be >= 1")


def make_poison_pool(base: LabeledDataset, trig: TriggerPattern) -> LabeledDataset:
    """Triggered copies of every base sample, all relabeled to the target."""
    if base.size < 1:
        raise ConfigError("poison pool needs at least one base sample")
    return LabeledDataset(
        trig.apply(base.samples),
        np.full(base.size, trig.target_label, dtype=np.int64),
        base.num_classes,
    )


def _training_set(clean: LabeledDataset, poison: LabeledDataset, count: int) -> LabeledDataset:
    if count > poison.size:
        raise ConfigError(f"poison_count {count} exceeds pool size {poison.size}")
    return concat_datasets([clean, poison.subset(np.arange(count))])


def basic_attack(
    global_params: ModelParams,
    clean: LabeledDataset,
    poison: LabeledDataset,
    poison_count: int,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    client_id: int = -1,
    round_index: int = -1,
) -> ModelUpdate:
    """Plain data poisoning: honest SGD over clean + triggered records."""
    mixed = _training_set(clean, poison, poison_count)
    return local_train(
        global_params,
        Batch(mixed.samples, mixed.labels),
        epochs, lr, batch_size, seed,
        client_id=client_id, round_index=round_index,
    )


def alternate_attack(
    global_params: ModelParams,
    clean: LabeledDataset,
    poison: LabeledDataset,
    benign_delta: np.ndarray,
    spec: AttackSpec,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    client_id: int = -1,
    round_index: int = -1,
) -> ModelUpdate:
    """Alternate poison epochs with stealth epochs, then boost the update.

    Even epochs run SGD on clean + poison (clean gradients scaled by
    lambda_clean). Odd epochs run SGD on clean data with each step pulled
    toward the benign anchor by min(2*lr*rho, 1) * (theta - anchor); the
    clip keeps the pull stable for arbitrarily large rho, and as rho grows
    the update converges to the anchor. The finished delta is scaled by the
    boost coefficient.
    """
    if clean.size < 1:
        raise TrainingError("attacker has no clean data")
    mixed = _training_set(clean, poison, spec.poison_count)
    anchor_delta = np.asarray(benign_delta, dtype=np.float64)
    pull = min(2.0 * lr * spec.stealth_rho, 1.0)
    rng = np.random.default_rng(seed)
    theta = global_params.copy()
    # delta accumulation mirrors local_train so neutral knobs reproduce an
    # honest client's update byte for byte
    delta = np.zeros(global_params.dim)
    n_clean = clean.size

    for h in range(epochs):
        if h % 2 == 0:
            x, y = mixed.samples, mixed.labels
            weighted = spec.lambda_clean != 1.0
        else:
            x, y = clean.samples, clean.labels
            weighted = False
        n = x.shape[0]
        order = np.arange(n) if batch_size >= n else rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if weighted:
                grad = _weighted_grad(theta, x, y, idx, n_clean, spec.lambda_clean)
            else:
                _, grad = loss_and_grad(theta, Batch(x[idx], y[idx]))
            delta -= lr * grad
            if h % 2 == 1 and pull > 0.0:
                delta -= pull * (delta - anchor_delta)
            theta.flat = global_params.flat + delta

    if spec.boost != 1.0:
        delta = delta * spec.boost
    return ModelUpdate(delta, client_id=client_id, round_index=round_index)


def _weighted_grad(
    theta: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    n_clean: int,
    lam: float,
) -> np.ndarray:
    """Batch gradient with clean samples (index < n_clean) weighted by lam."""
    clean_idx = idx[idx < n_clean]
    pois_idx = idx[idx >= n_clean]
    total = lam * clean_idx.size + pois_idx.size
    grad = np.zeros(theta.dim)
    if clean_idx.size:
        _, g = loss_and_grad(theta, Batch(x[clean_idx], y[clean_idx]))
        grad += lam * clean_idx.size * g
    if pois_idx.size:
        _, g = loss_and_grad(theta, Batch(x[pois_idx], y[pois_idx]))
        grad += pois_idx.size * g
    return grad / total


def dba_attack(
    global_params: ModelParams,
    clean: LabeledDataset,
    pool_base: LabeledDataset,
    spec: AttackSpec,
    part_index: int,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    client_id: int = -1,
    round_index: int = -1,
) -> ModelUpdate:
    """Basic poisoning with only this attacker's slice of the trigger.

    With dba_parts=1 the slice is the whole trigger and the behavior equals
    the basic attack. Evaluation always applies the full trigger.
    """
    part = spec.trigger.part(max(spec.dba_parts, 1), part_index)
    poison = make_poison_pool(pool_base, part)
    return basic_attack(
        global_params, clean, poison, spec.poison_count,
        epochs, lr, batch_size, seed,
        client_id=client_id, round_index=round_index,
    )


def sybil_updates(
    leader_update: ModelUpdate, malicious_selected: Sequence[int], round_index: int
) -> List[ModelUpdate]:
    """One update per selected colluder, all byte-identical to the leader's."""
    if not malicious_selected:
        raise ConfigError("sybil round needs at least one selected malicious client")
    return [
        ModelUpdate(leader_update.delta.copy(), client_id=cid, round_index=round_index)
        for cid in malicious_selected
    ]


def forge_full_claim(
    delta: np.ndarray, shapes: Shapes, lr: float, inf_cfg: InferenceConfig, margin: float = 1.0
) -> np.ndarray:
    """Rank-1 edit of the last-layer weight block inflating the class indicator.

    Adds the same constant to every row sum of the recovered gradient's
    negation, lifting all indicator entries above an absolute threshold so
    the client appears to hold sufficient data for every class. A uniform
    lift cannot beat the relative (mean-based) thresholds, which is exactly
    why clustering caps the forger's memberships like anyone else's.
    """
    delta = np.asarray(delta, dtype=np.float64).copy()
    u = class_indicator(recover_last_layer_gradient(delta, shapes, lr))
    if inf_cfg.threshold_mode == "absolute":
        target = inf_cfg.beta
    else:
        target = float(u.max())
    shift = target + margin - float(u.min())
    if shift > 0.0:
        rows, cols = shapes[-1]
        block = last_layer_weight_block(delta, shapes)
        block += lr * shift / cols  # in-place on the flat vector's view
    return delta


def adaptive_attack(
    global_params: ModelParams,
    clean: LabeledDataset,
    poison: LabeledDataset,
    benign_delta: np.ndarray,
    spec: AttackSpec,
    inf_cfg: InferenceConfig,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    client_id: int = -1,
    round_index: int = -1,
) -> ModelUpdate:
    """Alternate attack whose finished update also forges a full-class claim."""
    upd = alternate_attack(
        global_params, clean, poison, benign_delta, spec,
        epochs, lr, batch_size, seed,
        client_id=client_id, round_index=round_index,
    )
    forged = forge_full_claim(upd.delta, global_params.shapes, lr, inf_cfg)
    return ModelUpdate(forged, client_id=client_id, round_index=round_index)
