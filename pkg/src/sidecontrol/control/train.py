"""Attribute-classifier pretraining and side-network training over cached base states."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import diffcore as dc
from ..baselm import BaseLM, FrozenModelError, response_states
from ..textdata import ACTS, DialogueExample
from . import ops
from .nets import (AttributeClassifier, SideBatch, _SideNet, attributes_of, collate, require_task,
                   side_net_for)

log = logging.getLogger(__name__)

KNOWLEDGE_LAMBDA_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
LABEL_LAMBDA_GRID = (1.0, 10.0, 1e2, 1e3, 1e4, 1e5, 1e6)
DEFAULT_LAMBDA = {"knowledge": 1e-5, "label": 1e5}


def default_grid(task: str) -> tuple[float, ...]:
    return KNOWLEDGE_LAMBDA_GRID if task == "knowledge" else LABEL_LAMBDA_GRID


@dataclass
class TrainingConfig:
    lam: float = 0.0
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 4
    epochs: int = 10
    max_steps: int | None = None      # optional cap on optimizer steps (desk-scale budgets)
    eval_every: int | None = None     # default: 100 (knowledge) / 1000 (label)
    val_limit: int | None = None      # optional cap on validation examples per evaluation
    seed: int = 0
    grid: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def interval(self, task: str) -> int:
        if self.eval_every is not None:
            return self.eval_every
        return 100 if task == "knowledge" else 1000


@dataclass
class CachedSet:
    """Teacher-forced base states for a dataset; computed once, reused by every side run."""

    states: list[tuple[np.ndarray, np.ndarray]]
    attributes: list
    features: np.ndarray    # per-example mean of base states (N, D)

    def __len__(self) -> int:
        return len(self.states)

    def batch(self, idx) -> SideBatch:
        return collate([self.states[i] for i in idx], [self.attributes[i] for i in idx])


def cache_states(base: BaseLM, examples: Sequence[DialogueExample]) -> CachedSet:
    states = response_states(base, examples)
    feats = np.stack([s.mean(axis=0) for s, _ in states]) if states else np.zeros((0, base.config.d))
    return CachedSet(states, attributes_of(examples), feats)


def _require_frozen(base: BaseLM) -> None:
    if not base.frozen or any(p.trainable for p in base.params):
        raise FrozenModelError("the base model must be frozen before side training")


# -------------------------------------------------------------- classifier

@dataclass
class ClassifierConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0


def pretrain_classifier(base: BaseLM, data: CachedSet | Sequence[DialogueExample],
                        config: ClassifierConfig | None = None,
                        val: CachedSet | Sequence[DialogueExample] | None = None) -> AttributeClassifier:
    """Fit W_clf on time-averaged base states, keep the best-validation weights, then freeze."""
    _require_frozen(base)
    config = config or ClassifierConfig()
    if not isinstance(data, CachedSet):
        require_task(data, "label")
        data = cache_states(base, data)
    if val is not None and not isinstance(val, CachedSet):
        val = cache_states(base, val)
    if not all(hasattr(a, "act") for a in data.attributes):
        raise ValueError("dataset lacks act labels")
    y = np.array([a.act for a in data.attributes], dtype=np.int64)
    clf = AttributeClassifier(base.config.d, seed=config.seed)
    opt = dc.OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    best, best_loss = clf.params.snapshot(), np.inf

    def val_loss() -> float:
        src = val if val is not None else data
        yy = np.array([a.act for a in src.attributes])
        p = clf.predict_proba(src.features)
        return float(-np.mean(np.log(np.maximum(p[np.arange(len(yy)), yy], 1e-300))))

    for _ in range(config.epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            logits = dc.matmul(dc.Node(data.features[idx]), clf.w)
            loss = dc.scale(dc.nll_gather(dc.log_softmax(logits), y[idx]), 1.0 / len(idx))
            dc.backprop(loss)
            dc.adamw_step(opt, clf.params)
        vl = val_loss()
        if vl < best_loss:
            best_loss, best = vl, clf.params.snapshot()
    clf.params.restore(best)
    return clf.freeze()


def classifier_accuracy(clf: AttributeClassifier, data: CachedSet) -> float:
    y = np.array([a.act for a in data.attributes])
    return float(np.mean(np.argmax(clf.predict_proba(data.features), axis=-1) == y))


# ------------------------------------------------------------ side training

@dataclass
class SideTrainResult:
    side: _SideNet
    lam: float
    train_trace: list[float] = field(default_factory=list)
    val_trace: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_val: float = float("inf")
    seconds: float = 0.0


def side_losses(side: _SideNet, batch: SideBatch, lam: float,
                clf: AttributeClassifier | None = None) -> tuple[dc.Node, dc.Node, dc.Node | None]:
    """(total, L_cclm, L_control) for one batch."""
    out = side.forward(batch)
    l_cclm = ops.cclm_loss_from_gold(side.gold_prob(out, batch), batch.mask)
    if side.task == "knowledge":
        l_ctrl = ops.coverage_loss(out.a, batch.mask)
    else:
        if clf is None:
            raise ValueError("label control needs the frozen attribute classifier")
        _, l_ctrl = ops.classifier_loss(out.h_s, batch.acts, clf.w, batch.mask)
    return ops.total_objective(l_cclm, l_ctrl, lam), l_cclm, l_ctrl


def evaluate_side(side: _SideNet, data: CachedSet, lam: float, clf: AttributeClassifier | None = None,
                  batch_size: int = 64, limit: int | None = None) -> float:
    """Mean per-example validation objective."""
    n = len(data) if limit is None else min(limit, len(data))
    total = 0.0
    with dc.no_grad():
        for i in range(0, n, batch_size):
            idx = list(range(i, min(n, i + batch_size)))
            loss, _, _ = side_losses(side, data.batch(idx), lam, clf)
            total += float(loss.data) * len(idx)
    return total / max(n, 1)


def train_side(base: BaseLM, task: str, train: CachedSet, val: CachedSet | None,
               config: TrainingConfig, clf: AttributeClassifier | None = None,
               grid_mode: bool = False, on_step: Callable[[int, float], None] | None = None) -> SideTrainResult:
    """Teacher-forced side training; base (and classifier) stay frozen; best-validation weights returned."""
    _require_frozen(base)
    if grid_mode:
        grid = config.grid if config.grid is not None else default_grid(task)
        if config.lam != 0 and config.lam not in grid:
            raise ValueError(f"lambda {config.lam} is not in the configured grid {list(grid)}")
    if task == "label":
        if clf is None:
            raise ValueError("label control needs the frozen attribute classifier")
        clf.require_frozen()
    side = side_net_for(task, base, seed=config.seed)
    opt = dc.OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    res = SideTrainResult(side, config.lam)
    interval = config.interval(task)
    best = side.params.snapshot()
    start = time.perf_counter()
    step = 0

    def validate() -> None:
        if val is None or len(val) == 0:
            return
        v = evaluate_side(side, val, config.lam, clf, limit=config.val_limit)
        res.val_trace.append((step, v))
        if v < res.best_val:
            res.best_val, res.best_step = v, step
            best.update(side.params.snapshot())

    done = False
    for _ in range(config.epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), config.batch_size):
            loss, _, _ = side_losses(side, train.batch(order[i:i + config.batch_size]), config.lam, clf)
            dc.backprop(loss)
            dc.adamw_step(opt, side.params)
            step += 1
            res.train_trace.append(float(loss.data))
            if on_step is not None:
                on_step(step, res.train_trace[-1])
            if step % interval == 0:
                validate()
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        if done:
            break
    if not res.val_trace or res.val_trace[-1][0] != step:
        validate()
    if val is not None and len(val):
        side.params.restore(best)
    res.seconds = time.perf_counter() - start
    log.info("side %s lambda=%g: %d steps, best val %.4f at step %d", task, config.lam, step,
             res.best_val, res.best_step)
    return res
