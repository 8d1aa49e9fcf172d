"""Comparison methods at matching scale: full fine-tuning, weighted decoding and hidden-state steering."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .baselm import (BaseLM, FrozenModelError, GenerationConfig, hidden_states, lm_loss, mean_nll,
                     next_token_dist, prompt_ids, sample_top_k)
from .control.nets import AttributeClassifier
from .diffcore import Node, ParamSet
from .textdata import ACTS, BOS, EOS, RESERVED, SEP, DialogueExample, Vocabulary, is_word

log = logging.getLogger(__name__)


# ------------------------------------------------------------ fine-tuning

@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 2
    epochs: int = 10
    eval_every: int | None = None     # steps; default: once per epoch
    max_steps: int | None = None
    val_limit: int | None = None
    seed: int = 0


@dataclass
class FinetuneResult:
    model: BaseLM
    train_trace: list[float] = field(default_factory=list)
    val_trace: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0


def finetune(base: BaseLM, train: Sequence[DialogueExample], val: Sequence[DialogueExample] | None = None,
             config: FinetuneConfig | None = None) -> FinetuneResult:
    """Update every parameter of ``base`` on response NLL; keep the lowest-validation-NLL weights.

    Pass a trainable copy (``base.copy()``); the frozen shared base is refused.
    """
    config = config or FinetuneConfig()
    if base.frozen or not any(p.trainable for p in base.params):
        raise FrozenModelError("refusing to fine-tune the frozen base in place; pass base.copy()")
    model = base
    opt = dc.OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    res = FinetuneResult(model)
    steps_per_epoch = max(1, math.ceil(len(train) / config.batch_size))
    every = config.eval_every or steps_per_epoch
    val = list(val or [])[: config.val_limit]
    best, best_val = model.params.snapshot(), math.inf
    step = 0

    def validate() -> None:
        nonlocal best, best_val
        if not val:
            return
        v = mean_nll(model, val)
        res.val_trace.append((step, v))
        if v < best_val:
            best, best_val, res.best_step = model.params.snapshot(), v, step

    validate()
    done = False
    for _ in range(config.epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), config.batch_size):
            loss, n_tok = lm_loss(model, [train[j] for j in order[i:i + config.batch_size]], response_only=True)
            mean = dc.scale(loss, 1.0 / max(n_tok, 1.0))
            dc.backprop(mean)
            dc.adamw_step(opt, model.params)
            step += 1
            res.train_trace.append(float(mean.data))
            if step % every == 0:
                validate()
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        if done:
            break
    if val:
        if not res.val_trace or res.val_trace[-1][0] != step:
            validate()
        model.params.restore(best)
    return res


# ----------------------------------------------------- future discriminators

@dataclass
class DiscriminatorConfig:
    dim: int = 32
    lr: float = 2e-5
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    max_prefixes: int | None = None   # optional cap on training prefixes (desk-scale budgets)
    seed: int = 0


class FutureDiscriminator:
    """p(act | response prefix): mean token embedding followed by a linear layer."""

    kind = "label"

    def __init__(self, vocab_size: int, dim: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        self.params.add("disc.emb", dc.uniform_init(rng, dim, (vocab_size, dim)))
        self.params.add("disc.w", dc.uniform_init(rng, dim, (dim, len(ACTS))))
        self.params.add("disc.b", np.zeros(len(ACTS)))

    def logits(self, ids: np.ndarray, weights: np.ndarray) -> Node:
        p = self.params
        pooled = dc.reduce_sum(dc.mul(dc.embedding(p["disc.emb"], ids), Node(weights[..., None])), axis=1)
        return dc.add(dc.matmul(pooled, p["disc.w"]), p["disc.b"])

    def predict_proba(self, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        ids, w = _pack(prefixes)
        with dc.no_grad():
            return dc.softmax(self.logits(ids, w), axis=-1).data

    def candidate_log_scores(self, prefix: Sequence[int], candidates: np.ndarray, attribute) -> np.ndarray:
        """log p(act | prefix + [w]) for every candidate w, computed in one pass."""
        emb = self.params["disc.emb"].data
        total = emb[list(prefix)].sum(axis=0) if len(prefix) else np.zeros(emb.shape[1])
        pooled = (total[None, :] + emb[candidates]) / (len(prefix) + 1)
        z = pooled @ self.params["disc.w"].data + self.params["disc.b"].data
        z = z - z.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return logp[:, attribute.act]

    def save(self, path) -> None:
        self.params.save(path)

    @classmethod
    def load(cls, path) -> "FutureDiscriminator":
        text = Path(path).read_text(encoding="utf-8")
        emb, _ = dc.loads(text)["disc.emb"]
        disc = cls(emb.shape[0], emb.shape[1])
        disc.params.load_into(text)
        return disc


class BagOverlapDiscriminator:
    """Knowledge-task scorer in [0, 1]: add-one smoothed share of prefix content words found in the document."""

    kind = "knowledge"

    def __init__(self, vocab: Vocabulary, stopwords):
        self.content = np.array([is_word(t) and t not in stopwords and i >= len(RESERVED)
                                 for i, t in enumerate(vocab.itos)])

    def score(self, prefix: Sequence[int], doc_ids: Sequence[int]) -> float:
        words = [t for t in prefix if self.content[t]]
        bag = set(doc_ids)
        return (sum(t in bag for t in words) + 1.0) / (len(words) + 2.0)

    def candidate_log_scores(self, prefix: Sequence[int], candidates: np.ndarray, attribute) -> np.ndarray:
        bag = set(attribute.tokens)
        words = [t for t in prefix if self.content[t]]
        hits = sum(t in bag for t in words)
        is_content = self.content[candidates]
        in_bag = np.array([c in bag for c in candidates.tolist()])
        num = hits + 1.0 + (is_content & in_bag)
        den = len(words) + 2.0 + is_content
        return np.log(num / den)


def _pack(prefixes: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    L = max(1, max(len(p) for p in prefixes))
    ids = np.zeros((len(prefixes), L), dtype=np.int64)
    w = np.zeros((len(prefixes), L))
    for b, p in enumerate(prefixes):
        if len(p):
            ids[b, :len(p)] = p
            w[b, :len(p)] = 1.0 / len(p)
    return ids, w


def response_prefixes(examples: Sequence[DialogueExample]) -> tuple[list[list[int]], np.ndarray]:
    """Every non-empty prefix y_1..y_t of each response with the response's act."""
    prefixes, acts = [], []
    for ex in examples:
        act = getattr(ex.attribute, "act", None)
        if act is None:
            raise ValueError("dataset lacks act labels")
        for t in range(1, len(ex.response) + 1):
            prefixes.append(list(ex.response[:t]))
            acts.append(act)
    return prefixes, np.array(acts, dtype=np.int64)


@dataclass
class DiscriminatorReport:
    prefix_accuracy: float          # over every held-out prefix
    full_accuracy: float            # whole responses only
    first_token_accuracy: float     # prefixes of length 1


def discriminator_report(disc: FutureDiscriminator, examples: Sequence[DialogueExample]) -> DiscriminatorReport:
    prefixes, acts = response_prefixes(examples)
    pred = np.argmax(disc.predict_proba(prefixes), axis=-1)
    lengths = np.array([len(p) for p in prefixes])
    full = np.array([len(p) == len(ex.response) for ex in examples for p in
                     (ex.response[:t] for t in range(1, len(ex.response) + 1))])
    return DiscriminatorReport(float(np.mean(pred == acts)), float(np.mean(pred[full] == acts[full])),
                               float(np.mean(pred[lengths == 1] == acts[lengths == 1])))


def train_future_discriminator(train: Sequence[DialogueExample], vocab_size: int,
                               config: DiscriminatorConfig | None = None,
                               val: Sequence[DialogueExample] | None = None
                               ) -> tuple[FutureDiscriminator, DiscriminatorReport | None]:
    """Fit on all response prefixes (future-attribute prediction); report held-out accuracy."""
    config = config or DiscriminatorConfig()
    prefixes, acts = response_prefixes(train)
    rng = np.random.default_rng(config.seed)
    if config.max_prefixes is not None and len(prefixes) > config.max_prefixes:
        keep = np.sort(rng.choice(len(prefixes), config.max_prefixes, replace=False))
        prefixes, acts = [prefixes[i] for i in keep], acts[keep]
    disc = FutureDiscriminator(vocab_size, config.dim, config.seed)
    opt = dc.OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    for _ in range(config.epochs):
        order = rng.permutation(len(prefixes))
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            ids, w = _pack([prefixes[j] for j in idx])
            logp = dc.log_softmax(disc.logits(ids, w), axis=-1)
            loss = dc.scale(dc.nll_gather(logp, acts[idx]), 1.0 / len(idx))
            dc.backprop(loss)
            dc.adamw_step(opt, disc.params)
    report = discriminator_report(disc, val) if val else None
    return disc, report


# ---------------------------------------------------------- weighted decoding

FUDGE_WEIGHT = {"knowledge": 4.0, "label": 1.0}


@dataclass
class FudgeConfig:
    candidates: int = 200
    weight: float = 1.0


def fudge_step_dist(p_base: np.ndarray, prefix: Sequence[int], disc, attribute, config: FudgeConfig) -> np.ndarray:
    """Re-scored distribution over the top candidates (zero elsewhere)."""
    n = min(config.candidates, p_base.size)
    if config.weight == 0:
        return p_base
    cand = np.argsort(-p_base, kind="stable")[:n]
    score = np.log(np.maximum(p_base[cand], 1e-300)) + config.weight * disc.candidate_log_scores(prefix, cand, attribute)
    out = np.zeros_like(p_base)
    out[cand] = np.exp(score - score.max())
    return out / out.sum()


def fudge_decode(base: BaseLM, disc, context_ids: Sequence[int], attribute, gen: GenerationConfig,
                 config: FudgeConfig | None = None, rng: np.random.Generator | None = None) -> list[int]:
    """Per step: top candidates of the base, add weight * log p_disc, keep top-k, sample proportionally."""
    config = config or FudgeConfig()
    rng = rng if rng is not None else np.random.default_rng(gen.seed)
    ctx = prompt_ids(base, context_ids, gen.max_len)
    out: list[int] = []
    for _ in range(gen.max_len):
        p = next_token_dist(base, hidden_states(base, ctx, out)[-1])
        tok = sample_top_k(fudge_step_dist(p, out, disc, attribute, config), gen.top_k, rng)
        if tok == EOS:
            break
        out.append(tok)
    return out


# ------------------------------------------------------- gradient steering

@dataclass
class SteeringConfig:
    steps: int = 3
    step_size: float = 0.03
    window: int = 5
    gamma: float = 0.99
    kl_scale: float = 0.01

    def __post_init__(self):
        if self.steps < 0 or self.step_size < 0:
            raise ValueError("steps and step_size must be >= 0")
        if self.window < 1 or not 0 <= self.gamma <= 1 or self.kl_scale < 0:
            raise ValueError("window must be >= 1, gamma in [0, 1], kl_scale >= 0")

    @classmethod
    def for_task(cls, task: str) -> "SteeringConfig":
        if task == "knowledge":
            return cls(steps=3, step_size=0.03, gamma=0.99)
        if task == "label":
            return cls(steps=10, step_size=0.2, gamma=0.95)
        raise ValueError(f"unknown task {task!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SteeringConfig":
        data = json.loads(text)
        unknown = set(data) - set(asdict(cls()))
        if unknown:
            raise ValueError(f"unknown steering keys: {sorted(unknown)}")
        return cls(**data)


class BagOfWordsAttribute:
    """Content-word ids of a knowledge document; log p(attribute) = log sum_{w in bag} p(w)."""

    def __init__(self, ids: Sequence[int]):
        self.ids = np.array(sorted(set(int(i) for i in ids)), dtype=np.int64)
        if self.ids.size == 0:
            raise ValueError("bag of words is empty")

    @classmethod
    def from_document(cls, doc_ids: Sequence[int], vocab: Vocabulary, stopwords) -> "BagOfWordsAttribute":
        content = [i for i in doc_ids if i >= len(RESERVED) and i != SEP and is_word(vocab.itos[i])
                   and vocab.itos[i] not in stopwords]
        return cls(content or [i for i in doc_ids if i != SEP] or list(doc_ids))

    def log_prob(self, states: Node, dist: Node) -> Node:
        return dc.scale(bow_attribute_loss(dist, self), -1.0)


def bow_attribute_loss(dist, bag: BagOfWordsAttribute) -> Node:
    """-log sum_{w in bag} dist(w), with the mass clamped at 1e-12."""
    dist = dc.const(dist)
    onehot = np.zeros(dist.shape[-1])
    onehot[bag.ids[bag.ids < dist.shape[-1]]] = 1.0
    mass = dc.reduce_sum(dc.mul(dist, Node(onehot)), axis=-1)
    return dc.scale(dc.log(mass, floor=1e-12), -1.0)


class ClassifierAttribute:
    """log p(act | mean response state) under a frozen linear act classifier."""

    def __init__(self, clf: AttributeClassifier, act: int):
        self.clf = clf
        self.act = int(act)

    def log_prob(self, states: Node, dist: Node) -> Node:
        logits = dc.matmul(dc.mean(states, axis=0, keepdims=True), self.clf.w)
        return dc.getitem(dc.log_softmax(logits, axis=-1), (0, self.act))


def steered_dist(base: BaseLM, ids: Sequence[int], response_start: int, attribute,
                 steering: SteeringConfig) -> np.ndarray:
    """Next-token distribution after gradient ascent on a perturbation of the last ``window`` residual states."""
    ids = np.asarray(ids)[None, :]
    with dc.no_grad():
        resid = base.residual_before_last_block(ids).data
        h_last = base.head_from_residual(Node(resid)).data[0, -1]
    p_base = next_token_dist(base, h_last)
    if steering.steps == 0 or steering.step_size == 0:
        return p_base
    L, D = resid.shape[1], resid.shape[2]
    win = min(steering.window, L)
    logp_base = np.log(np.maximum(p_base, 1e-300))
    delta = np.zeros((win, D))
    w_vocab = base.params["w_vocab"]

    def forward(d: Node) -> tuple[Node, Node]:
        pad = dc.concat([Node(np.zeros((L - win, D))), d], axis=0) if L > win else d
        h = base.head_from_residual(dc.add(Node(resid), dc.reshape(pad, (1, L, D))))
        states = dc.getitem(h, (0, slice(response_start, L)))
        logits = dc.matmul(dc.getitem(h, (0, L - 1)), w_vocab)
        return states, dc.softmax(logits, axis=-1)

    for _ in range(steering.steps):
        d = Node(delta, requires_grad=True)
        states, p = forward(d)
        kl = dc.reduce_sum(dc.mul(p, dc.sub(dc.log(p, floor=1e-300), Node(logp_base))))
        objective = dc.sub(attribute.log_prob(states, p), dc.scale(kl, steering.kl_scale))
        dc.backprop(objective)
        g = d.grad
        norm = float(np.linalg.norm(g))
        if not np.all(np.isfinite(g)) or not math.isfinite(norm):
            warnings.warn("non-finite steering gradient; emitting the unperturbed distribution", RuntimeWarning,
                          stacklevel=2)
            return p_base
        if norm > 0:
            delta = delta + steering.step_size * g / norm
    with dc.no_grad():
        _, p = forward(Node(delta))
    mixed = np.exp(steering.gamma * np.log(np.maximum(p.data, 1e-300)) + (1 - steering.gamma) * logp_base)
    return mixed / mixed.sum()


def pplm_decode(base: BaseLM, attribute, context_ids: Sequence[int], steering: SteeringConfig,
                gen: GenerationConfig, rng: np.random.Generator | None = None) -> list[int]:
    """Top-k sampling where every step's distribution comes from :func:`steered_dist`."""
    rng = rng if rng is not None else np.random.default_rng(gen.seed)
    ctx = prompt_ids(base, context_ids, gen.max_len)
    out: list[int] = []
    for _ in range(gen.max_len):
        seq = ctx + [BOS] + out
        if steering.steps == 0 or steering.step_size == 0:
            dist = next_token_dist(base, hidden_states(base, ctx, out)[-1])
        else:
            dist = steered_dist(base, seq, len(ctx), attribute, steering)
        tok = sample_top_k(dist, gen.top_k, rng)
        if tok == EOS:
            break
        out.append(tok)
    return out
