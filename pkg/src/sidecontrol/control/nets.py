"""Side networks, the frozen attribute classifier and their checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import diffcore as dc
from ..baselm import BaseLM
from ..diffcore import Node, ParamSet
from ..textdata import ACTS, PAD, DialogueExample, KnowledgeDoc, SemanticLabel
from . import ops


class CompatibilityError(ValueError):
    """Checkpoints that were not built against the same base model or vocabulary."""


class FrozenClassifierError(RuntimeError):
    pass


# ----------------------------------------------------------------- batches

@dataclass
class SideBatch:
    """Padded teacher-forcing batch over cached base states."""

    h_b: np.ndarray          # (B, T, D)
    targets: np.ndarray      # (B, T)
    mask: np.ndarray         # (B, T)
    acts: np.ndarray | None = None        # (B,)
    k_ids: np.ndarray | None = None       # (B, K)
    k_lengths: np.ndarray | None = None   # (B,)

    @property
    def kmask(self) -> np.ndarray | None:
        if self.k_ids is None:
            return None
        return (np.arange(self.k_ids.shape[1])[None, :] < self.k_lengths[:, None]).astype(np.float64)


def collate(states: Sequence[tuple[np.ndarray, np.ndarray]], attributes: Sequence) -> SideBatch:
    """Pad cached ``(states, targets)`` pairs and their attributes into one batch."""
    B = len(states)
    T = max(len(t) for _, t in states)
    D = states[0][0].shape[-1]
    h = np.zeros((B, T, D))
    tg = np.full((B, T), PAD, dtype=np.int64)
    m = np.zeros((B, T))
    for b, (s, t) in enumerate(states):
        h[b, :len(t)] = s
        tg[b, :len(t)] = t
        m[b, :len(t)] = 1.0
    batch = SideBatch(h, tg, m)
    if isinstance(attributes[0], SemanticLabel):
        batch.acts = np.array([a.act for a in attributes], dtype=np.int64)
    else:
        K = max(len(a.tokens) for a in attributes)
        ids = np.full((B, K), PAD, dtype=np.int64)
        for b, a in enumerate(attributes):
            ids[b, :len(a.tokens)] = a.tokens
        batch.k_ids = ids
        batch.k_lengths = np.array([len(a.tokens) for a in attributes], dtype=np.int64)
    return batch


# ------------------------------------------------------------ side networks

@dataclass
class SideOutput:
    h_s: Node
    alpha: Node
    h_t: Node
    logits: Node
    a: Node | None = None        # attention (B, T, K)
    beta: Node | None = None     # copy gate (B, T, 1)


class _SideNet:
    task = ""

    def __init__(self, base: BaseLM):
        self.base = base
        self.params = ParamSet()

    @property
    def d(self) -> int:
        return self.base.config.d

    def manifest(self, lam: float, vocab_hash: str) -> dict:
        return {"task": self.task, "lambda": lam, "base_hash": self.base.digest, "vocab_hash": vocab_hash,
                "d": self.d}

    def save(self, ckpt_path, manifest_path, lam: float, vocab_hash: str) -> None:
        self.params.save(ckpt_path)
        Path(manifest_path).write_text(json.dumps(self.manifest(lam, vocab_hash), sort_keys=True) + "\n")

    def check_compatible(self, manifest: dict, vocab_hash: str | None = None) -> None:
        if manifest.get("task") != self.task:
            raise CompatibilityError(f"checkpoint task {manifest.get('task')!r} != {self.task!r}")
        if manifest.get("base_hash") != self.base.digest:
            raise CompatibilityError("side checkpoint was trained against a different base model")
        if vocab_hash is not None and manifest.get("vocab_hash") != vocab_hash:
            raise CompatibilityError("side checkpoint was trained with a different vocabulary")
        if manifest.get("d", self.d) != self.d:
            raise CompatibilityError("hidden size differs from the base model")

    def p_gen_logits(self, h_t: Node) -> Node:
        return dc.matmul(h_t, self.base.params["w_vocab"])


class KnowledgeSideNet(_SideNet):
    """BiLSTM knowledge encoder, attention, per-step mixture and copy gate."""

    task = "knowledge"

    def __init__(self, base: BaseLM, seed: int = 0):
        super().__init__(base)
        D = self.d
        if D % 2:
            raise ValueError("hidden size must be even for the bidirectional encoder")
        H = D // 2
        E = base.params["tok_emb"].shape[1]
        rng = np.random.default_rng(seed)
        p = self.params
        for direction in ("fwd", "bwd"):
            p.add(f"lstm.{direction}.wx", dc.uniform_init(rng, E, (E, 4 * H)))
            p.add(f"lstm.{direction}.wh", dc.uniform_init(rng, H, (H, 4 * H)))
            p.add(f"lstm.{direction}.b", np.zeros(4 * H))
        p.add("attn.w_k", dc.uniform_init(rng, D, (D, D)))
        p.add("attn.w_b", dc.uniform_init(rng, D, (D, D)))
        p.add("attn.b_kb", np.zeros(D))
        p.add("attn.v", dc.uniform_init(rng, D, (D,)))
        p.add("fuse.w_c", dc.uniform_init(rng, 2 * D, (2 * D, D)))
        p.add("fuse.b_c", np.zeros(D))
        p.add("gate.w_alpha", dc.uniform_init(rng, 2 * D, (2 * D, 1)))
        p.add("gate.b_alpha", np.zeros(1))
        p.add("copy.w_beta", dc.uniform_init(rng, 2 * D, (2 * D, 1)))
        p.add("copy.b_beta", np.zeros(1))

    def _dir(self, name: str) -> dict:
        p = self.params
        return {k: p[f"lstm.{name}.{k}"] for k in ("wx", "wh", "b")}

    def encode(self, k_ids: np.ndarray, lengths: np.ndarray | None = None) -> Node:
        k_ids = np.atleast_2d(np.asarray(k_ids, dtype=np.int64))
        if lengths is None:
            lengths = np.full(k_ids.shape[0], k_ids.shape[1])
        return ops.encode_knowledge(self.base.params["tok_emb"], k_ids, np.asarray(lengths),
                                    self._dir("fwd"), self._dir("bwd"))

    def step(self, h_k: Node, h_b, kmask=None, alpha_override: float | None = None,
             beta_override: float | None = None) -> SideOutput:
        """Side forward for base states ``h_b`` (B, T, D) against encoded knowledge ``h_k``."""
        p = self.params
        h_b = dc.const(h_b)
        a, c = ops.attend(h_k, h_b, p["attn.w_k"], p["attn.w_b"], p["attn.b_kb"], p["attn.v"], kmask)
        h_s, alpha, h_t = ops.knowledge_side_step(c, h_b, p["fuse.w_c"], p["fuse.b_c"],
                                                  p["gate.w_alpha"], p["gate.b_alpha"], alpha_override)
        beta = ops.copy_gate(c, h_b, p["copy.w_beta"], p["copy.b_beta"])
        if beta_override is not None:
            beta = Node(np.full(beta.shape, float(beta_override)))
        return SideOutput(h_s, alpha, h_t, self.p_gen_logits(h_t), a, beta)

    def forward(self, batch: SideBatch, alpha_override=None, beta_override=None) -> SideOutput:
        h_k = self.encode(batch.k_ids, batch.k_lengths)
        return self.step(h_k, batch.h_b, batch.kmask, alpha_override, beta_override)

    def final_dist(self, out: SideOutput, k_ids, kmask=None) -> Node:
        return ops.copy_mix(dc.softmax(out.logits, axis=-1), out.a, out.beta, k_ids, kmask)

    def gold_prob(self, out: SideOutput, batch: SideBatch) -> Node:
        p_gen = dc.softmax(out.logits, axis=-1)
        return ops.copy_gold_prob(dc.take_last(p_gen, batch.targets), out.a, out.beta,
                                  np.where(batch.kmask > 0, batch.k_ids, -1), batch.targets)


class LabelSideNet(_SideNet):
    """Label embedding fused with base states through one tanh layer; global mixture scalar."""

    task = "label"

    def __init__(self, base: BaseLM, seed: int = 0):
        super().__init__(base)
        D = self.d
        rng = np.random.default_rng(seed)
        p = self.params
        p.add("label.w_a", dc.uniform_init(rng, D, (len(ACTS), D)))
        p.add("label.w_d", dc.uniform_init(rng, 2 * D, (2 * D, D)))
        p.add("label.b_d", np.zeros(D))
        p.add("label.s", np.zeros(()))

    def rep(self, acts, h_b) -> Node:
        p = self.params
        return ops.label_side_rep(acts, h_b, p["label.w_a"], p["label.w_d"], p["label.b_d"])

    def alpha(self) -> Node:
        return dc.sigmoid(self.params["label.s"])

    def step(self, acts, h_b, alpha_override: float | None = None) -> SideOutput:
        h_b = dc.const(h_b)
        h_s = self.rep(acts, h_b)
        alpha = self.alpha() if alpha_override is None else Node(float(alpha_override))
        h_t = ops.fuse(h_b, h_s, alpha)
        return SideOutput(h_s, alpha, h_t, self.p_gen_logits(h_t))

    def forward(self, batch: SideBatch, alpha_override=None, beta_override=None) -> SideOutput:
        return self.step(batch.acts, batch.h_b, alpha_override)

    def final_dist(self, out: SideOutput, k_ids=None, kmask=None) -> Node:
        return dc.softmax(out.logits, axis=-1)

    def gold_prob(self, out: SideOutput, batch: SideBatch) -> Node:
        return dc.exp(dc.take_last(dc.log_softmax(out.logits, axis=-1), batch.targets))


def side_net_for(task: str, base: BaseLM, seed: int = 0) -> _SideNet:
    if task == "knowledge":
        return KnowledgeSideNet(base, seed)
    if task == "label":
        return LabelSideNet(base, seed)
    raise ValueError(f"unknown task {task!r}")


def load_side(ckpt_path, manifest_path, base: BaseLM, vocab_hash: str | None = None) -> tuple[_SideNet, dict]:
    manifest = json.loads(Path(manifest_path).read_text())
    net = side_net_for(manifest["task"], base)
    net.check_compatible(manifest, vocab_hash)
    net.params.load_into(ckpt_path)
    return net, manifest


# -------------------------------------------------------------- classifier

class AttributeClassifier:
    """Linear act classifier over time-averaged hidden states; frozen after training."""

    def __init__(self, d: int, seed: int = 0):
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        self.params.add("clf.w", dc.uniform_init(rng, d, (d, len(ACTS))))
        self.frozen = False

    @property
    def w(self) -> Node:
        return self.params["clf.w"]

    def freeze(self) -> "AttributeClassifier":
        self.params.freeze()
        self.frozen = True
        return self

    def require_frozen(self) -> None:
        if not self.frozen or any(p.trainable for p in self.params):
            raise FrozenClassifierError("the attribute classifier must be frozen before side training")

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        z = np.asarray(features) @ self.w.data
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def save(self, path) -> None:
        self.params.save(path)

    @classmethod
    def load(cls, path) -> "AttributeClassifier":
        text = Path(path).read_text(encoding="utf-8")
        arr, _ = dc.loads(text)["clf.w"]
        clf = cls(arr.shape[0])
        clf.params.load_into(text)
        clf.frozen = not clf.params.param("clf.w").trainable
        return clf


def attributes_of(examples: Sequence[DialogueExample]) -> list:
    return [ex.attribute for ex in examples]


def require_task(examples: Sequence[DialogueExample], task: str) -> None:
    kind = KnowledgeDoc if task == "knowledge" else SemanticLabel
    for ex in examples:
        if not isinstance(ex.attribute, kind):
            raise ValueError(f"dataset lacks {'act labels' if task == 'label' else 'knowledge documents'}")
