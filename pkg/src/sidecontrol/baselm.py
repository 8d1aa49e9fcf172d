"""A miniature causal transformer LM that is trained once and then frozen."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamSet
from .textdata import BOS, EOS, PAD, DialogueExample

log = logging.getLogger(__name__)


class LengthError(ValueError):
    pass


class FrozenModelError(RuntimeError):
    pass


@dataclass
class BaseLMConfig:
    d: int = 64
    layers: int = 2
    heads: int = 2
    lmax: int = 128
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")


@dataclass
class GenerationConfig:
    top_k: int = 10
    max_len: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1 or self.max_len < 1:
            raise ValueError("top_k and max_len must be >= 1")


@dataclass
class LMTrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    steps: int = 1000
    log_every: int = 100


class BaseLM:
    def __init__(self, vocab_size: int, config: BaseLMConfig | None = None, seed: int = 0):
        self.config = config or BaseLMConfig()
        self.vocab_size = vocab_size
        self.frozen = False
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        c = self.config
        d, f = c.d, c.d * c.ffn_mult
        p = self.params
        # embedding rows are scaled by their width (they are looked up, not multiplied)
        p.add("tok_emb", dc.uniform_init(rng, d, (vocab_size, d)))
        p.add("pos_emb", dc.uniform_init(rng, d, (c.lmax, d)))
        for i in range(c.layers):
            pre = f"block{i}."
            for ln in ("ln1", "ln2"):
                p.add(pre + ln + ".g", np.ones(d))
                p.add(pre + ln + ".b", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                p.add(pre + "attn." + w, dc.uniform_init(rng, d, (d, d)))
                p.add(pre + "attn.b" + w[1], np.zeros(d))
            p.add(pre + "mlp.w1", dc.uniform_init(rng, d, (d, f)))
            p.add(pre + "mlp.b1", np.zeros(f))
            p.add(pre + "mlp.w2", dc.uniform_init(rng, f, (f, d)))
            p.add(pre + "mlp.b2", np.zeros(d))
        p.add("ln_f.g", np.ones(d))
        p.add("ln_f.b", np.zeros(d))
        p.add("w_vocab", dc.uniform_init(rng, d, (d, vocab_size)))
        self._masks: dict[int, np.ndarray] = {}

    # ------------------------------------------------------------ plumbing

    def freeze(self) -> "BaseLM":
        self.params.freeze()
        self.frozen = True
        return self

    def copy(self, trainable: bool = True) -> "BaseLM":
        other = BaseLM.__new__(BaseLM)
        other.config = self.config
        other.vocab_size = self.vocab_size
        other.frozen = False
        other.params = ParamSet()
        for prm in self.params:
            other.params.add(prm.name, prm.data.copy(), trainable)
        other._masks = {}
        if not trainable:
            other.frozen = True
        return other

    @property
    def digest(self) -> str:
        return self.params.digest()

    def manifest(self, vocab_path: str) -> dict:
        c = self.config
        return {"d": c.d, "layers": c.layers, "heads": c.heads, "lmax": c.lmax,
                "ffn_mult": c.ffn_mult, "vocab_size": self.vocab_size, "vocab": vocab_path}

    def save(self, ckpt_path, manifest_path=None, vocab_path: str = "vocab.txt") -> None:
        self.params.save(ckpt_path)
        if manifest_path is not None:
            Path(manifest_path).write_text(json.dumps(self.manifest(vocab_path), sort_keys=True) + "\n")

    @classmethod
    def load(cls, ckpt_path, manifest_path) -> "BaseLM":
        man = json.loads(Path(manifest_path).read_text())
        cfg = BaseLMConfig(d=man["d"], layers=man["layers"], heads=man["heads"], lmax=man["lmax"],
                           ffn_mult=man.get("ffn_mult", 4))
        model = cls(man["vocab_size"], cfg)
        model.params.load_into(ckpt_path)
        model.frozen = all(not p.trainable for p in model.params)
        return model

    # ------------------------------------------------------------- forward

    def _causal_mask(self, n: int) -> np.ndarray:
        m = self._masks.get(n)
        if m is None:
            m = np.triu(np.full((n, n), -1e9), k=1)
            self._masks[n] = m
        return m

    def _block(self, x: Node, i: int) -> Node:
        p, c = self.params, self.config
        pre = f"block{i}."
        B, L, D = x.shape
        H, dh = c.heads, c.d // c.heads
        h = dc.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def heads(w):
            proj = dc.add(dc.matmul(h, p[pre + "attn.w" + w]), p[pre + "attn.b" + w])
            return dc.reshape(proj, (B, L, H, dh))

        q = dc.transpose(heads("q"), (0, 2, 1, 3))
        k = dc.transpose(heads("k"), (0, 2, 3, 1))
        v = dc.transpose(heads("v"), (0, 2, 1, 3))
        scores = dc.add(dc.scale(dc.matmul(q, k), 1.0 / np.sqrt(dh)), Node(self._causal_mask(L)))
        att = dc.matmul(dc.softmax(scores, axis=-1), v)
        att = dc.reshape(dc.transpose(att, (0, 2, 1, 3)), (B, L, D))
        x = dc.add(x, dc.add(dc.matmul(att, p[pre + "attn.wo"]), p[pre + "attn.bo"]))
        h = dc.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = dc.gelu(dc.add(dc.matmul(h, p[pre + "mlp.w1"]), p[pre + "mlp.b1"]))
        return dc.add(x, dc.add(dc.matmul(h, p[pre + "mlp.w2"]), p[pre + "mlp.b2"]))

    def residual_before_last_block(self, ids: np.ndarray) -> Node:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        L = ids.shape[1]
        if L > self.config.lmax:
            raise LengthError(f"sequence length {L} exceeds lmax={self.config.lmax}")
        p = self.params
        x = dc.add(dc.embedding(p["tok_emb"], ids), p["pos_emb"][:L])
        for i in range(self.config.layers - 1):
            x = self._block(x, i)
        return x

    def head_from_residual(self, x: Node) -> Node:
        """Run the last block and the final norm; returns last hidden states."""
        p = self.params
        x = self._block(x, self.config.layers - 1)
        return dc.layer_norm(x, p["ln_f.g"], p["ln_f.b"])

    def forward(self, ids) -> tuple[Node, Node]:
        """Hidden states (B, L, D) after the final norm and logits (B, L, |V|)."""
        h = self.head_from_residual(self.residual_before_last_block(ids))
        return h, dc.matmul(h, self.params["w_vocab"])

    def logits(self, h) -> Node:
        return dc.matmul(dc.const(h), self.params["w_vocab"])


# -------------------------------------------------------------- sequences

def lm_sequence(context_ids: Sequence[int], response: Sequence[int], lmax: int,
                reserve: int = 0) -> tuple[list[int], list[int]]:
    """Truncate to fit ``lmax``: response first (to lmax//2), then context from the left.

    Returns ``(context, response)``; the packed sequence is
    ``context + [BOS] + response`` with ``reserve`` spare slots left over.
    """
    response = list(response)[: max(1, lmax // 2 - 1)] if response else []
    room = lmax - len(response) - 1 - reserve
    if room < 0:
        raise LengthError("no room left for the context")
    context = list(context_ids)[-room:] if room else []
    if len(context) + 1 + len(response) + reserve > lmax:
        raise LengthError(f"sequence of {len(context) + 1 + len(response)} tokens exceeds lmax={lmax}")
    return context, response


def pack_batch(examples: Sequence[DialogueExample], lmax: int):
    """Pad teacher-forcing sequences to a common length.

    Returns ``ids, targets, mask, starts`` where ``starts[b]`` is the index of
    BOS in row ``b`` (the first response-state position).
    """
    rows, tgts, starts = [], [], []
    for ex in examples:
        ctx, resp = lm_sequence(ex.context_ids(), ex.response, lmax)
        seq = ctx + [BOS] + resp
        rows.append(seq)
        tgts.append(seq[1:] + [EOS])
        starts.append(len(ctx))
    L = max(len(r) for r in rows)
    ids = np.full((len(rows), L), PAD, dtype=np.int64)
    targets = np.full((len(rows), L), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), L))
    for b, (r, t) in enumerate(zip(rows, tgts)):
        ids[b, :len(r)] = r
        targets[b, :len(t)] = t
        mask[b, :len(t)] = 1.0
    return ids, targets, mask, np.array(starts)


def lm_loss(model: BaseLM, examples: Sequence[DialogueExample], response_only: bool = False) -> tuple[Node, float]:
    ids, targets, mask, starts = pack_batch(examples, model.config.lmax)
    if response_only:
        pos = np.arange(ids.shape[1])[None, :]
        mask = mask * (pos >= starts[:, None])
    _, logits = model.forward(ids)
    nll = dc.nll_gather(dc.log_softmax(logits), targets, mask)
    return nll, float(mask.sum())


def train_base_lm(examples: Sequence[DialogueExample], vocab_size: int, config: BaseLMConfig | None = None,
                  train: LMTrainConfig | None = None, seed: int = 0,
                  model: BaseLM | None = None) -> tuple[BaseLM, list[float]]:
    """Next-token training with AdamW; returns the (unfrozen) model and per-step mean loss."""
    train = train or LMTrainConfig()
    if model is None:
        model = BaseLM(vocab_size, config, seed=seed)
    if model.frozen:
        raise FrozenModelError("refusing to train a frozen model in place; train a copy")
    rng = np.random.default_rng(seed + 1)
    opt = dc.OptimizerState(lr=train.lr, weight_decay=train.weight_decay)
    trace: list[float] = []
    order = rng.permutation(len(examples))
    pos = 0
    for step in range(train.steps):
        if pos + train.batch_size > len(order):
            order = rng.permutation(len(examples))
            pos = 0
        batch = [examples[i] for i in order[pos:pos + train.batch_size]]
        pos += train.batch_size
        loss, n_tok = lm_loss(model, batch)
        mean = dc.scale(loss, 1.0 / max(n_tok, 1.0))
        dc.backprop(mean)
        dc.adamw_step(opt, model.params)
        trace.append(float(mean.data))
        if train.log_every and (step + 1) % train.log_every == 0:
            log.info("base-lm step %d loss %.4f", step + 1, float(np.mean(trace[-train.log_every:])))
    return model, trace


def mean_nll(model: BaseLM, examples: Sequence[DialogueExample], batch_size: int = 32,
             response_only: bool = True) -> float:
    total, count = 0.0, 0.0
    with dc.no_grad():
        for i in range(0, len(examples), batch_size):
            loss, n = lm_loss(model, examples[i:i + batch_size], response_only=response_only)
            total += float(loss.data)
            count += n
    return total / count


# --------------------------------------------------------- hidden states

def hidden_states(model: BaseLM, context_ids: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
    """States h_b^1..h_b^t for a response prefix y_1..y_{t-1}: one per position from BOS on."""
    seq = list(context_ids) + [BOS] + list(prefix)
    if len(seq) > model.config.lmax:
        raise LengthError(f"sequence length {len(seq)} exceeds lmax={model.config.lmax}")
    with dc.no_grad():
        h, _ = model.forward(np.array(seq)[None, :])
    return h.data[0, len(context_ids):]


def response_states(model: BaseLM, examples: Sequence[DialogueExample], batch_size: int = 64):
    """Teacher-forced base states for each example: (T+1, D) arrays, targets ``response + [EOS]``."""
    out = []
    with dc.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            ids, targets, mask, starts = pack_batch(chunk, model.config.lmax)
            h, _ = model.forward(ids)
            for b, ex in enumerate(chunk):
                n = int(mask[b].sum())
                s = int(starts[b])
                out.append((h.data[b, s:n].copy(), targets[b, s:n].copy()))
    return out


def next_token_dist(model: BaseLM, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise ValueError("hidden state contains NaN or Inf")
    z = h @ model.params["w_vocab"].data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_top_k(dist, k: int, rng: np.random.Generator) -> int:
    """Keep the k most probable ids (ties to the lower id), renormalise, sample."""
    dist = np.asarray(dist, dtype=np.float64)
    if k > dist.size:
        warnings.warn(f"top_k={k} exceeds vocabulary size {dist.size}; clamping", stacklevel=2)
        k = dist.size
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = np.argsort(-dist, kind="stable")[:k]
    p = dist[keep]
    total = p.sum()
    if total <= 0:
        return int(keep[0])
    return int(keep[rng.choice(k, p=p / total)] if k > 1 else keep[0])


def prompt_ids(model: BaseLM, context_ids: Sequence[int], max_len: int) -> list[int]:
    room = model.config.lmax - 1 - max_len
    if room < 1:
        raise LengthError("max_len leaves no room for the context")
    return list(context_ids)[-room:]


def generate(model: BaseLM, context_ids: Sequence[int], gen: GenerationConfig,
             rng: np.random.Generator | None = None) -> list[int]:
    """Plain top-k sampling from the base LM (full recompute per token)."""
    rng = rng if rng is not None else np.random.default_rng(gen.seed)
    ctx = prompt_ids(model, context_ids, gen.max_len)
    out: list[int] = []
    for _ in range(gen.max_len):
        h = hidden_states(model, ctx, out)[-1]
        tok = sample_top_k(next_token_dist(model, h), gen.top_k, rng)
        if tok == EOS:
            break
        out.append(tok)
    return out


def config_dict(cfg) -> dict:
    return asdict(cfg)
