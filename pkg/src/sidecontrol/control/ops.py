"""The side-network equations as differentiable functions over graph nodes.

Every function works on batched arrays: ``B`` examples, ``T`` response
positions, ``K`` knowledge tokens, ``D`` hidden units, ``V`` vocabulary
entries. Row-vector convention throughout (``x @ W``).
"""
from __future__ import annotations

import warnings

import numpy as np

from .. import diffcore as dc
from ..diffcore import Node, ShapeError
from ..textdata import ACTS, UNK

GOLD_FLOOR = 1e-12


def fuse(h_b, h_s, alpha) -> Node:
    """h_t = alpha * h_b + (1 - alpha) * h_s (alpha scalar or broadcastable)."""
    h_b, h_s, alpha = dc.const(h_b), dc.const(h_s), dc.const(alpha)
    if h_b.shape != h_s.shape:
        raise ShapeError("fuse", h_b.shape, h_s.shape)
    if alpha.data.size and (np.any(alpha.data < 0) or np.any(alpha.data > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    return dc.add(dc.mul(alpha, h_b), dc.mul(dc.sub(1.0, alpha), h_s))


# ---------------------------------------------------------------- BiLSTM

def reverse_index(lengths: np.ndarray, K: int) -> np.ndarray:
    """Per-row index that reverses the valid prefix and keeps padding in place."""
    idx = np.tile(np.arange(K), (len(lengths), 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n)[::-1]
    return idx


def encode_knowledge(emb: Node, ids: np.ndarray, lengths: np.ndarray, fwd: dict, bwd: dict) -> Node:
    """h_k^i = [forward_i ; backward_i] for a right-padded batch of documents.

    ``fwd``/``bwd`` hold ``wx`` (E, 4H), ``wh`` (H, 4H) and ``b`` (4H,). The
    backward direction runs over each row's reversed valid prefix, so padding
    never leaks into real positions.
    """
    ids = np.asarray(ids)
    lengths = np.asarray(lengths)
    if ids.ndim != 2 or ids.shape[1] < 1 or np.any(lengths < 1):
        raise ValueError("knowledge document must contain at least one token")
    B, K = ids.shape
    rev = reverse_index(lengths, K)
    rows = np.arange(B)[:, None]
    x = dc.embedding(emb, ids)
    x_rev = dc.embedding(emb, ids[rows, rev])
    hf = dc.lstm_scan(dc.add(dc.matmul(x, fwd["wx"]), fwd["b"]), fwd["wh"])
    hb_rev = dc.lstm_scan(dc.add(dc.matmul(x_rev, bwd["wx"]), bwd["b"]), bwd["wh"])
    hb = dc.getitem(hb_rev, (rows, rev))
    return dc.concat([hf, hb], axis=-1)


# ------------------------------------------------------------- attention

def attend(h_k: Node, h_b: Node, w_k: Node, w_b: Node, b_kb: Node, v: Node,
           kmask: np.ndarray | None = None) -> tuple[Node, Node]:
    """e_i^t = v . tanh(W_k h_k^i + W_b h_b^t + b); a^t = softmax(e^t); c^t = sum_i a_i^t h_k^i.

    Shapes: h_k (B, K, D), h_b (B, T, D) -> a (B, T, K), c (B, T, D).
    """
    if h_k.shape[0] != h_b.shape[0] or h_k.shape[-1] != h_b.shape[-1]:
        raise ShapeError("attend", h_k.shape, h_b.shape)
    B, K, D = h_k.shape
    T = h_b.shape[1]
    kp = dc.reshape(dc.matmul(h_k, w_k), (B, 1, K, D))
    bp = dc.reshape(dc.add(dc.matmul(h_b, w_b), b_kb), (B, T, 1, D))
    e = dc.matmul(dc.tanh(dc.add(kp, bp)), v)
    if kmask is not None:
        e = dc.add(e, Node(np.where(np.asarray(kmask)[:, None, :] > 0, 0.0, -1e30)))
    a = dc.softmax(e, axis=-1)
    return a, dc.matmul(a, h_k)


def knowledge_side_step(c_k: Node, h_b: Node, w_c: Node, b_c: Node, w_alpha: Node, b_alpha: Node,
                        alpha_override: float | None = None) -> tuple[Node, Node, Node]:
    """h_s = tanh(W_c [c; h_b] + b_c); alpha_t = sigmoid(W_alpha [h_s; h_b] + b_alpha); fused h_t."""
    h_b = dc.const(h_b)
    h_s = dc.tanh(dc.add(dc.matmul(dc.concat([c_k, h_b], axis=-1), w_c), b_c))
    alpha = dc.sigmoid(dc.add(dc.matmul(dc.concat([h_s, h_b], axis=-1), w_alpha), b_alpha))
    if alpha_override is not None:
        alpha = Node(np.full(alpha.shape, float(alpha_override)))
    return h_s, alpha, fuse(h_b, h_s, alpha)


def copy_gate(c_k: Node, h_b: Node, w_beta: Node, b_beta: Node) -> Node:
    """beta = sigmoid(W_beta [c; h_b] + b_beta), shape (..., 1)."""
    return dc.sigmoid(dc.add(dc.matmul(dc.concat([c_k, dc.const(h_b)], axis=-1), w_beta), b_beta))


def copy_matrix(k_ids: np.ndarray, vocab_size: int, kmask: np.ndarray | None = None) -> np.ndarray:
    """One-hot (B, K, V) map from knowledge positions to vocabulary ids (out-of-range ids go to UNK)."""
    k_ids = np.asarray(k_ids)
    ids = np.where((k_ids >= 0) & (k_ids < vocab_size), k_ids, UNK)
    out = np.zeros(ids.shape + (vocab_size,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    if kmask is not None:
        out *= np.asarray(kmask)[..., None]
    return out


def copy_mix(p_gen, a, beta, k_ids: np.ndarray, kmask: np.ndarray | None = None) -> Node:
    """final(w) = beta * p_gen(w) + (1 - beta) * sum_{i: k_i = w} a_i.

    p_gen (B, T, V), a (B, T, K), beta broadcastable to (B, T, 1), k_ids (B, K).
    """
    p_gen, a, beta = dc.const(p_gen), dc.const(a), dc.const(beta)
    onehot = copy_matrix(k_ids, p_gen.shape[-1], kmask)
    copied = dc.matmul(a, Node(onehot))
    return dc.add(dc.mul(beta, p_gen), dc.mul(dc.sub(1.0, beta), copied))


def copy_gold_prob(p_gen_gold: Node, a: Node, beta: Node, k_ids: np.ndarray, targets: np.ndarray) -> Node:
    """The copy mixture evaluated only at the gold ids: (B, T)."""
    match = (np.asarray(k_ids)[:, None, :] == np.asarray(targets)[:, :, None]).astype(np.float64)
    copied = dc.reduce_sum(dc.mul(a, Node(match)), axis=-1)
    beta = dc.reshape(beta, beta.shape[:-1])
    return dc.add(dc.mul(beta, p_gen_gold), dc.mul(dc.sub(1.0, beta), copied))


# -------------------------------------------------------------- coverage

def prior_attention(T: int) -> np.ndarray:
    """Strictly lower-triangular ones: (L @ a)[t] = sum_{t' < t} a[t']."""
    return np.tril(np.ones((T, T)), k=-1)


def coverage_terms(a, tmask: np.ndarray | None = None) -> Node:
    """Per-step values sum_i min(a_i^t, c_i^t) with zero coverage before the first step: (B, T)."""
    a = dc.const(a)
    if a.ndim == 2:
        a = dc.reshape(a, (1,) + a.shape)
    T = a.shape[1]
    cov = dc.matmul(Node(prior_attention(T)), a)
    terms = dc.reduce_sum(dc.minimum(a, cov), axis=-1)
    if tmask is not None:
        terms = dc.mul(terms, Node(np.asarray(tmask, dtype=np.float64)))
    return terms


def coverage_loss(a, tmask: np.ndarray | None = None) -> Node:
    """Total coverage penalty, summed over steps and averaged over the batch."""
    terms = coverage_terms(a, tmask)
    return dc.scale(dc.reduce_sum(terms), 1.0 / terms.shape[0])


# ---------------------------------------------------------- label control

def label_side_rep(acts, h_b, w_a: Node, w_d: Node, b_d: Node) -> Node:
    """h_s^t = tanh(W_d [W_a[act]; h_b^t] + b_d) for acts (B,) and h_b (B, T, D)."""
    acts = np.asarray(acts)
    if acts.size and (acts.min() < 0 or acts.max() >= len(ACTS)):
        raise ValueError(f"act id outside [0, {len(ACTS)})")
    h_b = dc.const(h_b)
    B, T, _ = h_b.shape
    lab = dc.embedding(w_a, acts)
    lab = dc.add(dc.reshape(lab, (B, 1, lab.shape[-1])), Node(np.zeros((B, T, 1))))
    return dc.tanh(dc.add(dc.matmul(dc.concat([lab, h_b], axis=-1), w_d), b_d))


def masked_time_mean(h, tmask: np.ndarray | None = None) -> Node:
    """Mean over the time axis of (B, T, D), counting only unmasked steps."""
    h = dc.const(h)
    if tmask is None:
        return dc.mean(h, axis=1)
    m = np.asarray(tmask, dtype=np.float64)
    w = m / np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    return dc.reduce_sum(dc.mul(h, Node(w[..., None])), axis=1)


def classifier_loss(h_s, targets, w_clf: Node, tmask: np.ndarray | None = None) -> tuple[Node, Node]:
    """p(a | h_{1:T}) = softmax(W_clf^T mean_t h_s^t); loss = mean_b -log p(a*)."""
    targets = np.asarray(targets)
    logits = dc.matmul(masked_time_mean(h_s, tmask), w_clf)
    logp = dc.log_softmax(logits, axis=-1)
    loss = dc.scale(dc.nll_gather(logp, targets), 1.0 / len(targets))
    return dc.exp(logp), loss


# ------------------------------------------------------------ LM losses

def cclm_loss_from_gold(gold_prob, mask: np.ndarray | None = None) -> Node:
    """-sum_t log p(y*_t) over unmasked positions, averaged over the batch."""
    gold_prob = dc.const(gold_prob)
    if np.any(gold_prob.data < GOLD_FLOOR) and (mask is None or np.any((gold_prob.data < GOLD_FLOOR) & (np.asarray(mask) > 0))):
        warnings.warn("gold-token probability below 1e-12; clamping", RuntimeWarning, stacklevel=2)
    logp = dc.log(gold_prob, floor=GOLD_FLOOR)
    if logp.ndim == 1:
        logp = dc.reshape(logp, (1,) + logp.shape)
        mask = None if mask is None else np.asarray(mask)[None]
    m = np.ones(logp.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    return dc.scale(dc.reduce_sum(dc.mul(logp, Node(m))), -1.0 / logp.shape[0])


def cclm_loss(dists, gold: np.ndarray, mask: np.ndarray | None = None) -> Node:
    """Teacher-forced NLL of gold ids under per-position distributions (..., V)."""
    dists = dc.const(dists)
    return cclm_loss_from_gold(dc.take_last(dists, np.asarray(gold)), mask)


def total_objective(l_cclm, l_control, lam: float) -> Node:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    l_cclm = dc.const(l_cclm)
    if lam == 0:
        return l_cclm
    return dc.add(l_cclm, dc.scale(dc.const(l_control), lam))
