"""Automatic evaluation: controllability, text quality and decoding cost."""
from __future__ import annotations

import json
import math
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamSet
from .textdata import ACTS, RESERVED, Vocabulary, is_word, tokenize


class MetricError(ValueError):
    pass


def _tokens(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


# ------------------------------------------------------- eval classifier

@dataclass
class EvalClassifierConfig:
    dim: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    eval_every: int | None = None   # steps; default: once per epoch
    seed: int = 0


class EvalClassifier:
    """Mean word embedding followed by a linear layer over the four acts.

    It owns its embedding table and never shares parameters with a
    generation model or with the control classifier.
    """

    def __init__(self, vocab: Vocabulary, dim: int = 32, seed: int = 0):
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        self.params.add("eval.emb", dc.uniform_init(rng, dim, (len(vocab), dim)))
        self.params.add("eval.w", dc.uniform_init(rng, dim, (dim, len(ACTS))))
        self.params.add("eval.b", np.zeros(len(ACTS)))

    def _pack(self, responses: Sequence) -> tuple[np.ndarray, np.ndarray]:
        rows = [self.vocab.encode(_tokens(r)) or [RESERVED.index("<unk>")] for r in responses]
        L = max(len(r) for r in rows)
        ids = np.zeros((len(rows), L), dtype=np.int64)
        w = np.zeros((len(rows), L))
        for b, r in enumerate(rows):
            ids[b, :len(r)] = r
            w[b, :len(r)] = 1.0 / len(r)
        return ids, w

    def logits(self, responses: Sequence) -> Node:
        ids, w = self._pack(responses)
        p = self.params
        pooled = dc.reduce_sum(dc.mul(dc.embedding(p["eval.emb"], ids), Node(w[..., None])), axis=1)
        return dc.add(dc.matmul(pooled, p["eval.w"]), p["eval.b"])

    def predict_proba(self, responses: Sequence) -> np.ndarray:
        out = []
        with dc.no_grad():
            for i in range(0, len(responses), 256):
                out.append(dc.softmax(self.logits(responses[i:i + 256]), axis=-1).data)
        return np.concatenate(out) if out else np.zeros((0, len(ACTS)))

    def predict(self, responses: Sequence) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lower act id
        return np.argmax(self.predict_proba(responses), axis=-1)

    def save(self, path) -> None:
        self.params.save(path)

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "EvalClassifier":
        text = Path(path).read_text(encoding="utf-8")
        emb, _ = dc.loads(text)["eval.emb"]
        clf = cls(vocab, emb.shape[1])
        clf.params.load_into(text)
        return clf


@dataclass
class ClassifierReport:
    test_accuracy: float
    best_step: int
    confusion: np.ndarray

    def confusion_csv(self) -> str:
        lines = ["gold\\pred," + ",".join(ACTS)]
        for i, act in enumerate(ACTS):
            lines.append(act + "," + ",".join(str(int(x)) for x in self.confusion[i]))
        return "\n".join(lines) + "\n"


def confusion_matrix(gold: Sequence[int], pred: Sequence[int]) -> np.ndarray:
    m = np.zeros((len(ACTS), len(ACTS)), dtype=np.int64)
    for g, p in zip(gold, pred):
        m[int(g), int(p)] += 1
    return m


def _nll(clf: EvalClassifier, responses, acts) -> float:
    p = clf.predict_proba(responses)
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(acts)), acts], 1e-300))))


def train_eval_classifier(train: Sequence[tuple], val: Sequence[tuple], test: Sequence[tuple],
                          vocab: Vocabulary, config: EvalClassifierConfig | None = None
                          ) -> tuple[EvalClassifier, ClassifierReport]:
    """Fit on ``(response, act)`` pairs, keep the lowest-validation-loss weights, report test accuracy."""
    config = config or EvalClassifierConfig()
    if not train:
        raise MetricError("empty training set")
    acts = np.array([a for _, a in train], dtype=np.int64)
    missing = sorted(set(range(len(ACTS))) - set(acts.tolist()))
    if missing:
        raise MetricError(f"act class(es) {[ACTS[i] for i in missing]} absent from training data")
    responses = [r for r, _ in train]
    v_resp, v_act = [r for r, _ in val], np.array([a for _, a in val], dtype=np.int64)
    clf = EvalClassifier(vocab, config.dim, config.seed)
    opt = dc.OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    every = config.eval_every or steps_per_epoch
    best, best_loss, best_step, step = clf.params.snapshot(), math.inf, 0, 0

    def validate():
        nonlocal best, best_loss, best_step
        if not val:
            return
        loss = _nll(clf, v_resp, v_act)
        if loss < best_loss:
            best, best_loss, best_step = clf.params.snapshot(), loss, step

    for _ in range(config.epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            logp = dc.log_softmax(clf.logits([responses[j] for j in idx]), axis=-1)
            loss = dc.scale(dc.nll_gather(logp, acts[idx]), 1.0 / len(idx))
            dc.backprop(loss)
            dc.adamw_step(opt, clf.params)
            step += 1
            if step % every == 0:
                validate()
    if val:
        validate()
        clf.params.restore(best)
    t_resp, t_act = [r for r, _ in test], [a for _, a in test]
    pred = clf.predict(t_resp) if test else np.zeros(0, dtype=np.int64)
    acc = float(np.mean(pred == np.array(t_act))) if test else float("nan")
    return clf, ClassifierReport(acc, best_step, confusion_matrix(t_act, pred))


def controllability_accuracy(responses: Sequence, target_acts: Sequence[int], clf) -> float:
    """Fraction of responses whose predicted act equals the target act."""
    if len(responses) == 0:
        raise MetricError("no responses to score")
    if len(responses) != len(target_acts):
        raise MetricError("responses and targets differ in length")
    pred = clf.predict(responses)
    return float(np.mean(np.asarray(pred) == np.asarray(target_acts)))


# ----------------------------------------------------------- similarity

class EmbeddingTable:
    """Word vectors for the similarity metric (GloVe text layout, or base LM input embeddings)."""

    def __init__(self, vectors: Mapping[str, np.ndarray]):
        dims = {len(v) for v in vectors.values()}
        if len(dims) > 1:
            raise MetricError(f"embedding vectors have mixed dimensions {sorted(dims)}")
        self.vectors = {w: np.asarray(v, dtype=np.float64) for w, v in vectors.items()}
        self.dim = dims.pop() if dims else 0

    def get(self, word: str) -> np.ndarray | None:
        return self.vectors.get(word)

    def __contains__(self, word: str) -> bool:
        return word in self.vectors

    @classmethod
    def from_glove(cls, path) -> "EmbeddingTable":
        vecs = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                try:
                    vecs[parts[0]] = np.array([float(x) for x in parts[1:]])
                except ValueError:
                    raise MetricError(f"{path}:{lineno}: malformed vector") from None
        return cls(vecs)

    @classmethod
    def from_base(cls, base, vocab: Vocabulary) -> "EmbeddingTable":
        table = base.params["tok_emb"].data
        return cls({tok: table[i] for i, tok in enumerate(vocab.itos) if tok not in RESERVED})


def _mean_vector(tokens: Iterable[str], emb: EmbeddingTable, stopwords) -> np.ndarray | None:
    words = sorted({t for t in tokens if is_word(t) and t not in stopwords and t in emb})
    if not words:
        return None
    return np.mean([emb.get(w) for w in words], axis=0)


def similarity_and_flag(response, document, emb: EmbeddingTable, stopwords) -> tuple[float, bool]:
    """Cosine of mean word vectors; ``(0.0, True)`` when either side has no usable word."""
    r = _mean_vector(_tokens(response), emb, stopwords)
    d = _mean_vector(_tokens(document), emb, stopwords)
    if r is None or d is None:
        return 0.0, True
    nr, nd = np.linalg.norm(r), np.linalg.norm(d)
    if nr == 0 or nd == 0:
        return 0.0, True
    return float(np.clip(r @ d / (nr * nd), -1.0, 1.0)), False


def knowledge_similarity(response, document, emb: EmbeddingTable, stopwords) -> float:
    return similarity_and_flag(response, document, emb, stopwords)[0]


def mean_knowledge_similarity(responses, documents, emb, stopwords) -> tuple[float, list[int]]:
    if len(responses) == 0:
        raise MetricError("no responses to score")
    vals, flagged = [], []
    for i, (r, d) in enumerate(zip(responses, documents)):
        v, f = similarity_and_flag(r, d, emb, stopwords)
        vals.append(v)
        if f:
            flagged.append(i)
    return float(np.mean(vals)), flagged


# --------------------------------------------------------- text quality

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence, references: Sequence, max_n: int = 2) -> float:
    """Corpus BLEU (clipped n-gram precision, brevity penalty, no smoothing) on a 0-100 scale."""
    if not hypotheses:
        raise MetricError("empty corpus")
    if len(hypotheses) != len(references):
        raise MetricError("hypotheses and references differ in length")
    if max_n < 1:
        raise MetricError("max_n must be >= 1")
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = _tokens(h), _tokens(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or any(m == 0 for m in match):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(match, total)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def _align(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact-match unigram alignment; a match continuing the previous chunk is preferred."""
    used = [False] * len(ref)
    pairs: list[tuple[int, int]] = []
    for i, w in enumerate(hyp):
        cands = [j for j, r in enumerate(ref) if r == w and not used[j]]
        if not cands:
            continue
        j = cands[0]
        if pairs and pairs[-1][0] == i - 1 and pairs[-1][1] + 1 in cands:
            j = pairs[-1][1] + 1
        used[j] = True
        pairs.append((i, j))
    return pairs


def meteor_lite(hypothesis, reference) -> float:
    """Exact-match METEOR: F_mean = 10PR/(R+9P), penalty 0.5 (chunks/matches)^3."""
    h, r = _tokens(hypothesis), _tokens(reference)
    pairs = _align(h, r)
    m = len(pairs)
    if m == 0:
        return 0.0
    P, R = m / len(h), m / len(r)
    f_mean = 10 * P * R / (R + 9 * P)
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
    return f_mean * (1.0 - 0.5 * (chunks / m) ** 3)


def mean_meteor(hypotheses: Sequence, references: Sequence) -> float:
    if not hypotheses:
        raise MetricError("empty corpus")
    return float(np.mean([meteor_lite(h, r) for h, r in zip(hypotheses, references)]))


def test_perplexity(model, test_set) -> float:
    """exp(total NLL / tokens) for any object exposing ``token_nll(test_set) -> (nll, count)``."""
    if getattr(model, "decode_only", False) or not hasattr(model, "token_nll"):
        raise MetricError("PPL undefined for decode-time methods")
    nll, count = model.token_nll(test_set)
    if count <= 0:
        raise MetricError("no tokens to score")
    return float(math.exp(nll / count))


test_perplexity.__test__ = False  # not a pytest test despite the name


class BaseScorer:
    """Teacher-forced response NLL (gold tokens plus EOS) of a base or fine-tuned LM."""

    def __init__(self, model):
        self.model = model

    def token_nll(self, examples) -> tuple[float, float]:
        from .baselm import lm_loss
        total, count = 0.0, 0.0
        with dc.no_grad():
            for i in range(0, len(examples), 32):
                loss, n = lm_loss(self.model, examples[i:i + 32], response_only=True)
                total += float(loss.data)
                count += n
        return total, count


class SideScorer:
    """Teacher-forced response NLL under a side network's final distribution (fused head, copy mixture)."""

    def __init__(self, side):
        self.side = side

    def token_nll(self, examples) -> tuple[float, float]:
        from .control import cache_states
        from .control.ops import GOLD_FLOOR
        data = cache_states(self.side.base, examples)
        total, count = 0.0, 0.0
        with dc.no_grad():
            for i in range(0, len(data), 64):
                batch = data.batch(range(i, min(len(data), i + 64)))
                gold = self.side.gold_prob(self.side.forward(batch), batch).data
                total += float(-np.sum(np.log(np.maximum(gold, GOLD_FLOOR)) * batch.mask))
                count += float(batch.mask.sum())
        return total, count


class DecodeOnly:
    """Marker for decode-time methods (weighted decoding, steering) that have no training loss."""

    decode_only = True

    def __init__(self, name: str):
        self.name = name


# ------------------------------------------------------- decoding cost

@dataclass
class BenchResult:
    seconds_per_token: float
    runs: list[float]
    tokens: int


def decoding_benchmark(methods: Mapping[str, Callable[[int, object], Sequence[int]]], contexts: Sequence,
                       repetitions: int = 3, timer: Callable[[], float] = time.perf_counter
                       ) -> dict[str, BenchResult]:
    """Median seconds per emitted token over ``repetitions`` passes of the same 10 contexts.

    ``methods[name](index, context)`` decodes one response (it owns its RNG).
    """
    if len(contexts) != 10:
        raise MetricError(f"the benchmark needs exactly 10 contexts, got {len(contexts)}")
    if repetitions < 3:
        raise MetricError("at least 3 repetitions are required")
    out = {}
    for name, fn in methods.items():
        runs, tokens = [], 0
        for _ in range(repetitions):
            elapsed, tokens = 0.0, 0
            for i, ctx in enumerate(contexts):
                t0 = timer()
                resp = fn(i, ctx)
                elapsed += timer() - t0
                tokens += max(len(resp), 1)
            runs.append(elapsed / tokens)
        out[name] = BenchResult(float(statistics.median(runs)), runs, tokens)
    return out


# ---------------------------------------------------------------- report

@dataclass
class MetricsReport:
    method: str
    similarity: float | None = None
    accuracy: float | None = None
    ppl: float | None = None
    bleu1: float | None = None
    bleu2: float | None = None
    meteor: float | None = None
    seconds_per_token: float | None = None
    flagged: list[int] = field(default_factory=list)

    def __post_init__(self):
        for f in ("similarity", "accuracy", "ppl", "bleu1", "bleu2", "meteor", "seconds_per_token"):
            v = getattr(self, f)
            if v is not None and not (math.isfinite(v) and (v >= 0 or f == "similarity")):
                raise MetricError(f"{f} must be finite and non-negative, got {v}")

    @property
    def controllability(self) -> float | None:
        return self.accuracy if self.accuracy is not None else self.similarity

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def dumps_reports(reports: Sequence[MetricsReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"


def loads_reports(text: str) -> list[MetricsReport]:
    return [MetricsReport.from_dict(d) for d in json.loads(text)]


COLUMNS = ("Controllability", "PPL", "BLEU-1", "BLEU-2", "METEOR-lite", "s/tok")


def _cell(v: float | None, digits: int = 4) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def render_table(reports: Sequence[MetricsReport]) -> str:
    """Plain-text table, one row per method; null cells render as '-'."""
    rows = [("Method",) + COLUMNS]
    for r in reports:
        rows.append((r.method, _cell(r.controllability), _cell(r.ppl, 2), _cell(r.bleu1, 2),
                     _cell(r.bleu2, 2), _cell(r.meteor), _cell(r.seconds_per_token)))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
