import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidecontrol import evalsuite as ev
from sidecontrol.baselm import BaseLM, BaseLMConfig
from sidecontrol.textdata import build_vocab, corpus_examples, generate_synthetic_corpus, split_corpus

STOP = frozenset({"the", "a", "i", "and"})


# ------------------------------------------------------------------- BLEU

def test_bleu_hand_cases():
    assert abs(ev.corpus_bleu(["the the the"], ["the cat"], max_n=1) - 100 / 3) < 0.01
    assert ev.corpus_bleu(["a b c", "d e"], ["a b c", "d e"]) == pytest.approx(100.0)
    assert ev.corpus_bleu(["x y z"], ["a b c"]) == 0.0
    # brevity penalty: exp(1 - 4/3) with perfect 1- and 2-gram precision
    assert ev.corpus_bleu(["the cat sat"], ["the cat sat down"]) == pytest.approx(100 * math.exp(1 - 4 / 3))


def test_bleu_errors():
    with pytest.raises(ev.MetricError):
        ev.corpus_bleu([], [])
    with pytest.raises(ev.MetricError):
        ev.corpus_bleu(["a"], ["a", "b"])


WORDS = st.sampled_from(["the", "cat", "sat", "on", "mat", "dog"])
SENT = st.lists(WORDS, min_size=1, max_size=8).map(" ".join)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(SENT, SENT), min_size=1, max_size=6), st.randoms())
def test_bleu_is_permutation_invariant(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a = ev.corpus_bleu([h for h, _ in pairs], [r for _, r in pairs])
    b = ev.corpus_bleu([h for h, _ in shuffled], [r for _, r in shuffled])
    assert a == pytest.approx(b, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(SENT)
def test_metrics_peak_on_identity(s):
    assert ev.corpus_bleu([s], [s], max_n=1) == pytest.approx(100.0)
    n = len(s.split())
    assert ev.meteor_lite(s, s) == pytest.approx(1 - 0.5 * (1 / n) ** 3)


# ------------------------------------------------------------ METEOR-lite

def test_meteor_hand_cases():
    assert ev.meteor_lite("hello", "hello") == 0.5
    ten = " ".join(f"w{i}" for i in range(10))
    assert ev.meteor_lite(ten, ten) == pytest.approx(0.9995)
    assert ev.meteor_lite("a b", "c d") == 0.0
    # matches a, b, d in two chunks: P = R = 3/4, penalty 0.5 (2/3)^3
    assert ev.meteor_lite("a b c d", "a b x d") == pytest.approx(0.75 * (1 - 0.5 * (2 / 3) ** 3))
    assert ev.mean_meteor(["hello", "a b"], ["hello", "c d"]) == pytest.approx(0.25)


# ------------------------------------------------------------- similarity

def _emb():
    return ev.EmbeddingTable({"x": np.array([1.0, 0.0]), "y": np.array([0.0, 1.0]), "z": np.array([3.0, 4.0])})


def test_similarity_hand_cases():
    emb = _emb()
    assert ev.knowledge_similarity("x z", "z x", emb, STOP) == pytest.approx(1.0)
    assert ev.knowledge_similarity("x", "y", emb, STOP) == 0.0
    assert ev.knowledge_similarity("x", "x y", emb, STOP) == pytest.approx(1 / math.sqrt(2))


def test_similarity_invariances_and_flags():
    emb = _emb()
    base = ev.knowledge_similarity("x z", "y z", emb, STOP)
    assert ev.knowledge_similarity("the z the x x the", "z y and y", emb, STOP) == pytest.approx(base)
    assert ev.knowledge_similarity("z x", "z y", emb, STOP) == pytest.approx(base)
    assert ev.similarity_and_flag("the and", "x", emb, STOP) == (0.0, True)
    assert ev.similarity_and_flag("unknownword", "x", emb, STOP) == (0.0, True)
    mean, flagged = ev.mean_knowledge_similarity(["x", "the"], ["x", "x"], emb, STOP)
    assert mean == pytest.approx(0.5) and flagged == [1]


def test_embedding_table_io(tmp_path):
    path = tmp_path / "vec.txt"
    path.write_text("cat 1 0\ndog 0 1\n")
    emb = ev.EmbeddingTable.from_glove(path)
    assert emb.dim == 2 and "cat" in emb and emb.get("fish") is None
    with pytest.raises(ev.MetricError):
        ev.EmbeddingTable({"a": np.zeros(2), "b": np.zeros(3)})
    path.write_text("cat 1 zero\n")
    with pytest.raises(ev.MetricError, match=":1:"):
        ev.EmbeddingTable.from_glove(path)


def test_embedding_table_from_base():
    vocab = build_vocab(["hello world"])
    base = BaseLM(len(vocab), BaseLMConfig(d=8, heads=2, lmax=8))
    emb = ev.EmbeddingTable.from_base(base, vocab)
    assert emb.dim == 8 and "hello" in emb and "<pad>" not in emb


# ------------------------------------------------------------- perplexity

class _Fixed:
    def __init__(self, nll, n):
        self.nll, self.n = nll, n

    def token_nll(self, _):
        return self.nll, self.n


def test_perplexity_oracles():
    vocab = build_vocab(["w%d" % i for i in range(95)])
    assert len(vocab) == 100
    base = BaseLM(len(vocab), BaseLMConfig(d=8, heads=2, lmax=64))
    base.params.replace_data("w_vocab", np.zeros((8, 100)))
    corpus = generate_synthetic_corpus("label", 3, seed=0)
    ex = corpus_examples(corpus, build_vocab([u for d in corpus for u in d.utterances]), "label")
    ex = [e for e in ex if max(e.response) < 100 and all(max(c) < 100 for c in e.context)]
    assert abs(ev.test_perplexity(ev.BaseScorer(base), ex) - 100.0) < 1e-9
    assert ev.test_perplexity(_Fixed(0.0, 7), None) == 1.0
    assert ev.test_perplexity(_Fixed(5 * math.log(2), 5), None) == pytest.approx(2.0, abs=1e-12)


def test_perplexity_rejects_decode_only_methods():
    with pytest.raises(ev.MetricError, match="decode-time"):
        ev.test_perplexity(ev.DecodeOnly("pplm"), [])
    with pytest.raises(ev.MetricError):
        ev.test_perplexity(_Fixed(1.0, 0), [])


# --------------------------------------------------------------- benchmark

def _contexts():
    return [[i] for i in range(10)]


def test_benchmark_sleeping_oracle():
    def sleeper(i, ctx):
        for _ in range(3):
            time.sleep(0.01)
        return [1, 2, 3]

    res = ev.decoding_benchmark({"sleep": sleeper}, _contexts())["sleep"]
    assert res.tokens == 30 and len(res.runs) == 3
    assert abs(res.seconds_per_token - 0.010) < 0.003


def test_benchmark_median_ignores_one_outlier():
    # scripted clock: each decode takes 1 s, except in the second pass where each takes 100 s
    durations = [1.0] * 10 + [100.0] * 10 + [1.0] * 10
    stamps = []
    for d in durations:
        start = stamps[-1] if stamps else 0.0
        stamps += [start, start + d]
    clock = iter(stamps)
    res = ev.decoding_benchmark({"m": lambda i, c: [1]}, _contexts(), repetitions=3, timer=lambda: next(clock))["m"]
    assert res.runs == [1.0, 100.0, 1.0]
    assert res.seconds_per_token == 1.0


def test_benchmark_errors():
    with pytest.raises(ev.MetricError):
        ev.decoding_benchmark({"m": lambda i, c: [1]}, _contexts()[:9])
    with pytest.raises(ev.MetricError):
        ev.decoding_benchmark({"m": lambda i, c: [1]}, _contexts(), repetitions=2)


# ---------------------------------------------------- classifier metrics

class _Random:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def predict(self, responses):
        return self.rng.integers(0, 4, size=len(responses))


def test_controllability_accuracy_cases():
    class Echo:
        def predict(self, responses):
            return np.array([int(r) for r in responses])

    assert ev.controllability_accuracy(["0", "3", "2"], [0, 3, 2], Echo()) == 1.0
    acc = ev.controllability_accuracy(["x"] * 10_000, [1] * 10_000, _Random(0))
    assert abs(acc - 0.25) <= 0.02
    with pytest.raises(ev.MetricError):
        ev.controllability_accuracy([], [], Echo())
    with pytest.raises(ev.MetricError):
        ev.controllability_accuracy(["0"], [0, 1], Echo())


@pytest.fixture(scope="module")
def act_pairs():
    corpus = generate_synthetic_corpus("label", 400, seed=1)
    vocab = build_vocab([u for d in corpus for u in d.utterances])
    splits = [[(u, a) for d in part for u, a in zip(d.utterances, d.acts)] for part in split_corpus(corpus)]
    return vocab, splits


def test_eval_classifier_learns_acts_and_is_deterministic(act_pairs, tmp_path):
    vocab, (tr, va, te) = act_pairs
    cfg = ev.EvalClassifierConfig(lr=1e-3, epochs=3)
    clf, rep = ev.train_eval_classifier(tr, va, te, vocab, cfg)
    assert rep.test_accuracy >= 0.9
    gold = np.array([a for _, a in te])
    assert rep.confusion.sum(axis=1).tolist() == np.bincount(gold, minlength=4).tolist()
    assert rep.confusion_csv().splitlines()[0].startswith("gold\\pred,")
    again, rep2 = ev.train_eval_classifier(tr, va, te, vocab, cfg)
    assert again.params.dumps() == clf.params.dumps() and rep2.best_step == rep.best_step
    clf.save(tmp_path / "e.ckpt")
    assert ev.EvalClassifier.load(tmp_path / "e.ckpt", vocab).params.dumps() == clf.params.dumps()


def test_eval_classifier_needs_every_class(act_pairs):
    vocab, (tr, va, te) = act_pairs
    with pytest.raises(ev.MetricError, match="absent"):
        ev.train_eval_classifier([p for p in tr if p[1] != 2], va, te, vocab)


def test_eval_classifier_ties_go_to_lower_act():
    vocab = build_vocab(["a b"])
    clf = ev.EvalClassifier(vocab)
    clf.params.replace_data("eval.w", np.zeros_like(clf.params["eval.w"].data))
    assert clf.predict(["a", "b a"]).tolist() == [0, 0]


# ------------------------------------------------------------------ report

def test_report_round_trip_and_rendering():
    reports = [ev.MetricsReport("SideControl", similarity=0.7, ppl=12.5, bleu1=20.0, bleu2=8.0, meteor=0.2,
                                seconds_per_token=0.01, flagged=[3]),
               ev.MetricsReport("PPLM", accuracy=0.4, bleu1=10.0, bleu2=3.0, meteor=0.1)]
    text = ev.dumps_reports(reports)
    assert ev.loads_reports(text) == reports
    assert ev.dumps_reports(ev.loads_reports(text)) == text
    table = ev.render_table(reports)
    pplm_row = [line for line in table.splitlines() if line.startswith("PPLM")][0]
    assert [c.strip() for c in pplm_row.split("|")][2] == "-"
    assert "0.7000" in table


def test_report_rejects_invalid_values():
    with pytest.raises(ev.MetricError):
        ev.MetricsReport("m", ppl=float("nan"))
    with pytest.raises(ev.MetricError):
        ev.MetricsReport("m", bleu1=-1.0)
