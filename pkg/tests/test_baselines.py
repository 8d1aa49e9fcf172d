import json
import math

import numpy as np
import pytest

from sidecontrol import baselines as B
from sidecontrol import baselm as bl
from sidecontrol import diffcore as dc
from sidecontrol.baselm import BaseLM, BaseLMConfig, GenerationConfig
from sidecontrol.control import AttributeClassifier, cache_states, pretrain_classifier
from sidecontrol.diffcore import Node
from sidecontrol.evalsuite import BaseScorer, test_perplexity
from sidecontrol.textdata import (KnowledgeDoc, SemanticLabel, build_vocab, corpus_examples, default_stopwords,
                                  generate_synthetic_corpus, rule_based_act, split_corpus)

SMALL = BaseLMConfig(d=16, layers=2, heads=2, lmax=128)


def _setup(task, n=80, steps=150):
    corpus = generate_synthetic_corpus(task, n, seed=0)
    tr, va, te = split_corpus(corpus)
    vocab = build_vocab([u for d in corpus for u in d.utterances + (d.knowledge or [])])
    ex = corpus_examples(tr, vocab, task)
    base, _ = bl.train_base_lm(ex, len(vocab), SMALL, bl.LMTrainConfig(lr=3e-3, steps=steps, log_every=0))
    return vocab, base.freeze(), ex, corpus_examples(va, vocab, task), corpus_examples(te, vocab, task)


@pytest.fixture(scope="module")
def label_setup():
    return _setup("label")


@pytest.fixture(scope="module")
def knowledge_setup():
    return _setup("knowledge")


# -------------------------------------------------------------- fine-tuning

def test_finetune_refuses_the_frozen_base(label_setup):
    _, base, ex, _, _ = label_setup
    with pytest.raises(bl.FrozenModelError):
        B.finetune(base, ex[:4])


def test_finetune_zero_epochs_is_a_no_op(label_setup):
    _, base, ex, val, _ = label_setup
    model = base.copy()
    B.finetune(model, ex[:4], val[:4], B.FinetuneConfig(epochs=0))
    # the copy differs only in its trainable flags, so compare the values
    assert model.params.names() == base.params.names()
    for prm in base.params:
        assert model.params[prm.name].data.tobytes() == prm.data.tobytes()


def test_finetune_lowers_test_perplexity_and_is_deterministic(label_setup):
    vocab, _, ex, val, test = label_setup
    untrained = BaseLM(len(vocab), SMALL, seed=1)
    before = test_perplexity(BaseScorer(untrained), test[:20])
    cfg = B.FinetuneConfig(lr=1e-3, epochs=10, seed=2)
    r1 = B.finetune(untrained.copy(), ex[:20], val[:10], cfg)
    r2 = B.finetune(untrained.copy(), ex[:20], val[:10], cfg)
    assert test_perplexity(BaseScorer(r1.model), test[:20]) < before
    assert r1.train_trace[-1] == r2.train_trace[-1] and r1.model.digest == r2.model.digest
    assert r1.best_step == min(r1.val_trace, key=lambda sv: sv[1])[0]


# ----------------------------------------------------------- discriminators

def test_future_discriminator_learns_and_prefix_accuracy_trends(label_setup):
    vocab, _, ex, val, _ = label_setup
    disc, rep = B.train_future_discriminator(ex, len(vocab), B.DiscriminatorConfig(lr=1e-3, epochs=3), val=val)
    assert rep.full_accuracy >= 0.9
    assert rep.first_token_accuracy < rep.full_accuracy
    p = disc.predict_proba([[5, 6], [7]])
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    again, _ = B.train_future_discriminator(ex, len(vocab), B.DiscriminatorConfig(lr=1e-3, epochs=3))
    assert again.params.dumps() == disc.params.dumps()


def test_discriminator_candidate_scores_match_full_recompute(label_setup, tmp_path):
    vocab, _, ex, _, _ = label_setup
    disc = B.FutureDiscriminator(len(vocab), seed=3)
    prefix, cand = [7, 9, 11], np.array([5, 6, 20])
    fast = disc.candidate_log_scores(prefix, cand, SemanticLabel(2))
    slow = np.log(disc.predict_proba([prefix + [int(c)] for c in cand])[:, 2])
    np.testing.assert_allclose(fast, slow, atol=1e-12)
    disc.save(tmp_path / "d.ckpt")
    assert B.FutureDiscriminator.load(tmp_path / "d.ckpt").params.dumps() == disc.params.dumps()


def test_discriminator_needs_labels(knowledge_setup):
    vocab, _, ex, _, _ = knowledge_setup
    with pytest.raises(ValueError, match="act labels"):
        B.train_future_discriminator(ex[:3], len(vocab))


def test_bag_overlap_scores_are_probabilities(knowledge_setup):
    vocab, _, ex, _, _ = knowledge_setup
    disc = B.BagOverlapDiscriminator(vocab, default_stopwords())
    doc = ex[0].attribute
    cand = np.arange(len(vocab))
    scores = np.exp(disc.candidate_log_scores(ex[0].response[:3], cand, doc))
    assert np.all((scores > 0) & (scores < 1))
    for c in (5, 9, int(doc.tokens[0])):
        assert abs(scores[c] - disc.score(ex[0].response[:3] + [c], doc.tokens)) < 1e-12


# ------------------------------------------------------ weighted decoding

class _Constant:
    def candidate_log_scores(self, prefix, candidates, attribute):
        return np.full(len(candidates), -0.7)


class _RuleOracle:
    """Scores a candidate by whether the rule tagger assigns the target act to prefix + candidate."""

    def __init__(self, vocab):
        self.vocab = vocab

    def candidate_log_scores(self, prefix, candidates, attribute):
        out = np.empty(len(candidates))
        for i, c in enumerate(candidates.tolist()):
            words = self.vocab.tokens(list(prefix) + [c])
            out[i] = 0.0 if rule_based_act(" ".join(words)) == attribute.act else math.log(1e-3)
        return out


def test_fudge_constant_discriminator_keeps_base_ranking():
    p = np.random.default_rng(0).dirichlet(np.ones(300))
    dist = B.fudge_step_dist(p, [], _Constant(), None, B.FudgeConfig(weight=4.0))
    top = np.argsort(-p, kind="stable")[:10]
    assert np.argsort(-dist, kind="stable")[:10].tolist() == top.tolist()
    np.testing.assert_allclose(dist[top] / dist[top].sum(), p[top] / p[top].sum(), atol=1e-12)


def test_fudge_clamps_candidates_to_vocabulary():
    p = np.random.default_rng(1).dirichlet(np.ones(30))
    dist = B.fudge_step_dist(p, [], _Constant(), None, B.FudgeConfig(weight=1.0))
    assert abs(dist.sum() - 1) < 1e-12 and np.count_nonzero(dist) == 30


def test_zero_strength_paths_match_base_tokens(knowledge_setup):
    vocab, base, ex, _, _ = knowledge_setup
    before = base.params.dumps()
    gen = GenerationConfig(max_len=12, seed=5)
    for e in ex[:3]:
        ref = bl.generate(base, e.context_ids(), gen)
        fudge = B.fudge_decode(base, B.BagOverlapDiscriminator(vocab, default_stopwords()), e.context_ids(),
                               e.attribute, gen, B.FudgeConfig(weight=0.0))
        bag = B.BagOfWordsAttribute.from_document(e.attribute.tokens, vocab, default_stopwords())
        pplm = B.pplm_decode(base, bag, e.context_ids(), B.SteeringConfig(steps=0), gen)
        small = B.pplm_decode(base, bag, e.context_ids(), B.SteeringConfig(step_size=0.0), gen)
        assert ref == fudge == pplm == small
    assert base.params.dumps() == before


def test_fudge_with_rule_oracle_raises_act_match(label_setup):
    vocab, base, _, val, _ = label_setup
    before = base.params.dumps()
    gen = GenerationConfig(max_len=16)
    rng_b, rng_f = np.random.default_rng(0), np.random.default_rng(0)
    hits_base = hits_fudge = 0
    for e in val[:40]:
        hits_base += rule_based_act(vocab.decode(bl.generate(base, e.context_ids(), gen, rng_b))) == e.attribute.act
        out = B.fudge_decode(base, _RuleOracle(vocab), e.context_ids(), e.attribute, gen,
                             B.FudgeConfig(weight=1.0), rng_f)
        hits_fudge += rule_based_act(vocab.decode(out)) == e.attribute.act
    assert hits_fudge > hits_base
    assert base.params.dumps() == before


# ------------------------------------------------------- gradient steering

def test_bow_attribute_loss_cases():
    V = 100
    assert float(B.bow_attribute_loss(np.full(V, 1 / V), B.BagOfWordsAttribute(range(V))).data) == pytest.approx(0, abs=1e-12)
    one = np.zeros(V)
    one[7] = 1.0
    assert float(B.bow_attribute_loss(one, B.BagOfWordsAttribute([7, 8])).data) == 0.0
    loss = float(B.bow_attribute_loss(np.full(V, 1 / V), B.BagOfWordsAttribute(range(10, 20))).data)
    assert abs(loss - math.log(10)) < 1e-12
    assert float(B.bow_attribute_loss(one, B.BagOfWordsAttribute([9])).data) == pytest.approx(-math.log(1e-12))


def test_bag_of_words_from_document(knowledge_setup):
    vocab, *_ = knowledge_setup
    sw = default_stopwords()
    ids = vocab.encode("i like pizza and the beach .")
    bag = B.BagOfWordsAttribute.from_document(ids, vocab, sw)
    assert set(vocab.tokens(bag.ids)) == {t for t in ("like", "pizza", "beach") if t in vocab and t not in sw}
    only_stop = vocab.encode("i and the .")
    assert B.BagOfWordsAttribute.from_document(only_stop, vocab, sw).ids.size > 0
    with pytest.raises(ValueError):
        B.BagOfWordsAttribute([])


def test_steering_config_json_and_defaults():
    k, lab = B.SteeringConfig.for_task("knowledge"), B.SteeringConfig.for_task("label")
    assert (k.steps, k.step_size, k.gamma, k.window, k.kl_scale) == (3, 0.03, 0.99, 5, 0.01)
    assert (lab.steps, lab.step_size, lab.gamma) == (10, 0.2, 0.95)
    assert B.SteeringConfig.from_json(lab.to_json()) == lab
    with pytest.raises(ValueError):
        B.SteeringConfig(steps=-1)
    with pytest.raises(ValueError):
        B.SteeringConfig.from_json(json.dumps({"steps": 1, "bogus": 2}))


def test_steered_distribution_is_valid_and_moves_mass_to_the_bag(knowledge_setup):
    vocab, base, ex, _, _ = knowledge_setup
    before_bytes = base.params.dumps()
    steering = B.SteeringConfig.for_task("knowledge")
    gains, n = [], 0
    for e in ex:
        bag = B.BagOfWordsAttribute.from_document(e.attribute.tokens, vocab, default_stopwords())
        ctx = bl.prompt_ids(base, e.context_ids(), 20)
        for t in range(0, len(e.response), 2):
            seq = ctx + [1] + e.response[:t]
            p0 = B.steered_dist(base, seq, len(ctx), bag, B.SteeringConfig(steps=0))
            np.testing.assert_array_equal(p0, bl.next_token_dist(base, bl.hidden_states(base, ctx, e.response[:t])[-1]))
            p1 = B.steered_dist(base, seq, len(ctx), bag, steering)
            assert abs(p1.sum() - 1) < 1e-9 and np.all(p1 >= 0)
            gains.append(p1[bag.ids].sum() - p0[bag.ids].sum())
            n += 1
        if n >= 100:
            break
    assert np.mean(gains) >= 0
    assert base.params.dumps() == before_bytes


def test_classifier_attribute_steering_runs(label_setup):
    _, base, ex, val, _ = label_setup
    clf = pretrain_classifier(base, cache_states(base, ex[:40]))
    e = val[0]
    ctx = bl.prompt_ids(base, e.context_ids(), 20)
    p = B.steered_dist(base, ctx + [1], len(ctx), B.ClassifierAttribute(clf, e.attribute.act),
                       B.SteeringConfig.for_task("label"))
    assert abs(p.sum() - 1) < 1e-9


class _Broken:
    def log_prob(self, states, dist):
        return dc.mul(dc.reduce_sum(dist), Node(np.nan))


def test_non_finite_steering_gradient_falls_back_to_base(knowledge_setup):
    _, base, ex, _, _ = knowledge_setup
    ctx = bl.prompt_ids(base, ex[0].context_ids(), 20)
    with pytest.warns(RuntimeWarning):
        p = B.steered_dist(base, ctx + [1], len(ctx), _Broken(), B.SteeringConfig())
    np.testing.assert_array_equal(p, B.steered_dist(base, ctx + [1], len(ctx), _Broken(), B.SteeringConfig(steps=0)))
    assert isinstance(ex[0].attribute, KnowledgeDoc)
