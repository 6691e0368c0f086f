import collections
import math

import numpy as np
import pytest

from unions import autodiff as ad
from unions import corpus as cp
from unions import model as mdl
from unions import objectives as obj
from unions.autodiff import Tensor
from unions.errors import ValidationError


@pytest.fixture(scope="module")
def corpus():
    return cp.generate_corpus(num_concept_sentences=300, num_concepts=25,
                              seed=2, dev_sentences=20, test_sentences=20)


@pytest.fixture(scope="module")
def setup(corpus):
    cfg = mdl.ModelConfig(vocab_size=len(corpus.vocab), num_encoder_layers=1,
                          num_decoder_layers=1, d_model=16, num_heads=2,
                          d_ffn=24, dropout=0.0, max_len=16, seed=0)
    return cfg, mdl.init_params(cfg)


def _batch_for(corpus, direction, n=4):
    pairs = [p for p in corpus.train_pairs
             if (p.src_lang, p.tgt_lang) == direction][:n]
    return obj.make_positive_batch(pairs, corpus.vocab, direction)


def _logits_from_probs(rows):
    """Rows of exact probability distributions -> logits reproducing them."""
    with np.errstate(divide="ignore"):
        return Tensor(np.log(np.asarray(rows, dtype=np.float64))[None, :, :])


# -- make_negative -----------------------------------------------------------


def test_negative_language_outside_pair(corpus):
    langs = [l.id for l in corpus.languages]
    batch = _batch_for(corpus, ("L1", "L0"))
    for k in range(200):
        neg = obj.make_negative(batch, langs, corpus.vocab, np.random.default_rng(k))
        assert set(neg.negative_langs) <= {"L2", "L3"}


def test_negative_uniform_over_eligible(corpus):
    langs = [l.id for l in corpus.languages]
    batch = _batch_for(corpus, ("L0", "L1"))
    counts = collections.Counter()
    for k in range(10_000):
        neg = obj.make_negative(batch, langs, corpus.vocab, np.random.default_rng(k))
        counts[neg.negative_langs[0]] += 1
    assert set(counts) == {"L2", "L3"}
    for lang in counts:
        assert abs(counts[lang] / 10_000 - 0.5) < 0.05


def test_coupled_batches_differ_at_one_decoder_position(corpus):
    langs = [l.id for l in corpus.languages]
    batch = _batch_for(corpus, ("L0", "L2"))
    neg = obj.make_negative(batch, langs, corpus.vocab, np.random.default_rng(0))
    assert np.array_equal(batch.src, neg.src)
    assert np.array_equal(batch.targets, neg.targets)
    diff = batch.dec_in != neg.dec_in
    assert diff[:, 0].all() and not diff[:, 1:].any()


def test_negative_requires_three_languages(corpus):
    batch = _batch_for(corpus, ("L0", "L1"))
    with pytest.raises(ValidationError):
        obj.make_negative(batch, ["L0", "L1"], corpus.vocab, np.random.default_rng(0))


def test_negative_per_sentence_mode(corpus):
    langs = [l.id for l in corpus.languages]
    batch = _batch_for(corpus, ("L0", "L1"), n=8)
    neg = obj.make_negative(batch, langs, corpus.vocab,
                            np.random.default_rng(1), per_sentence=True)
    assert len(set(neg.negative_langs)) > 1  # rows draw independently


# -- mle_loss ----------------------------------------------------------------


def test_mle_uniform_logits_any_smoothing():
    logits = Tensor(np.zeros((1, 3, 4)))
    targets = np.array([[0, 1, 2]])
    mask = np.ones((1, 3), dtype=bool)
    for s in (0.0, 0.1, 0.3):
        loss = obj.mle_loss(logits, targets, mask, s)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_mle_perfect_model_goes_to_zero():
    logits = Tensor(np.array([[[200.0, 0.0, 0.0, 0.0]]]))
    targets = np.array([[0]])
    mask = np.ones((1, 1), dtype=bool)
    assert obj.mle_loss(logits, targets, mask, 0.0).item() < 1e-12


def test_mle_hand_mean():
    logits = _logits_from_probs([[0.5, 0.25, 0.125, 0.125],
                                 [0.25, 0.25, 0.25, 0.25]])
    targets = np.array([[0, 1]])
    mask = np.ones((1, 2), dtype=bool)
    loss = obj.mle_loss(logits, targets, mask, 0.0)
    assert loss.item() == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)


def test_mle_rejects_all_pad_and_bad_smoothing():
    logits = Tensor(np.zeros((1, 2, 4)))
    targets = np.zeros((1, 2), dtype=np.int64)
    with pytest.raises(ValidationError):
        obj.mle_loss(logits, targets, np.zeros((1, 2), dtype=bool), 0.1)
    with pytest.raises(ValidationError):
        obj.mle_loss(logits, targets, np.ones((1, 2), dtype=bool), 0.5)


# -- unlikelihood_loss --------------------------------------------------------


def test_ul_zero_probability_tokens_give_zero_loss():
    logits = Tensor(np.array([[[-2000.0, 0.0, 0.0, 0.0]]]))
    targets = np.array([[0]])
    mask = np.ones((1, 1), dtype=bool)
    assert obj.unlikelihood_loss(logits, targets, mask).item() == pytest.approx(0.0, abs=1e-12)


def test_ul_hand_value():
    logits = _logits_from_probs([[0.5, 0.5, 0.0, 0.0],
                                 [0.75, 0.25, 0.0, 0.0]])
    targets = np.array([[0, 0]])
    mask = np.ones((1, 2), dtype=bool)
    loss = obj.unlikelihood_loss(logits, targets, mask)
    assert loss.item() == pytest.approx(1.0397207708399179, abs=1e-9)


def test_ul_clamp_keeps_confident_mistake_finite():
    logits = Tensor(np.array([[[2000.0, 0.0, 0.0, 0.0]]]))
    targets = np.array([[0]])
    mask = np.ones((1, 1), dtype=bool)
    loss = obj.unlikelihood_loss(logits, targets, mask).item()
    assert loss == pytest.approx(math.log(1e9), rel=1e-6)
    assert np.isfinite(loss)


def test_ul_strictly_monotone_in_gold_probability():
    grid = np.linspace(0.02, 0.98, 25)
    losses = []
    for p in grid:
        logits = _logits_from_probs([[p, 1.0 - p, 0.0, 0.0]])
        losses.append(obj.unlikelihood_loss(logits, np.array([[0]]),
                                            np.ones((1, 1), bool)).item())
    assert all(b > a for a, b in zip(losses, losses[1:]))


def test_losses_permutation_invariant_over_batch_order():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 4, 9))
    targets = rng.integers(0, 9, size=(6, 4))
    mask = rng.random((6, 4)) < 0.8
    mask[:, 0] = True
    perm = rng.permutation(6)
    a_m = obj.mle_loss(Tensor(logits), targets, mask, 0.1).item()
    b_m = obj.mle_loss(Tensor(logits[perm]), targets[perm], mask[perm], 0.1).item()
    a_u = obj.unlikelihood_loss(Tensor(logits), targets, mask).item()
    b_u = obj.unlikelihood_loss(Tensor(logits[perm]), targets[perm], mask[perm]).item()
    assert a_m == pytest.approx(b_m, abs=1e-12)
    assert a_u == pytest.approx(b_u, abs=1e-12)


# -- unions_step_loss ---------------------------------------------------------


def test_step_loss_weight_zero_equals_plain_mle(corpus, setup):
    cfg, params = setup
    pos = _batch_for(corpus, ("L0", "L1"))
    step = obj.unions_step_loss(params, cfg, pos, None, 0.0, smoothing=0.1)
    enc = mdl.encode_batch(params, cfg, pos.src, pos.src_mask)
    logits, _ = mdl.decode_batch(params, cfg, enc, pos.src_mask, pos.dec_in)
    direct = obj.mle_loss(logits, pos.targets, pos.tgt_mask, 0.1)
    assert step.total.item() == direct.item()
    assert step.ul == 0.0


def test_step_loss_additivity(corpus, setup):
    cfg, params = setup
    langs = [l.id for l in corpus.languages]
    pos = _batch_for(corpus, ("L0", "L1"))
    neg = obj.make_negative(pos, langs, corpus.vocab, np.random.default_rng(0))
    step = obj.unions_step_loss(params, cfg, pos, neg, 1.0, smoothing=0.1)
    assert step.total.item() == pytest.approx(step.mle + step.ul, abs=1e-12)


def test_step_loss_gradient_linearity(corpus, setup):
    cfg, params = setup
    langs = [l.id for l in corpus.languages]
    pos = _batch_for(corpus, ("L0", "L1"), n=2)
    neg = obj.make_negative(pos, langs, corpus.vocab, np.random.default_rng(3))

    combined = ad.backward(
        obj.unions_step_loss(params, cfg, pos, neg, 1.0, smoothing=0.1).total)
    mle_only = ad.backward(
        obj.unions_step_loss(params, cfg, pos, None, 0.0, smoothing=0.1).total)
    enc = mdl.encode_batch(params, cfg, neg.src, neg.src_mask)
    logits, _ = mdl.decode_batch(params, cfg, enc, neg.src_mask, neg.dec_in)
    ul_only = ad.backward(obj.unlikelihood_loss(logits, neg.targets, neg.tgt_mask))

    for name in combined:
        expected = mle_only[name].data if name in mle_only else 0.0
        if name in ul_only:
            expected = expected + ul_only[name].data
        assert np.abs(combined[name].data - expected).max() < 1e-9


def test_step_loss_rejects_uncoupled(corpus, setup):
    cfg, params = setup
    langs = [l.id for l in corpus.languages]
    pos = _batch_for(corpus, ("L0", "L1"))
    other = _batch_for(corpus, ("L0", "L2"))
    neg = obj.make_negative(other, langs, corpus.vocab, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        obj.unions_step_loss(params, cfg, pos, neg, 1.0)


def test_ul_descent_step_lowers_negative_gold_probability(corpus, setup):
    cfg, _ = setup
    params = mdl.init_params(cfg)
    langs = [l.id for l in corpus.languages]
    pos = _batch_for(corpus, ("L0", "L1"), n=4)
    neg = obj.make_negative(pos, langs, corpus.vocab, np.random.default_rng(5))

    before = obj.negative_gold_probability(params, cfg, neg)
    enc = mdl.encode_batch(params, cfg, neg.src, neg.src_mask)
    logits, _ = mdl.decode_batch(params, cfg, enc, neg.src_mask, neg.dec_in)
    gmap = ad.backward(obj.unlikelihood_loss(logits, neg.targets, neg.tgt_mask))
    for name, g in gmap.items():
        params[name].data -= 1e-2 * g.data
    after = obj.negative_gold_probability(params, cfg, neg)
    assert after < before
