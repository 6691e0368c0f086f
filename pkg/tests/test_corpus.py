import collections

import numpy as np
import pytest

from unions import corpus as cp
from unions.errors import DataError, SpecError, ValidationError


@pytest.fixture(scope="module")
def small_corpus():
    return cp.generate_corpus(num_concept_sentences=600, num_concepts=30,
                              seed=5, dev_sentences=40, test_sentences=40)


def test_direction_counts(small_corpus):
    assert len(small_corpus.supervised_directions) == 6
    assert len(small_corpus.zeroshot_directions) == 6


def test_reverse_rule_rendering(small_corpus):
    tokens = small_corpus.render("L1", (4, 7, 9))  # L1 uses "reverse"
    assert tokens == ("l1_w9", "l1_w7", "l1_w4")


def test_rotate_and_swap_rules():
    assert cp.apply_order_rule("rotate-1", (1, 2, 3)) == (2, 3, 1)
    assert cp.apply_order_rule("swap-adjacent", (1, 2, 3, 4, 5)) == (2, 1, 4, 3, 5)
    for rule in cp.ORDER_RULES:
        seq = (3, 1, 4, 1, 5, 9, 2)
        assert cp.invert_order_rule(rule, cp.apply_order_rule(rule, seq)) == seq


def test_generation_deterministic(tmp_path):
    kw = dict(num_concept_sentences=200, num_concepts=25, seed=9,
              dev_sentences=20, test_sentences=20)
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    fp_a = cp.write_corpus(cp.generate_corpus(**kw), a_dir)
    fp_b = cp.write_corpus(cp.generate_corpus(**kw), b_dir)
    assert fp_a == fp_b
    for name in (cp.TRAIN_FILE, cp.DEV_FILE, cp.TEST_FILE, cp.MANIFEST_FILE):
        assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()


def test_seed_changes_fingerprint():
    kw = dict(num_concept_sentences=200, num_concepts=25,
              dev_sentences=20, test_sentences=20)
    assert (cp.generate_corpus(seed=1, **kw).fingerprint()
            != cp.generate_corpus(seed=2, **kw).fingerprint())


def test_duplicate_prefix_rejected():
    langs = cp.default_languages()
    langs[2] = cp.LanguageSpec("L2", "rotate-1", "l1")
    with pytest.raises(SpecError):
        cp.generate_corpus(languages=langs, num_concept_sentences=50,
                           num_concepts=25, seed=0, dev_sentences=5, test_sentences=5)


def test_too_few_languages_rejected():
    with pytest.raises(SpecError):
        cp.default_languages(3)
    langs = cp.default_languages()[:3]
    with pytest.raises(SpecError):
        cp.generate_corpus(languages=langs, num_concept_sentences=50,
                           num_concepts=25, seed=0, dev_sentences=5, test_sentences=5)


def test_vocabulary_disjoint_ownership(small_corpus):
    vocab = small_corpus.vocab
    for token in vocab.id_to_token:
        owner = vocab.owner_of(token)
        if token in (cp.PAD, cp.EOS) or token.startswith("<"):
            assert owner is None
        else:
            owners = [l.id for l in small_corpus.languages
                      if token.startswith(l.token_prefix + "_w")]
            assert owners == [owner]


def test_train_split_has_no_zeroshot_pair(small_corpus):
    central = small_corpus.central.id
    for p in small_corpus.train_pairs:
        assert central in (p.src_lang, p.tgt_lang)
        assert p.src_lang != p.tgt_lang


def test_roundtrip(small_corpus, tmp_path):
    cp.write_corpus(small_corpus, tmp_path)
    back = cp.read_corpus(tmp_path)
    assert back.train_pairs == small_corpus.train_pairs
    assert back.dev_pairs == small_corpus.dev_pairs
    assert back.test_ids == small_corpus.test_ids
    assert back.concept_pool == small_corpus.concept_pool
    assert back.fingerprint() == small_corpus.fingerprint()


def test_corrupt_corpus_rejected(small_corpus, tmp_path):
    cp.write_corpus(small_corpus, tmp_path)
    path = tmp_path / cp.TRAIN_FILE
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[1:]) + "\n")
    with pytest.raises(DataError):
        cp.read_corpus(tmp_path)


def test_aligned_render_detects_own_language(small_corpus):
    cid = small_corpus.test_ids[0]
    for lang in small_corpus.languages:
        tokens = small_corpus.aligned_render(cid, lang.id)
        assert all(small_corpus.vocab.owner_of(t) == lang.id for t in tokens)


def test_aligned_render_equal_lengths_and_identity_order(small_corpus):
    cid = small_corpus.test_ids[3]
    concepts = small_corpus.concept_pool[cid].concepts
    lengths = {len(small_corpus.aligned_render(cid, l.id))
               for l in small_corpus.languages}
    assert lengths == {len(concepts)}
    central = small_corpus.aligned_render(cid, "L0")  # identity rule
    assert tuple(int(t.rsplit("_w", 1)[1]) for t in central) == concepts


def test_aligned_render_unknown_concept(small_corpus):
    with pytest.raises(DataError):
        small_corpus.aligned_render(10 ** 9, "L0")


def test_temperature_identity():
    w = cp.temperature_sample_weights([10, 30, 60], 1.0)
    assert np.allclose(w, [0.1, 0.3, 0.6])


def test_temperature_infinite_limit():
    w = cp.temperature_sample_weights([1, 1000, 50], 1e12)
    assert np.allclose(w, 1 / 3, atol=1e-6)


def test_temperature_hand_value():
    w = cp.temperature_sample_weights([100, 400], 5.0)
    assert np.allclose(w, [0.4311, 0.5689], atol=1e-3)


def test_temperature_validation():
    with pytest.raises(ValidationError):
        cp.temperature_sample_weights([0, 5], 5.0)
    with pytest.raises(ValidationError):
        cp.temperature_sample_weights([1, 5], 0.0)


def test_batches_single_direction_and_budget(small_corpus):
    n = len(small_corpus.supervised_directions)
    sampler = cp.make_batches(small_corpus, "train", 120, np.full(n, 1 / n), seed=0)
    assert sampler.skipped == 0  # budget exceeds the longest pair
    for k in range(50):
        direction, pairs = sampler.batch(k)
        assert pairs
        assert {(p.src_lang, p.tgt_lang) for p in pairs} == {direction}
        cost = len(pairs) * (max(len(p.src_tokens) for p in pairs) + 1
                             + max(len(p.tgt_tokens) for p in pairs) + 1)
        assert cost <= 120 or len(pairs) == 1


def test_batches_zero_weight_never_appears(small_corpus):
    n = len(small_corpus.supervised_directions)
    w = np.full(n, 1.0)
    w[0] = 0.0
    sampler = cp.make_batches(small_corpus, "train", 100, w, seed=1)
    banned = small_corpus.supervised_directions[0]
    assert all(sampler.batch(k)[0] != banned for k in range(300))


def test_batches_deterministic_and_resumable(small_corpus):
    n = len(small_corpus.supervised_directions)
    s1 = cp.make_batches(small_corpus, "train", 100, np.full(n, 1 / n), seed=7)
    s2 = cp.make_batches(small_corpus, "train", 100, np.full(n, 1 / n), seed=7)
    for k in (0, 5, 17):
        assert s1.batch(k) == s2.batch(k)


def test_batches_skip_overlong(small_corpus):
    n = len(small_corpus.supervised_directions)
    sampler = cp.make_batches(small_corpus, "train", 100, np.full(n, 1 / n),
                              seed=0, max_len=6)
    # sentences of length 3..10, so those above 4 tokens are skipped
    assert sampler.skipped > 0


def test_batch_direction_frequencies_match_weights(small_corpus):
    weights = cp.temperature_sample_weights(
        small_corpus.direction_sizes("train"), 5.0)
    sampler = cp.make_batches(small_corpus, "train", 60, weights, seed=3)
    counts = collections.Counter(sampler.batch(k)[0] for k in range(10_000))
    for d, w in zip(small_corpus.supervised_directions, weights):
        assert abs(counts[d] / 10_000 - w) < 0.02


def test_concept_sentence_length_bounds(small_corpus):
    for cs in small_corpus.concept_pool.values():
        assert 3 <= len(cs.concepts) <= 10


def test_splits_disjoint(small_corpus):
    train = {small_corpus.concept_pool[p.concept_id].concepts
             for p in small_corpus.train_pairs}
    test = {small_corpus.concept_pool[c].concepts for c in small_corpus.test_ids}
    assert not (train & test)
