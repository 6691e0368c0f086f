"""Deterministic synthetic multilingual corpora.

Languages are cipher renderings of shared concept sequences plus a
word-order transform, so surface vocabularies are disjoint (language
detection is exact), every sentence has an aligned rendering in every
language, and training on central<->non-central pairs only leaves the
non-central pairs as genuine zero-shot directions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, SpecError, ValidationError

ORDER_RULES = ("identity", "reverse", "rotate-1", "swap-adjacent")

PAD, EOS = "<pad>", "<eos>"
PAD_ID, EOS_ID = 0, 1

MIN_SENT_LEN, MAX_SENT_LEN = 3, 10
ZIPF_EXPONENT = 1.1


@dataclass(frozen=True)
class LanguageSpec:
    id: str
    order_rule: str
    token_prefix: str
    central: bool = False

    def __post_init__(self):
        if self.order_rule not in ORDER_RULES:
            raise SpecError(f"unknown order rule {self.order_rule!r}")


def default_languages(n: int = 4) -> list[LanguageSpec]:
    """One central identity language plus n-1 transformed ones."""
    if n < 4:
        raise SpecError("need at least 4 languages (1 central + 3 others)")
    rules = ["reverse", "rotate-1", "swap-adjacent"]
    langs = [LanguageSpec("L0", "identity", "l0", central=True)]
    for i in range(1, n):
        langs.append(LanguageSpec(f"L{i}", rules[(i - 1) % len(rules)], f"l{i}"))
    return langs


def apply_order_rule(rule: str, seq: Sequence[int]) -> tuple[int, ...]:
    seq = tuple(seq)
    if rule == "identity":
        return seq
    if rule == "reverse":
        return seq[::-1]
    if rule == "rotate-1":
        return seq[1:] + seq[:1]
    if rule == "swap-adjacent":
        out = list(seq)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return tuple(out)
    raise SpecError(f"unknown order rule {rule!r}")


def invert_order_rule(rule: str, seq: Sequence[int]) -> tuple[int, ...]:
    seq = tuple(seq)
    if rule == "rotate-1":
        return seq[-1:] + seq[:-1]
    return apply_order_rule(rule, seq)  # the other rules are involutions


@dataclass(frozen=True)
class ConceptSentence:
    concepts: tuple[int, ...]

    def __post_init__(self):
        if not MIN_SENT_LEN <= len(self.concepts) <= MAX_SENT_LEN:
            raise SpecError(f"concept sentence length {len(self.concepts)} outside "
                            f"[{MIN_SENT_LEN}, {MAX_SENT_LEN}]")


@dataclass(frozen=True)
class SentencePair:
    src_lang: str
    tgt_lang: str
    src_tokens: tuple[str, ...]
    tgt_tokens: tuple[str, ...]
    concept_id: int


class Vocabulary:
    """Bijection token <-> id with disjoint per-language id ranges.

    Layout: [PAD, EOS, one ID token per language, then C surface tokens per
    language in language order].
    """

    def __init__(self, languages: Sequence[LanguageSpec], num_concepts: int):
        self.languages = list(languages)
        self.num_concepts = num_concepts
        self.id_to_token: list[str] = [PAD, EOS]
        self.id_to_token += [f"<{l.id}>" for l in languages]
        self._lang_range: dict[str, tuple[int, int]] = {}
        for lang in languages:
            start = len(self.id_to_token)
            self.id_to_token += [f"{lang.token_prefix}_w{c}" for c in range(num_concepts)]
            self._lang_range[lang.id] = (start, len(self.id_to_token))
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lang_token_id(self, lang_id: str) -> int:
        return self.token_to_id[f"<{lang_id}>"]

    @property
    def lang_token_ids(self) -> list[int]:
        return [self.lang_token_id(l.id) for l in self.languages]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        try:
            return [self.token_to_id[t] for t in tokens]
        except KeyError as e:
            raise DataError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def owner_of(self, token: str) -> str | None:
        """Owning language of a surface token; None for specials/ID tokens."""
        tid = self.token_to_id.get(token)
        if tid is None:
            raise DataError(f"token {token!r} not in vocabulary")
        for lang_id, (lo, hi) in self._lang_range.items():
            if lo <= tid < hi:
                return lang_id
        return None


class Corpus:
    def __init__(self, languages, num_concepts, seed, concept_pool,
                 train_pairs, dev_pairs, test_ids):
        self.languages: list[LanguageSpec] = list(languages)
        self.num_concepts: int = num_concepts
        self.seed: int = seed
        self.concept_pool: dict[int, ConceptSentence] = dict(concept_pool)
        self.train_pairs: list[SentencePair] = list(train_pairs)
        self.dev_pairs: list[SentencePair] = list(dev_pairs)
        self.test_ids: list[int] = list(test_ids)
        self.vocab = Vocabulary(self.languages, num_concepts)
        self._lang_by_id = {l.id: l for l in self.languages}

    # -- structure ---------------------------------------------------------

    @property
    def central(self) -> LanguageSpec:
        return next(l for l in self.languages if l.central)

    @property
    def non_central(self) -> list[LanguageSpec]:
        return [l for l in self.languages if not l.central]

    def language(self, lang_id: str) -> LanguageSpec:
        try:
            return self._lang_by_id[lang_id]
        except KeyError:
            raise SpecError(f"unknown language {lang_id!r}") from None

    @property
    def supervised_directions(self) -> list[tuple[str, str]]:
        c = self.central.id
        dirs = [(c, l.id) for l in self.non_central]
        dirs += [(l.id, c) for l in self.non_central]
        return dirs

    @property
    def zeroshot_directions(self) -> list[tuple[str, str]]:
        ids = [l.id for l in self.non_central]
        return [(a, b) for a in ids for b in ids if a != b]

    def render(self, lang_id: str, concepts: Sequence[int]) -> tuple[str, ...]:
        lang = self.language(lang_id)
        ordered = apply_order_rule(lang.order_rule, concepts)
        return tuple(f"{lang.token_prefix}_w{c}" for c in ordered)

    def aligned_render(self, concept_id: int, lang_id: str) -> tuple[str, ...]:
        """Surface rendering of one pooled concept sentence in any language."""
        if concept_id not in self.concept_pool:
            raise DataError(f"unknown concept id {concept_id}")
        return self.render(lang_id, self.concept_pool[concept_id].concepts)

    def pairs(self, split: str) -> list[SentencePair]:
        if split == "train":
            return self.train_pairs
        if split == "dev":
            return self.dev_pairs
        raise ValidationError(f"unknown pair split {split!r} (test is aligned-only)")

    def direction_sizes(self, split: str = "train") -> list[int]:
        counts = {d: 0 for d in self.supervised_directions}
        for p in self.pairs(split):
            counts[(p.src_lang, p.tgt_lang)] += 1
        return [counts[d] for d in self.supervised_directions]

    # -- persistence ---------------------------------------------------------

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for chunk in self._serialized_chunks():
            h.update(chunk)
        return h.hexdigest()

    def _serialized_chunks(self):
        yield render_pairs_jsonl(self.train_pairs).encode()
        yield render_pairs_jsonl(self.dev_pairs).encode()
        yield render_aligned_jsonl(self).encode()


def _pair_record(p: SentencePair) -> str:
    return json.dumps(
        {"src_lang": p.src_lang, "tgt_lang": p.tgt_lang,
         "src": " ".join(p.src_tokens), "tgt": " ".join(p.tgt_tokens),
         "concept_id": p.concept_id},
        sort_keys=True, separators=(",", ":"))


def render_pairs_jsonl(pairs: Sequence[SentencePair]) -> str:
    return "".join(_pair_record(p) + "\n" for p in pairs)


def render_aligned_jsonl(corpus: Corpus) -> str:
    lines = []
    for cid in corpus.test_ids:
        rec = {"concept_id": cid}
        for lang in corpus.languages:
            rec[lang.id] = " ".join(corpus.aligned_render(cid, lang.id))
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return "".join(lines)


def generate_corpus(languages: Sequence[LanguageSpec] | None = None,
                    num_concept_sentences: int = 8000,
                    num_concepts: int = 60,
                    seed: int = 0,
                    dev_sentences: int = 500,
                    test_sentences: int = 500,
                    zipf: bool = True,
                    unbalanced: bool = False) -> Corpus:
    """Build train/dev/aligned-test splits, deterministic in seed.

    Train pairs cover only central<->non-central directions; the dev split
    renders every dev sentence in each supervised direction; the test split
    is multi-aligned (all languages) so zero-shot directions and off-target
    decoder inputs can be formed exactly.
    """
    if languages is None:
        languages = default_languages()
    languages = list(languages)
    centrals = [l for l in languages if l.central]
    if len(centrals) != 1:
        raise SpecError("exactly one language must be central")
    if len(languages) - 1 < 3:
        raise SpecError("need at least 3 non-central languages for nontrivial "
                        "zero-shot evaluation")
    prefixes = [l.token_prefix for l in languages]
    if len(set(prefixes)) != len(prefixes):
        raise SpecError("token_prefix values must be unique across languages")
    if len({l.id for l in languages}) != len(languages):
        raise SpecError("language ids must be unique")
    if num_concepts < 20:
        raise SpecError("need at least 20 concepts")

    rng = np.random.default_rng(seed)
    total = num_concept_sentences + dev_sentences + test_sentences

    if zipf:
        w = (1.0 + np.arange(num_concepts)) ** -ZIPF_EXPONENT
        probs = w / w.sum()
    else:
        probs = None

    # unique sentences keep the splits honestly disjoint
    pool: list[ConceptSentence] = []
    seen: set[tuple[int, ...]] = set()
    attempts = 0
    while len(pool) < total:
        attempts += 1
        if attempts > 200 * total:
            raise SpecError("could not sample enough distinct concept sentences; "
                            "increase num_concepts")
        length = int(rng.integers(MIN_SENT_LEN, MAX_SENT_LEN + 1))
        concepts = tuple(int(c) for c in rng.choice(num_concepts, size=length, p=probs))
        if concepts in seen:
            continue
        seen.add(concepts)
        pool.append(ConceptSentence(concepts))

    concept_pool = dict(enumerate(pool))
    train_ids = range(num_concept_sentences)
    dev_ids = range(num_concept_sentences, num_concept_sentences + dev_sentences)
    test_ids = range(num_concept_sentences + dev_sentences, total)

    corpus = Corpus(languages, num_concepts, seed, concept_pool, [], [], list(test_ids))

    sup_dirs = corpus.supervised_directions
    if unbalanced:
        dir_w = 2.0 ** -np.arange(len(sup_dirs))
        dir_probs = dir_w / dir_w.sum()
    else:
        dir_probs = np.full(len(sup_dirs), 1.0 / len(sup_dirs))

    def make_pair(cid: int, direction: tuple[str, str]) -> SentencePair:
        src_lang, tgt_lang = direction
        concepts = concept_pool[cid].concepts
        return SentencePair(src_lang, tgt_lang,
                            corpus.render(src_lang, concepts),
                            corpus.render(tgt_lang, concepts), cid)

    for cid in train_ids:
        d = sup_dirs[int(rng.choice(len(sup_dirs), p=dir_probs))]
        corpus.train_pairs.append(make_pair(cid, d))
    for cid in dev_ids:
        for d in sup_dirs:
            corpus.dev_pairs.append(make_pair(cid, d))
    return corpus


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

TRAIN_FILE, DEV_FILE, TEST_FILE, MANIFEST_FILE = (
    "train.jsonl", "dev.jsonl", "test_aligned.jsonl", "manifest.json")


def write_corpus(corpus: Corpus, out_dir: str | Path) -> str:
    """Write the corpus files and manifest; returns the fingerprint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / TRAIN_FILE).write_text(render_pairs_jsonl(corpus.train_pairs), encoding="utf-8")
    (out / DEV_FILE).write_text(render_pairs_jsonl(corpus.dev_pairs), encoding="utf-8")
    (out / TEST_FILE).write_text(render_aligned_jsonl(corpus), encoding="utf-8")
    fingerprint = corpus.fingerprint()
    manifest = {
        "format_version": 1,
        "fingerprint": fingerprint,
        "seed": corpus.seed,
        "num_concepts": corpus.num_concepts,
        "languages": [
            {"id": l.id, "order_rule": l.order_rule,
             "token_prefix": l.token_prefix, "central": l.central}
            for l in corpus.languages
        ],
        "counts": {"train": len(corpus.train_pairs), "dev": len(corpus.dev_pairs),
                   "test": len(corpus.test_ids)},
    }
    (out / MANIFEST_FILE).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return fingerprint


def _parse_pairs(path: Path) -> list[SentencePair]:
    pairs = []
    for line in path.read_text(encoding="utf-8").splitlines():
        try:
            rec = json.loads(line)
            pairs.append(SentencePair(
                rec["src_lang"], rec["tgt_lang"],
                tuple(rec["src"].split()), tuple(rec["tgt"].split()),
                int(rec["concept_id"])))
        except (json.JSONDecodeError, KeyError) as e:
            raise DataError(f"malformed corpus record in {path.name}: {e}") from None
    return pairs


def read_corpus(in_dir: str | Path) -> Corpus:
    """Parse corpus files back; the concept pool is recovered by inverting
    each language's cipher so round-tripping is exact."""
    src = Path(in_dir)
    try:
        manifest = json.loads((src / MANIFEST_FILE).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read corpus manifest: {e}") from None
    languages = [LanguageSpec(**l) for l in manifest["languages"]]
    by_prefix = {l.token_prefix: l for l in languages}
    num_concepts = manifest["num_concepts"]

    def unrender(tokens: Sequence[str]) -> tuple[int, ...]:
        prefix = tokens[0].rsplit("_w", 1)[0]
        lang = by_prefix.get(prefix)
        if lang is None:
            raise DataError(f"token {tokens[0]!r} matches no language")
        concepts = tuple(int(t.rsplit("_w", 1)[1]) for t in tokens)
        return invert_order_rule(lang.order_rule, concepts)

    concept_pool: dict[int, ConceptSentence] = {}

    def record(cid: int, tokens: Sequence[str]):
        if cid not in concept_pool:
            concept_pool[cid] = ConceptSentence(unrender(tokens))

    train_pairs = _parse_pairs(src / TRAIN_FILE)
    dev_pairs = _parse_pairs(src / DEV_FILE)
    for p in train_pairs + dev_pairs:
        record(p.concept_id, p.src_tokens)
    test_ids = []
    for line in (src / TEST_FILE).read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        cid = int(rec["concept_id"])
        test_ids.append(cid)
        record(cid, rec[languages[0].id].split())

    corpus = Corpus(languages, num_concepts, manifest["seed"], concept_pool,
                    train_pairs, dev_pairs, test_ids)
    if corpus.fingerprint() != manifest["fingerprint"]:
        raise DataError("corpus files do not match their manifest fingerprint")
    return corpus


# ---------------------------------------------------------------------------
# direction weighting and batching
# ---------------------------------------------------------------------------


def temperature_sample_weights(direction_sizes: Sequence[int], temperature: float) -> np.ndarray:
    """p_l proportional to (size_l / total)^(1/T), normalized to sum 1."""
    sizes = np.asarray(direction_sizes, dtype=np.float64)
    if (sizes <= 0).any():
        raise ValidationError("direction sizes must be positive")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    total = sizes.sum()
    if total <= 0:
        raise ValidationError("zero total size")
    p = (sizes / total) ** (1.0 / temperature)
    return p / p.sum()


class BatchSampler:
    """Stateless deterministic batch stream over one split.

    Batch k is a pure function of (seed, k): the direction is drawn from
    ``weights``, then pairs fill a padded-token budget in a seeded shuffle
    order, so interrupted runs can resume mid-stream exactly.
    """

    def __init__(self, corpus: Corpus, split: str, max_tokens: int,
                 weights: Sequence[float], seed: int, max_len: int | None = None):
        dirs = corpus.supervised_directions
        if len(weights) != len(dirs):
            raise ValidationError("weights must cover all supervised directions")
        weights = np.asarray(weights, dtype=np.float64)
        if (weights < 0).any() or weights.sum() <= 0:
            raise ValidationError("weights must be nonnegative and sum > 0")
        self.directions = dirs
        self.weights = weights / weights.sum()
        self.max_tokens = max_tokens
        self._seed = seed
        self.skipped = 0
        self._groups: list[list[SentencePair]] = [[] for _ in dirs]
        index = {d: i for i, d in enumerate(dirs)}
        for p in corpus.pairs(split):
            cost = self._pair_cost(p)
            too_long = max_len is not None and (
                len(p.src_tokens) + 1 > max_len or len(p.tgt_tokens) + 2 > max_len)
            if cost > max_tokens or too_long:
                self.skipped += 1
                continue
            self._groups[index[(p.src_lang, p.tgt_lang)]].append(p)
        for d, g in zip(dirs, self._groups):
            if not g and self.weights[index[d]] > 0:
                raise ValidationError(f"direction {d} has no usable pairs")

    @staticmethod
    def _pair_cost(p: SentencePair) -> int:
        # padded positions: [ID; src] plus [ID; tgt] with EOS target row
        return (len(p.src_tokens) + 1) + (len(p.tgt_tokens) + 1)

    def batch(self, k: int) -> tuple[tuple[str, str], list[SentencePair]]:
        rng = np.random.default_rng([self._seed, 101, k])
        d = int(rng.choice(len(self.directions), p=self.weights))
        pool = self._groups[d]
        order = rng.permutation(len(pool))
        chosen: list[SentencePair] = []
        max_src = max_tgt = 0
        for idx in order:
            p = pool[idx]
            s = max(max_src, len(p.src_tokens) + 1)
            t = max(max_tgt, len(p.tgt_tokens) + 1)
            if chosen and (len(chosen) + 1) * (s + t) > self.max_tokens:
                break
            chosen.append(p)
            max_src, max_tgt = s, t
        return self.directions[d], chosen

    def __iter__(self):
        k = 0
        while True:
            yield self.batch(k)
            k += 1


def make_batches(corpus: Corpus, split: str, max_tokens: int,
                 weights: Sequence[float], seed: int,
                 max_len: int | None = None) -> BatchSampler:
    return BatchSampler(corpus, split, max_tokens, weights, seed, max_len)
