"""Inference and translation metrics: length-normalized beam search, exact
rule-based language detection over the disjoint synthetic vocabularies,
off-target ratio, and a simplified deterministic corpus BLEU.
"""

from __future__ import annotations

import collections
import math
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .corpus import Corpus, EOS_ID, PAD_ID, Vocabulary
from .errors import ValidationError
from .trainer import Checkpoint

MIXED = "mixed"
DETECTOR_THRESHOLD = 0.5


def detect_language(tokens: Sequence[str], vocab: Vocabulary) -> str:
    """Language owning strictly more than half the tokens, else "mixed"."""
    if not tokens:
        return MIXED
    counts = collections.Counter()
    for t in tokens:
        owner = vocab.owner_of(t)
        if owner is not None:
            counts[owner] += 1
    if not counts:
        return MIXED
    lang, top = counts.most_common(1)[0]
    if top / len(tokens) > DETECTOR_THRESHOLD:
        return lang
    return MIXED


def otr(hypotheses: Sequence[Sequence[str]], target_lang: str,
        vocab: Vocabulary) -> float:
    """Fraction of hypotheses not detected as the target language."""
    if not hypotheses:
        raise ValidationError("no hypotheses")
    off = sum(1 for h in hypotheses if detect_language(h, vocab) != target_lang)
    return off / len(hypotheses)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

BLEU_MAX_ORDER = 4


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _ngram_counts(tokens: list[str], n: int) -> collections.Counter:
    return collections.Counter(tuple(tokens[i:i + n])
                               for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence, references: Sequence) -> float:
    """Corpus 4-gram BLEU on whitespace tokens, in [0, 100].

    Pinned smoothing rule: unigram precision is raw; for n >= 2 a zero
    matched count is smoothed to 1/(total+1), nonzero counts are left
    untouched.  Brevity penalty exp(1 - ref_len/hyp_len) applies when the
    hypothesis corpus is shorter.
    """
    if len(hypotheses) != len(references):
        raise ValidationError("hypothesis/reference counts differ")
    if not hypotheses:
        raise ValidationError("empty corpus")
    matched = [0] * (BLEU_MAX_ORDER + 1)
    total = [0] * (BLEU_MAX_ORDER + 1)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _tokens(hyp), _tokens(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, BLEU_MAX_ORDER + 1):
            h_counts = _ngram_counts(h, n)
            r_counts = _ngram_counts(r, n)
            total[n] += max(len(h) - n + 1, 0)
            matched[n] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    if hyp_len == 0:
        return 0.0
    log_precision = 0.0
    for n in range(1, BLEU_MAX_ORDER + 1):
        if n == 1:
            p = matched[1] / total[1]
            if p == 0.0:
                return 0.0
        elif matched[n] > 0:
            p = matched[n] / total[n]
        else:
            p = 1.0 / (total[n] + 1)
        log_precision += math.log(p) / BLEU_MAX_ORDER
    bp = math.exp(1.0 - ref_len / hyp_len) if hyp_len < ref_len else 1.0
    return 100.0 * bp * math.exp(log_precision)


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------


def _normalized(logprob: float, length: int, penalty: float) -> float:
    return logprob / (length ** penalty)


def _search(step_fn: Callable[[list[list[int]]], np.ndarray], beam: int,
            max_steps: int, penalty: float, banned: Sequence[int]
            ) -> tuple[list[int], float]:
    """Generic beam search over a next-token log-probability function.

    Hypotheses end at EOS; scores are logprob / len^penalty with the EOS step
    included in the length, so an immediate EOS yields the empty output.
    A finished hypothesis occupies a beam slot, which makes beam=1 coincide
    with greedy decoding.  Length normalization can rank the pruned greedy
    path above every surviving hypothesis, so the greedy result is kept as a
    floor.  Ties break on token id, then hypothesis order.
    """
    banned = list(banned)
    if beam > 1:
        wide = _beam_pass(step_fn, beam, max_steps, penalty, banned)
        greedy = _beam_pass(step_fn, 1, max_steps, penalty, banned)
        return wide if wide[1] >= greedy[1] else greedy
    return _beam_pass(step_fn, beam, max_steps, penalty, banned)


def _beam_pass(step_fn, beam: int, max_steps: int, penalty: float,
               banned: list[int]) -> tuple[list[int], float]:
    active: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_steps):
        logps = step_fn([h for h, _ in active])
        logps[:, banned] = -np.inf
        candidates = []
        for i, (tokens, score) in enumerate(active):
            row = logps[i]
            # the top beam+1 per row always covers beam survivors plus EOS
            top = np.argpartition(-row, min(beam, row.size - 1))[:beam + 1]
            for v in sorted(top.tolist()):
                if np.isfinite(row[v]):
                    candidates.append((score + row[v], v, i))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_active = []
        for score, v, i in candidates:
            tokens = active[i][0] + [v]
            if v == EOS_ID:
                finished.append((_normalized(score, len(tokens), penalty),
                                 tokens[:-1]))
            else:
                next_active.append((tokens, score))
            if len(next_active) >= beam:
                break
        if len(finished) >= beam or not next_active:
            break
        active = next_active
    if not finished:
        # length budget exhausted; fall back to the best unfinished hypothesis
        best = max(enumerate(active),
                   key=lambda it: (_normalized(it[1][1], len(it[1][0]), penalty),
                                   -it[0]))[1]
        return best[0], _normalized(best[1], len(best[0]), penalty)
    finished.sort(key=lambda f: (-f[0], f[1]))
    score, tokens = finished[0][0], finished[0][1]
    return tokens, score


def beam_search(ckpt: Checkpoint, vocab: Vocabulary, src_tokens: Sequence[str],
                src_lang: str, tgt_lang: str, beam: int = 5,
                max_len: int | None = None, length_penalty: float = 1.0
                ) -> list[str]:
    """Translate one sentence; returns surface tokens without specials.

    The returned sequence never scores below the greedy one under the
    length-normalized model score.
    """
    if beam < 1:
        raise ValidationError("beam must be >= 1")
    params, config = ckpt.params, ckpt.config
    if max_len is None:
        max_len = config.max_len - 1
    src_ids = np.array(
        [[vocab.lang_token_id(src_lang)] + vocab.encode(src_tokens)], dtype=np.int64)
    src_mask = np.ones_like(src_ids, dtype=bool)
    tgt_id = vocab.lang_token_id(tgt_lang)
    banned = [PAD_ID] + vocab.lang_token_ids

    with ad.no_grad():
        enc = mdl.encode_batch(params, config, src_ids, src_mask)

        def step_fn(prefixes: list[list[int]]) -> np.ndarray:
            dec = np.array([[tgt_id] + p for p in prefixes], dtype=np.int64)
            logits, _ = mdl.decode_batch(params, config, enc, src_mask, dec)
            return ad.log_softmax_rows(logits).data[:, -1, :]

        ids, _ = _search(step_fn, beam, max_steps=max_len,
                         penalty=length_penalty, banned=banned)
    return vocab.decode(ids)


# ---------------------------------------------------------------------------
# per-direction evaluation report
# ---------------------------------------------------------------------------

EVAL_REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["directions", "aggregates", "checkpoint_step", "phase"],
    "properties": {
        "checkpoint_step": {"type": "integer", "minimum": 0},
        "phase": {"type": "string"},
        "beam": {"type": "integer", "minimum": 1},
        "directions": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["bleu", "otr", "sentences", "kind"],
                "properties": {
                    "bleu": {"type": "number", "minimum": 0, "maximum": 100},
                    "otr": {"type": "number", "minimum": 0, "maximum": 1},
                    "sentences": {"type": "integer", "minimum": 1},
                    "kind": {"enum": ["supervised", "zeroshot"]},
                },
            },
        },
        "aggregates": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["bleu", "otr", "directions"],
                "properties": {
                    "bleu": {"type": "number"},
                    "otr": {"type": "number"},
                    "directions": {"type": "integer"},
                },
            },
        },
        "sep_trajectory": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["step", "sep"],
                "properties": {"step": {"type": "integer"}, "sep": {"type": "number"}},
            },
        },
    },
}


def direction_key(direction: tuple[str, str]) -> str:
    return f"{direction[0]}->{direction[1]}"


def evaluate_directions(ckpt: Checkpoint, corpus: Corpus,
                        directions: Sequence[tuple[str, str]], beam: int = 5,
                        length_penalty: float = 1.0, limit: int | None = None,
                        reference_as_hypothesis: bool = False) -> dict:
    """Beam-decode the aligned test split per direction and score BLEU/OTR.

    With reference_as_hypothesis the references are scored against
    themselves, which exercises the metric path end to end (BLEU 100, OTR 0
    on these corpora).
    """
    test_ids = corpus.test_ids[:limit] if limit else corpus.test_ids
    if not test_ids:
        raise ValidationError("empty test split")
    zeroshot = set(corpus.zeroshot_directions)
    supervised = set(corpus.supervised_directions)
    report_dirs = {}
    for direction in directions:
        if direction not in zeroshot and direction not in supervised:
            raise ValidationError(f"direction {direction} absent from test data")
        src_lang, tgt_lang = direction
        hyps, refs = [], []
        for cid in test_ids:
            ref = list(corpus.aligned_render(cid, tgt_lang))
            if reference_as_hypothesis:
                hyp = ref
            else:
                src = list(corpus.aligned_render(cid, src_lang))
                hyp = beam_search(ckpt, corpus.vocab, src, src_lang, tgt_lang,
                                  beam=beam, length_penalty=length_penalty)
            hyps.append(hyp)
            refs.append(ref)
        report_dirs[direction_key(direction)] = {
            "bleu": bleu(hyps, refs),
            "otr": otr(hyps, tgt_lang, corpus.vocab),
            "sentences": len(test_ids),
            "kind": "zeroshot" if direction in zeroshot else "supervised",
        }

    aggregates = {}
    for kind in ("supervised", "zeroshot"):
        rows = [d for d in report_dirs.values() if d["kind"] == kind]
        if rows:
            aggregates[kind] = {
                "bleu": sum(r["bleu"] for r in rows) / len(rows),
                "otr": sum(r["otr"] for r in rows) / len(rows),
                "directions": len(rows),
            }
    return {
        "directions": report_dirs,
        "aggregates": aggregates,
        "checkpoint_step": ckpt.step,
        "phase": ckpt.phase,
        "beam": beam,
    }
