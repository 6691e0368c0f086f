"""Loss surface for tuning: label-smoothed likelihood on positive pairs,
unlikelihood on coupled negatives, and the negative-sample constructor that
swaps the decoder-side language ID for a random ID outside {source, target}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tensor
from .corpus import EOS_ID, PAD_ID, SentencePair, Vocabulary
from .errors import ValidationError

UNLIKELIHOOD_FLOOR = 1e-9  # clamp on 1-p so the loss stays finite as p -> 1


@dataclass
class PositiveBatch:
    """Padded id arrays for one direction; decoder column 0 is the target ID."""

    src: np.ndarray        # [B, S] int64, column 0 = source language ID token
    src_mask: np.ndarray   # [B, S] bool
    dec_in: np.ndarray     # [B, T] int64, column 0 = target language ID token
    targets: np.ndarray    # [B, T] int64, gold tokens then EOS, PAD beyond
    tgt_mask: np.ndarray   # [B, T] bool
    direction: tuple[str, str]


@dataclass
class NegativeBatch:
    """Same payload as its coupled PositiveBatch except decoder column 0."""

    src: np.ndarray
    src_mask: np.ndarray
    dec_in: np.ndarray
    targets: np.ndarray
    tgt_mask: np.ndarray
    direction: tuple[str, str]
    negative_langs: tuple[str, ...]  # per row; identical entries in per-batch mode


def make_positive_batch(pairs: list[SentencePair], vocab: Vocabulary,
                        direction: tuple[str, str]) -> PositiveBatch:
    if not pairs:
        raise ValidationError("empty batch")
    if any((p.src_lang, p.tgt_lang) != direction for p in pairs):
        raise ValidationError("batch mixes directions")
    src_lang, tgt_lang = direction
    b = len(pairs)
    s_len = max(len(p.src_tokens) for p in pairs) + 1
    t_len = max(len(p.tgt_tokens) for p in pairs) + 1

    src = np.full((b, s_len), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((b, s_len), dtype=bool)
    dec_in = np.full((b, t_len), PAD_ID, dtype=np.int64)
    targets = np.full((b, t_len), PAD_ID, dtype=np.int64)
    tgt_mask = np.zeros((b, t_len), dtype=bool)

    src_id = vocab.lang_token_id(src_lang)
    tgt_id = vocab.lang_token_id(tgt_lang)
    for i, p in enumerate(pairs):
        s = vocab.encode(p.src_tokens)
        t = vocab.encode(p.tgt_tokens)
        src[i, 0] = src_id
        src[i, 1:1 + len(s)] = s
        src_mask[i, :1 + len(s)] = True
        dec_in[i, 0] = tgt_id
        dec_in[i, 1:1 + len(t)] = t
        targets[i, :len(t)] = t
        targets[i, len(t)] = EOS_ID
        tgt_mask[i, :len(t) + 1] = True
    return PositiveBatch(src, src_mask, dec_in, targets, tgt_mask, direction)


def make_negative(batch: PositiveBatch, languages: list[str], vocab: Vocabulary,
                  rng: np.random.Generator, per_sentence: bool = False) -> NegativeBatch:
    """Couple a negative batch by replacing the decoder-side language ID.

    The replacement is drawn uniformly from the languages outside
    {source, target}; everything else is carried over bit-identically.
    """
    src_lang, tgt_lang = batch.direction
    eligible = [l for l in languages if l not in (src_lang, tgt_lang)]
    if not eligible:
        raise ValidationError(
            f"no eligible negative language for direction {batch.direction}; "
            "need at least 3 languages")
    b = batch.dec_in.shape[0]
    if per_sentence:
        picks = [eligible[int(i)] for i in rng.integers(0, len(eligible), size=b)]
    else:
        picks = [eligible[int(rng.integers(0, len(eligible)))]] * b
    dec_in = batch.dec_in.copy()
    dec_in[:, 0] = [vocab.lang_token_id(l) for l in picks]
    return NegativeBatch(batch.src, batch.src_mask, dec_in, batch.targets,
                         batch.tgt_mask, batch.direction, tuple(picks))


def _masked_mean(per_position: Tensor, pad_mask: np.ndarray) -> Tensor:
    total = pad_mask.sum()
    if total == 0:
        raise ValidationError("all-pad batch")
    masked = ad.mul(per_position, Tensor(pad_mask.astype(np.float64)))
    return ad.scale(masked.sum(), 1.0 / float(total))


def mle_loss(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray,
             smoothing: float) -> Tensor:
    """Label-smoothed negative log-likelihood, averaged over non-pad positions:
    (1-s) * (-log p_gold) + s * mean_vocab(-log p)."""
    if not 0.0 <= smoothing < 0.5:
        raise ValidationError(f"smoothing {smoothing} outside [0, 0.5)")
    if logits.shape[:-1] != targets.shape or targets.shape != pad_mask.shape:
        raise ValidationError("logits/targets/mask shapes disagree")
    logp = ad.log_softmax_rows(logits)
    nll = ad.scale(ad.gather_last(logp, targets), -1.0)
    if smoothing == 0.0:
        return _masked_mean(nll, pad_mask)
    smooth = ad.scale(logp.mean(axis=-1), -1.0)
    per = ad.scale(nll, 1.0 - smoothing) + ad.scale(smooth, smoothing)
    return _masked_mean(per, pad_mask)


def unlikelihood_loss(logits: Tensor, targets: np.ndarray,
                      pad_mask: np.ndarray) -> Tensor:
    """-log(1 - p_target) averaged over non-pad positions, with 1-p clamped
    below at 1e-9 so a confident wrong prediction stays finite."""
    if logits.shape[:-1] != targets.shape or targets.shape != pad_mask.shape:
        raise ValidationError("logits/targets/mask shapes disagree")
    probs = ad.softmax_rows(logits)
    p_gold = ad.gather_last(probs, targets)
    complement = ad.clip_min(ad.scale(p_gold, -1.0) + Tensor(1.0), UNLIKELIHOOD_FLOOR)
    per = ad.scale(ad.log(complement), -1.0)
    return _masked_mean(per, pad_mask)


def _check_coupled(pos: PositiveBatch, neg: NegativeBatch):
    same = (np.array_equal(pos.src, neg.src)
            and np.array_equal(pos.src_mask, neg.src_mask)
            and np.array_equal(pos.targets, neg.targets)
            and np.array_equal(pos.tgt_mask, neg.tgt_mask)
            and pos.dec_in.shape == neg.dec_in.shape
            and np.array_equal(pos.dec_in[:, 1:], neg.dec_in[:, 1:])
            and pos.direction == neg.direction)
    if not same:
        raise ValidationError("negative batch is not coupled to the positive batch")
    if any(l in pos.direction for l in neg.negative_langs):
        raise ValidationError("negative language collides with source/target")


@dataclass
class StepLoss:
    total: Tensor
    mle: float
    ul: float


def unions_step_loss(params: mdl.ModelParams, config: mdl.ModelConfig,
                     pos: PositiveBatch, neg: NegativeBatch | None,
                     ul_weight: float, smoothing: float = 0.1,
                     rng_pos=None, rng_neg=None) -> StepLoss:
    """MLE on the positive batch plus ul_weight times the unlikelihood loss on
    its coupled negative, through two forward passes sharing parameters.

    With ul_weight == 0 the negative pass is skipped entirely, so the step is
    exactly a plain MLE step.
    """
    if ul_weight < 0:
        raise ValidationError("ul_weight must be nonnegative")
    enc = mdl.encode_batch(params, config, pos.src, pos.src_mask, rng_pos)
    logits, _ = mdl.decode_batch(params, config, enc, pos.src_mask, pos.dec_in, rng_pos)
    mle = mle_loss(logits, pos.targets, pos.tgt_mask, smoothing)
    if ul_weight == 0.0 or neg is None:
        if ul_weight > 0.0:
            raise ValidationError("ul_weight > 0 requires a negative batch")
        return StepLoss(total=mle, mle=mle.item(), ul=0.0)
    _check_coupled(pos, neg)
    # the coupled batches share their source payload, so the encoder pass is
    # reused; gradients flow through it from both loss terms
    logits_n, _ = mdl.decode_batch(params, config, enc, neg.src_mask, neg.dec_in, rng_neg)
    ul = unlikelihood_loss(logits_n, neg.targets, neg.tgt_mask)
    total = mle + ad.scale(ul, ul_weight)
    return StepLoss(total=total, mle=mle.item(), ul=ul.item())


def negative_gold_probability(params, config, neg: NegativeBatch) -> float:
    """Mean model probability of the gold tokens under the mismatched ID;
    the quantity unlikelihood tuning pushes down."""
    with ad.no_grad():
        enc = mdl.encode_batch(params, config, neg.src, neg.src_mask)
        logits, _ = mdl.decode_batch(params, config, enc, neg.src_mask, neg.dec_in)
        probs = ad.softmax_rows(logits)
        p_gold = ad.gather_last(probs, neg.targets).data
    return float(p_gold[neg.tgt_mask].mean())
