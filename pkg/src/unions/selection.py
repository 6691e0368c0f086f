"""Representation-based checkpoint selection.

Extracts per-token decoder states (CWRs) under matched and mismatched
decoder-input settings, scores how separated the per-target-language point
clouds are, and picks the first checkpoint whose separation score stops
moving.  Also provides a deterministic 2-D projection for plot export.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import model as mdl
from . import objectives as obj
from .corpus import Corpus
from .errors import NumericalError, ValidationError
from .trainer import Checkpoint

DEFAULT_PROBE_SIZE = 100
SEP_CONVERGENCE_THRESHOLD = 0.01


class CwrSetting(str, enum.Enum):
    SUPERVISED_ON = "supervised_on"
    ZEROSHOT_ON = "zeroshot_on"
    SUPERVISED_OFF = "supervised_off"
    ZEROSHOT_OFF = "zeroshot_off"

    @property
    def off_target(self) -> bool:
        return self.value.endswith("_off")

    @property
    def zeroshot(self) -> bool:
        return self.value.startswith("zeroshot")


@dataclass
class CwrPointSet:
    """Per-target-language decoder states, one point per non-pad target token."""

    points: dict[str, np.ndarray]  # lang id -> [n_points, d_model]
    setting: CwrSetting
    step: int
    probe_ids: tuple[int, ...]

    def total_points(self) -> int:
        return sum(len(v) for v in self.points.values())


def _default_directions(corpus: Corpus, setting: CwrSetting) -> list[tuple[str, str]]:
    if setting.zeroshot:
        return corpus.zeroshot_directions
    # supervised settings probe translation out of the central language
    return [(corpus.central.id, l.id) for l in corpus.non_central]


def off_input_language(corpus: Corpus, direction: tuple[str, str]) -> str:
    """Language for the mismatched decoder input of one direction.

    Zero-shot directions take the central language (where off-target output
    gravitates); supervised ones take the first non-central language that is
    neither source nor target.
    """
    src_lang, tgt_lang = direction
    central = corpus.central.id
    if src_lang != central and tgt_lang != central:
        return central
    for l in corpus.non_central:
        if l.id not in (src_lang, tgt_lang):
            return l.id
    raise ValidationError(f"no off-target language available for {direction}")


def extract_cwrs(ckpt: Checkpoint, corpus: Corpus, setting: CwrSetting,
                 directions: Sequence[tuple[str, str]] | None = None,
                 probe_size: int = DEFAULT_PROBE_SIZE) -> CwrPointSet:
    """Teacher-forced decoder states over an aligned test probe.

    The decoder input is the target-language rendering of the probe sentence
    in the on-target settings and the rendering in a different language with
    the same content in the off-target ones.  Points are tagged with the
    intended target language either way; dropout is off.
    """
    setting = CwrSetting(setting)
    if directions is None:
        directions = _default_directions(corpus, setting)
    probe_ids = tuple(corpus.test_ids[:probe_size])
    if not probe_ids:
        raise ValidationError("empty probe")
    vocab = corpus.vocab
    points: dict[str, list[np.ndarray]] = {}

    with ad.no_grad():
        for direction in directions:
            src_lang, tgt_lang = direction
            input_lang = (off_input_language(corpus, direction)
                          if setting.off_target else tgt_lang)
            rows = []
            for cid in probe_ids:
                src = vocab.encode(corpus.aligned_render(cid, src_lang))
                dec = vocab.encode(corpus.aligned_render(cid, input_lang))
                rows.append((src, dec))
            s_len = max(len(s) for s, _ in rows) + 1
            t_len = max(len(d) for _, d in rows) + 1
            src_ids = np.zeros((len(rows), s_len), dtype=np.int64)
            src_mask = np.zeros((len(rows), s_len), dtype=bool)
            dec_ids = np.zeros((len(rows), t_len), dtype=np.int64)
            dec_mask = np.zeros((len(rows), t_len), dtype=bool)
            for i, (s, d) in enumerate(rows):
                src_ids[i, 0] = vocab.lang_token_id(src_lang)
                src_ids[i, 1:1 + len(s)] = s
                src_mask[i, :1 + len(s)] = True
                dec_ids[i, 0] = vocab.lang_token_id(tgt_lang)
                dec_ids[i, 1:1 + len(d)] = d
                dec_mask[i, 1:1 + len(d)] = True  # token positions, not the ID row
            enc = mdl.encode_batch(ckpt.params, ckpt.config, src_ids, src_mask)
            _, cwr = mdl.decode_batch(ckpt.params, ckpt.config, enc, src_mask, dec_ids)
            points.setdefault(tgt_lang, []).append(cwr.data[dec_mask])

    return CwrPointSet(
        points={lang: np.concatenate(chunks) for lang, chunks in sorted(points.items())},
        setting=setting, step=ckpt.step, probe_ids=probe_ids)


# ---------------------------------------------------------------------------
# separation degree
# ---------------------------------------------------------------------------


def _cross_mean_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Grand mean Euclidean distance over all cross pairs of two point sets."""
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    sq = np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)
    return float(np.sqrt(sq).mean())


def separation_degree(points: CwrPointSet | dict[str, np.ndarray]) -> float:
    """Ratio of inter-language to intra-language average point distances:

        [sum_{i<j} Dis(P_i, P_j) * 2] / [sum_i Dis(P_i, centroid_i) * (N+1)]

    where Dis is the mean cross-pair Euclidean distance and each language's
    centroid is treated as a singleton set.
    """
    groups = points.points if isinstance(points, CwrPointSet) else points
    langs = sorted(groups)
    if len(langs) < 2:
        raise ValidationError("separation needs at least 2 languages")
    clouds = []
    for lang in langs:
        arr = np.asarray(groups[lang], dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if len(arr) < 2:
            raise ValidationError(f"language {lang} needs at least 2 points")
        clouds.append(arr)

    n = len(langs)
    numerator = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            numerator += _cross_mean_distance(clouds[i], clouds[j])
    numerator *= 2.0

    denominator = 0.0
    for arr in clouds:
        centroid = arr.mean(axis=0, keepdims=True)
        spread = _cross_mean_distance(arr, centroid)
        if spread < 1e-12:
            raise NumericalError("degenerate intra-language spread")
        denominator += spread
    denominator *= n + 1
    return numerator / denominator


@dataclass
class SelectionResult:
    checkpoint: Checkpoint
    selected_index: int
    sep_values: list[float]
    steps: list[int]
    converged: bool


def first_converged_index(sep_values: Sequence[float], threshold: float,
                          relative: bool = False) -> tuple[int, bool]:
    """Index of the first score whose change against its predecessor falls
    below the threshold; (last index, False) when none converges."""
    if not sep_values:
        raise ValidationError("empty separation trajectory")
    for k in range(1, len(sep_values)):
        delta = abs(sep_values[k] - sep_values[k - 1])
        if relative:
            delta /= max(abs(sep_values[k - 1]), 1e-12)
        if delta < threshold:
            return k, True
    return len(sep_values) - 1, False


def select_checkpoint(series: Sequence[Checkpoint], corpus: Corpus,
                      probe_size: int = DEFAULT_PROBE_SIZE,
                      threshold: float = SEP_CONVERGENCE_THRESHOLD,
                      relative: bool = False) -> SelectionResult:
    """First checkpoint whose separation score moves less than `threshold`
    against its predecessor (absolute by default); falls back to the last
    checkpoint, flagged as non-converged, when none does.

    The score is computed in the zero-shot off-target setting.
    """
    series = list(series)
    if not series:
        raise ValidationError("empty checkpoint series")
    seps = []
    for ckpt in series:
        pts = extract_cwrs(ckpt, corpus, CwrSetting.ZEROSHOT_OFF,
                           probe_size=probe_size)
        seps.append(separation_degree(pts))
    steps = [c.step for c in series]
    index, converged = first_converged_index(seps, threshold, relative)
    return SelectionResult(series[index], index, seps, steps, converged)


# ---------------------------------------------------------------------------
# 2-D projection for plot export
# ---------------------------------------------------------------------------

_POWER_TOL = 1e-9
_POWER_MAX_ITER = 1000


def _power_iteration(mat: np.ndarray, start: np.ndarray) -> tuple[np.ndarray, float]:
    v = start / np.linalg.norm(start)
    for _ in range(_POWER_MAX_ITER):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm < 1e-30:
            return v, 0.0
        w /= norm
        if np.linalg.norm(w - v) < _POWER_TOL:
            v = w
            break
        v = w
    return v, float(v @ mat @ v)


def pca_project_2d(points: CwrPointSet | np.ndarray,
                   labels: Sequence[str] | None = None
                   ) -> tuple[np.ndarray, list[str]]:
    """Center the cloud and project onto its top-2 principal directions via
    power iteration with deflation; returns (coords [n, 2], language tags)."""
    if isinstance(points, CwrPointSet):
        labels = []
        rows = []
        for lang in sorted(points.points):
            arr = points.points[lang]
            rows.append(arr)
            labels += [lang] * len(arr)
        x = np.concatenate(rows)
    else:
        x = np.asarray(points, dtype=np.float64)
        labels = list(labels) if labels is not None else [""] * len(x)
    if len(x) < 3:
        raise ValidationError("projection needs at least 3 points")

    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / len(x)
    if np.trace(cov) < 1e-12:
        raise NumericalError("degenerate point cloud: no variance to project")

    d = cov.shape[0]
    start = np.sin(1.0 + np.arange(d))  # fixed, deterministic start vector
    v1, lam1 = _power_iteration(cov, start)
    deflated = cov - lam1 * np.outer(v1, v1)
    start2 = start - (start @ v1) * v1
    if np.linalg.norm(start2) < 1e-12:
        start2 = np.roll(start, 1) - (np.roll(start, 1) @ v1) * v1
    v2, _ = _power_iteration(deflated, start2)
    # deflation can leave a v1 component when the residual is near zero
    v2 = v2 - (v2 @ v1) * v1
    n2 = np.linalg.norm(v2)
    if n2 < 1e-12:
        # rank-1 cloud: any direction orthogonal to v1 carries zero variance
        basis = np.zeros(d)
        basis[int(np.argmin(np.abs(v1)))] = 1.0
        v2 = basis - (basis @ v1) * v1
        n2 = np.linalg.norm(v2)
    v2 /= n2
    coords = centered @ np.stack([v1, v2], axis=1)
    return coords, labels
