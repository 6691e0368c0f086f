"""Optimization loops for both phases plus checkpoint persistence.

Pretraining minimizes label-smoothed MLE on supervised directions; tuning
continues from a pretrained checkpoint and adds the unlikelihood term on
coupled negatives (the vanilla baseline is the same loop with the weight
forced to zero, so the two phases are bit-comparable).  Every run is fully
determined by (seed, config, corpus): batch choice, negative draws, and
dropout masks each use their own seed stream keyed by step, which makes
interrupted runs resume onto the identical trajectory.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from . import model as mdl
from . import objectives as obj
from .autodiff import Tensor, backward
from .corpus import Corpus, make_batches, temperature_sample_weights
from .errors import (CheckpointError, ConfigError, FingerprintError,
                     ValidationError)

PHASES = ("pretrain", "unions_tune", "vanilla_tune")

# per-purpose seed-stream tags; tuning with ul_weight=0 must consume exactly
# the streams the vanilla baseline consumes, hence separate negative streams
_STREAM_BATCH = 101
_STREAM_NEGATIVE = 102
_STREAM_DROPOUT_POS = 103
_STREAM_DROPOUT_NEG = 104


@dataclass(frozen=True)
class TrainConfig:
    phase: str
    lr: float
    total_steps: int
    warmup_steps: int = 1
    max_tokens_per_batch: int = 1000
    smoothing: float = 0.1
    ul_weight: float = 1.0
    checkpoint_every: int = 50
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    sampling_temperature: float = 5.0
    per_sentence_negatives: bool = False

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.total_steps < self.checkpoint_every:
            raise ConfigError("total_steps must be >= checkpoint_every")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.ul_weight < 0:
            raise ConfigError("ul_weight must be nonnegative")


def lr_at(config: TrainConfig, step: int) -> float:
    """Inverse-sqrt schedule: lr * min(step/warmup, sqrt(warmup/step))."""
    w = config.warmup_steps
    return config.lr * min(step / w, math.sqrt(w / step))


@dataclass
class Checkpoint:
    config: mdl.ModelConfig
    params: mdl.ModelParams
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int
    phase: str
    corpus_fingerprint: str

    def clone_for_phase(self, phase: str) -> "Checkpoint":
        """Fresh phase start: copied parameters, optimizer state reset."""
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                  for k, v in self.params.items()}
        return Checkpoint(self.config, params, {}, {}, 0, phase,
                          self.corpus_fingerprint)


def _adam_step(params: mdl.ModelParams, grads: dict[str, Tensor],
               ckpt: Checkpoint, cfg: TrainConfig, lr: float, t: int):
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        gd = g.data
        m = ckpt.opt_m.get(name)
        v = ckpt.opt_v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * gd
        v = b2 * v + (1.0 - b2) * gd * gd
        ckpt.opt_m[name] = m
        ckpt.opt_v[name] = v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _log_line(log: IO[str] | None, record: dict):
    if log is not None:
        log.write(json.dumps(record, sort_keys=True) + "\n")
        log.flush()


def run_phase(ckpt: Checkpoint, cfg: TrainConfig, corpus: Corpus,
              out_dir: str | Path, log: IO[str] | None = None,
              echo=None) -> list[Path]:
    """Advance `ckpt` from its current step to cfg.total_steps, saving a
    checkpoint every cfg.checkpoint_every steps.  Returns the saved paths."""
    if ckpt.phase != cfg.phase:
        raise ValidationError(f"checkpoint phase {ckpt.phase!r} != config {cfg.phase!r}")
    if ckpt.corpus_fingerprint != corpus.fingerprint():
        raise FingerprintError("checkpoint was trained on a different corpus")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ul_weight = 0.0 if cfg.phase in ("pretrain", "vanilla_tune") else cfg.ul_weight
    weights = temperature_sample_weights(corpus.direction_sizes("train"),
                                         cfg.sampling_temperature)
    sampler = make_batches(corpus, "train", cfg.max_tokens_per_batch, weights,
                           seed=cfg.seed, max_len=ckpt.config.max_len)
    languages = [l.id for l in corpus.languages]
    dropout_on = ckpt.config.dropout > 0.0
    saved: list[Path] = []

    for step in range(ckpt.step + 1, cfg.total_steps + 1):
        t0 = time.perf_counter()
        direction, pairs = sampler.batch(step)
        pos = obj.make_positive_batch(pairs, corpus.vocab, direction)
        neg = None
        if ul_weight > 0.0:
            rng_neg = np.random.default_rng([cfg.seed, _STREAM_NEGATIVE, step])
            neg = obj.make_negative(pos, languages, corpus.vocab, rng_neg,
                                    cfg.per_sentence_negatives)
        rng_pos = (np.random.default_rng([cfg.seed, _STREAM_DROPOUT_POS, step])
                   if dropout_on else None)
        rng_negd = (np.random.default_rng([cfg.seed, _STREAM_DROPOUT_NEG, step])
                    if dropout_on and neg is not None else None)

        step_loss = obj.unions_step_loss(ckpt.params, ckpt.config, pos, neg,
                                         ul_weight, cfg.smoothing, rng_pos, rng_negd)
        grads = backward(step_loss.total)
        lr = lr_at(cfg, step)
        _adam_step(ckpt.params, grads, ckpt, cfg, lr, step)
        ckpt.step = step

        record = {"step": step, "phase": cfg.phase,
                  "mle_loss": round(step_loss.mle, 10),
                  "ul_loss": round(step_loss.ul, 10), "lr": lr,
                  "wall_ms": round((time.perf_counter() - t0) * 1e3, 3)}
        _log_line(log, record)
        if echo is not None and step % 50 == 0:
            echo(f"[{cfg.phase}] step {step}/{cfg.total_steps} "
                 f"mle {step_loss.mle:.4f} ul {step_loss.ul:.4f} lr {lr:.2e}")
        if step % cfg.checkpoint_every == 0:
            path = out / checkpoint_name(cfg.phase, step)
            save_checkpoint(ckpt, path)
            saved.append(path)
    return saved


def fresh_checkpoint(model_config: mdl.ModelConfig, corpus: Corpus,
                     phase: str = "pretrain") -> Checkpoint:
    return Checkpoint(model_config, mdl.init_params(model_config), {}, {},
                      0, phase, corpus.fingerprint())


def pretrain(model_config: mdl.ModelConfig, cfg: TrainConfig, corpus: Corpus,
             out_dir, log=None, echo=None) -> list[Path]:
    ckpt = fresh_checkpoint(model_config, corpus)
    return run_phase(ckpt, cfg, corpus, out_dir, log, echo)


def unions_tune(start: Checkpoint, cfg: TrainConfig, corpus: Corpus,
                out_dir, log=None, echo=None) -> list[Path]:
    ckpt = start.clone_for_phase("unions_tune")
    return run_phase(ckpt, replace(cfg, phase="unions_tune"), corpus, out_dir,
                     log, echo)


def vanilla_tune(start: Checkpoint, cfg: TrainConfig, corpus: Corpus,
                 out_dir, log=None, echo=None) -> list[Path]:
    ckpt = start.clone_for_phase("vanilla_tune")
    return run_phase(ckpt, replace(cfg, phase="vanilla_tune", ul_weight=0.0),
                     corpus, out_dir, log, echo)


def checkpoint_name(phase: str, step: int) -> str:
    return f"{phase}_{step:06d}.ckpt"


# ---------------------------------------------------------------------------
# checkpoint file format: magic "UNSP", one version byte, u64-LE header
# length, canonical JSON header, then raw little-endian f64 tensor payloads
# ---------------------------------------------------------------------------

MAGIC = b"UNSP"
VERSION = 1


def _tensor_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(f"param/{k}", ckpt.params[k].data) for k in sorted(ckpt.params)]
    entries += [(f"adam_m/{k}", ckpt.opt_m[k]) for k in sorted(ckpt.opt_m)]
    entries += [(f"adam_v/{k}", ckpt.opt_v[k]) for k in sorted(ckpt.opt_v)]
    return entries


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    entries = _tensor_entries(ckpt)
    manifest = []
    offset = 0
    blobs = []
    for name, arr in entries:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "model_config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "phase": ckpt.phase,
        "corpus_fingerprint": ckpt.corpus_fingerprint,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION]))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from None
    if len(raw) < 13 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path.name}: not a checkpoint file")
    if raw[4] != VERSION:
        raise CheckpointError(f"{path.name}: unsupported version {raw[4]}")
    (header_len,) = struct.unpack("<Q", raw[5:13])
    if 13 + header_len > len(raw):
        raise CheckpointError(f"{path.name}: truncated header")
    try:
        header = json.loads(raw[13:13 + header_len])
    except json.JSONDecodeError:
        raise CheckpointError(f"{path.name}: corrupt header") from None
    data = raw[13 + header_len:]

    config = mdl.ModelConfig.from_dict(header["model_config"])
    params: mdl.ModelParams = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(data):
            raise CheckpointError(f"{path.name}: truncated tensor {entry['name']}")
        arr = np.frombuffer(data[start:end], dtype="<f8").reshape(shape).copy()
        kind, name = entry["name"].split("/", 1)
        if kind == "param":
            params[name] = Tensor(arr, requires_grad=True, name=name)
        elif kind == "adam_m":
            opt_m[name] = arr
        elif kind == "adam_v":
            opt_v[name] = arr
        else:
            raise CheckpointError(f"{path.name}: unknown tensor kind {kind!r}")
    return Checkpoint(config, params, opt_m, opt_v, header["step"],
                      header["phase"], header["corpus_fingerprint"])


def list_checkpoints(ckpt_dir: str | Path, phase: str | None = None) -> list[Path]:
    """Checkpoint paths in a directory, ordered by step."""
    out = []
    for p in Path(ckpt_dir).glob("*.ckpt"):
        stem = p.stem
        if "_" not in stem:
            continue
        ph, _, step = stem.rpartition("_")
        if not step.isdigit() or (phase is not None and ph != phase):
            continue
        out.append((int(step), p))
    return [p for _, p in sorted(out)]


# -- supervised-quality probes used by logs and reports -----------------------


def dev_metrics(ckpt: Checkpoint, corpus: Corpus, smoothing: float = 0.1,
                limit: int | None = 300) -> dict[str, float]:
    """Teacher-forced dev loss and token accuracy over supervised directions."""
    from . import autodiff as ad

    pairs = corpus.dev_pairs[:limit] if limit else corpus.dev_pairs
    by_dir: dict[tuple[str, str], list] = {}
    for p in pairs:
        by_dir.setdefault((p.src_lang, p.tgt_lang), []).append(p)
    total_loss = 0.0
    total_tokens = 0
    correct = 0
    with ad.no_grad():
        for direction, group in sorted(by_dir.items()):
            batch = obj.make_positive_batch(group, corpus.vocab, direction)
            enc = mdl.encode_batch(ckpt.params, ckpt.config, batch.src, batch.src_mask)
            logits, _ = mdl.decode_batch(ckpt.params, ckpt.config, enc,
                                         batch.src_mask, batch.dec_in)
            loss = obj.mle_loss(logits, batch.targets, batch.tgt_mask, smoothing)
            n = int(batch.tgt_mask.sum())
            total_loss += loss.item() * n
            total_tokens += n
            pred = logits.data.argmax(axis=-1)
            correct += int(((pred == batch.targets) & batch.tgt_mask).sum())
    return {"dev_loss": total_loss / total_tokens,
            "token_accuracy": correct / total_tokens}
