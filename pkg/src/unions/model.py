"""Small encoder-decoder transformer with language-ID token placement.

The source language ID is the first encoder token; the target language ID is
the first decoder token and doubles as BOS.  Blocks are pre-norm residual
with a final layer norm per stack; the per-position decoder state consumed
by the output projection is the contextual word representation (CWR).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, LengthError

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ffn: int = 128
    dropout: float = 0.1
    max_len: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must cover specials and language IDs")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}"
            )
        for field in ("num_encoder_layers", "num_decoder_layers", "d_model",
                      "num_heads", "d_ffn", "max_len"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "num_encoder_layers": self.num_encoder_layers,
            "num_decoder_layers": self.num_decoder_layers,
            "d_model": self.d_model,
            "num_heads": self.num_heads,
            "d_ffn": self.d_ffn,
            "dropout": self.dropout,
            "max_len": self.max_len,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


ModelParams = dict  # name -> Tensor, see init_params for the naming scheme


@dataclass
class EncodedSource:
    """Encoder states over [source_id; tokens]; row 0 is the ID position."""

    hidden: Tensor  # [src_len+1, d_model]
    mask: np.ndarray  # [src_len+1] bool, True where real


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    v, d, f = config.vocab_size, config.d_model, config.d_ffn
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("enc.embed", (v, d)),
        ("dec.embed", (v, d)),
    ]

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            shapes.append((f"{prefix}.{w}", (d, d)))

    def ln(prefix):
        shapes.append((f"{prefix}.g", (d,)))
        shapes.append((f"{prefix}.b", (d,)))

    def ffn(prefix):
        shapes.append((f"{prefix}.w1", (d, f)))
        shapes.append((f"{prefix}.w2", (f, d)))

    for i in range(config.num_encoder_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    ln("enc.ln_f")
    for i in range(config.num_decoder_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self_attn")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross_attn")
        ln(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    ln("dec.ln_f")
    shapes.append(("out.w", (d, v)))
    shapes.append(("out.b", (v,)))
    return shapes


def init_params(config: ModelConfig) -> ModelParams:
    """Deterministic init from config.seed.

    Weight matrices (embeddings included) draw from a scaled uniform with
    bound sqrt(6/(fan_in+fan_out)); layer-norm gains are 1, all biases 0.
    """
    rng = np.random.default_rng(config.seed)
    params: ModelParams = {}
    for name, shape in _param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            data = ad.glorot_uniform(rng, shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@functools.lru_cache(maxsize=8)
def _sinusoid_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    dim = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d_model)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


def _attention(params, prefix, config, q_in, kv_in, bias, rng, p_drop):
    b_dim, tq = q_in.shape[0], q_in.shape[1]
    tk = kv_in.shape[1]
    h, hd = config.num_heads, config.head_dim

    def split(t, n_rows):
        return ad.transpose(ad.reshape(t, (t.shape[0], n_rows, h, hd)), (0, 2, 1, 3))

    q = split(ad.matmul(q_in, params[f"{prefix}.wq"]), tq)
    k = split(ad.matmul(kv_in, params[f"{prefix}.wk"]), tk)
    v = split(ad.matmul(kv_in, params[f"{prefix}.wv"]), tk)

    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    if bias is not None:
        scores = scores + Tensor(bias)
    attn = ad.softmax_rows(scores)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b_dim, tq, config.d_model))
    return ad.matmul(ctx, params[f"{prefix}.wo"])


def _sublayer(x, fn, params, ln_prefix, rng, p_drop):
    normed = ad.layer_norm(x, params[f"{ln_prefix}.g"], params[f"{ln_prefix}.b"], LN_EPS)
    return x + ad.dropout(fn(normed), p_drop, rng)


def _ffn(params, prefix, x):
    return ad.matmul(ad.relu(ad.matmul(x, params[f"{prefix}.w1"])),
                     params[f"{prefix}.w2"])


def _pad_bias(mask: np.ndarray) -> np.ndarray:
    # [B, S] bool -> [B, 1, 1, S] additive bias; -1e9 keeps softmax NaN-free
    return np.where(mask, 0.0, -1e9)[:, None, None, :]


@functools.lru_cache(maxsize=64)
def _causal_bias(t: int) -> np.ndarray:
    bias = np.triu(np.full((t, t), -1e9), k=1)[None, None, :, :]
    bias.setflags(write=False)
    return bias


def _embed(params, table_name, config, ids, rng, p_drop):
    t = ids.shape[1]
    emb = ad.scale(ad.embedding(params[table_name], ids), math.sqrt(config.d_model))
    pos = Tensor(_sinusoid_table(config.max_len, config.d_model)[:t])
    return ad.dropout(emb + pos, p_drop, rng)


def encode_batch(params, config, src_ids: np.ndarray, src_mask: np.ndarray,
                 rng=None) -> Tensor:
    """Encoder over [B, S] id rows (ID token at column 0, PAD-padded)."""
    p = config.dropout if rng is not None else 0.0
    x = _embed(params, "enc.embed", config, src_ids, rng, p)
    bias = _pad_bias(src_mask)
    for i in range(config.num_encoder_layers):
        x = _sublayer(
            x,
            lambda h, i=i: _attention(params, f"enc.{i}.attn", config, h, h, bias, rng, p),
            params, f"enc.{i}.ln1", rng, p,
        )
        x = _sublayer(x, lambda h, i=i: _ffn(params, f"enc.{i}.ffn", h),
                      params, f"enc.{i}.ln2", rng, p)
    return ad.layer_norm(x, params["enc.ln_f.g"], params["enc.ln_f.b"], LN_EPS)


def decode_batch(params, config, enc_hidden: Tensor, src_mask: np.ndarray,
                 dec_ids: np.ndarray, rng=None) -> tuple[Tensor, Tensor]:
    """Teacher-forced decoder pass; returns (logits [B,T,V], cwr [B,T,D]).

    enc_hidden may have batch dimension 1 to broadcast across dec rows.
    """
    p = config.dropout if rng is not None else 0.0
    t = dec_ids.shape[1]
    x = _embed(params, "dec.embed", config, dec_ids, rng, p)
    self_bias = _causal_bias(t)
    cross_bias = _pad_bias(src_mask)
    for i in range(config.num_decoder_layers):
        x = _sublayer(
            x,
            lambda h, i=i: _attention(params, f"dec.{i}.self_attn", config, h, h,
                                      self_bias, rng, p),
            params, f"dec.{i}.ln1", rng, p,
        )
        x = _sublayer(
            x,
            lambda h, i=i: _attention(params, f"dec.{i}.cross_attn", config, h,
                                      enc_hidden, cross_bias, rng, p),
            params, f"dec.{i}.ln2", rng, p,
        )
        x = _sublayer(x, lambda h, i=i: _ffn(params, f"dec.{i}.ffn", h),
                      params, f"dec.{i}.ln3", rng, p)
    cwr = ad.layer_norm(x, params["dec.ln_f.g"], params["dec.ln_f.b"], LN_EPS)
    logits = ad.matmul(cwr, params["out.w"]) + params["out.b"]
    return logits, cwr


def _check_ids(ids: Sequence[int], config: ModelConfig, limit: int, what: str):
    if len(ids) > limit:
        raise LengthError(f"{what} of length {len(ids)} exceeds max_len {config.max_len}")
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= config.vocab_size):
        raise ConfigError(f"{what} contains ids outside the vocabulary")
    return arr


def encode(tokens: Sequence[int], source_id: int, params: ModelParams,
           config: ModelConfig, rng=None) -> EncodedSource:
    tokens = _check_ids(tokens, config, config.max_len - 1, "source")
    ids = np.concatenate(([source_id], tokens)).astype(np.int64)[None, :]
    mask = np.ones(ids.shape, dtype=bool)
    hidden = encode_batch(params, config, ids, mask, rng)
    return EncodedSource(hidden=ad.reshape(hidden, hidden.shape[1:]), mask=mask[0])


def decode_teacher_forced(enc: EncodedSource, target_id: int,
                          gold_prefix: Sequence[int], params: ModelParams,
                          config: ModelConfig, rng=None) -> tuple[Tensor, Tensor]:
    """Logits and CWRs for decoder input [target_id; gold_prefix]."""
    gold_prefix = _check_ids(gold_prefix, config, config.max_len - 1, "target prefix")
    dec_ids = np.concatenate(([target_id], gold_prefix)).astype(np.int64)[None, :]
    enc_hidden = ad.reshape(enc.hidden, (1,) + enc.hidden.shape)
    logits, cwr = decode_batch(params, config, enc_hidden, enc.mask[None, :], dec_ids, rng)
    t = dec_ids.shape[1]
    return (ad.reshape(logits, (t, config.vocab_size)),
            ad.reshape(cwr, (t, config.d_model)))


def decode_step(enc: EncodedSource, target_id: int, prefix: Sequence[int],
                params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Log-probabilities of the next token after a model-generated prefix."""
    with ad.no_grad():
        logits, _ = decode_teacher_forced(enc, target_id, prefix, params, config)
        return ad.log_softmax_rows(logits).data[-1]
