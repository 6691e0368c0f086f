"""Experiment configuration: one flat key-value namespace covering every
stage, loadable from a plain-text file with CLI overrides on top."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import model as mdl
from . import trainer as tr
from .errors import ConfigError

# key -> (type, default); booleans parse from true/false
DEFAULTS: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "corpus.languages": (int, 4),
    "corpus.concepts": (int, 60),
    "corpus.train_sentences": (int, 8000),
    "corpus.dev_sentences": (int, 500),
    "corpus.test_sentences": (int, 500),
    "corpus.zipf": (bool, True),
    "corpus.unbalanced": (bool, False),
    "model.encoder_layers": (int, 2),
    "model.decoder_layers": (int, 2),
    "model.d_model": (int, 64),
    "model.heads": (int, 4),
    "model.ffn": (int, 128),
    "model.dropout": (float, 0.1),
    "model.max_len": (int, 32),
    "pretrain.lr": (float, 3e-3),
    "pretrain.steps": (int, 2000),
    "pretrain.warmup": (int, 300),
    "pretrain.max_tokens": (int, 1000),
    "pretrain.smoothing": (float, 0.1),
    "pretrain.checkpoint_every": (int, 1000),
    "tune.lr": (float, 3e-4),
    "tune.steps": (int, 500),
    "tune.warmup": (int, 1),
    "tune.max_tokens": (int, 1000),
    "tune.smoothing": (float, 0.1),
    "tune.ul_weight": (float, 1.0),
    "tune.checkpoint_every": (int, 50),
    "tune.per_sentence_negatives": (bool, False),
    "sampling.temperature": (float, 5.0),
    "eval.beam": (int, 5),
    "eval.length_penalty": (float, 1.0),
    "eval.limit": (int, 200),
    "eval.dynamics_limit": (int, 50),
    "select.probe": (int, 100),
    "select.threshold": (float, 0.01),
    "select.relative": (bool, False),
    "cwr.probe": (int, 200),
}

# seed offsets so every stage gets its own stream from the one global seed
_SEED_MODEL = 1
_SEED_PRETRAIN = 2
_SEED_TUNE = 3


def _parse_value(key: str, raw: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = DEFAULTS[key][0]
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def render(self) -> str:
        lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}"
                 for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    # -- stage configs -------------------------------------------------------

    def corpus_kwargs(self) -> dict:
        from .corpus import default_languages

        if self.values["corpus.languages"] < 4:
            raise ConfigError("need at least 4 languages for a nontrivial "
                              "negative-ID pool")
        return dict(
            languages=default_languages(self.values["corpus.languages"]),
            num_concept_sentences=self.values["corpus.train_sentences"],
            num_concepts=self.values["corpus.concepts"],
            seed=self.seed,
            dev_sentences=self.values["corpus.dev_sentences"],
            test_sentences=self.values["corpus.test_sentences"],
            zipf=self.values["corpus.zipf"],
            unbalanced=self.values["corpus.unbalanced"],
        )

    def model_config(self, vocab_size: int) -> mdl.ModelConfig:
        return mdl.ModelConfig(
            vocab_size=vocab_size,
            num_encoder_layers=self.values["model.encoder_layers"],
            num_decoder_layers=self.values["model.decoder_layers"],
            d_model=self.values["model.d_model"],
            num_heads=self.values["model.heads"],
            d_ffn=self.values["model.ffn"],
            dropout=self.values["model.dropout"],
            max_len=self.values["model.max_len"],
            seed=self.seed + _SEED_MODEL,
        )

    def pretrain_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(
            phase="pretrain",
            lr=self.values["pretrain.lr"],
            total_steps=self.values["pretrain.steps"],
            warmup_steps=self.values["pretrain.warmup"],
            max_tokens_per_batch=self.values["pretrain.max_tokens"],
            smoothing=self.values["pretrain.smoothing"],
            ul_weight=0.0,
            checkpoint_every=self.values["pretrain.checkpoint_every"],
            seed=self.seed + _SEED_PRETRAIN,
            sampling_temperature=self.values["sampling.temperature"],
        )

    def tune_config(self, phase: str) -> tr.TrainConfig:
        return tr.TrainConfig(
            phase=phase,
            lr=self.values["tune.lr"],
            total_steps=self.values["tune.steps"],
            warmup_steps=self.values["tune.warmup"],
            max_tokens_per_batch=self.values["tune.max_tokens"],
            smoothing=self.values["tune.smoothing"],
            ul_weight=self.values["tune.ul_weight"] if phase == "unions_tune" else 0.0,
            checkpoint_every=self.values["tune.checkpoint_every"],
            seed=self.seed + _SEED_TUNE,
            sampling_temperature=self.values["sampling.temperature"],
            per_sentence_negatives=self.values["tune.per_sentence_negatives"],
        )


def load_config(path: str | Path | None = None,
                overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the config file, then overrides (flags win)."""
    values = {k: v for k, (_, v) in DEFAULTS.items()}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            values[key.strip()] = _parse_value(key.strip(), raw)
    for key, raw in (overrides or {}).items():
        values[key] = _parse_value(key, str(raw))
    return ExperimentConfig(values)
