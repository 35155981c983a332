"""Run configuration: a sectioned key=value file covering corpus,
model, training and evaluation settings.

A run is reproducible from (config, seed); the canonical text of the
config is hashed and the hash is embedded in every artifact (corpus
manifest, checkpoints, evaluation reports) so a run directory can be
checked for provenance consistency.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class CorpusConfig:
    """Knobs of the synthetic corpus generator.

    Magnitudes of the accent/speaker factors are free parameters; the
    defaults are sized so that accents and speakers are linearly separable
    from frame statistics and a conversion model can be trained on one CPU
    in minutes.
    """

    n_accents: int = 4
    n_speakers: int = 8
    n_words: int = 200
    n_phonemes: int = 40
    utterances_per_speaker: int = 50
    mel_dim: int = 16
    words_per_utterance_min: int = 3
    words_per_utterance_max: int = 8
    phonemes_per_word_min: int = 2
    phonemes_per_word_max: int = 4
    # durations (frames)
    base_duration_min: int = 2
    base_duration_max: int = 8
    duration_jitter: int = 1
    tempo_min: float = 0.75
    tempo_max: float = 1.45
    tempo_phoneme_jitter: float = 0.15
    # accent pronunciation differences
    n_phoneme_substitutions: int = 10
    shift_word_fraction: float = 0.25
    resize_word_fraction: float = 0.10
    # spectral factor scales
    template_scale: float = 1.0
    accent_shift_scale: float = 0.8
    timbre_scale: float = 0.8
    noise_min: float = 0.03
    noise_max: float = 0.08
    trajectory_amp_min: float = 0.3
    trajectory_amp_max: float = 0.7
    intonation_min: float = 0.85
    intonation_max: float = 1.25
    # split fractions (per speaker, by utterance index)
    train_fraction: float = 0.70
    calib_fraction: float = 0.15

    def validate(self) -> None:
        positive_ints = [
            "n_accents", "n_speakers", "n_words", "n_phonemes",
            "utterances_per_speaker", "mel_dim",
            "words_per_utterance_min", "words_per_utterance_max",
            "phonemes_per_word_min", "phonemes_per_word_max",
            "base_duration_min", "base_duration_max",
        ]
        for name in positive_ints:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"corpus.{name} must be positive, got {getattr(self, name)}")
        if self.n_accents < 2:
            raise ConfigurationError("corpus.n_accents must be >= 2")
        if self.n_speakers < 2:
            raise ConfigurationError("corpus.n_speakers must be >= 2")
        if self.duration_jitter < 0:
            raise ConfigurationError("corpus.duration_jitter must be >= 0")
        if self.words_per_utterance_min > self.words_per_utterance_max:
            raise ConfigurationError("corpus.words_per_utterance_min > max")
        if self.phonemes_per_word_min > self.phonemes_per_word_max:
            raise ConfigurationError("corpus.phonemes_per_word_min > max")
        if self.base_duration_min > self.base_duration_max:
            raise ConfigurationError("corpus.base_duration_min > max")
        if not (0.0 < self.tempo_min <= self.tempo_max):
            raise ConfigurationError("corpus tempo range must be positive and ordered")
        if self.n_phoneme_substitutions < 0 or self.n_phoneme_substitutions > self.n_phonemes:
            raise ConfigurationError("corpus.n_phoneme_substitutions out of range")
        for name in ("shift_word_fraction", "resize_word_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigurationError(f"corpus.{name} must be in [0, 1]")
        if self.noise_min < 0 or self.noise_min > self.noise_max:
            raise ConfigurationError("corpus noise range invalid")
        if not (0.0 < self.train_fraction < 1.0) or not (0.0 < self.calib_fraction < 1.0):
            raise ConfigurationError("corpus split fractions must be in (0, 1)")
        if self.train_fraction + self.calib_fraction >= 1.0:
            raise ConfigurationError("corpus split fractions leave no test data")


@dataclass
class ModelConfig:
    flow_steps: int = 8
    coupling_hidden: int = 64
    log_scale_bound: float = 5.0
    phoneme_channels: int = 32
    speaker_dim: int = 8
    accent_dim: int = 4
    attention_heads: int = 2
    attention_head_dim: int = 16
    attention_pos_channels: int = 16
    time_dropout_rate: float = 0.3

    def validate(self) -> None:
        for name in ("flow_steps", "coupling_hidden", "phoneme_channels",
                     "speaker_dim", "accent_dim", "attention_heads",
                     "attention_head_dim", "attention_pos_channels"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"model.{name} must be positive")
        if self.log_scale_bound <= 0:
            raise ConfigurationError("model.log_scale_bound must be positive")
        if not (0.0 <= self.time_dropout_rate <= 1.0):
            raise ConfigurationError("model.time_dropout_rate must be in [0, 1]")


@dataclass
class StageConfig:
    steps: int
    batch_size: int
    learning_rate: float

    def validate(self, stage: str) -> None:
        if self.steps < 0:
            raise ConfigurationError(f"train.{stage}.steps must be >= 0")
        if self.batch_size <= 0:
            raise ConfigurationError(f"train.{stage}.batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"train.{stage}.learning_rate must be positive")


@dataclass
class EvalConfig:
    modes: tuple[str, ...] = ("remap", "remap_warp", "remap_warp_attend")
    alpha: float = 0.05

    def validate(self) -> None:
        from .pipeline import CONVERSION_MODES

        for mode in self.modes:
            if mode not in CONVERSION_MODES:
                raise ConfigurationError(f"eval.modes contains unknown mode {mode!r}")
        if not (0.0 < self.alpha < 1.0):
            raise ConfigurationError("eval.alpha must be in (0, 1)")


@dataclass
class RunConfig:
    seed: int = 7
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_flow: StageConfig = field(default_factory=lambda: StageConfig(2000, 8, 1e-3))
    train_duration: StageConfig = field(default_factory=lambda: StageConfig(1000, 32, 1e-3))
    train_attention: StageConfig = field(default_factory=lambda: StageConfig(1000, 8, 1e-3))
    train_classifiers: StageConfig = field(default_factory=lambda: StageConfig(800, 32, 1e-2))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.corpus.validate()
        self.model.validate()
        self.train_flow.validate("flow")
        self.train_duration.validate("duration")
        self.train_attention.validate("attention")
        self.train_classifiers.validate("classifiers")
        self.eval.validate()

    # -- serialization ----------------------------------------------------

    def to_ini_text(self) -> str:
        """Canonical sectioned text; parsing it back reproduces the config."""
        parser = configparser.ConfigParser()
        parser["run"] = {"seed": str(self.seed)}
        parser["corpus"] = {f.name: _fmt(getattr(self.corpus, f.name)) for f in fields(self.corpus)}
        parser["model"] = {f.name: _fmt(getattr(self.model, f.name)) for f in fields(self.model)}
        for stage, cfg in self._stages().items():
            parser[f"train.{stage}"] = {f.name: _fmt(getattr(cfg, f.name)) for f in fields(cfg)}
        parser["eval"] = {"modes": ",".join(self.eval.modes), "alpha": _fmt(self.eval.alpha)}
        out = io.StringIO()
        parser.write(out)
        return out.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini_text().encode("utf-8")).hexdigest()[:16]

    def _stages(self) -> dict[str, StageConfig]:
        return {
            "flow": self.train_flow,
            "duration": self.train_duration,
            "attention": self.train_attention,
            "classifiers": self.train_classifiers,
        }

    @classmethod
    def from_file(cls, path: str | Path, seed_override: int | None = None) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigurationError(f"config file not found: {path}")
        try:
            cfg = cls._from_parser(parser)
        except (ValueError, KeyError) as exc:
            raise ConfigurationError(f"bad config file {path}: {exc}") from exc
        if seed_override is not None:
            cfg.seed = seed_override
        cfg.validate()
        return cfg

    @classmethod
    def _from_parser(cls, parser: configparser.ConfigParser) -> "RunConfig":
        cfg = cls()
        if parser.has_section("run") and parser.has_option("run", "seed"):
            cfg.seed = int(parser.get("run", "seed"))
        _fill(cfg.corpus, parser, "corpus")
        _fill(cfg.model, parser, "model")
        for stage, stage_cfg in cfg._stages().items():
            _fill(stage_cfg, parser, f"train.{stage}")
        if parser.has_section("eval"):
            if parser.has_option("eval", "modes"):
                modes = tuple(m.strip() for m in parser.get("eval", "modes").split(",") if m.strip())
                cfg.eval.modes = modes
            if parser.has_option("eval", "alpha"):
                cfg.eval.alpha = float(parser.get("eval", "alpha"))
            _check_known(parser, "eval", {"modes", "alpha"})
        return cfg


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fill(obj, parser: configparser.ConfigParser, section: str) -> None:
    if not parser.has_section(section):
        return
    known = {f.name: f.type for f in fields(obj)}
    _check_known(parser, section, set(known))
    for name in known:
        if not parser.has_option(section, name):
            continue
        raw = parser.get(section, name)
        current = getattr(obj, name)
        if isinstance(current, bool):
            setattr(obj, name, parser.getboolean(section, name))
        elif isinstance(current, int):
            setattr(obj, name, int(raw))
        elif isinstance(current, float):
            setattr(obj, name, float(raw))
        else:
            setattr(obj, name, raw)


def _check_known(parser: configparser.ConfigParser, section: str, known: set[str]) -> None:
    unknown = set(parser.options(section)) - known
    if unknown:
        raise ConfigurationError(
            f"unknown option(s) in [{section}]: {', '.join(sorted(unknown))}"
        )
