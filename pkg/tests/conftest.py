"""Shared fixtures.

`small_run` trains a scaled-down pipeline once per session for the
integration tests; `default_run` trains the full default configuration
and is what the acceptance suite exercises.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import pytest

from flowconvert import generate_corpus
from flowconvert.attention import train_attention
from flowconvert.config import CorpusConfig, RunConfig, StageConfig
from flowconvert.corpus import Corpus
from flowconvert.duration import train_duration_model
from flowconvert.evaluation import train_classifiers
from flowconvert.flow import train_flow
from flowconvert.pipeline import ModelBundle


def small_run_config() -> RunConfig:
    rc = RunConfig()
    rc.corpus = CorpusConfig(
        n_accents=3, n_speakers=4, n_words=80, n_phonemes=16,
        utterances_per_speaker=18, mel_dim=8,
        template_scale=1.5, noise_min=0.02, noise_max=0.05,
    )
    rc.model.flow_steps = 6
    rc.model.coupling_hidden = 48
    rc.train_flow = StageConfig(350, 8, 2e-3)
    rc.train_duration = StageConfig(300, 24, 3e-3)
    rc.train_attention = StageConfig(250, 8, 2e-3)
    rc.train_classifiers = StageConfig(400, 32, 1e-2)
    return rc


@dataclass
class TrainedRun:
    run_config: RunConfig
    corpus: Corpus
    bundle: ModelBundle
    classifiers: dict
    flow_training: object
    duration_training: object
    attention_training: object
    wall_seconds: float


def _train_everything(rc: RunConfig) -> TrainedRun:
    t0 = time.time()
    corpus = generate_corpus(rc.corpus, rc.seed)
    fl = train_flow(corpus, rc, rc.seed)
    du = train_duration_model(corpus, rc, rc.seed)
    at = train_attention(corpus, fl.stack, fl.flow, rc, rc.seed)
    clf = train_classifiers(corpus, rc, rc.seed)
    bundle = ModelBundle(
        stack=fl.stack, flow=fl.flow, duration_model=du.model, attention=at.block,
        accent_index={a: i for i, a in enumerate(sorted(corpus.accents))},
        speaker_index={s: i for i, s in enumerate(sorted(corpus.speakers))},
        config_hash=rc.config_hash(), seed=rc.seed,
    )
    return TrainedRun(rc, corpus, bundle, clf, fl, du, at, time.time() - t0)


@pytest.fixture(scope="session")
def small_run() -> TrainedRun:
    return _train_everything(small_run_config())


@pytest.fixture(scope="session")
def default_run() -> TrainedRun:
    return _train_everything(RunConfig())


@pytest.fixture(scope="session")
def default_corpus(default_run) -> Corpus:
    return default_run.corpus
