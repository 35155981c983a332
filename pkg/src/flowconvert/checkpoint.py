"""Checkpoint persistence: each training stage saves one self-describing
array container holding the stage's state dict plus a manifest (format
version, kind, dims, config hash, seed, step count and final loss)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .arrayio import load_arrays, save_arrays
from .config import RunConfig
from .corpus import Corpus
from .duration import DurationModel
from .errors import ContractError, StageOrderingError
from .evaluation import FrameWindowNet, PHONEME_WINDOW, PooledNet, ProxyClassifier
from .features import ConditioningStack
from .flow import FlowModel
from .pipeline import ModelBundle

STAGES = ("flow", "duration", "attention", "classifiers")


def _state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state)


def save_stage(out_dir: str | Path, stage: str, modules: dict[str, torch.nn.Module],
               run_config: RunConfig, extra: dict | None = None,
               loss_history: list[float] | None = None) -> Path:
    out_dir = Path(out_dir)
    arrays = {}
    for name, module in modules.items():
        for key, value in _state_arrays(module).items():
            arrays[f"{name}.{key}"] = value
    meta = {
        "kind": f"checkpoint/{stage}",
        "config_hash": run_config.config_hash(),
        "seed": run_config.seed,
        "extra": extra or {},
    }
    path = out_dir / f"{stage}.fca"
    save_arrays(path, arrays, meta)
    if loss_history is not None:
        with open(out_dir / f"{stage}_loss.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for i, value in enumerate(loss_history):
                writer.writerow([i, f"{value:.8f}"])
    return path


def stage_path(checkpoint_dir: str | Path, stage: str) -> Path:
    return Path(checkpoint_dir) / f"{stage}.fca"


def require_stage(checkpoint_dir: str | Path, stage: str, needed_for: str) -> Path:
    path = stage_path(checkpoint_dir, stage)
    if not path.exists():
        raise StageOrderingError(
            f"stage {needed_for!r} requires a {stage!r} checkpoint; "
            f"run `flowconvert train --stage {stage}` first (looked at {path})"
        )
    return path


def load_stage_meta(checkpoint_dir: str | Path, stage: str) -> dict:
    _, meta = load_arrays(stage_path(checkpoint_dir, stage))
    return meta


def _build_stack_and_flow(run_config: RunConfig, corpus: Corpus):
    mc = run_config.model
    stack = ConditioningStack(
        corpus.config.n_phonemes, corpus.config.n_speakers, corpus.config.n_accents,
        phoneme_channels=mc.phoneme_channels, speaker_dim=mc.speaker_dim,
        accent_dim=mc.accent_dim,
    )
    flow = FlowModel(
        corpus.config.mel_dim, stack.cond_dim, n_steps=mc.flow_steps,
        hidden=mc.coupling_hidden, log_scale_bound=mc.log_scale_bound,
    )
    return stack, flow


def load_bundle(checkpoint_dir: str | Path, run_config: RunConfig, corpus: Corpus,
                need: tuple[str, ...] = ("flow", "duration", "attention")) -> ModelBundle:
    """Reconstruct the trained components of a run directory."""
    from .attention import AttentionBlock

    checkpoint_dir = Path(checkpoint_dir)
    mc = run_config.model

    stack, flow = _build_stack_and_flow(run_config, corpus)
    duration_model = None
    attention = None

    if "flow" in need:
        arrays, meta = load_arrays(require_stage(checkpoint_dir, "flow", "load_bundle"))
        _load_state(stack, arrays, "stack.")
        _load_state(flow, arrays, "flow.")
        config_hash, seed = meta["config_hash"], meta["seed"]
    else:
        raise ContractError("load_bundle always needs the flow stage")

    if "duration" in need:
        arrays, _ = load_arrays(require_stage(checkpoint_dir, "duration", "load_bundle"))
        duration_model = DurationModel(
            corpus.config.n_phonemes, corpus.config.n_accents,
            phoneme_channels=mc.phoneme_channels, accent_dim=mc.accent_dim,
        )
        _load_state(duration_model, arrays, "duration.")
        duration_model.eval()

    if "attention" in need:
        arrays, _ = load_arrays(require_stage(checkpoint_dir, "attention", "load_bundle"))
        attention = AttentionBlock(
            query_dim=stack.cond_dim, value_dim=corpus.config.mel_dim,
            n_heads=mc.attention_heads, head_dim=mc.attention_head_dim,
            pos_channels=mc.attention_pos_channels,
        )
        _load_state(attention, arrays, "attention.")
        attention.eval()

    stack.eval()
    flow.eval()
    accent_index = {a: i for i, a in enumerate(sorted(corpus.accents))}
    speaker_index = {s: i for i, s in enumerate(sorted(corpus.speakers))}
    return ModelBundle(
        stack=stack, flow=flow, duration_model=duration_model, attention=attention,
        accent_index=accent_index, speaker_index=speaker_index,
        config_hash=config_hash, seed=seed,
    )


def save_classifiers(out_dir: str | Path, classifiers: dict[str, ProxyClassifier],
                     run_config: RunConfig) -> Path:
    modules = {kind: clf.module for kind, clf in classifiers.items()}
    extra = {"labels": {kind: list(clf.labels) for kind, clf in classifiers.items()}}
    return save_stage(out_dir, "classifiers", modules, run_config, extra=extra)


def load_classifiers(checkpoint_dir: str | Path, run_config: RunConfig,
                     corpus: Corpus) -> dict[str, ProxyClassifier]:
    arrays, meta = load_arrays(require_stage(checkpoint_dir, "classifiers", "load_classifiers"))
    d = corpus.config.mel_dim
    labels = meta["extra"]["labels"]
    out = {}
    builders = {
        "accent": lambda: PooledNet(2 * d, len(labels["accent"])),
        "speaker": lambda: PooledNet(2 * d, len(labels["speaker"])),
        "phoneme": lambda: FrameWindowNet((2 * PHONEME_WINDOW + 1) * d, corpus.config.n_phonemes),
    }
    for kind, build in builders.items():
        module = build()
        _load_state(module, arrays, f"{kind}.")
        module.eval()
        kind_labels = labels[kind] if kind != "phoneme" else [int(p) for p in labels[kind]]
        out[kind] = ProxyClassifier(kind, kind_labels, module, trained=True)
    return out
