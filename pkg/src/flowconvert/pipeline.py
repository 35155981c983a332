"""The three conversion procedures, composed from trained components.

All modes share one encode step: the source mel is encoded to latents
under source-accent conditioning. They differ in what happens before the
decode step, which always uses the target phoneme sequence, the *source
speaker* embedding and the target accent embedding:

  remap              decode with source durations unchanged
  remap_warp         resample latents to predicted target durations with an
                     explicit warping matrix, then decode
  remap_warp_attend  attend from target-conditioning queries into the source
                     latents (no explicit alignment; handles unequal
                     phoneme counts), then decode
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flow as flow_ops
from .attention import AttentionBlock, attend, attention_entropy
from .corpus import Corpus, MelSpectrogram, PhonemeSequence, Utterance, g2p
from .duration import DurationModel, build_warp_matrix, predict_durations_for_accent, warp
from .errors import ContractError, ModeUnsupportedError, UnknownIdError
from .features import ConditioningStack
from .flow import FlowModel

CONVERSION_MODES = ("remap", "remap_warp", "remap_warp_attend")


@dataclass
class ModelBundle:
    """Frozen trained components plus the id-to-index maps they were
    trained with."""

    stack: ConditioningStack
    flow: FlowModel
    duration_model: DurationModel | None = None
    attention: AttentionBlock | None = None
    accent_index: dict[str, int] = field(default_factory=dict)
    speaker_index: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def require(self, component: str):
        value = getattr(self, component)
        if value is None:
            raise ContractError(f"model bundle is missing the {component} component")
        return value


@dataclass
class ConversionRequest:
    utterance: Utterance
    target_accent: str
    mode: str
    target_phonemes: list[int]
    allow_same_accent: bool = False

    def __post_init__(self):
        if self.mode not in CONVERSION_MODES:
            raise ContractError(f"unknown conversion mode {self.mode!r}")
        if self.target_accent == self.utterance.accent_id and not self.allow_same_accent:
            raise ContractError(
                "same-accent conversion requests are only allowed in reconstruction tests "
                "(pass allow_same_accent=True)"
            )


@dataclass
class ConversionResult:
    mel: MelSpectrogram
    target_phoneme_seq: PhonemeSequence
    mode: str
    diagnostics: dict = field(default_factory=dict)


def make_request(corpus: Corpus, utterance_id: str, target_accent: str, mode: str,
                 allow_same_accent: bool = False) -> ConversionRequest:
    """Resolve the target phoneme sequence for an utterance via the target
    accent's pronunciation table."""
    if target_accent not in corpus.accents:
        raise UnknownIdError(f"unknown accent {target_accent!r}")
    utterance = corpus.utterance(utterance_id)
    phonemes = g2p(utterance.text, corpus.accents[target_accent])
    return ConversionRequest(utterance, target_accent, mode, phonemes, allow_same_accent)


def _indices(models: ModelBundle, req: ConversionRequest) -> tuple[int, int, int]:
    u = req.utterance
    for name, table in (("speaker", models.speaker_index), ("accent", models.accent_index)):
        missing = []
        if name == "speaker" and u.speaker_id not in table:
            missing.append(u.speaker_id)
        if name == "accent":
            missing.extend(a for a in (u.accent_id, req.target_accent) if a not in table)
        if missing:
            raise UnknownIdError(f"{name} id(s) {missing} unknown to the model bundle")
    return (
        models.speaker_index[u.speaker_id],
        models.accent_index[u.accent_id],
        models.accent_index[req.target_accent],
    )


def _encode_source(models: ModelBundle, req: ConversionRequest):
    u = req.utterance
    spk, acc_src, _ = _indices(models, req)
    cond_src = models.stack.conditioning_t(
        u.phoneme_seq.phonemes, u.phoneme_seq.durations, spk, acc_src
    ).detach().numpy()
    z, log_det = flow_ops.inverse(models.flow, u.mel.frames, cond_src)
    return z, log_det


def _decode(models: ModelBundle, req: ConversionRequest, z, phonemes, durations):
    spk, _, acc_tgt = _indices(models, req)
    cond_tgt = models.stack.conditioning_t(list(phonemes), list(durations), spk, acc_tgt)
    mel = flow_ops.forward(models.flow, z, cond_tgt.detach().numpy())
    return mel


def _base_diagnostics(req: ConversionRequest, z, log_det) -> dict:
    return {
        "mode": req.mode,
        "source_frames": req.utterance.mel.frame_count,
        "latent_mean": float(np.mean(z.frames)),
        "latent_std": float(np.std(z.frames)),
        "encode_log_det": log_det,
    }


def convert_remap(req: ConversionRequest, models: ModelBundle) -> ConversionResult:
    """Swap phoneme and accent conditioning between encode and decode;
    durations stay those of the source utterance."""
    if req.mode != "remap":
        raise ContractError(f"convert_remap called with mode {req.mode!r}")
    src_seq = req.utterance.phoneme_seq
    if len(req.target_phonemes) != len(src_seq):
        raise ModeUnsupportedError(
            f"remap requires equal phoneme counts (source {len(src_seq)}, "
            f"target {len(req.target_phonemes)}); use remap_warp_attend"
        )
    z, log_det = _encode_source(models, req)
    mel = _decode(models, req, z, req.target_phonemes, src_seq.durations)
    diag = _base_diagnostics(req, z, log_det)
    diag["target_frames"] = mel.frame_count
    return ConversionResult(mel, PhonemeSequence(req.target_phonemes, list(src_seq.durations)),
                            req.mode, diag)


def convert_remap_warp(req: ConversionRequest, models: ModelBundle,
                       target_durations: list[int] | None = None) -> ConversionResult:
    """As remap, but the latents are resampled to target-accent durations
    with an explicit warping matrix before decoding. ``target_durations``
    overrides the duration model (used by reconstruction tests)."""
    if req.mode != "remap_warp":
        raise ContractError(f"convert_remap_warp called with mode {req.mode!r}")
    src_seq = req.utterance.phoneme_seq
    if len(req.target_phonemes) != len(src_seq):
        raise ModeUnsupportedError(
            f"remap_warp requires equal phoneme counts (source {len(src_seq)}, "
            f"target {len(req.target_phonemes)}); use remap_warp_attend"
        )
    if target_durations is None:
        duration_model = models.require("duration_model")
        target_durations = predict_durations_for_accent(
            duration_model, req.target_phonemes, models.accent_index[req.target_accent]
        )
    z, log_det = _encode_source(models, req)
    w = build_warp_matrix(src_seq.durations, target_durations)
    z_warped = warp(z, w)
    mel = _decode(models, req, z_warped, req.target_phonemes, target_durations)
    diag = _base_diagnostics(req, z, log_det)
    diag.update(target_frames=mel.frame_count, warp_rows=w.n_rows, warp_cols=w.n_cols)
    return ConversionResult(mel, PhonemeSequence(req.target_phonemes, target_durations),
                            req.mode, diag)


def convert_remap_warp_attend(req: ConversionRequest, models: ModelBundle) -> ConversionResult:
    """Attention-aligned conversion: no equal-length restriction. Queries
    are the frame-rate target conditioning at predicted target durations;
    the attended latents are decoded under that same conditioning."""
    if req.mode != "remap_warp_attend":
        raise ContractError(f"convert_remap_warp_attend called with mode {req.mode!r}")
    duration_model = models.require("duration_model")
    block = models.require("attention")
    spk, _, acc_tgt = _indices(models, req)
    target_durations = predict_durations_for_accent(
        duration_model, req.target_phonemes, models.accent_index[req.target_accent]
    )
    z, log_det = _encode_source(models, req)
    queries = models.stack.conditioning_t(
        req.target_phonemes, target_durations, spk, acc_tgt
    ).detach().numpy()
    z_aligned = attend(block, queries, z)
    mel = flow_ops.forward(models.flow, z_aligned, queries)

    import torch
    with torch.no_grad():
        _, attn = block(
            torch.from_numpy(queries).unsqueeze(0), torch.from_numpy(z.frames).unsqueeze(0),
            [queries.shape[0]], [z.frames.shape[0]],
        )
    diag = _base_diagnostics(req, z, log_det)
    diag.update(target_frames=mel.frame_count,
                attention_entropy=attention_entropy(attn, [queries.shape[0]]))
    return ConversionResult(mel, PhonemeSequence(req.target_phonemes, target_durations),
                            req.mode, diag)


_CONVERTERS = {
    "remap": convert_remap,
    "remap_warp": convert_remap_warp,
    "remap_warp_attend": convert_remap_warp_attend,
}


def convert(req: ConversionRequest, models: ModelBundle) -> ConversionResult:
    return _CONVERTERS[req.mode](req, models)


def run_requests(requests: list[ConversionRequest], models: ModelBundle):
    """Convert a batch of requests with row-level error isolation: returns
    a list of (request, result-or-None, error-message-or-None)."""
    rows = []
    for req in requests:
        try:
            rows.append((req, convert(req, models), None))
        except (ContractError, UnknownIdError) as exc:
            rows.append((req, None, f"{type(exc).__name__}: {exc}"))
    return rows
