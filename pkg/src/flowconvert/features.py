"""Conditioning stack: phoneme / speaker / accent embeddings, a small
phoneme encoder, and duration-driven upsampling to frame rate.

Channel layout of the frame conditioning, fixed and relied upon by tests:

    [0 : C_ph)                 upsampled phoneme encodings
    [C_ph : C_ph+S)            speaker embedding, constant across time
    [C_ph+S : C_ph+S+A)        accent embedding, constant across time

Speaker and accent embeddings are plain trainable lookup tables; they are
broadcast to every frame and concatenated with the upsampled encodings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .corpus import PhonemeSequence
from .errors import ContractError, UnknownIdError


@dataclass
class EmbeddingTable:
    """A read-only view of one of the lookup tables."""

    kind: str  # phoneme | speaker | accent
    dim: int
    rows: np.ndarray


@dataclass
class FrameConditioning:
    """T x C conditioning matrix at frame rate."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError(f"conditioning must be T x C with T >= 1, got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_channels(self) -> int:
        return self.frames.shape[1]


class PhonemeEncoder(nn.Module):
    """Embedding lookup plus two residual local-context mixing layers.

    The accent embedding is concatenated to every position before the
    mixing layers, so accent reaches every phoneme encoding.
    """

    def __init__(self, n_phonemes: int, channels: int, accent_dim: int):
        super().__init__()
        self.n_phonemes = n_phonemes
        self.channels = channels
        self.embedding = nn.Embedding(n_phonemes, channels)
        self.input_proj = nn.Linear(channels + accent_dim, channels)
        self.mix1 = nn.Conv1d(channels, channels, kernel_size=3, padding=1)
        self.mix2 = nn.Conv1d(channels, channels, kernel_size=3, padding=1)
        self.to(torch.float64)

    def forward(self, phonemes: torch.Tensor, accent_emb: torch.Tensor) -> torch.Tensor:
        """(N,) int64 phoneme ids + (A,) accent vector -> (N, channels)."""
        if phonemes.numel() == 0:
            return torch.zeros((0, self.channels), dtype=torch.float64)
        if int(phonemes.min()) < 0 or int(phonemes.max()) >= self.n_phonemes:
            raise UnknownIdError(f"phoneme id outside vocabulary of size {self.n_phonemes}")
        h = self.embedding(phonemes)
        acc = accent_emb.unsqueeze(0).expand(h.shape[0], -1)
        h = torch.tanh(self.input_proj(torch.cat([h, acc], dim=1)))
        h = h.T.unsqueeze(0)  # 1 x C x N
        h = h + torch.tanh(self.mix1(h))
        h = h + torch.tanh(self.mix2(h))
        return h.squeeze(0).T


class ConditioningStack(nn.Module):
    """All conditioning parameters of the conversion model."""

    def __init__(self, n_phonemes: int, n_speakers: int, n_accents: int,
                 phoneme_channels: int = 32, speaker_dim: int = 8, accent_dim: int = 4):
        super().__init__()
        self.encoder = PhonemeEncoder(n_phonemes, phoneme_channels, accent_dim)
        self.speaker_embedding = nn.Embedding(n_speakers, speaker_dim)
        self.accent_embedding = nn.Embedding(n_accents, accent_dim)
        self.phoneme_channels = phoneme_channels
        self.speaker_dim = speaker_dim
        self.accent_dim = accent_dim
        self.to(torch.float64)

    @property
    def cond_dim(self) -> int:
        return self.phoneme_channels + self.speaker_dim + self.accent_dim

    def speaker_vector(self, speaker_index: int) -> torch.Tensor:
        n = self.speaker_embedding.num_embeddings
        if not 0 <= speaker_index < n:
            raise UnknownIdError(f"speaker index {speaker_index} outside table of size {n}")
        return self.speaker_embedding.weight[speaker_index]

    def accent_vector(self, accent_index: int) -> torch.Tensor:
        n = self.accent_embedding.num_embeddings
        if not 0 <= accent_index < n:
            raise UnknownIdError(f"accent index {accent_index} outside table of size {n}")
        return self.accent_embedding.weight[accent_index]

    def embedding_table(self, kind: str) -> EmbeddingTable:
        tables = {
            "phoneme": self.encoder.embedding,
            "speaker": self.speaker_embedding,
            "accent": self.accent_embedding,
        }
        if kind not in tables:
            raise UnknownIdError(f"no embedding table of kind {kind!r}")
        weight = tables[kind].weight.detach().numpy().copy()
        return EmbeddingTable(kind=kind, dim=weight.shape[1], rows=weight)

    # -- torch-side assembly (used by trainers and the pipeline) -----------

    def conditioning_t(self, phonemes: list[int], durations: list[int],
                       speaker_index: int, accent_index: int) -> torch.Tensor:
        """(T, cond_dim) frame conditioning as a torch tensor."""
        if len(phonemes) == 0 or sum(durations) < 1:
            raise ContractError("conditioning requires at least one phoneme and one frame")
        acc = self.accent_vector(accent_index)
        spk = self.speaker_vector(speaker_index)
        enc = self.encoder(torch.as_tensor(phonemes, dtype=torch.int64), acc)
        frames = upsample_t(enc, durations)
        t = frames.shape[0]
        return torch.cat(
            [frames, spk.unsqueeze(0).expand(t, -1), acc.unsqueeze(0).expand(t, -1)], dim=1
        )


def upsample_t(encodings: torch.Tensor, durations: list[int]) -> torch.Tensor:
    if encodings.shape[0] != len(durations):
        raise ContractError(
            f"{encodings.shape[0]} encodings but {len(durations)} durations"
        )
    if any(d < 1 for d in durations):
        raise ContractError("all durations must be >= 1")
    if encodings.shape[0] == 0:
        return encodings
    return torch.repeat_interleave(encodings, torch.as_tensor(durations, dtype=torch.int64), dim=0)


# -- numpy-facing operations ------------------------------------------------


def phoneme_encoder(stack: ConditioningStack, phonemes: list[int], accent_emb: np.ndarray) -> np.ndarray:
    """One encoding per input phoneme (N x C_ph), accent-aware."""
    with torch.no_grad():
        out = stack.encoder(
            torch.as_tensor(list(phonemes), dtype=torch.int64),
            torch.as_tensor(np.asarray(accent_emb, dtype=np.float64)),
        )
    return out.numpy()


def upsample(encodings: np.ndarray, durations: list[int]) -> np.ndarray:
    """Repeat encoding k ``durations[k]`` times, in order."""
    encodings = np.asarray(encodings)
    if encodings.ndim != 2:
        raise ContractError("encodings must be N x C")
    if encodings.shape[0] != len(durations):
        raise ContractError(f"{encodings.shape[0]} encodings but {len(durations)} durations")
    if any(d < 1 for d in durations):
        raise ContractError("all durations must be >= 1")
    return np.repeat(encodings, np.asarray(durations, dtype=np.int64), axis=0)


def build_conditioning(stack: ConditioningStack, phoneme_seq: PhonemeSequence,
                       speaker_emb: np.ndarray, accent_emb: np.ndarray) -> FrameConditioning:
    """Frame-level concatenation of upsampled phoneme encodings with
    broadcast speaker and accent embeddings."""
    if len(phoneme_seq) == 0:
        raise ContractError("cannot build conditioning for an empty phoneme sequence")
    speaker_emb = np.asarray(speaker_emb, dtype=np.float64)
    accent_emb = np.asarray(accent_emb, dtype=np.float64)
    enc = phoneme_encoder(stack, phoneme_seq.phonemes, accent_emb)
    frames = upsample(enc, phoneme_seq.durations)
    t = frames.shape[0]
    full = np.concatenate(
        [frames, np.tile(speaker_emb, (t, 1)), np.tile(accent_emb, (t, 1))], axis=1
    )
    return FrameConditioning(full)
