"""Duration model and warping-matrix machinery.

The duration model reuses the phoneme-encoder architecture (same inputs:
phonemes plus accent embedding) with a scalar head, trained separately
with an L2 loss on log-durations. Predicted durations drive a per-phoneme
piecewise-linear warping matrix W (T_target x T_source, row-stochastic,
block-diagonal in phoneme spans); multiplying a latent sequence by W
resamples each phoneme's span to its new length.

Interpolation is center-aligned: target-local frame j of a span scaled
from s to t source frames reads fractional source position
(j + 0.5) * (s / t) - 0.5, clamped to [0, s - 1], with linear weights on
the two neighboring source frames. Equal durations give exactly the
identity matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ContractError, TrainingDivergedError, UnknownIdError
from .corpus import round_half_up
from .features import PhonemeEncoder
from .seeding import derive_int, derive_rng


class DurationModel(nn.Module):
    """Predicts log-durations from (phonemes, accent)."""

    def __init__(self, n_phonemes: int, n_accents: int,
                 phoneme_channels: int = 32, accent_dim: int = 4):
        super().__init__()
        self.encoder = PhonemeEncoder(n_phonemes, phoneme_channels, accent_dim)
        self.accent_embedding = nn.Embedding(n_accents, accent_dim)
        self.head = nn.Linear(phoneme_channels, 1)
        nn.init.zeros_(self.head.weight)  # all-ones durations at init
        nn.init.zeros_(self.head.bias)
        self.to(torch.float64)

    def log_durations(self, phonemes: torch.Tensor, accent_emb: torch.Tensor) -> torch.Tensor:
        enc = self.encoder(phonemes, accent_emb)
        return self.head(enc).squeeze(-1)

    def accent_vector(self, accent_index: int) -> torch.Tensor:
        n = self.accent_embedding.num_embeddings
        if not 0 <= accent_index < n:
            raise UnknownIdError(f"accent index {accent_index} outside table of size {n}")
        return self.accent_embedding.weight[accent_index]


def predict_durations(model: DurationModel, phonemes: list[int], accent_emb) -> list[int]:
    """round(exp(prediction)) clamped to >= 1, one per phoneme; ties round up."""
    if len(phonemes) == 0:
        return []
    emb = torch.as_tensor(np.asarray(accent_emb, dtype=np.float64))
    with torch.no_grad():
        log_d = model.log_durations(torch.as_tensor(phonemes, dtype=torch.int64), emb)
    raw = round_half_up(np.exp(log_d.numpy()))
    return [max(1, int(d)) for d in raw]


def predict_durations_for_accent(model: DurationModel, phonemes: list[int], accent_index: int) -> list[int]:
    return predict_durations(model, phonemes, model.accent_vector(accent_index).detach().numpy())


# ---------------------------------------------------------------------------
# warping matrix


@dataclass
class WarpMatrix:
    """Sparse row-stochastic T_target x T_source interpolation matrix with
    at most two nonzeros per row, block-diagonal in phoneme spans."""

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_rows, self.n_cols))
        np.add.at(dense, (self.rows, self.cols), self.weights)
        return dense

    def apply(self, z: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_rows, z.shape[1]), dtype=np.float64)
        np.add.at(out, self.rows, self.weights[:, None] * z[self.cols])
        return out

    def triplets(self) -> list[tuple[int, int, float]]:
        return [(int(r), int(c), float(w)) for r, c, w in zip(self.rows, self.cols, self.weights)]

    def dump_triplets(self, path: str | Path) -> None:
        """Debug dump: one "row col weight" line per nonzero entry."""
        lines = [f"{r} {c} {w!r}" for r, c, w in self.triplets()]
        Path(path).write_text("\n".join(lines) + "\n")


def build_warp_matrix(src_durations: list[int], tgt_durations: list[int]) -> WarpMatrix:
    """Per-phoneme center-aligned linear-interpolation matrix for the
    aligned case (equal phoneme counts)."""
    if len(src_durations) != len(tgt_durations):
        raise ContractError(
            f"phoneme counts differ: {len(src_durations)} source vs {len(tgt_durations)} target"
        )
    if len(src_durations) == 0:
        raise ContractError("cannot build a warp matrix for zero phonemes")
    if any(d < 1 for d in src_durations) or any(d < 1 for d in tgt_durations):
        raise ContractError("all durations must be >= 1")

    rows, cols, weights = [], [], []
    row_off = 0
    col_off = 0
    for s, t in zip(src_durations, tgt_durations):
        j = np.arange(t, dtype=np.float64)
        p = np.clip((j + 0.5) * (s / t) - 0.5, 0.0, s - 1.0)
        i0 = np.floor(p).astype(np.int64)
        frac = p - i0
        rows.extend(row_off + np.arange(t))
        cols.extend(col_off + i0)
        weights.extend(1.0 - frac)
        nz = frac > 0.0
        rows.extend(row_off + np.arange(t)[nz])
        cols.extend(col_off + i0[nz] + 1)
        weights.extend(frac[nz])
        row_off += t
        col_off += s

    order = np.lexsort((np.asarray(cols), np.asarray(rows)))
    return WarpMatrix(
        n_rows=row_off,
        n_cols=col_off,
        rows=np.asarray(rows, dtype=np.int64)[order],
        cols=np.asarray(cols, dtype=np.int64)[order],
        weights=np.asarray(weights, dtype=np.float64)[order],
    )


def warp(z, w: WarpMatrix):
    """z_warped = W x z: resamples the latent sequence to W.n_rows frames."""
    from .flow import LatentSequence

    arr = z.frames if isinstance(z, LatentSequence) else np.asarray(z, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError("latent must be T x D")
    if arr.shape[0] != w.n_cols:
        raise ContractError(f"warp matrix has {w.n_cols} columns but latent has {arr.shape[0]} frames")
    return LatentSequence(w.apply(arr))


# ---------------------------------------------------------------------------
# training


@dataclass
class DurationTraining:
    model: DurationModel
    loss_history: list[float] = field(default_factory=list)
    heldout_mae: float = float("nan")
    heldout_mean_duration: float = float("nan")


def _duration_items(corpus, split: str, accent_index: dict[str, int]):
    items = []
    for u in corpus.split(split):
        items.append(
            (
                torch.as_tensor(u.phoneme_seq.phonemes, dtype=torch.int64),
                accent_index[u.accent_id],
                torch.log(torch.as_tensor(u.phoneme_seq.durations, dtype=torch.float64)),
            )
        )
    return items


def duration_mae(model: DurationModel, corpus, split: str) -> tuple[float, float]:
    """(mean |predicted - true| duration, mean true duration) over a split."""
    accent_index = {a: i for i, a in enumerate(sorted(corpus.accents))}
    errors = []
    trues = []
    for u in corpus.split(split):
        pred = predict_durations_for_accent(model, u.phoneme_seq.phonemes, accent_index[u.accent_id])
        true = u.phoneme_seq.durations
        errors.extend(abs(p - t) for p, t in zip(pred, true))
        trues.extend(true)
    return float(np.mean(errors)), float(np.mean(trues))


def train_duration_model(corpus, run_config, seed: int) -> DurationTraining:
    """L2 regression of log-durations given (phonemes, accent)."""
    mc = run_config.model
    torch.manual_seed(derive_int(seed, "duration-init"))
    model = DurationModel(
        corpus.config.n_phonemes, corpus.config.n_accents,
        phoneme_channels=mc.phoneme_channels, accent_dim=mc.accent_dim,
    )
    accent_index = {a: i for i, a in enumerate(sorted(corpus.accents))}
    items = _duration_items(corpus, "train", accent_index)
    if not items:
        raise ContractError("corpus has no training utterances")

    cfg = run_config.train_duration
    rng = derive_rng(seed, "duration-batches")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    result = DurationTraining(model)
    for step in range(cfg.steps):
        idx = rng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)
        loss = 0.0
        count = 0
        for i in idx:
            phonemes, accent, target = items[i]
            pred = model.log_durations(phonemes, model.accent_embedding.weight[accent])
            loss = loss + ((pred - target) ** 2).sum()
            count += len(target)
        loss = loss / count
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"duration loss became non-finite at step {step}", step=step,
                history=result.loss_history[-20:],
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.loss_history.append(value)

    model.eval()
    result.heldout_mae, result.heldout_mean_duration = duration_mae(model, corpus, "test")
    return result
