"""Denoising attention aligner.

Frame-rate phoneme conditioning (the decode-side conditioning of the
flow) forms the queries; the latent sequence forms keys and values. The
block is trained to reconstruct clean latents from time-dropout-corrupted
ones with an L2 loss; the corruption is what keeps it from collapsing
into an identity map. Sinusoidal channels over *relative* position are
appended to queries and keys so the block can express a monotonic-ish
alignment even between sequences of different lengths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ContractError, TrainingDivergedError
from .seeding import derive_int, derive_rng


@dataclass
class TimeDropoutConfig:
    rate: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rate <= 1.0):
            raise ContractError(f"time-dropout rate must be in [0, 1], got {self.rate}")


def time_dropout(z, cfg: TimeDropoutConfig) -> np.ndarray:
    """Zero each frame independently with probability cfg.rate; surviving
    frames are not rescaled. Deterministic given cfg.seed."""
    from .flow import LatentSequence

    arr = z.frames if isinstance(z, LatentSequence) else np.asarray(z, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError("latent must be T x D")
    rng = np.random.default_rng(cfg.seed)
    keep = rng.random(arr.shape[0]) >= cfg.rate
    return arr * keep[:, None]


def positional_channels(length: int, n_channels: int) -> np.ndarray:
    """Sinusoids over relative position (t + 0.5) / length; shape (length, n_channels)."""
    if n_channels % 2 != 0:
        raise ContractError("positional channel count must be even")
    rel = (np.arange(length) + 0.5) / length
    freqs = np.arange(1, n_channels // 2 + 1)
    angles = 2.0 * np.pi * rel[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class AttentionBlock(nn.Module):
    """Multi-head scaled dot-product attention from frame conditioning
    queries onto latent keys/values; output length equals query length."""

    def __init__(self, query_dim: int, value_dim: int, n_heads: int = 2,
                 head_dim: int = 16, pos_channels: int = 16):
        super().__init__()
        if n_heads < 1 or head_dim < 1:
            raise ContractError("attention needs n_heads >= 1 and head_dim >= 1")
        self.query_dim = query_dim
        self.value_dim = value_dim
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.pos_channels = pos_channels
        m = n_heads * head_dim
        self.query_proj = nn.Linear(query_dim + pos_channels, m)
        self.key_proj = nn.Linear(value_dim + pos_channels, m)
        self.value_proj = nn.Linear(value_dim, m)
        self.output_proj = nn.Linear(m, value_dim)
        self.to(torch.float64)

    def _with_positions(self, x: torch.Tensor, lengths: list[int]) -> torch.Tensor:
        """Append relative-position channels; padded tail gets zeros."""
        b, t_max, _ = x.shape
        pos = torch.zeros(b, t_max, self.pos_channels, dtype=torch.float64)
        for i, n in enumerate(lengths):
            pos[i, :n] = torch.from_numpy(positional_channels(n, self.pos_channels))
        return torch.cat([x, pos], dim=2)

    def forward(self, queries: torch.Tensor, keys_values: torch.Tensor,
                query_lengths: list[int], kv_lengths: list[int]):
        """queries (B, Tq, Cq), keys_values (B, Ts, D) -> (output (B, Tq, D),
        attention weights (B, H, Tq, Ts)). Padded key positions get zero
        attention; padded query rows are garbage and must be masked by the
        caller."""
        b, t_q, _ = queries.shape
        t_s = keys_values.shape[1]
        q = self.query_proj(self._with_positions(queries, query_lengths))
        k = self.key_proj(self._with_positions(keys_values, kv_lengths))
        v = self.value_proj(keys_values)

        def split(x):
            return x.reshape(b, -1, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)  # B x H x T x hd
        scores = q @ k.transpose(2, 3) / math.sqrt(self.head_dim)
        kv_mask = torch.zeros(b, 1, 1, t_s, dtype=torch.bool)
        for i, n in enumerate(kv_lengths):
            kv_mask[i, 0, 0, n:] = True
        scores = scores.masked_fill(kv_mask, -torch.inf)
        attn = torch.softmax(scores, dim=3)
        out = (attn @ v).transpose(1, 2).reshape(b, t_q, -1)
        return self.output_proj(out), attn


def attend(block: AttentionBlock, queries, z) -> "np.ndarray":
    """Single-utterance attention: (T_q x C queries, T_s x D latents) ->
    T_q x D aligned latents."""
    from .features import FrameConditioning
    from .flow import LatentSequence

    q = queries.frames if isinstance(queries, FrameConditioning) else np.asarray(queries, dtype=np.float64)
    s = z.frames if isinstance(z, LatentSequence) else np.asarray(z, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] < 1:
        raise ContractError("queries must be T_q x C with T_q >= 1")
    if s.ndim != 2 or s.shape[0] < 1:
        raise ContractError("latents must be T_s x D with T_s >= 1")
    if q.shape[1] != block.query_dim:
        raise ContractError(f"queries have {q.shape[1]} channels, block expects {block.query_dim}")
    if s.shape[1] != block.value_dim:
        raise ContractError(f"latents have {s.shape[1]} channels, block expects {block.value_dim}")
    with torch.no_grad():
        out, _ = block(
            torch.from_numpy(q).unsqueeze(0), torch.from_numpy(s).unsqueeze(0),
            [q.shape[0]], [s.shape[0]],
        )
    return LatentSequence(out.squeeze(0).numpy())


def attention_entropy(attn: torch.Tensor, query_lengths: list[int]) -> float:
    """Mean entropy (nats) of the attention rows over valid query positions."""
    plogp = torch.where(attn > 0, attn * torch.log(attn), torch.zeros_like(attn))
    ent = -plogp.sum(dim=3)  # B x H x Tq
    total, count = 0.0, 0
    for i, n in enumerate(query_lengths):
        total += float(ent[i, :, :n].sum())
        count += ent.shape[1] * n
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# training


@dataclass
class AttentionTraining:
    block: AttentionBlock
    loss_history: list[float] = field(default_factory=list)
    heldout_denoise_mse: float = float("nan")
    heldout_corrupt_mse: float = float("nan")
    mean_entropy: float = float("nan")


def _latent_items(corpus, stack, flow, split: str):
    """Frozen (conditioning, latent) pairs for every utterance of a split."""
    from .flow import corpus_indexers

    accent_index, speaker_index = corpus_indexers(corpus)
    items = []
    with torch.no_grad():
        for u in corpus.split(split):
            cond = stack.conditioning_t(
                u.phoneme_seq.phonemes, u.phoneme_seq.durations,
                speaker_index[u.speaker_id], accent_index[u.accent_id],
            )
            x = torch.from_numpy(u.mel.frames.T).unsqueeze(0)
            z, _ = flow.encode(x, cond.T.unsqueeze(0))
            items.append({"cond": cond, "z": z.squeeze(0).T})
    return items


def _attention_batch(block, items, corrupt_seeds):
    t_max = max(it["z"].shape[0] for it in items)
    b = len(items)
    c, d = items[0]["cond"].shape[1], items[0]["z"].shape[1]
    queries = torch.zeros(b, t_max, c, dtype=torch.float64)
    keys = torch.zeros(b, t_max, d, dtype=torch.float64)
    clean = torch.zeros(b, t_max, d, dtype=torch.float64)
    q_mask = torch.zeros(b, t_max, 1, dtype=torch.float64)
    lengths = []
    for i, (it, corrupted) in enumerate(zip(items, corrupt_seeds)):
        t = it["z"].shape[0]
        queries[i, :t] = it["cond"]
        keys[i, :t] = torch.from_numpy(corrupted)
        clean[i, :t] = it["z"]
        q_mask[i, :t] = 1.0
        lengths.append(t)
    return queries, keys, clean, q_mask, lengths


def denoising_metrics(corpus, stack, flow, block, split: str, rate: float, seed: int):
    """Held-out denoising MSE of the block vs. the MSE of the corrupted
    input itself, plus mean attention entropy."""
    items = _latent_items(corpus, stack, flow, split)
    mse_block, mse_corrupt, entropies = [], [], []
    with torch.no_grad():
        for i, it in enumerate(items):
            z = it["z"].numpy()
            corrupted = time_dropout(z, TimeDropoutConfig(rate, derive_int(seed, "eval-drop", i)))
            out, attn = block(
                it["cond"].unsqueeze(0), torch.from_numpy(corrupted).unsqueeze(0),
                [z.shape[0]], [z.shape[0]],
            )
            mse_block.append(float(((out.squeeze(0).numpy() - z) ** 2).mean()))
            mse_corrupt.append(float(((corrupted - z) ** 2).mean()))
            entropies.append(attention_entropy(attn, [z.shape[0]]))
    return float(np.mean(mse_block)), float(np.mean(mse_corrupt)), float(np.mean(entropies))


def train_attention(corpus, stack, flow, run_config, seed: int) -> AttentionTraining:
    """L2 denoising training against time-dropout corruption; the flow and
    conditioning stack stay frozen."""
    mc = run_config.model
    rate = mc.time_dropout_rate
    torch.manual_seed(derive_int(seed, "attention-init"))
    block = AttentionBlock(
        query_dim=stack.cond_dim, value_dim=flow.data_dim,
        n_heads=mc.attention_heads, head_dim=mc.attention_head_dim,
        pos_channels=mc.attention_pos_channels,
    )
    items = _latent_items(corpus, stack, flow, "train")
    if not items:
        raise ContractError("corpus has no training utterances")

    cfg = run_config.train_attention
    rng = derive_rng(seed, "attention-batches")
    opt = torch.optim.Adam(block.parameters(), lr=cfg.learning_rate)
    result = AttentionTraining(block)
    for step in range(cfg.steps):
        idx = rng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)
        batch = [items[i] for i in idx]
        corrupted = [
            time_dropout(it["z"].numpy(), TimeDropoutConfig(rate, derive_int(seed, "drop", step, slot)))
            for slot, it in enumerate(batch)
        ]
        queries, keys, clean, q_mask, lengths = _attention_batch(block, batch, corrupted)
        out, _ = block(queries, keys, lengths, lengths)
        loss = (((out - clean) ** 2) * q_mask).sum() / (q_mask.sum() * clean.shape[2])
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"attention loss became non-finite at step {step}", step=step,
                history=result.loss_history[-20:],
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.loss_history.append(value)

    block.eval()
    result.heldout_denoise_mse, result.heldout_corrupt_mse, result.mean_entropy = denoising_metrics(
        corpus, stack, flow, block, "test", rate, derive_int(seed, "attention-eval")
    )
    return result
