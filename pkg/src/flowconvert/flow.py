"""Conditional normalizing flow between mel-spectrograms and latents.

Each step is actnorm -> invertible LU-parameterized channel mixing ->
conditional affine coupling, all invertible by construction for every
parameter value. The coupling networks are small temporal convnets over
(identity half-channels, frame conditioning); their log-scales are
smoothly bounded to [-bound, bound] so the inverse stays well conditioned.

Shapes follow the (batch, channels, time) convention internally; the
public operations take single utterances as T x D / T x C matrices.
Batched tensors carry a (batch, 1, time) 0/1 mask; padded positions are
re-zeroed after every sublayer, which makes padded-batch results exactly
equal to processing each utterance alone (conv padding sees zeros either
way).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .corpus import MelSpectrogram
from .errors import ContractError, NumericError, TrainingDivergedError
from .features import ConditioningStack, FrameConditioning
from .seeding import derive_int, derive_rng

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LatentSequence:
    """T x D latent matrix produced by the flow inverse."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ContractError(f"latent must be T x D, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise NumericError("latent contains non-finite entries")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


class ActNorm(nn.Module):
    """Per-channel affine with data-dependent initialization."""

    def __init__(self, dim: int):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(dim, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("initialized", torch.tensor(0, dtype=torch.uint8))

    def data_init(self, x: torch.Tensor, mask: torch.Tensor) -> None:
        """Set scale/bias so that masked frames of x map to zero mean, unit
        variance per channel."""
        with torch.no_grad():
            n = mask.sum()
            mean = (x * mask).sum(dim=(0, 2)) / n
            var = (((x - mean[None, :, None]) * mask) ** 2).sum(dim=(0, 2)) / n
            std = torch.sqrt(var + 1e-8)
            self.log_scale.copy_(-torch.log(std))
            self.bias.copy_(-mean / std)
            self.initialized.fill_(1)

    def encode(self, x, mask):
        z = (x * torch.exp(self.log_scale)[None, :, None] + self.bias[None, :, None]) * mask
        logdet = mask.sum(dim=(1, 2)) * self.log_scale.sum()
        return z, logdet

    def decode(self, z, mask):
        return ((z - self.bias[None, :, None]) * torch.exp(-self.log_scale)[None, :, None]) * mask


class InvertibleMixing(nn.Module):
    """D x D channel mixing, LU-parameterized so the determinant is always
    nonzero: W = P L (U + diag(sign * exp(log_diag)))."""

    def __init__(self, dim: int, identity_init: bool = False):
        super().__init__()
        self.dim = dim
        if identity_init:
            perm = torch.eye(dim, dtype=torch.float64)
            lower = torch.zeros(dim, dim, dtype=torch.float64)
            upper = torch.zeros(dim, dim, dtype=torch.float64)
            sign = torch.ones(dim, dtype=torch.float64)
            log_diag = torch.zeros(dim, dtype=torch.float64)
        else:
            rot = torch.linalg.qr(torch.randn(dim, dim, dtype=torch.float64)).Q
            perm, l_full, u_full = torch.linalg.lu(rot)
            diag = torch.diagonal(u_full)
            sign = torch.sign(diag)
            log_diag = torch.log(torch.abs(diag))
            lower = torch.tril(l_full, diagonal=-1)
            upper = torch.triu(u_full, diagonal=1)
        self.register_buffer("perm", perm)
        self.register_buffer("sign", sign)
        self.register_buffer("l_mask", torch.tril(torch.ones(dim, dim, dtype=torch.float64), -1))
        self.lower = nn.Parameter(lower)
        self.upper = nn.Parameter(upper)
        self.log_diag = nn.Parameter(log_diag)

    def weight(self) -> torch.Tensor:
        eye = torch.eye(self.dim, dtype=torch.float64)
        l = self.lower * self.l_mask + eye
        u = self.upper * self.l_mask.T + torch.diag(self.sign * torch.exp(self.log_diag))
        return self.perm @ l @ u

    def encode(self, x, mask):
        w = self.weight()
        z = torch.einsum("ij,bjt->bit", w, x) * mask
        logdet = mask.sum(dim=(1, 2)) * self.log_diag.sum()
        return z, logdet

    def decode(self, z, mask):
        w = self.weight()
        return torch.linalg.solve(w, z) * mask


class AffineCoupling(nn.Module):
    """Transforms one half of the channels as an affine function of the
    other half plus the frame conditioning. ``parity`` selects which half
    passes through unchanged."""

    def __init__(self, dim: int, cond_dim: int, hidden: int, parity: int, bound: float):
        super().__init__()
        self.dim = dim
        self.split = dim // 2
        self.parity = parity % 2
        self.bound = bound
        n_id = self.split if self.parity == 0 else dim - self.split
        n_tr = dim - n_id
        self.n_transformed = n_tr
        if n_tr > 0:  # dim == 1 leaves one parity with nothing to transform
            self.conv_in = nn.Conv1d(n_id + cond_dim, hidden, kernel_size=3, padding=1)
            self.conv_mid = nn.Conv1d(hidden, hidden, kernel_size=1)
            self.conv_out = nn.Conv1d(hidden, 2 * n_tr, kernel_size=1)
            nn.init.zeros_(self.conv_out.weight)  # identity transform at init
            nn.init.zeros_(self.conv_out.bias)
        self.to(torch.float64)

    def _halves(self, x):
        a, b = x[:, : self.split], x[:, self.split :]
        if self.parity == 0:
            return a, b  # a passes through, b is transformed
        return b, a

    def _join(self, identity_part, transformed_part):
        if self.parity == 0:
            return torch.cat([identity_part, transformed_part], dim=1)
        return torch.cat([transformed_part, identity_part], dim=1)

    def _shift_scale(self, identity_part, cond, mask):
        h = torch.cat([identity_part, cond], dim=1) * mask
        h = torch.relu(self.conv_in(h))
        h = torch.relu(self.conv_mid(h))
        out = self.conv_out(h)
        shift = out[:, : self.n_transformed]
        log_s = self.bound * torch.tanh(out[:, self.n_transformed :] / self.bound)
        return shift * mask, log_s * mask

    def encode(self, x, cond, mask):
        if self.n_transformed == 0:
            return x, torch.zeros(x.shape[0], dtype=torch.float64)
        idp, trp = self._halves(x)
        shift, log_s = self._shift_scale(idp, cond, mask)
        out = (trp * torch.exp(log_s) + shift) * mask
        return self._join(idp, out), log_s.sum(dim=(1, 2))

    def decode(self, z, cond, mask):
        if self.n_transformed == 0:
            return z
        idp, trp = self._halves(z)
        shift, log_s = self._shift_scale(idp, cond, mask)
        out = ((trp - shift) * torch.exp(-log_s)) * mask
        return self._join(idp, out)


class FlowStep(nn.Module):
    def __init__(self, dim, cond_dim, hidden, parity, bound, identity_init):
        super().__init__()
        self.actnorm = ActNorm(dim)
        self.mixing = InvertibleMixing(dim, identity_init=identity_init)
        self.coupling = AffineCoupling(dim, cond_dim, hidden, parity, bound)

    def encode(self, x, cond, mask):
        z, ld1 = self.actnorm.encode(x, mask)
        z, ld2 = self.mixing.encode(z, mask)
        z, ld3 = self.coupling.encode(z, cond, mask)
        return z, ld1 + ld2 + ld3

    def decode(self, z, cond, mask):
        x = self.coupling.decode(z, cond, mask)
        x = self.mixing.decode(x, mask)
        return self.actnorm.decode(x, mask)


class FlowModel(nn.Module):
    """The bijection f between mel frames and latent frames, conditioned on
    frame conditioning; steps alternate which channel half is transformed."""

    def __init__(self, data_dim: int, cond_dim: int, n_steps: int = 8,
                 hidden: int = 64, log_scale_bound: float = 5.0,
                 identity_init: bool = False):
        super().__init__()
        if data_dim < 1:
            raise ContractError("flow needs data_dim >= 1")
        self.data_dim = data_dim
        self.cond_dim = cond_dim
        self.steps = nn.ModuleList(
            FlowStep(data_dim, cond_dim, hidden, parity, log_scale_bound, identity_init)
            for parity in range(n_steps)
        )
        self.to(torch.float64)

    # -- torch-side (batch, channels, time) ---------------------------------

    def encode(self, x, cond, mask=None):
        mask = _default_mask(x, mask)
        z = x * mask
        logdet = torch.zeros(x.shape[0], dtype=torch.float64)
        for step in self.steps:
            z, ld = step.encode(z, cond, mask)
            logdet = logdet + ld
        return z, logdet

    def decode(self, z, cond, mask=None):
        mask = _default_mask(z, mask)
        x = z * mask
        for step in reversed(self.steps):
            x = step.decode(x, cond, mask)
        return x

    def nll_t(self, x, cond, mask=None):
        """Per-utterance mean negative log-likelihood per dimension."""
        mask = _default_mask(x, mask)
        z, logdet = self.encode(x, cond, mask)
        n_dims = mask.sum(dim=(1, 2)) * self.data_dim
        sq = 0.5 * (z * z).sum(dim=(1, 2))
        return (sq + 0.5 * LOG_2PI * n_dims - logdet) / n_dims

    def initialize_actnorm(self, x, cond, mask=None):
        """Data-dependent init: each step's actnorm normalizes its own input
        computed through the already-initialized earlier steps."""
        mask = _default_mask(x, mask)
        with torch.no_grad():
            h = x * mask
            for step in self.steps:
                step.actnorm.data_init(h, mask)
                h, _ = step.encode(h, cond, mask)


def _default_mask(x, mask):
    if mask is None:
        return torch.ones(x.shape[0], 1, x.shape[2], dtype=torch.float64)
    return mask


# -- public single-utterance operations --------------------------------------


def _as_matrix(value, what: str) -> np.ndarray:
    if isinstance(value, MelSpectrogram):
        arr = value.frames
    elif isinstance(value, (LatentSequence, FrameConditioning)):
        arr = value.frames
    else:
        arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ContractError(f"{what} must be a T x K matrix with T >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")
    return arr


def _check_pair(model: FlowModel, data: np.ndarray, cond: np.ndarray) -> None:
    if data.shape[1] != model.data_dim:
        raise ContractError(f"data has {data.shape[1]} channels, model expects {model.data_dim}")
    if cond.shape[1] != model.cond_dim:
        raise ContractError(f"conditioning has {cond.shape[1]} channels, model expects {model.cond_dim}")
    if data.shape[0] != cond.shape[0]:
        raise ContractError(
            f"data has {data.shape[0]} frames but conditioning has {cond.shape[0]}"
        )


def inverse(model: FlowModel, x, cond) -> tuple[LatentSequence, float]:
    """Encode a mel-spectrogram to a latent sequence; also returns the exact
    log |det d z / d x| of the encoding."""
    x = _as_matrix(x, "mel")
    c = _as_matrix(cond, "conditioning")
    _check_pair(model, x, c)
    with torch.no_grad():
        z, logdet = model.encode(
            torch.from_numpy(x.T).unsqueeze(0), torch.from_numpy(c.T).unsqueeze(0)
        )
    return LatentSequence(z.squeeze(0).T.numpy()), float(logdet[0])


def forward(model: FlowModel, z, cond) -> MelSpectrogram:
    """Decode a latent sequence back to a mel-spectrogram; exact functional
    inverse of :func:`inverse` under the same conditioning."""
    z = _as_matrix(z, "latent")
    c = _as_matrix(cond, "conditioning")
    _check_pair(model, z, c)
    with torch.no_grad():
        x = model.decode(
            torch.from_numpy(z.T).unsqueeze(0), torch.from_numpy(c.T).unsqueeze(0)
        )
    return MelSpectrogram(x.squeeze(0).T.numpy())


def nll(model: FlowModel, x, cond) -> float:
    """Mean negative log-likelihood per dimension of x under the flow."""
    x = _as_matrix(x, "mel")
    c = _as_matrix(cond, "conditioning")
    _check_pair(model, x, c)
    with torch.no_grad():
        value = model.nll_t(
            torch.from_numpy(x.T).unsqueeze(0), torch.from_numpy(c.T).unsqueeze(0)
        )
    return float(value[0])


# -- training -----------------------------------------------------------------


@dataclass
class FlowTraining:
    stack: ConditioningStack
    flow: FlowModel
    loss_history: list[float] = field(default_factory=list)
    initial_nll: float = float("nan")
    final_nll: float = float("nan")


def _prepare_utterance(corpus, stack_indexers, u):
    accent_index, speaker_index = stack_indexers
    return {
        "x": torch.from_numpy(u.mel.frames.T),  # D x T
        "phonemes": torch.as_tensor(u.phoneme_seq.phonemes, dtype=torch.int64),
        "durations": u.phoneme_seq.durations,
        "speaker": speaker_index[u.speaker_id],
        "accent": accent_index[u.accent_id],
    }


def batch_tensors(stack: ConditioningStack, items: list[dict]):
    """Pad a list of prepared utterances into (x, cond, mask) tensors."""
    t_max = max(it["x"].shape[1] for it in items)
    b = len(items)
    d = items[0]["x"].shape[0]
    x = torch.zeros(b, d, t_max, dtype=torch.float64)
    cond = torch.zeros(b, stack.cond_dim, t_max, dtype=torch.float64)
    mask = torch.zeros(b, 1, t_max, dtype=torch.float64)
    for i, it in enumerate(items):
        t = it["x"].shape[1]
        x[i, :, :t] = it["x"]
        cond[i, :, :t] = stack.conditioning_t(
            it["phonemes"].tolist(), it["durations"], it["speaker"], it["accent"]
        ).T
        mask[i, 0, :t] = 1.0
    return x, cond, mask


def corpus_indexers(corpus) -> tuple[dict[str, int], dict[str, int]]:
    accent_index = {a: i for i, a in enumerate(sorted(corpus.accents))}
    speaker_index = {s: i for i, s in enumerate(sorted(corpus.speakers))}
    return accent_index, speaker_index


def mean_nll(stack: ConditioningStack, flow: FlowModel, items: list[dict],
             batch_size: int = 16) -> float:
    """Dataset mean of per-utterance mean NLL, computed without gradients."""
    values = []
    with torch.no_grad():
        for lo in range(0, len(items), batch_size):
            chunk = items[lo : lo + batch_size]
            x, cond, mask = batch_tensors(stack, chunk)
            values.extend(flow.nll_t(x, cond, mask).tolist())
    return float(np.mean(values))


def train_flow(corpus, run_config, seed: int) -> FlowTraining:
    """Joint maximum-likelihood training of the conditioning stack and the
    flow on the corpus train split. Deterministic given (corpus, config,
    seed) under single-worker execution."""
    mc = run_config.model
    torch.manual_seed(derive_int(seed, "flow-init"))
    stack = ConditioningStack(
        corpus.config.n_phonemes, corpus.config.n_speakers, corpus.config.n_accents,
        phoneme_channels=mc.phoneme_channels, speaker_dim=mc.speaker_dim,
        accent_dim=mc.accent_dim,
    )
    flow = FlowModel(
        corpus.config.mel_dim, stack.cond_dim, n_steps=mc.flow_steps,
        hidden=mc.coupling_hidden, log_scale_bound=mc.log_scale_bound,
    )

    indexers = corpus_indexers(corpus)
    items = [_prepare_utterance(corpus, indexers, u) for u in corpus.split("train")]
    if not items:
        raise ContractError("corpus has no training utterances")

    cfg = run_config.train_flow
    rng = derive_rng(seed, "flow-batches")
    first = [items[i] for i in rng.choice(len(items), size=min(cfg.batch_size * 4, len(items)), replace=False)]
    x0, c0, m0 = batch_tensors(stack, first)
    flow.initialize_actnorm(x0, c0, m0)

    result = FlowTraining(stack, flow)
    result.initial_nll = mean_nll(stack, flow, items)

    opt = torch.optim.Adam(list(stack.parameters()) + list(flow.parameters()), lr=cfg.learning_rate)
    for step in range(cfg.steps):
        batch = [items[i] for i in rng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)]
        x, cond, mask = batch_tensors(stack, batch)
        loss = flow.nll_t(x, cond, mask).mean()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"flow NLL became non-finite at step {step}", step=step,
                history=result.loss_history[-20:],
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.loss_history.append(value)

    result.final_nll = mean_nll(stack, flow, items)
    stack.eval()
    flow.eval()
    return result
