"""Contrastive consumer embeddings.

A dilated causal convolutional encoder maps each weekly-profile crop to a
per-hour latent sequence. Two crops of the same sample (Monday-Friday and
Friday-Sunday) overlap on Friday; latents at the same absolute week-hour are
positives in a hierarchical instance + temporal contrastive loss.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._torch import EarlyStopping, check_finite, seed_everything
from .profiles import OVERLAP, VIEW_A, VIEW_B, ProfileSample

logger = logging.getLogger(__name__)

ENCODER_FORMAT = "dmacast-encoder"
ENCODER_VERSION = 1


@dataclass
class EncoderConfig:
    input_channels: int = 2
    hidden_dim: int = 64
    kernel_size: int = 3
    blocks: int = 10
    output_dim: int = 16


@dataclass
class ContrastConfig:
    alpha: float = 0.5
    batch_size: int = 64
    max_epochs: int = 200
    lr: float = 1e-3
    patience: int = 10
    min_delta: float = 1e-4
    mask_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


class CausalConv1d(nn.Conv1d):
    """Dilated causal convolution. Taps that would only ever read left padding
    for the current sequence length are skipped, which is exact."""

    def __init__(self, in_channels, out_channels, kernel_size, dilation=1):
        super().__init__(in_channels, out_channels, kernel_size, dilation=dilation)

    def forward(self, x):
        k, d, T = self.kernel_size[0], self.dilation[0], x.shape[-1]
        first = 0
        while first < k - 1 and (k - 1 - first) * d >= T:
            first += 1
        pad = (k - 1 - first) * d
        return F.conv1d(F.pad(x, (pad, 0)), self.weight[:, :, first:], self.bias, dilation=d)


class ResidualBlock(nn.Module):
    def __init__(self, channels, kernel_size, dilation):
        super().__init__()
        self.conv1 = CausalConv1d(channels, channels, kernel_size, dilation)
        self.conv2 = CausalConv1d(channels, channels, kernel_size, dilation)

    def forward(self, x):
        h = self.conv1(F.gelu(x))
        h = self.conv2(F.gelu(h))
        return x + h


class ProfileEncoder(nn.Module):
    """(B, T, C_in) -> (B, T, output_dim); block j uses dilation 2**j."""

    def __init__(self, config: EncoderConfig | None = None, mask_prob: float = 0.5):
        super().__init__()
        self.config = config = config or EncoderConfig()
        self.mask_prob = mask_prob
        self.input_fc = nn.Linear(config.input_channels, config.hidden_dim)
        self.blocks = nn.Sequential(*[
            ResidualBlock(config.hidden_dim, config.kernel_size, 2 ** j) for j in range(config.blocks)
        ])
        self.output_fc = nn.Conv1d(config.hidden_dim, config.output_dim, 1)

    def forward(self, x, mask: bool | None = None):
        if mask is None:
            mask = self.training
        h = self.input_fc(x)  # B x T x H
        if mask and self.mask_prob > 0:
            keep = torch.rand(h.shape[:2], device=h.device) >= self.mask_prob
            h = h * keep.unsqueeze(-1).to(h.dtype)
        h = self.blocks(h.transpose(1, 2))
        return self.output_fc(h).transpose(1, 2)


def encode(view, encoder: ProfileEncoder, mode: str = "eval") -> np.ndarray:
    """Latent sequence ``(T, output_dim)`` for one view ``(T, C)``."""
    x = torch.as_tensor(np.asarray(view), dtype=torch.float32).unsqueeze(0)
    was_training = encoder.training
    encoder.train(mode == "train")
    try:
        with torch.no_grad():
            z = encoder(x, mask=(mode == "train"))
    finally:
        encoder.train(was_training)
    return z[0].numpy()


# --------------------------------------------------------------------------- loss


def instance_contrastive_loss(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Same meter at the same step is the positive; other meters at that step are negatives."""
    B = z1.shape[0]
    z = torch.cat([z1, z2], dim=0).transpose(0, 1)  # T x 2B x C
    sim = torch.matmul(z, z.transpose(1, 2))  # T x 2B x 2B
    logits = torch.tril(sim, diagonal=-1)[:, :, :-1]
    logits = logits + torch.triu(sim, diagonal=1)[:, :, 1:]
    logits = -F.log_softmax(logits, dim=-1)
    i = torch.arange(B)
    return (logits[:, i, B + i - 1].mean() + logits[:, B + i, i].mean()) / 2


def temporal_contrastive_loss(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Same step in the other view is the positive; other steps of the meter are negatives."""
    T = z1.shape[1]
    z = torch.cat([z1, z2], dim=1)  # B x 2T x C
    sim = torch.matmul(z, z.transpose(1, 2))
    logits = torch.tril(sim, diagonal=-1)[:, :, :-1]
    logits = logits + torch.triu(sim, diagonal=1)[:, :, 1:]
    logits = -F.log_softmax(logits, dim=-1)
    t = torch.arange(T)
    return (logits[:, t, T + t - 1].mean() + logits[:, T + t, t].mean()) / 2


def hierarchical_contrastive_loss(z_a: torch.Tensor, z_b: torch.Tensor, alpha: float = 0.5,
                                  overlap: tuple[slice, slice] | None = None) -> torch.Tensor:
    """Mixed instance/temporal loss averaged over max-pooled resolutions.

    ``z_a`` and ``z_b`` are ``(B, T, C)``; ``overlap`` selects the aligned
    time steps of each (default: all). At every level with T > 1 the loss is
    ``alpha * instance + (1 - alpha) * temporal``; the final length-1 level
    contributes ``alpha * instance`` only.
    """
    if overlap is not None:
        z_a, z_b = z_a[:, overlap[0]], z_b[:, overlap[1]]
    if z_a.shape != z_b.shape:
        raise ValueError(f"misaligned latents {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    if z_a.shape[0] < 2:
        raise ValueError("contrastive loss needs at least two meters per batch")
    loss = z_a.new_zeros(())
    levels = 0
    while z_a.shape[1] > 1:
        if alpha != 0:
            loss = loss + alpha * instance_contrastive_loss(z_a, z_b)
        if alpha != 1:
            loss = loss + (1 - alpha) * temporal_contrastive_loss(z_a, z_b)
        levels += 1
        z_a = F.max_pool1d(z_a.transpose(1, 2), kernel_size=2).transpose(1, 2)
        z_b = F.max_pool1d(z_b.transpose(1, 2), kernel_size=2).transpose(1, 2)
    if alpha != 0:
        loss = loss + alpha * instance_contrastive_loss(z_a, z_b)
    levels += 1
    return loss / levels


# --------------------------------------------------------------------------- batching


def batch_indices(meter_ids, batch_size: int = 64, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """One epoch of sample-index batches with at most one sample per meter each.

    Meters with the most remaining samples are drawn first, so batches stay
    full for as long as enough distinct meters remain. A final batch with a
    single meter is dropped (it has no negatives).
    """
    rng = rng if rng is not None else np.random.default_rng()
    meter_ids = np.asarray(meter_ids)
    pools = {}
    for m in rng.permutation(np.unique(meter_ids)):
        idx = np.flatnonzero(meter_ids == m)
        pools[m] = list(rng.permutation(idx))
    batches = []
    while True:
        active = [m for m, p in pools.items() if p]
        if len(active) < 2:
            break
        ties = rng.random(len(active))
        order = sorted(range(len(active)), key=lambda i: (-len(pools[active[i]]), ties[i]))
        chosen = [active[i] for i in order[:batch_size]]
        batch = np.array([pools[m].pop() for m in chosen])
        batches.append(rng.permutation(batch))
    return batches


def sample_batches(samples: list[ProfileSample], batch_size: int = 64, seed: int = 0, epochs: int = 1):
    """Yield batches (lists of ProfileSample), reshuffled every epoch by ``seed``."""
    ids = [s.meter_id for s in samples]
    if len(set(ids)) < 2:
        raise ValueError("need samples from at least two meters")
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for b in batch_indices(ids, batch_size, rng):
            yield [samples[i] for i in b]


# --------------------------------------------------------------------------- training


def _stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """Accept an array ``(n_meters, n_windows, 168, C)`` or a list of ProfileSample."""
    if isinstance(samples, np.ndarray):
        n_m, n_w = samples.shape[:2]
        return samples.reshape(n_m * n_w, *samples.shape[2:]), np.repeat(np.arange(n_m), n_w)
    samples = list(samples)
    names = {m: i for i, m in enumerate(dict.fromkeys(s.meter_id for s in samples))}
    return np.stack([s.tensor for s in samples]), np.array([names[s.meter_id] for s in samples])


def train_encoder(samples, encoder_config: EncoderConfig | None = None,
                  contrast_config: ContrastConfig | None = None, seed: int = 0,
                  deterministic: bool = True, verbose: bool = False):
    """Train a ProfileEncoder; returns ``(encoder, per-epoch mean loss list)``."""
    encoder_config = encoder_config or EncoderConfig()
    cfg = contrast_config or ContrastConfig()
    X, owner = _stack_samples(samples)
    if len(np.unique(owner)) < 2:
        raise ValueError("need at least two meters")
    seed_everything(seed, deterministic)
    rng = np.random.default_rng(seed)
    encoder = ProfileEncoder(encoder_config, cfg.mask_prob)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr)
    data = torch.as_tensor(X, dtype=torch.float32)
    a_lo, a_hi = VIEW_A
    b_lo, b_hi = VIEW_B
    overlap = (slice(OVERLAP[0] - a_lo, OVERLAP[1] - a_lo), slice(OVERLAP[0] - b_lo, OVERLAP[1] - b_lo))
    stopper = EarlyStopping(cfg.patience, cfg.min_delta, restore_best=False)
    history = []
    encoder.train()
    for epoch in range(cfg.max_epochs):
        losses = []
        for bi, idx in enumerate(batch_indices(owner, cfg.batch_size, rng)):
            x = data[idx]
            z_a = encoder(x[:, a_lo:a_hi], mask=True)
            z_b = encoder(x[:, b_lo:b_hi], mask=True)
            loss = hierarchical_contrastive_loss(z_a, z_b, cfg.alpha, overlap)
            check_finite(loss, epoch, bi)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if verbose:
            logger.info("encoder epoch %d loss %.5f", epoch, history[-1])
        if stopper.step(history[-1], epoch):
            break
    encoder.eval()
    return encoder, history


def embed_all(samples, encoder: ProfileEncoder) -> np.ndarray:
    """Per-meter embedding: max-pool over time of the full sample, averaged over windows."""
    X, owner = _stack_samples(samples)
    encoder.eval()
    with torch.no_grad():
        z = encoder(torch.as_tensor(X, dtype=torch.float32), mask=False)
    pooled = z.max(dim=1).values.numpy().astype(float)
    meters = np.unique(owner)
    return np.stack([pooled[owner == m].mean(axis=0) for m in meters])


def save_encoder(path, encoder: ProfileEncoder, extra: dict | None = None) -> None:
    torch.save({
        "format": ENCODER_FORMAT,
        "version": ENCODER_VERSION,
        "config": asdict(encoder.config),
        "mask_prob": encoder.mask_prob,
        "state_dict": encoder.state_dict(),
        "extra": extra or {},
    }, Path(path))


def load_encoder(path) -> ProfileEncoder:
    blob = torch.load(Path(path), weights_only=False)
    if blob.get("format") != ENCODER_FORMAT:
        raise ValueError(f"{path} is not an encoder file")
    if blob["version"] > ENCODER_VERSION:
        raise ValueError(f"encoder file version {blob['version']} is newer than supported")
    enc = ProfileEncoder(EncoderConfig(**blob["config"]), blob["mask_prob"])
    enc.load_state_dict(blob["state_dict"])
    enc.eval()
    return enc


class ContrastiveEmbedder(TransformerMixin, BaseEstimator):
    """Learn consumer embeddings from profile samples.

    ``fit`` takes the ``(n_meters, n_windows, 168, 2)`` array produced by
    :class:`~dmacast.profiles.ProfileSampler`; ``transform`` returns one
    ``output_dim`` vector per meter.
    """

    def __init__(self, hidden_dim=64, output_dim=16, kernel_size=3, blocks=10, alpha=0.5,
                 batch_size=64, max_epochs=200, lr=1e-3, patience=10, min_delta=1e-4,
                 mask_prob=0.5, random_state=0, deterministic=True):
        self.hidden_dim = hidden_dim
        self.output_dim = output_dim
        self.kernel_size = kernel_size
        self.blocks = blocks
        self.alpha = alpha
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lr = lr
        self.patience = patience
        self.min_delta = min_delta
        self.mask_prob = mask_prob
        self.random_state = random_state
        self.deterministic = deterministic

    def _configs(self):
        enc = EncoderConfig(2, self.hidden_dim, self.kernel_size, self.blocks, self.output_dim)
        con = ContrastConfig(self.alpha, self.batch_size, self.max_epochs, self.lr,
                             self.patience, self.min_delta, self.mask_prob)
        return enc, con

    def _check_X(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 4 or X.shape[2:] != (168, 2):
            raise ValueError(f"expected samples of shape (n_meters, n_windows, 168, 2), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("samples contain non-finite values")
        return X

    def fit(self, X, y=None):
        X = self._check_X(X)
        enc_cfg, con_cfg = self._configs()
        self.encoder_, self.loss_history_ = train_encoder(
            X, enc_cfg, con_cfg, self.random_state, self.deterministic)
        self.n_epochs_ = len(self.loss_history_)
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return embed_all(self._check_X(X), self.encoder_)
