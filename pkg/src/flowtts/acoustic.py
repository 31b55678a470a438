"""Non-autoregressive acoustic model: transformer blocks with zero-initialized
adaptive layer norm conditioned on the flow timestep, fed by the channel
concatenation of noisy mel, expanded phoneme embeddings, and a repeated
speaker embedding; plus the jointly trained speaker encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import flowmatch


@dataclass
class CFGParams:
    alpha: float = 2.0
    cond_drop_prob: float = 0.3

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ValueError("cond_drop_prob must be in [0, 1]")


@dataclass
class SolverConfig:
    method: str = "euler"
    steps: int = 32

    def __post_init__(self):
        if self.method != "euler":
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class AcousticConfig:
    # desk-scale defaults; paper_scale() holds the full-size preset
    n_layers: int = 4
    hidden_dim: int = 128
    n_heads: int = 4
    dropout: float = 0.1
    spk_dim: int = 192
    n_mels: int = 80
    vocab_size: int = 64
    phoneme_dim: int = 64
    cfg: CFGParams = field(default_factory=CFGParams)
    lr: float = 1e-3
    warmup_steps: int = 100
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.spk_dim <= 0:
            raise ValueError("spk_dim must be > 0")

    @classmethod
    def paper_scale(cls, vocab_size: int) -> "AcousticConfig":
        return cls(n_layers=22, hidden_dim=1024, n_heads=16, dropout=0.1,
                   spk_dim=192, vocab_size=vocab_size, phoneme_dim=256,
                   lr=9e-5, warmup_steps=20000)


# ---------------------------------------------------------------------------
# Speaker encoder: dilated TDNN + attentive statistics pooling


class AttentiveStatsPool(nn.Module):
    def __init__(self, dim: int, bottleneck: int = 64):
        super().__init__()
        self.attn = nn.Sequential(
            nn.Conv1d(dim, bottleneck, 1), nn.Tanh(), nn.Conv1d(bottleneck, dim, 1))

    def forward(self, x):  # [B, C, T]
        w = torch.softmax(self.attn(x), dim=2)
        mu = (x * w).sum(dim=2)
        var = (x * x * w).sum(dim=2) - mu * mu
        return torch.cat([mu, var.clamp_min(1e-8).sqrt()], dim=1)


class SpeakerEncoder(nn.Module):
    """Simplified TDNN over mel frames producing a unit-norm embedding."""

    MIN_FRAMES = 10

    def __init__(self, n_mels: int = 80, channels: int = 128, spk_dim: int = 192):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv1d(n_mels, channels, 5, padding=2, dilation=1), nn.ReLU(),
            nn.Conv1d(channels, channels, 3, padding=2, dilation=2), nn.ReLU(),
            nn.Conv1d(channels, channels, 3, padding=3, dilation=3), nn.ReLU(),
        )
        self.pool = AttentiveStatsPool(channels)
        self.proj = nn.Linear(2 * channels, spk_dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """mel: [B, T, n_mels] or [T, n_mels] -> [B, spk_dim] unit-norm."""
        squeeze = mel.dim() == 2
        if squeeze:
            mel = mel.unsqueeze(0)
        if mel.shape[1] < self.MIN_FRAMES:
            raise ValueError(f"reference clip too short: {mel.shape[1]} frames")
        h = self.layers(mel.transpose(1, 2))
        e = self.proj(self.pool(h))
        e = F.normalize(e, dim=-1)
        return e.squeeze(0) if squeeze else e


# ---------------------------------------------------------------------------
# Rotary attention and adaLN-zero blocks


def rotary_angles(t_len: int, head_dim: int, device, dtype):
    half = head_dim // 2
    freqs = 10000.0 ** (-torch.arange(0, half, device=device, dtype=dtype) / half)
    angles = torch.arange(t_len, device=device, dtype=dtype)[:, None] * freqs[None, :]
    return angles.cos(), angles.sin()


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: [B, H, T, D], pairs (even, odd) rotated by position angle
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class RotarySelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = dropout

    def forward(self, x, key_padding_mask=None):
        B, T, _ = x.shape
        qkv = self.qkv(x).view(B, T, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.unbind(dim=2)
        q, k, v = (z.transpose(1, 2) for z in (q, k, v))
        cos, sin = rotary_angles(T, self.head_dim, x.device, x.dtype)
        q = apply_rotary(q, cos, sin)
        k = apply_rotary(k, cos, sin)
        attn_mask = None
        if key_padding_mask is not None:  # True = masked out
            attn_mask = ~key_padding_mask[:, None, None, :]
        y = F.scaled_dot_product_attention(
            q, k, v, attn_mask=attn_mask,
            dropout_p=self.dropout if self.training else 0.0)
        y = y.transpose(1, 2).reshape(B, T, -1)
        return self.out(y)


class AdaLNZeroBlock(nn.Module):
    """Transformer block whose norm modulation and residual gates come from
    the timestep embedding through a zero-initialized projection, so the
    block is an exact identity at initialization."""

    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = RotarySelfAttention(dim, n_heads, dropout)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Dropout(dropout), nn.Linear(4 * dim, dim))
        self.modulation = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x, t_emb, key_padding_mask=None):
        shift1, scale1, gate1, shift2, scale2, gate2 = \
            self.modulation(t_emb)[:, None, :].chunk(6, dim=-1)
        h = self.norm1(x) * (1 + scale1) + shift1
        x = x + gate1 * self.attn(h, key_padding_mask)
        h = self.norm2(x) * (1 + scale2) + shift2
        x = x + gate2 * self.mlp(h)
        return x


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=t.device,
                                                            dtype=t.dtype) / half)
        args = t[:, None] * freqs[None, :] * 1000.0
        emb = torch.cat([args.sin(), args.cos()], dim=-1)
        return self.mlp(emb)


class AcousticModel(nn.Module):
    """Predicts the flow field over mel frames given the expanded phoneme
    sequence, speaker embedding, and timestep."""

    def __init__(self, cfg: AcousticConfig):
        super().__init__()
        self.cfg = cfg
        self.phoneme_emb = nn.Embedding(cfg.vocab_size, cfg.phoneme_dim)
        self.null_phoneme = nn.Parameter(torch.zeros(cfg.phoneme_dim))
        self.null_speaker = nn.Parameter(torch.zeros(cfg.spk_dim))
        in_dim = cfg.n_mels + cfg.phoneme_dim + cfg.spk_dim
        self.in_proj = nn.Linear(in_dim, cfg.hidden_dim)
        self.t_emb = TimestepEmbedding(cfg.hidden_dim)
        self.blocks = nn.ModuleList(
            AdaLNZeroBlock(cfg.hidden_dim, cfg.n_heads, cfg.dropout)
            for _ in range(cfg.n_layers))
        self.norm_out = nn.LayerNorm(cfg.hidden_dim, elementwise_affine=False)
        self.out_proj = nn.Linear(cfg.hidden_dim, cfg.n_mels)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x_t: torch.Tensor, expanded_phonemes: torch.Tensor,
                speaker_emb: torch.Tensor, t: torch.Tensor,
                drop_cond=None, key_padding_mask=None) -> torch.Tensor:
        """x_t: [B, T, n_mels]; expanded_phonemes: [B, T] long;
        speaker_emb: [B, spk_dim]; t: [B]; drop_cond: bool or [B] bool mask."""
        B, T, _ = x_t.shape
        if expanded_phonemes.shape != (B, T):
            raise ValueError("expanded phoneme length must match mel frames")
        ph = self.phoneme_emb(expanded_phonemes)
        spk = speaker_emb
        if drop_cond is not None:
            if isinstance(drop_cond, bool):
                drop_cond = torch.full((B,), drop_cond, device=x_t.device)
            drop = drop_cond.view(B, 1, 1).to(x_t.dtype)
            ph = (1 - drop) * ph + drop * self.null_phoneme.view(1, 1, -1)
            spk = (1 - drop.view(B, 1)) * spk + drop.view(B, 1) * self.null_speaker.view(1, -1)
        spk_rep = spk[:, None, :].expand(B, T, -1)
        h = self.in_proj(torch.cat([x_t, ph, spk_rep], dim=-1))
        temb = self.t_emb(t)
        for block in self.blocks:
            h = block(h, temb, key_padding_mask)
        return self.out_proj(self.norm_out(h))


class AcousticSystem(nn.Module):
    """Acoustic field model plus its jointly trained speaker encoder."""

    def __init__(self, cfg: AcousticConfig):
        super().__init__()
        self.cfg = cfg
        self.model = AcousticModel(cfg)
        self.speaker_encoder = SpeakerEncoder(cfg.n_mels, spk_dim=cfg.spk_dim)


# ---------------------------------------------------------------------------
# EMA and checkpoints


class EMA:
    """Exponential moving average shadow of a parameter set."""

    def __init__(self, module: nn.Module, decay: float = 0.999):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in module.state_dict().items()}

    def update(self, module: nn.Module, decay: float | None = None):
        d = self.decay if decay is None else decay
        with torch.no_grad():
            for k, v in module.state_dict().items():
                if k not in self.shadow:
                    raise ValueError(f"parameter tree mismatch: unexpected {k}")
                s = self.shadow[k]
                if v.dtype.is_floating_point:
                    s.mul_(d).add_(v.detach(), alpha=1.0 - d)
                else:
                    s.copy_(v)

    def copy_to(self, module: nn.Module):
        module.load_state_dict(self.shadow)

    def state_dict(self):
        return self.shadow

    def load_state_dict(self, state):
        self.shadow = {k: v.clone() for k, v in state.items()}


def save_checkpoint(path, module: nn.Module, cfg, ema: EMA | None = None, step: int = 0,
                    extra: dict | None = None):
    payload = {"config": asdict(cfg), "config_class": type(cfg).__name__,
               "state_dict": module.state_dict(),
               "ema": ema.state_dict() if ema is not None else None,
               "step": step, "extra": extra or {}}
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def acoustic_config_from_dict(d: dict) -> AcousticConfig:
    d = dict(d)
    d["cfg"] = CFGParams(**d["cfg"])
    return AcousticConfig(**d)


def load_acoustic_system(path, use_ema: bool = True) -> tuple["AcousticSystem", dict]:
    ckpt = load_checkpoint(path)
    system = AcousticSystem(acoustic_config_from_dict(ckpt["config"]))
    if use_ema and ckpt.get("ema") is not None:
        system.load_state_dict(ckpt["ema"])
    else:
        system.load_state_dict(ckpt["state_dict"])
    system.eval()
    return system, ckpt


# ---------------------------------------------------------------------------
# Training


def ema_update(shadow: dict, params: dict, decay: float) -> dict:
    """Functional EMA step: shadow <- decay*shadow + (1-decay)*params."""
    if set(shadow) != set(params):
        raise ValueError("parameter tree mismatch")
    out = {}
    for k in shadow:
        if params[k].dtype.is_floating_point:
            out[k] = decay * shadow[k] + (1.0 - decay) * params[k]
        else:
            out[k] = params[k].clone()
    return out


@dataclass
class AcousticBatch:
    mel: torch.Tensor            # [B, T, n_mels], padded
    phonemes: torch.Tensor       # [B, T] expanded ids, padded
    ref_clips: list[torch.Tensor]  # per-item speaker reference mels
    lengths: torch.Tensor        # [B] valid frame counts
    ids: list[str]

    @property
    def frame_mask(self) -> torch.Tensor:
        T = self.mel.shape[1]
        return torch.arange(T)[None, :] < self.lengths[:, None]


def collate_acoustic(utterances, ref_seconds: float, mel_cfg, rng) -> AcousticBatch:
    from .data import expand_phonemes, slice_reference_clip
    mels = [torch.from_numpy(u.mel) for u in utterances]
    phon = [torch.tensor(expand_phonemes(u.phonemes, u.durations), dtype=torch.long)
            for u in utterances]
    T = max(m.shape[0] for m in mels)
    B = len(utterances)
    mel = torch.zeros(B, T, mels[0].shape[1])
    ph = torch.zeros(B, T, dtype=torch.long)
    lengths = torch.tensor([m.shape[0] for m in mels])
    refs = []
    for i, (m, p) in enumerate(zip(mels, phon)):
        mel[i, :m.shape[0]] = m
        ph[i, :p.shape[0]] = p
        refs.append(torch.from_numpy(
            slice_reference_clip(utterances[i].mel, ref_seconds, rng, mel_cfg)))
    return AcousticBatch(mel=mel, phonemes=ph, ref_clips=refs, lengths=lengths,
                         ids=[u.id for u in utterances])


def train_step(batch: AcousticBatch, system: AcousticSystem, optimizer, ema: EMA,
               generator: torch.Generator, logit_mean: float = 0.0,
               logit_std: float = 1.0) -> float:
    """One optimization step of the conditional flow-matching objective with
    per-item logit-normal timesteps and joint condition dropout."""
    cfg = system.cfg
    B = batch.mel.shape[0]
    t = flowmatch.sample_timestep_logitnormal(generator, (B,), logit_mean, logit_std)
    x0 = torch.randn(batch.mel.shape, generator=generator)
    drop = torch.rand((B,), generator=generator) < cfg.cfg.cond_drop_prob

    spk = torch.stack([system.speaker_encoder(c) for c in batch.ref_clips])
    mask = batch.frame_mask
    pad_mask = mask  # True = valid

    def field(phi_t, _cond, tt):
        return system.model(phi_t, batch.phonemes, spk, tt, drop_cond=drop,
                            key_padding_mask=pad_mask)

    loss = flowmatch.cfm_loss(field, batch.mel, None, x0, t, mask=mask)
    if not torch.isfinite(loss):
        raise flowmatch.NumericsError(f"non-finite loss on batch {batch.ids}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    ema.update(system)
    return float(loss.detach())


def warmup_lr(step: int, peak: float, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return peak
    return peak * min(1.0, (step + 1) / warmup_steps)


def train_acoustic(corpus, cfg: AcousticConfig, steps: int, seed: int = 0,
                   batch_size: int = 8, ref_seconds: float = 3.0, mel_cfg=None,
                   log_every: int = 0, callback=None) -> tuple[AcousticSystem, EMA, list]:
    """Desk-scale training driver over an in-memory corpus."""
    torch.manual_seed(seed)
    system = AcousticSystem(cfg)
    system.train()
    optimizer = torch.optim.AdamW(system.parameters(), lr=cfg.lr)
    ema = EMA(system, cfg.ema_decay)
    gen = torch.Generator().manual_seed(seed + 1)
    rng_np = np.random.default_rng(seed + 2)
    utts = corpus.utterances
    losses = []
    for step in range(steps):
        for g in optimizer.param_groups:
            g["lr"] = warmup_lr(step, cfg.lr, cfg.warmup_steps)
        idx = rng_np.choice(len(utts), size=min(batch_size, len(utts)), replace=False)
        batch = collate_acoustic([utts[i] for i in idx], ref_seconds, mel_cfg, rng_np)
        loss = train_step(batch, system, optimizer, ema, gen)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}: cfm loss {sum(losses[-log_every:]) / log_every:.4f}")
        if callback is not None:
            callback(step, loss)
    system.eval()
    return system, ema, losses
