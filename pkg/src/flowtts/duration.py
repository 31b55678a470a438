"""Autoregressive duration model: bidirectional phoneme encoder with a
masked-phoneme auxiliary loss, attention pooling of a reference mel clip,
and a causal decoder that emits one discrete frame-count label per phoneme."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import MASK, MAX_DURATION

N_DURATION_CLASSES = MAX_DURATION + 1  # class 0 reserved, never emitted


@dataclass
class DurModelConfig:
    enc_layers: int = 8
    dec_layers: int = 8
    hidden: int = 512
    heads: int = 8
    dropout: float = 0.1
    ref_query_len: int = 32
    lambda_ml: float = 1.0
    lambda_dur: float = 10.0
    sentence_mask_prob: float = 0.5
    phoneme_mask_prob: float = 0.15
    vocab_size: int = 64
    n_mels: int = 80

    def __post_init__(self):
        for p in (self.sentence_mask_prob, self.phoneme_mask_prob, self.dropout):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of [0,1]: {p}")
        if self.lambda_ml < 0 or self.lambda_dur < 0:
            raise ValueError("loss coefficients must be >= 0")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")

    @classmethod
    def desk(cls, vocab_size: int, n_mels: int = 80) -> "DurModelConfig":
        return cls(enc_layers=2, dec_layers=2, hidden=96, heads=4, dropout=0.0,
                   ref_query_len=8, vocab_size=vocab_size, n_mels=n_mels)


@dataclass
class SamplingParams:
    top_k: int = 6
    top_p: float = 0.5
    temperature: float = 0.9
    repetition_penalty: float = 1.0

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.repetition_penalty < 1.0:
            raise ValueError("repetition_penalty must be >= 1")


@dataclass
class DurationPrompt:
    phonemes: list[int]
    durations: list[int]
    ref_mel: np.ndarray

    def __post_init__(self):
        if len(self.phonemes) != len(self.durations):
            raise ValueError("prompt phonemes and durations must have equal length")
        if any(not 1 <= d <= MAX_DURATION for d in self.durations):
            raise ValueError("prompt durations out of [1, 99]")


# ---------------------------------------------------------------------------
# Phoneme masking


def mask_phonemes(phonemes: torch.Tensor, rng: np.random.Generator,
                  cfg: DurModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Select sentences with sentence_mask_prob; inside selected sentences
    replace each phoneme by MASK with phoneme_mask_prob. Returns the masked
    copy and the boolean mask positions."""
    out = phonemes.clone()
    B, N = phonemes.shape
    selected = rng.random(B) < cfg.sentence_mask_prob
    hit = rng.random((B, N)) < cfg.phoneme_mask_prob
    mask = torch.from_numpy(selected[:, None] & hit)
    out[mask] = MASK
    return out, mask


# ---------------------------------------------------------------------------
# Attention primitives (explicit, so the decoder cache stays simple)


def sinusoidal_positions(n: int, dim: int, device, dtype) -> torch.Tensor:
    pos = torch.arange(n, device=device, dtype=dtype)[:, None]
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=device, dtype=dtype) / half)
    args = pos * freqs[None, :]
    return torch.cat([args.sin(), args.cos()], dim=-1)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def project_kv(self, kv_src: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, S, _ = kv_src.shape
        k = self.k(kv_src).view(B, S, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(kv_src).view(B, S, self.heads, self.head_dim).transpose(1, 2)
        return k, v

    def forward(self, x: torch.Tensor, kv_src: torch.Tensor | None = None,
                causal: bool = False, kv_cache: tuple | None = None,
                return_weights: bool = False):
        B, T, _ = x.shape
        q = self.q(x).view(B, T, self.heads, self.head_dim).transpose(1, 2)
        if kv_cache is not None:
            k, v = kv_cache
        else:
            k, v = self.project_kv(kv_src if kv_src is not None else x)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if causal and kv_cache is None:
            causal_mask = torch.triu(torch.ones(T, k.shape[2], dtype=torch.bool,
                                                device=x.device), diagonal=1)
            scores = scores.masked_fill(causal_mask, float("-inf"))
        w = torch.softmax(scores, dim=-1)
        y = (w @ v).transpose(1, 2).reshape(B, T, -1)
        y = self.out(y)
        if return_weights:
            return y, w
        return y


class EncoderLayer(nn.Module):
    """Bidirectional self-attention + cross-attention to the pooled
    reference feature + feed-forward, pre-norm."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(),
                                nn.Dropout(dropout), nn.Linear(4 * dim, dim))
        self.n1 = nn.LayerNorm(dim)
        self.n2 = nn.LayerNorm(dim)
        self.n3 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, feature_ref):
        x = x + self.drop(self.self_attn(self.n1(x)))
        x = x + self.drop(self.cross_attn(self.n2(x), kv_src=feature_ref))
        x = x + self.drop(self.ff(self.n3(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(),
                                nn.Dropout(dropout), nn.Linear(4 * dim, dim))
        self.n1 = nn.LayerNorm(dim)
        self.n2 = nn.LayerNorm(dim)
        self.n3 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, feature_ref):
        x = x + self.drop(self.self_attn(self.n1(x), causal=True))
        x = x + self.drop(self.cross_attn(self.n2(x), kv_src=feature_ref))
        x = x + self.drop(self.ff(self.n3(x)))
        return x

    def step(self, x, feature_ref, cache: dict):
        """One-position decode; cache holds accumulated self-attn K/V."""
        h = self.n1(x)
        k_new, v_new = self.self_attn.project_kv(h)
        if cache.get("k") is not None:
            cache["k"] = torch.cat([cache["k"], k_new], dim=2)
            cache["v"] = torch.cat([cache["v"], v_new], dim=2)
        else:
            cache["k"], cache["v"] = k_new, v_new
        x = x + self.self_attn(h, kv_cache=(cache["k"], cache["v"]))
        x = x + self.cross_attn(self.n2(x), kv_src=feature_ref)
        x = x + self.ff(self.n3(x))
        return x


class ReferencePooler(nn.Module):
    """Fixed-length summary of a mel clip: learnable query sequence attending
    over projected frames."""

    def __init__(self, n_mels: int, dim: int, heads: int, n_queries: int):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(n_queries, dim) * 0.02)
        self.in_proj = nn.Linear(n_mels, dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, mel: torch.Tensor, return_weights: bool = False):
        """mel: [B, T, n_mels] -> [B, n_queries, dim]."""
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        if mel.shape[1] < 1:
            raise ValueError("empty reference clip")
        kv = self.in_proj(mel)
        q = self.queries.unsqueeze(0).expand(mel.shape[0], -1, -1)
        out = self.attn(q, kv_src=kv, return_weights=return_weights)
        if return_weights:
            y, w = out
            return self.norm(y), w
        return self.norm(out)


class DurationModel(nn.Module):
    def __init__(self, cfg: DurModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.phoneme_emb = nn.Embedding(cfg.vocab_size, d)
        self.dur_emb = nn.Embedding(N_DURATION_CLASSES, d)
        self.pooler = ReferencePooler(cfg.n_mels, d, cfg.heads, cfg.ref_query_len)
        self.enc_layers = nn.ModuleList(
            EncoderLayer(d, cfg.heads, cfg.dropout) for _ in range(cfg.enc_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.dec_layers = nn.ModuleList(
            DecoderLayer(d, cfg.heads, cfg.dropout) for _ in range(cfg.dec_layers))
        self.dec_norm = nn.LayerNorm(d)
        self.mlm_head = nn.Linear(d, cfg.vocab_size)  # untied from phoneme_emb
        self.dur_head = nn.Linear(d, N_DURATION_CLASSES)

    # -- reference pooling and encoder -------------------------------------

    def pool_reference(self, m_ref, return_weights: bool = False):
        if isinstance(m_ref, np.ndarray):
            m_ref = torch.from_numpy(m_ref).float()
        return self.pooler(m_ref, return_weights=return_weights)

    def encode(self, phonemes: torch.Tensor, feature_ref: torch.Tensor) -> torch.Tensor:
        """phonemes: [B, N] -> hidden states [B, N, d]."""
        if phonemes.numel() == 0:
            raise ValueError("empty phoneme sequence")
        if phonemes.dim() == 1:
            phonemes = phonemes.unsqueeze(0)
        x = self.phoneme_emb(phonemes)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.device, x.dtype)
        for layer in self.enc_layers:
            x = layer(x, feature_ref)
        return self.enc_norm(x)

    # -- decoder ------------------------------------------------------------

    def _prev_duration_embedding(self, durations: torch.Tensor) -> torch.Tensor:
        """Shifted duration embeddings; the first position gets a zero vector."""
        e = self.dur_emb(durations)
        zero = torch.zeros_like(e[:, :1])
        return torch.cat([zero, e[:, :-1]], dim=1)

    def decode_teacher_forced(self, h: torch.Tensor, durations: torch.Tensor,
                              feature_ref: torch.Tensor) -> torch.Tensor:
        """Full-sequence causal decode with ground-truth history.
        Returns logits [B, N, classes]; position n sees d_{<n} only."""
        x = h + self._prev_duration_embedding(durations)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.device, x.dtype)
        for layer in self.dec_layers:
            x = layer(x, feature_ref)
        return self.dur_head(self.dec_norm(x))

    def new_cache(self) -> list[dict]:
        return [{} for _ in self.dec_layers]

    def decode_step(self, h_n: torch.Tensor, prev_label: int | None,
                    feature_ref: torch.Tensor, cache: list[dict],
                    position: int) -> torch.Tensor:
        """Incremental decode of one position. prev_label is None at the first
        position (zero vector stands in for the duration embedding)."""
        if h_n.dim() == 2:
            h_n = h_n.unsqueeze(1)  # [B, 1, d]
        if prev_label is None:
            e_prev = torch.zeros_like(h_n)
        else:
            idx = torch.tensor([[prev_label]], device=h_n.device)
            e_prev = self.dur_emb(idx).expand_as(h_n)
        x = h_n + e_prev
        x = x + sinusoidal_positions(position + 1, x.shape[2], x.device, x.dtype)[-1:]
        for layer, layer_cache in zip(self.dec_layers, cache):
            x = layer.step(x, feature_ref, layer_cache)
        return self.dur_head(self.dec_norm(x))[:, 0]

    def forward(self, phonemes: torch.Tensor, durations: torch.Tensor,
                m_ref) -> torch.Tensor:
        """Teacher-forced logits [B, N, classes] for the full sequence."""
        feature_ref = self.pool_reference(m_ref)
        h = self.encode(phonemes, feature_ref)
        return self.decode_teacher_forced(h, durations, feature_ref)


# ---------------------------------------------------------------------------
# Losses


def masked_lm_loss(mlm_logits: torch.Tensor, mask: torch.Tensor,
                   true_phonemes: torch.Tensor) -> torch.Tensor:
    """Cross-entropy summed over masked positions; zero for an empty mask."""
    if not mask.any():
        return torch.zeros((), dtype=mlm_logits.dtype, device=mlm_logits.device)
    logits = mlm_logits[mask]
    targets = true_phonemes[mask]
    return F.cross_entropy(logits, targets, reduction="sum")


def duration_loss(logits: torch.Tensor, durations: torch.Tensor) -> torch.Tensor:
    """Summed teacher-forced cross-entropy over duration labels."""
    if logits.shape[:-1] != durations.shape:
        raise ValueError("logit/label length mismatch")
    if ((durations < 1) | (durations > MAX_DURATION)).any():
        raise ValueError("duration label out of [1, 99]")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                           durations.reshape(-1), reduction="sum")


def total_loss(l_ml: torch.Tensor, l_dur: torch.Tensor, cfg: DurModelConfig) -> torch.Tensor:
    return cfg.lambda_ml * l_ml + cfg.lambda_dur * l_dur


# ---------------------------------------------------------------------------
# Sampling


def filter_logits(logits: torch.Tensor, params: SamplingParams,
                  history=()) -> torch.Tensor:
    """Repetition penalty, temperature, top-k, then the smallest nucleus with
    cumulative mass >= top_p; returns a renormalized distribution."""
    logits = logits.to(torch.float64).clone()
    if params.repetition_penalty != 1.0 and len(history) > 0:
        for label in set(int(h) for h in history):
            if logits[label] > 0:
                logits[label] /= params.repetition_penalty
            else:
                logits[label] *= params.repetition_penalty
    logits = logits / params.temperature
    if not torch.isfinite(logits).any():
        raise ValueError("all logits are -inf")
    k = min(params.top_k, logits.shape[-1])
    kth = torch.topk(logits, k).values[-1]
    logits = logits.masked_fill(logits < kth, float("-inf"))
    probs = torch.softmax(logits, dim=-1)
    sorted_probs, order = torch.sort(probs, descending=True)
    cum = torch.cumsum(sorted_probs, dim=-1)
    # smallest prefix whose mass reaches top_p; always keep the first
    cutoff = int(torch.searchsorted(cum, torch.tensor(params.top_p, dtype=cum.dtype),
                                    right=False)) + 1
    cutoff = min(cutoff, int((sorted_probs > 0).sum().clamp_min(1)))
    keep = order[:cutoff]
    out = torch.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def sample_durations(model: DurationModel, prompt: DurationPrompt,
                     target_phonemes: list[int], params: SamplingParams,
                     generator: torch.Generator) -> list[int]:
    """Autoregressive left-to-right sampling; prompt positions are teacher
    forced, one label in [1, 99] per target phoneme by construction."""
    if len(target_phonemes) == 0:
        raise ValueError("empty target phoneme sequence")
    model.eval()
    with torch.no_grad():
        full_ph = torch.tensor([prompt.phonemes + list(target_phonemes)], dtype=torch.long)
        feature_ref = model.pool_reference(prompt.ref_mel)
        h = model.encode(full_ph, feature_ref)
        cache = model.new_cache()
        n_prompt = len(prompt.phonemes)
        emitted: list[int] = []
        prev: int | None = None
        for n in range(full_ph.shape[1]):
            logits = model.decode_step(h[:, n], prev, feature_ref, cache, n)[0]
            if n < n_prompt:
                label = prompt.durations[n]
            else:
                logits = logits.clone()
                logits[0] = float("-inf")  # class 0 reserved
                probs = filter_logits(logits, params, history=emitted)
                label = int(torch.multinomial(probs, 1, generator=generator))
                emitted.append(label)
            prev = label
    return emitted


# ---------------------------------------------------------------------------
# Training


def load_duration_model(path) -> tuple[DurationModel, dict]:
    from .acoustic import load_checkpoint
    ckpt = load_checkpoint(path)
    model = DurationModel(DurModelConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt


def duration_train_step(model, optimizer, phonemes, durations, ref_clips,
                        rng: np.random.Generator) -> dict:
    """One step of the composite masked-LM + duration objective."""
    cfg = model.cfg
    masked, mask = mask_phonemes(phonemes, rng, cfg)
    feature_ref = model.pool_reference(ref_clips)
    h_masked = model.encode(masked, feature_ref)
    l_ml = masked_lm_loss(model.mlm_head(h_masked), mask, phonemes)
    h = model.encode(phonemes, feature_ref)
    logits = model.decode_teacher_forced(h, durations, feature_ref)
    l_dur = duration_loss(logits, durations)
    # normalize by token count so lambda weights stay scale-stable
    n_tok = durations.numel()
    loss = total_loss(l_ml / max(int(mask.sum()), 1), l_dur / n_tok, cfg)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {"loss": float(loss.detach()), "l_ml": float(l_ml.detach()),
            "l_dur": float(l_dur.detach())}


def train_duration(corpus, cfg: DurModelConfig, steps: int, seed: int = 0,
                   batch_size: int = 8, ref_seconds: float = 3.0, mel_cfg=None,
                   lr: float = 1e-3, log_every: int = 0) -> tuple[DurationModel, list]:
    """Desk-scale trainer: batches are built by prefixing a random prompt
    utterance to each target utterance, matching the inference contract."""
    from .data import slice_reference_clip
    torch.manual_seed(seed)
    model = DurationModel(cfg)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    utts = corpus.utterances
    losses = []
    for step in range(steps):
        i = int(rng.integers(0, len(utts)))
        j = int(rng.integers(0, len(utts)))
        prompt_u, target_u = utts[i], utts[j]
        phonemes = torch.tensor([prompt_u.phonemes + target_u.phonemes])
        durations = torch.tensor([prompt_u.durations + target_u.durations])
        clip = slice_reference_clip(prompt_u.mel, ref_seconds, rng, mel_cfg)
        stats = duration_train_step(model, optimizer, phonemes, durations,
                                    torch.from_numpy(clip).float(), rng)
        losses.append(stats["loss"])
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}: loss {sum(losses[-log_every:]) / log_every:.4f}")
    model.eval()
    return model, losses
