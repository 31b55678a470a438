"""Preference optimization over duration sequences: pair construction,
pre-filtering, the sequence-level log-ratio objective against a frozen
reference policy, and the training loop."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import MAX_DURATION, slice_reference_clip
from .duration import DurationModel, DurationPrompt, SamplingParams, sample_durations


@dataclass
class PreferencePair:
    id: str
    prompt: DurationPrompt
    phonemes: list[int]       # target phonemes
    d_w: list[int]
    d_l: list[int]
    source: str = "oracle"    # human | oracle | ground-truth

    def __post_init__(self):
        n = len(self.phonemes)
        if len(self.d_w) != n or len(self.d_l) != n:
            raise ValueError("winner/loser lengths must match target phonemes")
        for d in (*self.d_w, *self.d_l):
            if not 1 <= d <= MAX_DURATION:
                raise ValueError(f"duration label out of [1, 99]: {d}")
        if self.d_w == self.d_l:
            raise ValueError("winner and loser must differ")


@dataclass
class DPOConfig:
    beta: float = 0.1
    lr: float = 1e-4
    steps: int = 200
    seed: int = 0
    divergence_factor: float = 10.0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")


def seq_logprob(policy: DurationModel, prompt: DurationPrompt,
                phonemes: list[int], durations: list[int]) -> torch.Tensor:
    """Teacher-forced log-probability of the target duration sequence,
    prompt region excluded from the score."""
    for d in durations:
        if not 1 <= d <= MAX_DURATION:
            raise ValueError(f"duration label out of [1, 99]: {d}")
    full_ph = torch.tensor([prompt.phonemes + list(phonemes)], dtype=torch.long)
    full_d = torch.tensor([prompt.durations + list(durations)], dtype=torch.long)
    logits = policy(full_ph, full_d, prompt.ref_mel)
    logp = F.log_softmax(logits, dim=-1)
    n_prompt = len(prompt.phonemes)
    target = full_d[:, n_prompt:]
    return logp[0, n_prompt:].gather(-1, target[0, :, None]).sum()


def _margin(policy, ref_policy, pair: PreferencePair) -> torch.Tensor:
    lp_w = seq_logprob(policy, pair.prompt, pair.phonemes, pair.d_w)
    lp_l = seq_logprob(policy, pair.prompt, pair.phonemes, pair.d_l)
    with torch.no_grad():
        rp_w = seq_logprob(ref_policy, pair.prompt, pair.phonemes, pair.d_w)
        rp_l = seq_logprob(ref_policy, pair.prompt, pair.phonemes, pair.d_l)
    return (lp_w - rp_w) - (lp_l - rp_l)


def dpo_loss(policy, ref_policy, pair: PreferencePair, beta: float) -> torch.Tensor:
    """-log sigmoid(beta * log-ratio margin), computed in log space."""
    m = _margin(policy, ref_policy, pair).double()
    if not torch.isfinite(m):
        raise RuntimeError("non-finite preference margin")
    return -F.logsigmoid(beta * m)


def bt_preference_prob(policy, ref_policy, pair: PreferencePair, beta: float) -> torch.Tensor:
    """Bradley-Terry probability that the winner is preferred; equals
    exp(-dpo_loss) by construction."""
    return torch.sigmoid(beta * _margin(policy, ref_policy, pair).double())


# ---------------------------------------------------------------------------
# Pair construction


def generate_pairs(utterances, policy: DurationModel, rng: np.random.Generator,
                   params: SamplingParams | None = None, ref_seconds: float = 3.0,
                   mel_cfg=None, source: str = "ground-truth") -> list[PreferencePair]:
    """Policy prediction as loser, ground truth as winner; degenerate pairs
    (prediction == truth) are dropped."""
    params = params or SamplingParams()
    pairs = []
    for u in utterances:
        k = int(rng.integers(0, len(utterances)))
        prompt_u = utterances[k]
        clip = slice_reference_clip(prompt_u.mel, ref_seconds, rng, mel_cfg)
        prompt = DurationPrompt(phonemes=list(prompt_u.phonemes),
                                durations=list(prompt_u.durations), ref_mel=clip)
        gen = torch.Generator().manual_seed(int(rng.integers(0, 2 ** 31)))
        d_l = sample_durations(policy, prompt, u.phonemes, params, gen)
        if d_l == list(u.durations):
            continue
        pairs.append(PreferencePair(id=u.id, prompt=prompt, phonemes=list(u.phonemes),
                                    d_w=list(u.durations), d_l=d_l, source=source))
    return pairs


def phoneme_duration_medians(utterances) -> dict[int, float]:
    per: dict[int, list[int]] = {}
    for u in utterances:
        for p, d in zip(u.phonemes, u.durations):
            per.setdefault(p, []).append(d)
    return {p: float(np.median(ds)) for p, ds in per.items()}


@dataclass
class Candidate:
    id: str
    phonemes: list[int]
    durations: list[int]


def prefilter_candidates(candidates: list[Candidate], medians: dict[int, float],
                         threshold: float = 4.0) -> tuple[list[Candidate], list[tuple[Candidate, str]]]:
    """Abnormal-pause rule: reject when any non-boundary phoneme runs past
    threshold x its corpus median duration. A WER hook is not provided here;
    external ASR filtering plugs in upstream of this call."""
    kept, rejected = [], []
    for c in candidates:
        reason = None
        for i, (p, d) in enumerate(zip(c.phonemes, c.durations)):
            if i == 0 or i == len(c.phonemes) - 1:
                continue
            med = medians.get(p)
            if med is not None and d > threshold * med:
                reason = "abnormal pause"
                break
        if reason:
            rejected.append((c, reason))
        else:
            kept.append(c)
    return kept, rejected


# ---------------------------------------------------------------------------
# JSONL interchange (shared with the annotation service export)


def pair_to_record(pair: PreferencePair, ref_mel_path: str) -> dict:
    return {"id": pair.id,
            "prompt": {"phonemes": pair.prompt.phonemes,
                       "durations": pair.prompt.durations,
                       "ref_mel": ref_mel_path},
            "phonemes": pair.phonemes, "d_w": pair.d_w, "d_l": pair.d_l,
            "source": pair.source}


def save_pairs(pairs: list[PreferencePair], path: str | Path, mel_dir: str | Path):
    from .data import save_mel
    mel_dir = Path(mel_dir)
    mel_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for i, p in enumerate(pairs):
            mel_path = mel_dir / f"ref_{i:05d}.mel"
            save_mel(p.prompt.ref_mel, mel_path)
            f.write(json.dumps(pair_to_record(p, str(mel_path))) + "\n")


def load_pairs(path: str | Path) -> list[PreferencePair]:
    from .data import load_mel
    pairs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        prompt = DurationPrompt(phonemes=d["prompt"]["phonemes"],
                                durations=d["prompt"]["durations"],
                                ref_mel=load_mel(d["prompt"]["ref_mel"]))
        pairs.append(PreferencePair(id=d["id"], prompt=prompt, phonemes=d["phonemes"],
                                    d_w=d["d_w"], d_l=d["d_l"], source=d["source"]))
    return pairs


# ---------------------------------------------------------------------------
# Training


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def mean_margin(policy, ref_policy, pairs, beta: float) -> float:
    with torch.no_grad():
        return float(np.mean([beta * float(_margin(policy, ref_policy, p))
                              for p in pairs]))


def dpo_train(policy: DurationModel, ref_policy: DurationModel,
              pairs: list[PreferencePair], cfg: DPOConfig,
              batch_size: int = 8) -> tuple[DurationModel, dict]:
    """Optimize the policy on preference pairs against a frozen reference.
    Aborts with diagnostics on divergence (loss > divergence_factor x initial)."""
    if not pairs:
        raise ValueError("no preference pairs")
    ref_policy.eval()
    ref_hash = parameter_hash(ref_policy)

    policy.train()
    for p in policy.parameters():
        p.requires_grad_(True)
    optimizer = torch.optim.AdamW(policy.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    initial_loss = None
    history = []
    for step in range(cfg.steps):
        idx = rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)
        losses = [dpo_loss(policy, ref_policy, pairs[i], cfg.beta) for i in idx]
        loss = torch.stack(losses).mean()
        if initial_loss is None:
            initial_loss = float(loss.detach())
        if float(loss.detach()) > cfg.divergence_factor * max(initial_loss, 1e-3):
            raise RuntimeError(
                f"DPO diverged at step {step}: loss {float(loss):.4f} "
                f"vs initial {initial_loss:.4f}")
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.grad_clip)
        optimizer.step()
        history.append(float(loss.detach()))
    policy.eval()
    if parameter_hash(ref_policy) != ref_hash:
        raise RuntimeError("reference policy parameters changed during DPO")
    return policy, {"loss_history": history, "ref_hash": ref_hash}


def clone_policy(policy: DurationModel) -> DurationModel:
    return copy.deepcopy(policy)
