"""End-to-end inference: duration sampling, phoneme expansion, guided ODE
sampling of the mel, optional vocoding, duration control, and the desk-scale
evaluation and sweep drivers."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dpo as dpo_mod
from . import flowmatch
from .acoustic import AcousticSystem, CFGParams, SolverConfig
from .data import MAX_DURATION, MelConfig, MelStats, expand_phonemes
from .duration import DurationModel, DurationPrompt, SamplingParams, sample_durations


@dataclass
class VocoderPlugin:
    name: str
    transform: object  # mel [frames, n_mels] -> waveform
    out_rate: int = 16000


@dataclass
class SynthesisRequest:
    target_phonemes: list[int]
    prompt: DurationPrompt
    speaker_ref_mel: np.ndarray
    sampling: SamplingParams = field(default_factory=SamplingParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    cfg: CFGParams = field(default_factory=CFGParams)
    explicit_durations: list[int] | None = None
    seed: int = 0


def synthesize(system: AcousticSystem, duration_model: DurationModel | None,
               req: SynthesisRequest, vocoder: VocoderPlugin | None = None):
    """Returns (mel [sum(d), n_mels], durations, waveform or None).

    The acoustic field is evaluated twice per Euler step: once conditioned,
    once with null conditions, combined by guidance extrapolation."""
    system.eval()
    gen = torch.Generator().manual_seed(req.seed)

    if req.explicit_durations is not None:
        durations = list(req.explicit_durations)
        if len(durations) != len(req.target_phonemes):
            raise ValueError("explicit durations must match target phonemes")
    else:
        if duration_model is None:
            raise ValueError("no duration model and no explicit durations")
        durations = sample_durations(duration_model, req.prompt, req.target_phonemes,
                                     req.sampling, gen)

    expanded = torch.tensor([expand_phonemes(req.target_phonemes, durations)],
                            dtype=torch.long)
    total = expanded.shape[1]
    with torch.no_grad():
        spk = system.speaker_encoder(
            torch.from_numpy(np.ascontiguousarray(req.speaker_ref_mel)).float())
        spk = spk.unsqueeze(0)
        x0 = torch.randn((1, total, system.cfg.n_mels), generator=gen)

        def guided_field(x, t):
            tt = torch.full((1,), t, dtype=x.dtype)
            v_c = system.model(x, expanded, spk, tt, drop_cond=False)
            if req.cfg.alpha == 0.0:
                return v_c
            v_u = system.model(x, expanded, spk, tt, drop_cond=True)
            return flowmatch.cfg_field(v_c, v_u, req.cfg.alpha)

        mel = flowmatch.euler_integrate(guided_field, x0, req.solver.steps)[0]

    waveform = None
    if vocoder is not None:
        waveform = vocoder.transform(mel.numpy())
    return mel.numpy(), durations, waveform


def duration_control(durations: list[int], scale: float,
                     indices=None) -> list[int]:
    """Scale selected durations (all when indices is None); round half up,
    clamp to [1, 99]."""
    if scale <= 0:
        raise ValueError("scale must be > 0")
    n = len(durations)
    if indices is None:
        chosen = set(range(n))
    else:
        chosen = set(indices)
        if any(i < 0 or i >= n for i in chosen):
            raise ValueError("index out of range")
    out = list(durations)
    for i in chosen:
        out[i] = int(min(MAX_DURATION, max(1, np.floor(scale * durations[i] + 0.5))))
    return out


def eval_duration_metrics(predicted, reference) -> dict:
    if len(predicted) != len(reference):
        raise ValueError("length mismatch")
    pred = np.asarray(predicted, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    exact = float((pred == ref).mean())
    mean_abs = float(np.abs(pred - ref).mean())
    total_err = float(abs(pred.sum() - ref.sum()) / max(ref.sum(), 1.0))
    return {"exact_match": exact, "mean_abs_dur_err": mean_abs,
            "total_len_err": total_err}


def speaker_cosine(system: AcousticSystem, mel_a: np.ndarray, mel_b: np.ndarray) -> float:
    with torch.no_grad():
        ea = system.speaker_encoder(torch.from_numpy(np.ascontiguousarray(mel_a)).float())
        eb = system.speaker_encoder(torch.from_numpy(np.ascontiguousarray(mel_b)).float())
    return float((ea * eb).sum())


# ---------------------------------------------------------------------------
# Griffin-Lim fallback vocoder


def griffin_lim_vocoder(mel_cfg: MelConfig, n_iter: int = 32) -> VocoderPlugin:
    from .data import mel_filterbank, LOG_FLOOR

    fb = mel_filterbank(mel_cfg)
    inv_fb = np.linalg.pinv(fb)

    def transform(mel: np.ndarray) -> np.ndarray:
        m = mel.astype(np.float64)
        if mel_cfg.stats is not None:
            m = m * mel_cfg.stats.std + mel_cfg.stats.mean
        mag = np.maximum(inv_fb @ np.exp(m).T, 1e-10)  # [fft_bins, frames]
        rng = np.random.default_rng(0)
        angles = np.exp(2j * np.pi * rng.random(mag.shape))
        window = np.hanning(mel_cfg.frame_size)
        hop, size = mel_cfg.hop, mel_cfg.frame_size
        n_frames = mag.shape[1]
        out_len = n_frames * hop

        def istft(spec):
            frames = np.fft.irfft(spec.T, n=size, axis=1) * window
            x = np.zeros(out_len + size)
            wsum = np.zeros_like(x)
            for i in range(n_frames):
                x[i * hop:i * hop + size] += frames[i]
                wsum[i * hop:i * hop + size] += window ** 2
            x = x / np.maximum(wsum, 1e-8)
            return x[size // 2:size // 2 + out_len]

        def stft(x):
            from .data import stft_magnitude, _frame_signal
            frames = _frame_signal(x, mel_cfg) * window
            return np.fft.rfft(frames, axis=1).T

        spec = mag * angles
        for _ in range(n_iter):
            x = istft(spec)
            new = stft(x)[:, :n_frames]
            angles = new / np.maximum(np.abs(new), 1e-10)
            spec = mag * angles
        x = istft(spec)
        peak = np.abs(x).max()
        return x / peak if peak > 1.0 else x

    return VocoderPlugin(name="griffin-lim", transform=transform,
                         out_rate=mel_cfg.sample_rate)


# ---------------------------------------------------------------------------
# Style-transfer sweep (pair-count trend)


SWEEP_COLUMNS = ["pair_count", "mean_abs_dur_err", "exact_match", "total_len_err"]


def evaluate_policy(policy: DurationModel, utterances, prompt_pool,
                    params: SamplingParams, seed: int, ref_seconds: float = 3.0,
                    mel_cfg=None) -> dict:
    """Mean duration metrics over utterances with prompts drawn from prompt_pool."""
    from .data import slice_reference_clip
    rng = np.random.default_rng(seed)
    rows = []
    for u in utterances:
        pu = prompt_pool[int(rng.integers(0, len(prompt_pool)))]
        clip = slice_reference_clip(pu.mel, ref_seconds, rng, mel_cfg)
        prompt = DurationPrompt(list(pu.phonemes), list(pu.durations), clip)
        gen = torch.Generator().manual_seed(int(rng.integers(0, 2 ** 31)))
        pred = sample_durations(policy, prompt, u.phonemes, params, gen)
        rows.append(eval_duration_metrics(pred, u.durations))
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def style_transfer_sweep(pair_counts: list[int], pairs: list, ref_policy: DurationModel,
                         test_utterances, prompt_pool, dpo_cfg: dpo_mod.DPOConfig,
                         params: SamplingParams | None = None, seeds=(0,),
                         mel_cfg=None, csv_path: str | Path | None = None,
                         batch_size: int = 8,
                         steps_per_pair: float | None = None) -> list[dict]:
    """For each pair count, a fresh DPO run from the same reference snapshot;
    count 0 is the pre-DPO control row. Metrics are seed-medians on the
    held-out utterances. When steps_per_pair is set, the optimizer budget
    scales with the pair count instead of using dpo_cfg.steps."""
    params = params or SamplingParams()
    report = []
    for count in pair_counts:
        if count > len(pairs):
            raise ValueError(f"insufficient pairs: need {count}, have {len(pairs)}")
        per_seed = []
        for seed in seeds:
            if count == 0:
                policy = dpo_mod.clone_policy(ref_policy)
            else:
                policy = dpo_mod.clone_policy(ref_policy)
                steps = dpo_cfg.steps if steps_per_pair is None else \
                    max(1, round(steps_per_pair * count))
                cfg = dpo_mod.DPOConfig(beta=dpo_cfg.beta, lr=dpo_cfg.lr,
                                        steps=steps, seed=seed,
                                        grad_clip=dpo_cfg.grad_clip)
                policy, _ = dpo_mod.dpo_train(policy, ref_policy, pairs[:count], cfg,
                                              batch_size=batch_size)
            per_seed.append(evaluate_policy(policy, test_utterances, prompt_pool,
                                            params, seed=seed + 100, mel_cfg=mel_cfg))
        row = {"pair_count": count}
        for k in ("mean_abs_dur_err", "exact_match", "total_len_err"):
            row[k] = float(np.median([m[k] for m in per_seed]))
        report.append(row)
    if csv_path is not None:
        write_sweep_csv(report, csv_path)
    return report


def write_sweep_csv(report: list[dict], path: str | Path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for row in report:
            w.writerow({k: row[k] for k in SWEEP_COLUMNS})


def write_summary_json(report: list[dict], path: str | Path):
    Path(path).write_text(json.dumps(report, indent=2))
