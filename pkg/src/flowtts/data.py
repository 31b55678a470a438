"""Corpus ingestion: mel extraction, phoneme vocabulary, alignment checks,
and the duration-expansion primitive shared by the rest of the system."""

from __future__ import annotations

import json
import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-5
MAX_DURATION = 99


class ValidationError(ValueError):
    pass


@dataclass
class MelStats:
    """Global mean/variance normalization statistics."""

    mean: float = 0.0
    std: float = 1.0


@dataclass
class MelConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    hop: int = 160
    frame_size: int = 1024
    fmin: float = 0.0
    fmax: float | None = None
    stats: MelStats | None = None

    def __post_init__(self):
        if self.hop <= 0:
            raise ValidationError(f"hop must be > 0, got {self.hop}")
        if self.frame_size < self.hop:
            raise ValidationError("frame_size must be >= hop")
        if self.n_mels <= 0:
            raise ValidationError("n_mels must be > 0")
        if self.fmax is None:
            self.fmax = self.sample_rate / 2

    def n_frames(self, n_samples: int) -> int:
        # centered framing: one frame per hop, ceil(len/hop) total
        return math.ceil(n_samples / self.hop)

    def frames_for_seconds(self, seconds: float) -> int:
        return int(round(seconds * self.sample_rate / self.hop))


PAD, MASK, UNK, BOS = 0, 1, 2, 3
RESERVED = ["<pad>", "<mask>", "<unk>", "<bos>"]


class PhonemeVocab:
    """Dense symbol->id map with fixed reserved ids."""

    def __init__(self, symbols: list[str]):
        for s in symbols:
            if s in RESERVED:
                raise ValidationError(f"reserved symbol in vocab: {s}")
        if len(set(symbols)) != len(symbols):
            raise ValidationError("duplicate symbols")
        self._symbols = list(RESERVED) + list(symbols)
        self._index = {s: i for i, s in enumerate(self._symbols)}

    def __len__(self) -> int:
        return len(self._symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def id(self, symbol: str) -> int:
        return self._index.get(symbol, UNK)

    def symbol(self, idx: int) -> str:
        return self._symbols[idx]

    def encode(self, symbols: list[str]) -> list[int]:
        return [self.id(s) for s in symbols]

    @property
    def real_ids(self) -> range:
        return range(len(RESERVED), len(self._symbols))

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self._symbols[len(RESERVED):]))

    @classmethod
    def load(cls, path: str | Path) -> "PhonemeVocab":
        return cls(json.loads(Path(path).read_text()))


@dataclass
class Utterance:
    id: str
    speaker: str
    phonemes: list[int]
    durations: list[int]
    mel: np.ndarray  # [frames, n_mels]
    text: str = ""


@dataclass
class ValidationResult:
    accepted: bool
    reason: str | None = None


def validate_and_filter(utt: Utterance, vocab: PhonemeVocab | None = None) -> ValidationResult:
    """Accept or reject an utterance; rejection is a value, not an error."""
    if len(utt.phonemes) != len(utt.durations):
        return ValidationResult(False, "length mismatch")
    if any(d < 1 for d in utt.durations):
        return ValidationResult(False, "nonpositive duration")
    if any(d > MAX_DURATION for d in utt.durations):
        return ValidationResult(False, "duration>99")
    if sum(utt.durations) != utt.mel.shape[0]:
        return ValidationResult(False, "alignment mismatch")
    if vocab is not None:
        known = set(vocab.real_ids)
        if any(p not in known for p in utt.phonemes):
            return ValidationResult(False, "unknown phoneme")
    return ValidationResult(True)


def expand_phonemes(phonemes, durations) -> list[int]:
    """Repeat each phoneme id by its frame count so the text stream matches
    the mel frame axis exactly."""
    if len(phonemes) != len(durations):
        raise ValidationError("phonemes and durations must have equal length")
    out = []
    for p, d in zip(phonemes, durations):
        if d < 1:
            raise ValidationError(f"duration must be >= 1, got {d}")
        out.extend([p] * int(d))
    return out


def run_length_decode(expanded) -> tuple[list[int], list[int]]:
    """Inverse of expand_phonemes for round-trip checks."""
    phonemes, durations = [], []
    for p in expanded:
        if phonemes and phonemes[-1] == p:
            durations[-1] += 1
        else:
            phonemes.append(p)
            durations.append(1)
    return phonemes, durations


def slice_reference_clip(mel: np.ndarray, seconds: float, rng: np.random.Generator,
                         cfg: MelConfig | None = None) -> np.ndarray:
    """Contiguous random clip of min(requested, available) frames."""
    if mel.shape[0] < 1:
        raise ValidationError("empty mel")
    cfg = cfg or MelConfig()
    want = max(1, cfg.frames_for_seconds(seconds))
    n = mel.shape[0]
    if want >= n:
        return mel
    start = int(rng.integers(0, n - want + 1))
    return mel[start:start + want]


# ---------------------------------------------------------------------------
# Mel extraction


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center frequency in Hz of each triangular filter."""
    pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(pts)[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filterbank [n_mels, frame_size//2 + 1]."""
    n_fft_bins = cfg.frame_size // 2 + 1
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, n_fft_bins)
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_fft_bins))
    for i in range(cfg.n_mels):
        lo, ctr, hi = pts[i], pts[i + 1], pts[i + 2]
        up = (fft_freqs - lo) / max(ctr - lo, 1e-10)
        down = (hi - fft_freqs) / max(hi - ctr, 1e-10)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def _frame_signal(waveform: np.ndarray, cfg: MelConfig) -> np.ndarray:
    pad = cfg.frame_size // 2
    padded = np.pad(waveform, (pad, pad), mode="reflect" if len(waveform) > pad else "constant")
    n_frames = cfg.n_frames(len(waveform))
    idx = np.arange(cfg.frame_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    # guard against the last centered frame running past the padded end
    if idx.max() >= len(padded):
        padded = np.pad(padded, (0, idx.max() - len(padded) + 1))
    return padded[idx]


def stft_magnitude(waveform: np.ndarray, cfg: MelConfig) -> np.ndarray:
    frames = _frame_signal(waveform, cfg)
    window = np.hanning(cfg.frame_size)
    return np.abs(np.fft.rfft(frames * window, axis=1))


def compute_mel(waveform, cfg: MelConfig, sample_rate: int | None = None) -> np.ndarray:
    """Log-mel matrix [frames, n_mels]; centered frames, ceil(len/hop) of them."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise ValidationError("empty waveform")
    if sample_rate is not None and sample_rate != cfg.sample_rate:
        raise ValidationError(
            f"sample rate mismatch: got {sample_rate}, config says {cfg.sample_rate}")
    mag = stft_magnitude(waveform, cfg)
    mel = mag @ mel_filterbank(cfg).T
    mel = np.log(np.maximum(mel, LOG_FLOOR))
    if cfg.stats is not None:
        mel = (mel - cfg.stats.mean) / cfg.stats.std
    return mel.astype(np.float32)


def compute_mel_stats(mels: list[np.ndarray]) -> MelStats:
    flat = np.concatenate([m.reshape(-1) for m in mels])
    return MelStats(mean=float(flat.mean()), std=float(max(flat.std(), 1e-8)))


# ---------------------------------------------------------------------------
# Persistence: WAV in, mel binary container, JSONL manifest

MEL_MAGIC = b"MELF"


def save_mel(mel: np.ndarray, path: str | Path):
    mel = np.ascontiguousarray(mel, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(MEL_MAGIC)
        f.write(struct.pack("<II", mel.shape[0], mel.shape[1]))
        f.write(mel.tobytes())


def load_mel(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != MEL_MAGIC:
            raise ValidationError(f"not a mel container: {path}")
        rows, cols = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(rows * cols * 4), dtype=np.float32)
    return data.reshape(rows, cols).copy()


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Mono PCM WAV as float64 in [-1, 1]."""
    with wave.open(str(path), "rb") as w:
        rate = w.getframerate()
        n = w.getnframes()
        width = w.getsampwidth()
        raw = w.readframes(n)
        channels = w.getnchannels()
    if width == 2:
        x = np.frombuffer(raw, dtype=np.int16).astype(np.float64) / 32768.0
    elif width == 4:
        x = np.frombuffer(raw, dtype=np.int32).astype(np.float64) / 2147483648.0
    else:
        raise ValidationError(f"unsupported sample width {width}")
    if channels > 1:
        x = x.reshape(-1, channels).mean(axis=1)
    return x, rate


def write_wav(path: str | Path, waveform: np.ndarray, rate: int):
    x = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    pcm = (x * 32767.0).astype(np.int16)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


@dataclass
class ManifestRecord:
    id: str
    speaker: str
    text: str
    phonemes: list[str]
    durations: list[int]
    audio: str


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | Path, check_files: bool = True) -> "Manifest":
        base = Path(path).parent
        records = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            rec = ManifestRecord(id=d["id"], speaker=d["speaker"], text=d.get("text", ""),
                                 phonemes=d["phonemes"], durations=d["durations"],
                                 audio=d["audio"])
            if check_files and not (base / rec.audio).exists() and not Path(rec.audio).exists():
                raise ValidationError(f"missing audio file: {rec.audio}")
            records.append(rec)
        return cls(records)

    def save(self, path: str | Path):
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps({"id": r.id, "speaker": r.speaker, "text": r.text,
                                    "phonemes": r.phonemes, "durations": r.durations,
                                    "audio": r.audio}) + "\n")


# ---------------------------------------------------------------------------
# Synthetic corpus for tests and desk-scale experiments


def _phoneme_template(pid: int, n_mels: int) -> np.ndarray:
    """Band-limited spectral bump, deterministic per phoneme id."""
    center = (pid * 7 + 5) % n_mels
    width = 3.0 + (pid % 3)
    bins = np.arange(n_mels)
    bump = np.exp(-0.5 * ((bins - center) / width) ** 2)
    return 4.0 * bump - 2.0


def _speaker_tilt(speaker_idx: int, n_mels: int) -> np.ndarray:
    bins = np.linspace(-1, 1, n_mels)
    return 0.8 * bins if speaker_idx % 2 == 0 else -0.8 * bins


@dataclass
class SyntheticCorpus:
    vocab: PhonemeVocab
    utterances: list[Utterance]
    stats: MelStats
    base_durations: dict[int, int]


def save_corpus(corpus: "SyntheticCorpus", out_dir: str | Path):
    out = Path(out_dir)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out / "vocab.json")
    meta = {"stats": {"mean": corpus.stats.mean, "std": corpus.stats.std},
            "base_durations": {str(k): v for k, v in corpus.base_durations.items()}}
    (out / "corpus.json").write_text(json.dumps(meta))
    with open(out / "utterances.jsonl", "w") as f:
        for u in corpus.utterances:
            mel_path = out / "mels" / f"{u.id}.mel"
            save_mel(u.mel, mel_path)
            f.write(json.dumps({"id": u.id, "speaker": u.speaker, "text": u.text,
                                "phonemes": u.phonemes, "durations": u.durations,
                                "mel": f"mels/{u.id}.mel"}) + "\n")


def load_corpus(in_dir: str | Path) -> "SyntheticCorpus":
    base = Path(in_dir)
    vocab = PhonemeVocab.load(base / "vocab.json")
    meta = json.loads((base / "corpus.json").read_text())
    stats = MelStats(**meta["stats"])
    base_durs = {int(k): v for k, v in meta.get("base_durations", {}).items()}
    utts = []
    for line in (base / "utterances.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        utts.append(Utterance(id=d["id"], speaker=d["speaker"], text=d.get("text", ""),
                              phonemes=d["phonemes"], durations=d["durations"],
                              mel=load_mel(base / d["mel"])))
    return SyntheticCorpus(vocab=vocab, utterances=utts, stats=stats,
                           base_durations=base_durs)


def synthetic_corpus(n_utterances: int = 8, n_speakers: int = 2, n_phonemes: int = 8,
                     min_len: int = 6, max_len: int = 10, seed: int = 0,
                     duration_scale: float = 1.0, n_mels: int = 80) -> SyntheticCorpus:
    """Deterministic toy corpus: each phoneme id maps to a fixed spectral
    template and a base duration, so tiny models can overfit it."""
    rng = np.random.default_rng(seed)
    vocab = PhonemeVocab([f"p{i}" for i in range(n_phonemes)])
    ids = list(vocab.real_ids)
    base = {pid: 2 + (pid % 4) for pid in ids}

    raw_utts = []
    for i in range(n_utterances):
        speaker_idx = i % n_speakers
        length = int(rng.integers(min_len, max_len + 1))
        phonemes = [ids[int(rng.integers(0, len(ids)))] for _ in range(length)]
        durations = [max(1, min(MAX_DURATION, int(round(base[p] * duration_scale))))
                     for p in phonemes]
        frames = []
        for p, d in zip(phonemes, durations):
            frames.extend([_phoneme_template(p, n_mels) + _speaker_tilt(speaker_idx, n_mels)] * d)
        mel = np.stack(frames).astype(np.float32)
        raw_utts.append(Utterance(id=f"utt{i:04d}", speaker=f"spk{speaker_idx}",
                                  phonemes=phonemes, durations=durations, mel=mel))

    stats = compute_mel_stats([u.mel for u in raw_utts])
    for u in raw_utts:
        u.mel = ((u.mel - stats.mean) / stats.std).astype(np.float32)
    return SyntheticCorpus(vocab=vocab, utterances=raw_utts, stats=stats, base_durations=base)
