"""Corpus ingestion, noisy test-set synthesis and the synthetic toy corpus.

Speech follows the Google Speech Commands layout (one directory per word,
``validation_list.txt`` / ``testing_list.txt`` naming dev and test members by
relative path). Noise is any directory tree of WAV files (MUSAN layout) or
one long recording cropped at random offsets (QUT style). All audio must
already be 16 kHz mono; resampling is a preprocessing step outside this
package.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.io import wavfile

from . import spectral
from .errors import DataError, InvalidConfigError, InvalidInputError, InvalidStateError
from .spectral import StftConfig

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000


@dataclass
class Utterance:
    samples: np.ndarray
    label: int
    id: str


@dataclass
class NoiseClip:
    samples: np.ndarray
    id: str


@dataclass
class DatasetSplit:
    train: list[Utterance] = field(default_factory=list)
    dev: list[Utterance] = field(default_factory=list)
    test: list[Utterance] = field(default_factory=list)
    noise_train: list[NoiseClip] = field(default_factory=list)
    noise_test: list[NoiseClip] = field(default_factory=list)
    words: list[str] = field(default_factory=list)
    rejected: list[tuple[str, str]] = field(default_factory=list)


def waveforms(items: Sequence[Utterance | NoiseClip]) -> torch.Tensor:
    """Stack clips into a float32 ``(N, 16000)`` tensor."""
    if not items:
        return torch.zeros((0, CLIP_SAMPLES), dtype=torch.float32)
    return torch.from_numpy(np.stack([it.samples for it in items]).astype(np.float32))


def labels(items: Sequence[Utterance]) -> torch.Tensor:
    return torch.tensor([u.label for u in items], dtype=torch.long)


# --------------------------------------------------------------------- WAV I/O

def read_wav(path: str | os.PathLike, expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Mono 16-bit PCM or 32-bit float WAV as float64 in [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise DataError(f"{path}: unreadable WAV ({exc})") from exc
    if data.ndim != 1:
        raise DataError(f"{path}: {data.shape[1]} channels; only mono audio is supported")
    if rate != expected_rate:
        raise DataError(f"{path}: sampled at {rate} Hz; resample to {expected_rate} Hz "
                        f"before ingestion (e.g. `sox in.wav -r {expected_rate} out.wav`)")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.float32:
        out = data.astype(np.float64)
        if not np.all(np.isfinite(out)):
            raise DataError(f"{path}: non-finite samples")
        return out
    raise DataError(f"{path}: sample format {data.dtype} unsupported; use 16-bit PCM or 32-bit float")


def write_wav(path: str | os.PathLike, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write 16-bit PCM, clipping to [-1, 1)."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, rate, pcm)


def pad_to_clip(samples: np.ndarray) -> np.ndarray:
    """Tail-pad with zeros (or truncate) to exactly one second."""
    out = np.zeros(CLIP_SAMPLES, dtype=np.float64)
    n = min(len(samples), CLIP_SAMPLES)
    out[:n] = samples[:n]
    return out


# ------------------------------------------------------------------ speech corpus

def _read_list(path: str | os.PathLike | None, what: str) -> set[str]:
    if path is None or not Path(path).is_file():
        raise InvalidInputError(f"{what} list file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return {line.strip().replace("\\", "/") for line in fh if line.strip()}


def list_words(root: str | os.PathLike) -> list[str]:
    """Word directories in sorted order; ``_background_noise_`` and friends are skipped."""
    root = Path(root)
    if not root.is_dir():
        raise InvalidInputError(f"speech corpus directory not found: {root}")
    return sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith(("_", ".")))


def load_speech_corpus(root: str | os.PathLike, dev_list: str | os.PathLike | None = None,
                       test_list: str | os.PathLike | None = None) -> DatasetSplit:
    """Load a GSC-layout corpus into train/dev/test lists.

    Labels index the sorted word directories. Files that are not 16 kHz mono
    are skipped and reported in ``split.rejected``.
    """
    root = Path(root)
    dev_list = root / "validation_list.txt" if dev_list is None else dev_list
    test_list = root / "testing_list.txt" if test_list is None else test_list
    dev_ids, test_ids = _read_list(dev_list, "dev"), _read_list(test_list, "test")
    both = dev_ids & test_ids
    if both:
        raise DataError(f"{len(both)} files listed as both dev and test, e.g. {sorted(both)[0]}")
    words = list_words(root)
    if not words:
        raise InvalidStateError(f"no word directories under {root}")
    split = DatasetSplit(words=words)
    for label, word in enumerate(words):
        for wav in sorted((root / word).glob("*.wav")):
            rel = f"{word}/{wav.name}"
            try:
                samples = read_wav(wav)
            except DataError as exc:
                split.rejected.append((rel, str(exc)))
                log.warning("rejected %s", exc)
                continue
            utt = Utterance(pad_to_clip(samples), label, rel)
            if rel in dev_ids:
                split.dev.append(utt)
            elif rel in test_ids:
                split.test.append(utt)
            else:
                split.train.append(utt)
    return split


# ------------------------------------------------------------------- noise corpora

def load_noise_corpus(root: str | os.PathLike, train_fraction: float,
                      rng: np.random.Generator) -> tuple[list[NoiseClip], list[NoiseClip]]:
    """First second of every WAV at least 1 s long, split into train/test pools.

    Clip ids are sorted before the seeded shuffle, so the split depends only
    on directory contents and the seed.
    """
    if not 0.0 <= train_fraction <= 1.0:
        raise InvalidConfigError(f"train_fraction must lie in [0, 1], got {train_fraction}")
    root = Path(root)
    if not root.is_dir():
        raise InvalidInputError(f"noise corpus directory not found: {root}")
    clips = []
    for wav in sorted(root.rglob("*.wav")):
        rel = wav.relative_to(root).as_posix()
        try:
            samples = read_wav(wav)
        except DataError as exc:
            log.warning("rejected %s", exc)
            continue
        if len(samples) < CLIP_SAMPLES:
            continue
        clips.append(NoiseClip(samples[:CLIP_SAMPLES].copy(), rel))
    if not clips:
        raise InvalidStateError(f"no noise recordings of at least 1 s under {root}")
    order = rng.permutation(len(clips))
    n_train = int(math.floor(train_fraction * len(clips) + 0.5))
    shuffled = [clips[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


def crop_offsets(n_samples: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if n_samples < CLIP_SAMPLES:
        raise InvalidInputError(f"recording has {n_samples} samples, need at least {CLIP_SAMPLES}")
    return rng.integers(0, n_samples - CLIP_SAMPLES + 1, size=count)


def crop_long_noise(source: str | os.PathLike | np.ndarray, count: int,
                    rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> list[NoiseClip]:
    """``count`` random one-second windows of a long recording."""
    if isinstance(source, np.ndarray):
        if sample_rate != SAMPLE_RATE:
            raise InvalidInputError(f"recording is {sample_rate} Hz; resample to {SAMPLE_RATE} Hz first")
        samples, name = np.asarray(source, dtype=np.float64), "array"
    else:
        samples, name = read_wav(source), Path(source).name
    return [NoiseClip(samples[o:o + CLIP_SAMPLES].copy(), f"{name}@{int(o)}")
            for o in crop_offsets(len(samples), count, rng)]


# ----------------------------------------------------------------- noisy test sets

@dataclass
class EvalSet:
    """Test utterances paired with noise clips at one set-level SNR.

    Features are produced lazily in batches; ``gain`` is set over the whole
    set so that its measured SNR equals ``snr_db``.
    """
    speech: torch.Tensor
    labels: torch.Tensor
    noise: torch.Tensor | None
    snr_db: float
    gain: float = 0.0
    name: str = "clean"
    config: StftConfig = StftConfig()

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def batches(self, batch_size: int = 256) -> Iterable[tuple[torch.Tensor, torch.Tensor]]:
        for start in range(0, len(self), batch_size):
            sl = slice(start, start + batch_size)
            s = spectral.stft(self.speech[sl].to(torch.float64), self.config)
            if self.noise is not None and self.gain > 0.0:
                n = spectral.stft(self.noise[sl].to(torch.float64), self.config)
                s = spectral.mix(s, n, 1.0, self.gain)
            yield (spectral.log_magnitude(s, self.config.amplitude_floor).to(torch.float32),
                   self.labels[sl])

    def component_powers(self, batch_size: int = 256) -> tuple[float, float]:
        """Total speech power and total added-noise power over the set."""
        p_s = p_n = 0.0
        for start in range(0, len(self), batch_size):
            sl = slice(start, start + batch_size)
            s = spectral.stft(self.speech[sl].to(torch.float64), self.config)
            p_s += float(s.abs().square().sum())
            if self.noise is not None and self.gain > 0.0:
                n = spectral.stft(self.noise[sl].to(torch.float64), self.config)
                p_n += float((self.gain * n).abs().square().sum())
        return p_s, p_n

    def measured_snr(self) -> float:
        p_s, p_n = self.component_powers()
        return math.inf if p_n == 0.0 else 10.0 * math.log10(p_s / p_n)


def clean_set(utterances: Sequence[Utterance], name: str = "clean",
              config: StftConfig = StftConfig()) -> EvalSet:
    return EvalSet(waveforms(utterances), labels(utterances), None, math.inf, 0.0, name, config)


def synth_noisy_testset(utterances: Sequence[Utterance], noise: Sequence[NoiseClip],
                        snr_list: Sequence[float], rng: np.random.Generator, name: str = "noisy",
                        config: StftConfig = StftConfig()) -> dict[float, EvalSet]:
    """One evaluation set per SNR with a noise pairing shared across SNRs."""
    if not snr_list:
        raise InvalidConfigError("snr_list is empty")
    if not noise:
        raise InvalidStateError("noise source is empty")
    speech = waveforms(utterances)
    pairing = rng.integers(0, len(noise), size=len(utterances))
    paired = waveforms([noise[i] for i in pairing])
    probe = EvalSet(speech, labels(utterances), paired, 0.0, 1.0, name, config)
    p_s, p_n = probe.component_powers()
    out = {}
    for v in snr_list:
        v = float(v)
        if v == math.inf:
            out[v] = EvalSet(speech, probe.labels, None, v, 0.0, name, config)
            continue
        if p_n == 0.0:
            raise InvalidStateError("paired noise has zero power")
        gain = math.sqrt(p_s / (10.0 ** (v / 10.0) * p_n))
        out[v] = EvalSet(speech, probe.labels, paired, v, gain, name, config)
    return out


# ------------------------------------------------------------------- toy corpus

@dataclass(frozen=True)
class CueRegion:
    """A class's discriminative region, in Hz and seconds."""
    f_lo: float
    f_hi: float
    t_start: float
    t_stop: float

    def bins(self, config: StftConfig = StftConfig()) -> tuple[int, int, int, int]:
        """``(f0, f1, t0, t1)`` half-open STFT index ranges covering the region."""
        hz_per_bin = config.sample_rate / config.window_length
        frames_per_s = config.sample_rate / config.hop_length
        f0 = int(math.floor(self.f_lo / hz_per_bin))
        f1 = int(math.ceil(self.f_hi / hz_per_bin)) + 1
        t0 = int(math.floor(self.t_start * frames_per_s))
        t1 = int(math.ceil(self.t_stop * frames_per_s)) + 1
        return max(f0, 0), min(f1, config.n_freq), max(t0, 0), min(t1, config.n_frames)

    def overlaps(self, other: "CueRegion") -> bool:
        return (self.f_lo < other.f_hi and other.f_lo < self.f_hi
                and self.t_start < other.t_stop and other.t_start < self.t_stop)


# Distinct bands spanning most of the clip: the recognizer pools each frequency
# channel over time, so a cue's whole band is what carries its class.
DEFAULT_CUES = (
    CueRegion(600.0, 1000.0, 0.10, 0.90),
    CueRegion(1500.0, 1900.0, 0.10, 0.90),
    CueRegion(2600.0, 3000.0, 0.10, 0.90),
    CueRegion(3800.0, 4200.0, 0.10, 0.90),
)


@dataclass(frozen=True)
class ToySpec:
    """Recipe for the synthetic corpus.

    A clean clip holds a pink floor of random level, a cluster of steady
    tones inside its class's cue region, energy-matched band noise
    ("decoys") inside every other class's cue region, and band-noise
    "distractors" at random places and levels outside all cue regions. Band
    energy therefore says nothing about the class; only the tonal structure
    inside the class's own region does. Noise clips are broadband with
    bursts and sweeps; mixed at low SNR they bury the tones unless the cue
    region is kept clean.
    """
    cues: tuple[CueRegion, ...] = DEFAULT_CUES
    n_tones: int = 3
    tone_amplitude: float = 0.05
    decoys: bool = True
    background_db: tuple[float, float] = (-50.0, -25.0)
    n_distractors: tuple[int, int] = (2, 6)
    n_noise: int = 40
    noise_train_fraction: float = 0.8
    # clips are free to generate while training cost grows with the train split,
    # so most of each class goes to dev/test to keep error estimates tight
    dev_fraction: float = 0.16
    test_fraction: float = 0.6

    def validate(self) -> None:
        for i, a in enumerate(self.cues):
            if not (0 <= a.f_lo < a.f_hi <= SAMPLE_RATE / 2 and 0 <= a.t_start < a.t_stop <= 1.0):
                raise InvalidConfigError(f"cue {i} lies outside the 1 s / 8 kHz plane: {a}")
            for j, b in enumerate(self.cues[:i]):
                if a.overlaps(b):
                    raise InvalidConfigError(f"cue regions {j} and {i} overlap")


@dataclass
class ToyCorpus:
    split: DatasetSplit
    spec: ToySpec

    def region_mask(self, label: int, config: StftConfig = StftConfig()) -> np.ndarray:
        """Boolean ``(F, T)`` map of the ground-truth important region for ``label``."""
        return region_mask(self.spec.cues[label], config)


def region_mask(cue: CueRegion, config: StftConfig = StftConfig()) -> np.ndarray:
    f0, f1, t0, t1 = cue.bins(config)
    out = np.zeros(config.shape, dtype=bool)
    out[f0:f1, t0:t1] = True
    return out


def _pink(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / np.sqrt(np.mean(x ** 2))


def _band_noise(t: np.ndarray, f_lo: float, f_hi: float, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(t.size))
    freqs = np.fft.rfftfreq(t.size, 1.0 / SAMPLE_RATE)
    spec[(freqs < f_lo) | (freqs > f_hi)] = 0.0
    x = np.fft.irfft(spec, t.size)
    return x / np.sqrt(np.mean(x ** 2) + 1e-12)


def _envelope(t: np.ndarray, cue: CueRegion, rng: np.random.Generator) -> np.ndarray:
    onset = cue.t_start + rng.uniform(0.0, 0.03)
    offset = cue.t_stop - rng.uniform(0.0, 0.03)
    inside = (t >= onset) & (t <= offset)
    env = np.zeros_like(t)
    env[inside] = np.sin(np.pi * (t[inside] - onset) / (offset - onset)) ** 0.5
    return env


def _toy_utterance(label: int, spec: ToySpec, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(CLIP_SAMPLES) / SAMPLE_RATE
    level = 10.0 ** (rng.uniform(*spec.background_db) / 20.0)
    x = level * _pink(CLIP_SAMPLES, rng)
    cue = spec.cues[label]
    margin = 0.1 * (cue.f_hi - cue.f_lo)
    freqs = np.sort(rng.uniform(cue.f_lo + margin, cue.f_hi - margin, size=spec.n_tones))
    env = _envelope(t, cue, rng)
    amps = spec.tone_amplitude * rng.uniform(0.7, 1.0, size=spec.n_tones)
    for f, a in zip(freqs, amps):
        x += a * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    tone_rms = np.sqrt(np.sum(amps ** 2) / 2.0)
    if spec.decoys:
        for k, other in enumerate(spec.cues):
            if k != label:
                x += (tone_rms * rng.uniform(0.7, 1.0) * _envelope(t, other, rng)
                      * _band_noise(t, other.f_lo, other.f_hi, rng))
    for region in _distractor_regions(spec, rng):
        x += (tone_rms * rng.uniform(0.3, 1.5) * _envelope(t, region, rng)
              * _band_noise(t, region.f_lo, region.f_hi, rng))
    return x


def _distractor_regions(spec: ToySpec, rng: np.random.Generator) -> list[CueRegion]:
    lo, hi = spec.n_distractors
    wanted = int(rng.integers(lo, hi + 1))
    out: list[CueRegion] = []
    for _ in range(50 * max(wanted, 1)):
        if len(out) == wanted:
            break
        width, dur = rng.uniform(300.0, 1200.0), rng.uniform(0.1, 0.5)
        f_lo, t_start = rng.uniform(100.0, 7900.0 - width), rng.uniform(0.0, 1.0 - dur)
        # pad by a bin/frame so STFT leakage stays out of the cue regions
        cand = CueRegion(f_lo - 100.0, f_lo + width + 100.0, t_start - 0.03, t_start + dur + 0.03)
        if not any(cand.overlaps(c) for c in spec.cues):
            out.append(CueRegion(f_lo, f_lo + width, t_start, t_start + dur))
    return out


def _toy_noise(rng: np.random.Generator) -> np.ndarray:
    t = np.arange(CLIP_SAMPLES) / SAMPLE_RATE
    x = 0.3 * _pink(CLIP_SAMPLES, rng)
    # broadband bursts and sweeping tones across the whole plane
    for _ in range(rng.integers(3, 7)):
        start, width = rng.uniform(0.0, 0.9), rng.uniform(0.05, 0.3)
        gate = ((t >= start) & (t < start + width)).astype(np.float64)
        f0, f1 = rng.uniform(200.0, 7000.0, size=2)
        phase = 2 * np.pi * np.cumsum(np.linspace(f0, f1, CLIP_SAMPLES)) / SAMPLE_RATE
        x += rng.uniform(0.2, 1.0) * gate * np.sin(phase)
    x += rng.uniform(0.5, 1.0) * rng.standard_normal(CLIP_SAMPLES)
    return x / np.sqrt(np.mean(x ** 2)) * 0.1


def gen_toy_dataset(n_classes: int, n_per_class: int, spec: ToySpec = ToySpec(),
                    rng: np.random.Generator | None = None) -> ToyCorpus:
    """Balanced synthetic corpus with known per-class important regions."""
    if rng is None:
        rng = np.random.default_rng(0)
    if not 1 <= n_classes <= len(spec.cues):
        raise InvalidConfigError(f"n_classes must be in [1, {len(spec.cues)}] for this cue layout")
    spec.validate()
    split = DatasetSplit(words=[f"class{k}" for k in range(n_classes)])
    n_dev = int(round(spec.dev_fraction * n_per_class))
    n_test = int(round(spec.test_fraction * n_per_class))
    for k in range(n_classes):
        for i in range(n_per_class):
            utt = Utterance(_toy_utterance(k, spec, rng), k, f"class{k}/toy{k}_{i:05d}.wav")
            if i < n_dev:
                split.dev.append(utt)
            elif i < n_dev + n_test:
                split.test.append(utt)
            else:
                split.train.append(utt)
    noise = [NoiseClip(_toy_noise(rng), f"noise_{i:04d}.wav") for i in range(spec.n_noise)]
    n_train = int(math.floor(spec.noise_train_fraction * len(noise) + 0.5))
    split.noise_train, split.noise_test = noise[:n_train], noise[n_train:]
    return ToyCorpus(split, spec)


def write_toy_corpus(corpus: ToyCorpus, out_dir: str | os.PathLike) -> Path:
    """Write a GSC-layout copy of ``corpus`` so the ingestion path can read it back.

    Noise clips go into one flat ``noise/`` directory; the train/test pools are
    re-drawn by :func:`load_noise_corpus` under the run seed, exactly as for a
    real noise corpus.
    """
    out = Path(out_dir)
    speech, noise = out / "speech", out / "noise"
    split = corpus.split
    for utt in split.train + split.dev + split.test:
        write_wav(speech / utt.id, utt.samples)
    for clip in split.noise_train + split.noise_test:
        write_wav(noise / clip.id, clip.samples)
    (speech / "validation_list.txt").write_text("".join(u.id + "\n" for u in split.dev), encoding="utf-8")
    (speech / "testing_list.txt").write_text("".join(u.id + "\n" for u in split.test), encoding="utf-8")
    cues = [{"word": w, **vars(c)} for w, c in zip(split.words, corpus.spec.cues)]
    (out / "cue_regions.json").write_text(json.dumps(cues, indent=2) + "\n", encoding="utf-8")
    write_manifest(split, out / "manifest.csv")
    return out


def read_cue_regions(path: str | os.PathLike) -> dict[str, CueRegion]:
    with open(path, encoding="utf-8") as fh:
        rows = json.load(fh)
    return {r["word"]: CueRegion(r["f_lo"], r["f_hi"], r["t_start"], r["t_stop"]) for r in rows}


def write_manifest(split: DatasetSplit, path: str | os.PathLike) -> None:
    """``id,path,label,split`` CSV of every utterance and noise clip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "path", "label", "split"])
        for part in ("train", "dev", "test"):
            for u in getattr(split, part):
                w.writerow([u.id, f"speech/{u.id}", u.label, part])
        for c in split.noise_train + split.noise_test:
            w.writerow([c.id, f"noise/{c.id}", "", "noise"])
