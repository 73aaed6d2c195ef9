"""Spectrogram-domain primitives: STFT, dB features, SNR gain, mixing and mask edits.

All functions accept torch tensors (numpy arrays are converted) with arbitrary
leading batch dimensions; the last two dimensions of a spectrogram or mask are
``(frequency, time)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidConfigError, InvalidInputError, NumericError

DEFAULT_AMPLITUDE_FLOOR = 1e-8


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    window_length: int = 512
    hop_length: int = 128
    centered: bool = True
    amplitude_floor: float = DEFAULT_AMPLITUDE_FLOOR

    def __post_init__(self):
        if not self.window_length > self.hop_length > 0:
            raise InvalidConfigError(
                f"need window_length > hop_length > 0, got "
                f"{self.window_length}/{self.hop_length}")
        if self.sample_rate <= 0:
            raise InvalidConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not self.amplitude_floor > 0:
            raise InvalidConfigError(
                f"amplitude_floor must be positive, got {self.amplitude_floor}")

    @property
    def n_samples(self) -> int:
        """Samples in one 1 s clip."""
        return self.sample_rate

    @property
    def n_freq(self) -> int:
        return self.window_length // 2 + 1

    @property
    def n_frames(self) -> int:
        if self.centered:
            return 1 + self.n_samples // self.hop_length
        return 1 + (self.n_samples - self.window_length) // self.hop_length

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_freq, self.n_frames


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def stft(waveform, config: StftConfig = StftConfig(), sample_rate: int | None = None) -> torch.Tensor:
    """Complex STFT of one or more 1 s clips, shape ``(..., F, T)``.

    A periodic Hann window is used; with centered (reflect-padded) framing a
    16000-sample clip gives 257 bins by 126 frames.
    """
    x = _as_tensor(waveform)
    if sample_rate is not None and sample_rate != config.sample_rate:
        raise InvalidInputError(
            f"waveform sampled at {sample_rate} Hz, expected {config.sample_rate} Hz")
    if x.ndim == 0 or x.shape[-1] != config.n_samples:
        raise InvalidInputError(
            f"expected {config.n_samples} samples per clip, got shape {tuple(x.shape)}")
    if x.is_complex():
        raise InvalidInputError("waveform must be real-valued")
    if not x.is_floating_point():
        x = x.to(torch.float64)
    lead = x.shape[:-1]
    flat = x.reshape(-1, config.n_samples)
    window = torch.hann_window(config.window_length, periodic=True, dtype=flat.dtype)
    spec = torch.stft(flat, n_fft=config.window_length, hop_length=config.hop_length,
                      win_length=config.window_length, window=window,
                      center=config.centered, pad_mode="reflect", return_complex=True)
    return spec.reshape(*lead, *spec.shape[-2:])


def log_magnitude(spec, amplitude_floor: float = DEFAULT_AMPLITUDE_FLOOR) -> torch.Tensor:
    """``20 log10(max(|S|, floor))`` elementwise; differentiable in ``spec``."""
    if not amplitude_floor > 0:
        raise InvalidConfigError(f"amplitude_floor must be positive, got {amplitude_floor}")
    return 20.0 * torch.log10(_as_tensor(spec).abs().clamp_min(amplitude_floor))


def _power(x: torch.Tensor) -> float:
    return float(x.detach().abs().to(torch.float64).square().sum())


def compute_gain(speech, noise, snr_db: float) -> float:
    """Noise gain that sets the batch-level SNR of ``speech`` vs ``noise`` to ``snr_db``.

    Powers are summed over the whole batch (every leading, frequency and time
    index), so one gain serves all utterances. ``snr_db = +inf`` means no
    noise and gives a gain of 0.
    """
    s, n = _as_tensor(speech), _as_tensor(noise)
    if s.shape != n.shape:
        raise InvalidInputError(f"speech {tuple(s.shape)} and noise {tuple(n.shape)} differ in shape")
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise InvalidConfigError(f"target SNR must be finite or +inf, got {snr_db}")
    if snr_db == math.inf:
        return 0.0
    p_noise = _power(n)
    if p_noise == 0.0:
        raise NumericError("noise batch has zero power; gain is undefined")
    return math.sqrt(_power(s) / (10.0 ** (snr_db / 10.0) * p_noise))


def mix(speech, noise, mask, gain: float) -> torch.Tensor:
    """``S + A * (N ⊙ M)``."""
    s, n, m = _as_tensor(speech), _as_tensor(noise), _as_tensor(mask)
    if s.shape != n.shape:
        raise InvalidInputError(f"speech {tuple(s.shape)} and noise {tuple(n.shape)} differ in shape")
    if m.ndim:
        try:
            fits = torch.broadcast_shapes(m.shape, s.shape) == s.shape and m.shape[-2:] == s.shape[-2:]
        except RuntimeError:
            fits = False
        if not fits:
            raise InvalidInputError(f"mask {tuple(m.shape)} does not fit spectrogram {tuple(s.shape)}")
    return s + gain * (n * m.to(s.real.dtype if s.is_complex() else s.dtype))


def measure_snr(speech, noise_component) -> float:
    """Batch SNR in dB of ``speech`` against an additive component; +inf if it is silent."""
    s, n = _as_tensor(speech), _as_tensor(noise_component)
    if s.shape != n.shape:
        raise InvalidInputError(f"speech {tuple(s.shape)} and noise {tuple(n.shape)} differ in shape")
    p_noise = _power(n)
    if p_noise == 0.0:
        return math.inf
    p_speech = _power(s)
    if p_speech == 0.0:
        return -math.inf
    return 10.0 * math.log10(p_speech / p_noise)


def roll_mask(mask, delta_f: int, delta_t: int) -> torch.Tensor:
    """Circular shift: ``out[f, t] = M[(f - delta_f) % F, (t - delta_t) % T]``."""
    m = _as_tensor(mask)
    if m.ndim < 2:
        raise InvalidInputError(f"mask needs at least 2 dims, got shape {tuple(m.shape)}")
    return torch.roll(m, shifts=(int(delta_f), int(delta_t)), dims=(-2, -1))


def important_count(q: float, n_cells: int) -> int:
    """Number of cells protected at ``q`` percent, rounded half up."""
    if not 0.0 <= q <= 100.0:
        raise InvalidConfigError(f"q must lie in [0, 100], got {q}")
    return min(n_cells, int(math.floor(q * n_cells / 100.0 + 0.5)))


def binarize_mask(mask, q: float) -> torch.Tensor:
    """Zero the ``q`` percent lowest-valued cells of each mask and set the rest to 1.

    Ties go to the lower ``(f, t)`` index in row-major order.
    """
    m = _as_tensor(mask)
    if m.ndim < 2:
        raise InvalidInputError(f"mask needs at least 2 dims, got shape {tuple(m.shape)}")
    n_cells = m.shape[-1] * m.shape[-2]
    k = important_count(q, n_cells)
    flat = m.detach().reshape(-1, n_cells)
    out = torch.ones_like(flat)
    if k:
        order = torch.argsort(flat, dim=-1, stable=True)
        out.scatter_(-1, order[:, :k], 0.0)
    return out.reshape(m.shape)
