"""Augmentation policies: ImportantAug (continuous and binarized), Null ImportantAug
and conventional noise augmentation.

Batches are assembled in the STFT domain. One noise clip is drawn (with
replacement) per utterance and one gain is set per batch from the unmasked
noise, so masked batches land at or above the target SNR.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from . import spectral
from .errors import InvalidConfigError, InvalidStateError, NumericError
from .models import Generator
from .seeding import substream
from .spectral import StftConfig

KINDS = ("none", "conventional", "importantaug", "null-importantaug", "importantaug-binarized")
MASKED_KINDS = ("importantaug", "null-importantaug", "importantaug-binarized")


@dataclass(frozen=True)
class AugmentPolicy:
    kind: str = "importantaug"
    snr_db: float = -12.5
    max_roll: int = 30
    p_null: float = 0.5
    q: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfigError(f"unknown policy kind {self.kind!r}; choose from {KINDS}")
        if self.max_roll < 0:
            raise InvalidConfigError(f"max_roll must be >= 0, got {self.max_roll}")
        if not 0.0 <= self.p_null <= 1.0:
            raise InvalidConfigError(f"p_null must lie in [0, 1], got {self.p_null}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise InvalidConfigError(f"snr_db must be finite or +inf, got {self.snr_db}")
        if self.kind == "importantaug-binarized":
            if self.q is None or not 0.0 <= self.q <= 100.0:
                raise InvalidConfigError(f"binarized policy needs q in [0, 100], got {self.q}")


class AugmentRng(NamedTuple):
    """Independent random streams for noise draws, mask rolls and null replacement."""
    noise: np.random.Generator
    roll: np.random.Generator
    null: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, tag: str = "") -> "AugmentRng":
        return cls(substream(seed, "noise-draw" + tag), substream(seed, "roll" + tag),
                   substream(seed, "null-replace" + tag))


@dataclass
class AugmentedBatch:
    features: torch.Tensor
    labels: torch.Tensor
    realized_snr: float


def sample_noise(pool: Sequence, count: int, rng: np.random.Generator) -> list:
    """``count`` uniform draws with replacement from ``pool``."""
    return [pool[i] for i in draw_indices(len(pool), count, rng)]


def draw_indices(pool_size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if pool_size <= 0:
        raise InvalidStateError("noise pool is empty")
    return rng.integers(0, pool_size, size=count)


def make_training_mask(mask: torch.Tensor, policy: AugmentPolicy, rng: AugmentRng) -> torch.Tensor:
    """Per-utterance roll, then null replacement or binarization, by policy kind.

    ``mask`` is ``(F, T)`` or ``(B, F, T)``; shifts are drawn independently per
    utterance and per axis, uniformly over the integers in ``[-D, D]``.
    """
    if policy.kind not in MASKED_KINDS:
        raise InvalidConfigError(f"policy kind {policy.kind!r} does not use masks")
    single = mask.ndim == 2
    masks = mask.unsqueeze(0) if single else mask
    if policy.kind == "null-importantaug":
        out = torch.ones_like(masks)
        return out[0] if single else out
    d = policy.max_roll
    rows = []
    for m in masks:
        df, dt = rng.roll.integers(-d, d + 1, size=2)
        m = spectral.roll_mask(m, int(df), int(dt))
        if policy.kind == "importantaug-binarized":
            m = spectral.binarize_mask(m, policy.q)
        elif rng.null.random() < policy.p_null:
            m = torch.ones_like(m)
        rows.append(m)
    out = torch.stack(rows)
    return out[0] if single else out


def batch_gain(speech_spec: torch.Tensor, noise_spec: torch.Tensor, snr_db: float) -> float:
    if snr_db != math.inf and float(speech_spec.abs().square().sum()) == 0.0:
        raise NumericError("speech batch has zero power; the noise gain would be zero")
    return spectral.compute_gain(speech_spec, noise_spec, snr_db)


def noisy_features(speech_spec: torch.Tensor, noise_spec: torch.Tensor | None, masks,
                   snr_db: float, amplitude_floor: float = spectral.DEFAULT_AMPLITUDE_FLOOR,
                   ) -> tuple[torch.Tensor, float]:
    """dB features of ``S + A N ⊙ M`` and the realized SNR of the added component."""
    if noise_spec is None or snr_db == math.inf:
        return spectral.log_magnitude(speech_spec, amplitude_floor), math.inf
    gain = batch_gain(speech_spec, noise_spec, snr_db)
    mixture = spectral.mix(speech_spec, noise_spec, masks, gain)
    added = mixture - speech_spec
    return spectral.log_magnitude(mixture, amplitude_floor), spectral.measure_snr(speech_spec, added)


def _spec(waves, config: StftConfig) -> torch.Tensor:
    return spectral.stft(torch.as_tensor(waves).to(torch.float64), config)


def importantaug_batch(speech, labels, generator: Generator, pool, policy: AugmentPolicy,
                       rng: AugmentRng, config: StftConfig = StftConfig()) -> AugmentedBatch:
    """Generator masks, policy edits, batch gain, then dB features of the mixture.

    ``speech`` is ``(B, samples)``; ``pool`` is a ``(P, samples)`` tensor of noise clips.
    """
    if policy.kind not in MASKED_KINDS:
        raise InvalidConfigError(f"policy kind {policy.kind!r} does not use masks")
    s = _spec(speech, config)
    clean = spectral.log_magnitude(s, config.amplitude_floor)
    with torch.no_grad():
        if policy.kind == "null-importantaug":
            masks = torch.ones(s.shape, dtype=torch.float64)
        else:
            masks = generator(clean.to(generator.convs[0].weight.dtype)).to(torch.float64)
    masks = make_training_mask(masks, policy, rng)
    n = _spec(pool[torch.as_tensor(draw_indices(len(pool), s.shape[0], rng.noise))], config)
    feats, snr = noisy_features(s, n, masks, policy.snr_db, config.amplitude_floor)
    return AugmentedBatch(feats.to(torch.float32), torch.as_tensor(labels, dtype=torch.long), snr)


def conventional_batch(speech, labels, pool, snr_db: float, rng: AugmentRng,
                       config: StftConfig = StftConfig()) -> AugmentedBatch:
    """Unmasked noise at ``snr_db``; ``+inf`` returns clean features."""
    s = _spec(speech, config)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if snr_db == math.inf:
        return AugmentedBatch(spectral.log_magnitude(s, config.amplitude_floor).to(torch.float32),
                              labels, math.inf)
    n = _spec(pool[torch.as_tensor(draw_indices(len(pool), s.shape[0], rng.noise))], config)
    feats, snr = noisy_features(s, n, 1.0, snr_db, config.amplitude_floor)
    return AugmentedBatch(feats.to(torch.float32), labels, snr)


def clean_batch(speech, labels, config: StftConfig = StftConfig()) -> AugmentedBatch:
    s = _spec(speech, config)
    return AugmentedBatch(spectral.log_magnitude(s, config.amplitude_floor).to(torch.float32),
                          torch.as_tensor(labels, dtype=torch.long), math.inf)


def policy_batch(speech, labels, generator, pool, policy: AugmentPolicy, rng: AugmentRng,
                 config: StftConfig = StftConfig()) -> AugmentedBatch:
    """Dispatch on ``policy.kind``."""
    if policy.kind == "none":
        return clean_batch(speech, labels, config)
    if policy.kind == "conventional":
        return conventional_batch(speech, labels, pool, policy.snr_db, rng, config)
    return importantaug_batch(speech, labels, generator, pool, policy, rng, config)
