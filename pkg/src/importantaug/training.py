"""Mask-generator loss, Adam with step decay, and the training procedures.

Three procedures share one epoch loop (:func:`fit`): the clean baseline
recognizer, stage 1 (generator against a frozen recognizer) and stage 2
(recognizer retraining on augmented batches against a frozen generator).
Every loop early-stops on a dev loss and hands back the best-dev weights.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import augment, spectral
from .augment import AugmentPolicy, AugmentRng
from .data import (DatasetSplit, EvalSet, clean_set, labels as stack_labels,
                   synth_noisy_testset, waveforms)
from .errors import InvalidConfigError, InvalidInputError, NumericError
from .models import Generator, Recognizer, cross_entropy, freeze, init_params
from .seeding import substream, torch_seed
from .spectral import StftConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_e: float = 3.0
    lambda_f: float = 3.0
    lambda_t: float = 3.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise InvalidConfigError(f"{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class OptimConfig:
    initial_lr: float = 1e-3
    halve_every: int = 20
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 30
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise InvalidConfigError(f"{name} must be positive, got {value}")
        if self.patience > self.max_epochs:
            raise InvalidConfigError("patience cannot exceed max_epochs")
        if not (self.adam_beta1 < 1 and self.adam_beta2 < 1):
            raise InvalidConfigError("Adam betas must be < 1")


def lr_at(epoch: int, cfg: OptimConfig) -> float:
    """Initial rate halved every ``halve_every`` epochs."""
    if epoch < 0:
        raise InvalidInputError(f"epoch must be >= 0, got {epoch}")
    return cfg.initial_lr * 0.5 ** (epoch // cfg.halve_every)


# ------------------------------------------------------------------------ loss

def loss_terms(log_probs: torch.Tensor, labels, mask: torch.Tensor,
               weights: LossWeights = LossWeights()) -> dict[str, torch.Tensor]:
    """Weighted components of the generator objective.

    ``mask`` is ``(F, T)`` or ``(B, F, T)``. The entropy and smoothness sums
    are divided by ``F*T`` (the smoothness sums have one fewer term along
    their axis) and averaged over the batch.
    """
    m = mask if mask.ndim == 3 else mask.unsqueeze(0)
    n_cells = m.shape[-2] * m.shape[-1]
    per_utt = lambda x: x.sum(dim=(-2, -1)).mean() / n_cells
    return {
        "recognition": weights.lambda_r * cross_entropy(log_probs, labels),
        "noise": -weights.lambda_e * per_utt(torch.log(m)),
        "smooth_f": weights.lambda_f * per_utt((m[:, 1:, :] - m[:, :-1, :]).abs()),
        "smooth_t": weights.lambda_t * per_utt((m[:, :, 1:] - m[:, :, :-1]).abs()),
    }


def total_loss(log_probs: torch.Tensor, labels, mask: torch.Tensor,
               weights: LossWeights = LossWeights()) -> torch.Tensor:
    terms = loss_terms(log_probs, labels, mask, weights)
    loss = terms["recognition"] + terms["noise"] + terms["smooth_f"] + terms["smooth_t"]
    if not torch.isfinite(loss):
        raise NumericError(f"generator loss is not finite ({loss.item()}); mask has zeros?")
    return loss


# ------------------------------------------------------------------------ Adam

@dataclass
class TrainState:
    params: dict[str, torch.Tensor]
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]
    step: int = 0
    epoch: int = 0
    best_dev_loss: float = math.inf
    epochs_since_improvement: int = 0

    @classmethod
    def start(cls, params: dict[str, torch.Tensor]) -> "TrainState":
        return cls(dict(params), {k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()})


def adam_step(state: TrainState, grads: dict[str, torch.Tensor], lr: float,
              cfg: OptimConfig = OptimConfig()) -> TrainState:
    """One bias-corrected Adam update, applied in place to ``state.params``."""
    for k, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {k}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    with torch.no_grad():
        for k, p in state.params.items():
            g = grads[k]
            m, v = state.exp_avg[k], state.exp_avg_sq[k]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps))
    return state


# --------------------------------------------------------------------- helpers

def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainData:
    """Stacked waveforms for the train and dev splits plus the training noise pool.

    ``dev_set`` is what recognizer training early-stops on: the clean dev
    split by default, or the dev split mixed with training noise at one SNR.
    """
    train_waves: torch.Tensor
    train_labels: torch.Tensor
    dev_waves: torch.Tensor
    dev_labels: torch.Tensor
    noise: torch.Tensor
    config: StftConfig = StftConfig()
    dev_set: EvalSet | None = None

    @classmethod
    def from_split(cls, split: DatasetSplit, config: StftConfig = StftConfig(),
                   dev_snr_db: float = math.inf, seed: int = 0) -> "TrainData":
        if not split.train:
            raise InvalidInputError("training set is empty")
        if not split.dev:
            raise InvalidInputError("dev set is empty")
        if dev_snr_db == math.inf:
            dev_set = clean_set(split.dev, "dev", config)
        else:
            dev_set = synth_noisy_testset(split.dev, split.noise_train, [dev_snr_db],
                                          substream(seed, "dev-noise"), "dev", config)[float(dev_snr_db)]
        return cls(waveforms(split.train), stack_labels(split.train), waveforms(split.dev),
                   stack_labels(split.dev), waveforms(split.noise_train), config, dev_set)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    dev_loss: float
    dev_error: float
    wall_time: float


@dataclass
class TrainResult:
    model: nn.Module
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_dev_loss: float = math.inf

    def meta(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_dev_loss": self.best_dev_loss,
                "epochs_run": len(self.history)}


LOG_HEADER = ["epoch", "lr", "train_loss", "dev_loss", "dev_error", "wall_time"]


def _append_log(path: Path | None, rec: EpochRecord) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(
            [rec.epoch, f"{rec.lr:.6g}", f"{rec.train_loss:.6f}", f"{rec.dev_loss:.6f}",
             f"{rec.dev_error:.2f}", f"{rec.wall_time:.3f}"])


def fit(module: nn.Module, batch_loss: Callable[[np.ndarray], torch.Tensor],
        dev_metrics: Callable[[], tuple[float, float]], n_train: int, cfg: OptimConfig,
        seed: int, log_path: str | os.PathLike | None = None) -> TrainResult:
    """Shuffled mini-batch Adam over the trainable parameters of ``module``.

    Stops after ``patience`` epochs without a strictly lower dev loss and
    restores the best-dev weights into ``module``.
    """
    if n_train <= 0:
        raise InvalidInputError("training set is empty")
    params = {k: p for k, p in module.named_parameters() if p.requires_grad}
    names = list(params)
    state = TrainState.start(params)
    shuffle = substream(seed, "shuffle")
    best = {k: p.detach().clone() for k, p in params.items()}
    result = TrainResult(module)
    log_path = Path(log_path) if log_path is not None else None
    if log_path is not None:  # a rerun replaces the previous log
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_HEADER)
    started = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        state.epoch = epoch
        lr = lr_at(epoch, cfg)
        order = shuffle.permutation(n_train)
        total, seen = 0.0, 0
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = batch_loss(idx)
            if not torch.isfinite(loss):
                raise NumericError(f"training loss is not finite at epoch {epoch}")
            grads = torch.autograd.grad(loss, [params[k] for k in names])
            adam_step(state, dict(zip(names, grads)), lr, cfg)
            total += loss.item() * len(idx)
            seen += len(idx)
        dev_loss, dev_error = dev_metrics()
        rec = EpochRecord(epoch, lr, total / seen, dev_loss, dev_error, time.perf_counter() - started)
        result.history.append(rec)
        _append_log(log_path, rec)
        log.info("epoch %d lr %.3g train %.4f dev %.4f err %.2f%%", epoch, lr, rec.train_loss,
                 dev_loss, dev_error)
        if dev_loss < state.best_dev_loss:
            state.best_dev_loss, state.epochs_since_improvement = dev_loss, 0
            result.best_epoch, result.best_dev_loss = epoch, dev_loss
            best = {k: p.detach().clone() for k, p in params.items()}
        else:
            state.epochs_since_improvement += 1
            if state.epochs_since_improvement >= cfg.patience:
                break
    with torch.no_grad():
        for k, p in params.items():
            p.copy_(best[k])
    return result


def _features(waves: torch.Tensor, config: StftConfig) -> torch.Tensor:
    return augment.clean_batch(waves, torch.zeros(len(waves)), config).features


def recognizer_dev_metrics(rec: Recognizer, dev_set: EvalSet,
                           batch_size: int = 256) -> tuple[float, float]:
    """Dev cross-entropy and error rate (percent) of ``rec`` on ``dev_set``."""
    nll, wrong = 0.0, 0
    with torch.no_grad():
        for feats, labels in dev_set.batches(batch_size):
            lp = rec(feats)
            nll += float(cross_entropy(lp, labels)) * lp.shape[0]
            wrong += int((lp.argmax(dim=-1) != labels).sum())
    return nll / len(dev_set), 100.0 * wrong / len(dev_set)


def _dev_set(data: TrainData) -> EvalSet:
    if data.dev_set is not None:
        return data.dev_set
    return EvalSet(data.dev_waves, data.dev_labels, None, math.inf, 0.0, "dev", data.config)


# ---------------------------------------------------------------- procedures

def train_baseline(data: TrainData, cfg: OptimConfig, seed: int, rec: Recognizer | None = None,
                   n_classes: int = 35, log_path=None) -> TrainResult:
    """Recognizer on clean features only."""
    if rec is None:
        rec, _ = init_params(torch_seed(seed, "init"), data.config.n_freq, n_classes)
    rec.requires_grad_(True)
    cfgs = data.config
    dev_set = _dev_set(data)

    def batch_loss(idx):
        return cross_entropy(rec(_features(data.train_waves[idx], cfgs)), data.train_labels[idx])

    return fit(rec, batch_loss,
               lambda: recognizer_dev_metrics(rec, dev_set, cfg.batch_size),
               len(data.train_labels), cfg, seed, log_path)


def generator_batch_loss(gen: Generator, rec: Recognizer, speech_spec: torch.Tensor,
                         noise_spec: torch.Tensor, labels: torch.Tensor, snr_db: float,
                         weights: LossWeights, amplitude_floor: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Generator objective on one batch; returns ``(loss, log_probs)``."""
    clean = spectral.log_magnitude(speech_spec, amplitude_floor)
    mask = gen(clean.to(gen.convs[0].weight.dtype))
    gain = augment.batch_gain(speech_spec, noise_spec, snr_db)
    mixture = spectral.mix(speech_spec, noise_spec, mask, gain)
    feats = spectral.log_magnitude(mixture, amplitude_floor).to(rec.head.weight.dtype)
    log_probs = rec(feats)
    return total_loss(log_probs, labels, mask, weights), log_probs


def train_generator(frozen_rec: Recognizer, data: TrainData, weights: LossWeights, snr_db: float,
                    cfg: OptimConfig, seed: int, gen: Generator | None = None,
                    log_path=None) -> TrainResult:
    """Stage 1: fit the mask generator against a frozen recognizer.

    Masks are used raw here (no roll, no null replacement). Dev batches use a
    fixed noise pairing so the early-stopping signal is comparable across
    epochs.
    """
    if gen is None:
        _, gen = init_params(torch_seed(seed, "init"), data.config.n_freq, frozen_rec.n_classes)
    freeze(frozen_rec)
    gen.requires_grad_(True)
    if len(data.noise) == 0:
        raise InvalidInputError("stage 1 needs a non-empty training noise pool")
    cfgs = data.config
    noise_rng = substream(seed, "noise-draw")
    dev_pairing = substream(seed, "dev-noise").integers(0, len(data.noise), size=len(data.dev_labels))

    def spec(w):
        return spectral.stft(w.to(torch.float64), cfgs)

    def batch_loss(idx):
        n_idx = augment.draw_indices(len(data.noise), len(idx), noise_rng)
        loss, _ = generator_batch_loss(gen, frozen_rec, spec(data.train_waves[idx]),
                                       spec(data.noise[torch.as_tensor(n_idx)]),
                                       data.train_labels[idx], snr_db, weights, cfgs.amplitude_floor)
        return loss

    def dev_metrics():
        total, wrong, n = 0.0, 0, len(data.dev_labels)
        with torch.no_grad():
            for start in range(0, n, cfg.batch_size):
                sl = slice(start, start + cfg.batch_size)
                loss, lp = generator_batch_loss(
                    gen, frozen_rec, spec(data.dev_waves[sl]),
                    spec(data.noise[torch.as_tensor(dev_pairing[sl])]), data.dev_labels[sl],
                    snr_db, weights, cfgs.amplitude_floor)
                total += float(loss) * lp.shape[0]
                wrong += int((lp.argmax(dim=-1) != data.dev_labels[sl]).sum())
        return total / n, 100.0 * wrong / n

    return fit(gen, batch_loss, dev_metrics, len(data.train_labels), cfg, seed, log_path)


def train_recognizer(init_rec: Recognizer, data: TrainData, policy: AugmentPolicy, cfg: OptimConfig,
                     seed: int, generator: Generator | None = None, log_path=None) -> TrainResult:
    """Retrain a copy of ``init_rec`` on ``policy`` batches; ``init_rec`` is left untouched."""
    if policy.kind in augment.MASKED_KINDS and policy.kind != "null-importantaug" and generator is None:
        raise InvalidConfigError(f"policy {policy.kind!r} needs a generator")
    if policy.kind not in ("none",) and policy.snr_db != math.inf and len(data.noise) == 0:
        raise InvalidInputError("noise augmentation needs a non-empty training noise pool")
    rec = copy.deepcopy(init_rec)
    rec.requires_grad_(True)
    if generator is not None:
        freeze(generator)
    rng = AugmentRng.from_seed(seed)
    cfgs = data.config
    dev_set = _dev_set(data)

    def batch_loss(idx):
        batch = augment.policy_batch(data.train_waves[idx], data.train_labels[idx], generator,
                                     data.noise, policy, rng, cfgs)
        return cross_entropy(rec(batch.features), batch.labels)

    return fit(rec, batch_loss,
               lambda: recognizer_dev_metrics(rec, dev_set, cfg.batch_size),
               len(data.train_labels), cfg, seed, log_path)


def train_recognizer_importantaug(frozen_gen: Generator, init_rec: Recognizer, data: TrainData,
                                  policy: AugmentPolicy, cfg: OptimConfig, seed: int,
                                  log_path=None) -> TrainResult:
    """Stage 2: recognizer retraining with generator masks (roll and null replacement active)."""
    if policy.kind not in augment.MASKED_KINDS:
        raise InvalidConfigError(f"stage 2 expects a mask policy, got {policy.kind!r}")
    return train_recognizer(init_rec, data, policy, cfg, seed, frozen_gen, log_path)
