"""Speech-command recognizer and importance-mask generator.

Both networks consume dB log-magnitude spectrograms ``(batch, F, T)``. Each
standardizes its input per utterance (zero mean, unit variance over all
time-frequency cells) before the first layer, which keeps the convolution
stacks in a sane numeric range for raw dB values and makes the networks
insensitive to overall recording gain.
"""
from __future__ import annotations

import math
from typing import Callable, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError, NumericError

N_CLASSES = 35
N_FREQ = 257
N_FRAMES = 126


def standardize(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mean = x.mean(dim=(-2, -1), keepdim=True)
    std = x.std(dim=(-2, -1), keepdim=True, unbiased=False)
    return (x - mean) / (std + eps)


def _batched(x: torch.Tensor, n_freq: int, who: str) -> tuple[torch.Tensor, bool]:
    if x.ndim == 2:
        x, single = x.unsqueeze(0), True
    elif x.ndim == 3:
        single = False
    else:
        raise InvalidInputError(f"{who} expects (F, T) or (B, F, T), got {tuple(x.shape)}")
    if x.shape[-2] != n_freq:
        raise InvalidInputError(f"{who} expects {n_freq} frequency bins, got {x.shape[-2]}")
    return x, single


class Recognizer(nn.Module):
    """Five depthwise-separable 1-D conv blocks over time, frequency bins as channels.

    Each block is a per-bin time convolution (kernel 9, same padding), a 1x1
    mixing convolution across bins, then SELU. Activations are averaged over
    time and mapped to class log-probabilities by an affine head.
    """

    def __init__(self, n_freq: int = N_FREQ, n_classes: int = N_CLASSES,
                 n_blocks: int = 5, kernel_size: int = 9):
        super().__init__()
        self.n_freq = n_freq
        self.n_classes = n_classes
        self.depthwise = nn.ModuleList(
            nn.Conv1d(n_freq, n_freq, kernel_size, padding=kernel_size // 2, groups=n_freq)
            for _ in range(n_blocks))
        self.pointwise = nn.ModuleList(nn.Conv1d(n_freq, n_freq, 1) for _ in range(n_blocks))
        self.head = nn.Linear(n_freq, n_classes)

    def activations(self, features: torch.Tensor) -> torch.Tensor:
        """Block-5 output before time pooling, ``(B, F, T)``."""
        x, _ = _batched(features, self.n_freq, "recognizer")
        x = standardize(x.to(self.head.weight.dtype))
        for dw, pw in zip(self.depthwise, self.pointwise):
            x = F.selu(pw(dw(x)))
        return x

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        _, single = _batched(features, self.n_freq, "recognizer")
        pooled = self.activations(features).mean(dim=-1)
        out = F.log_softmax(self.head(pooled), dim=-1)
        return out[0] if single else out


class Generator(nn.Module):
    """Four 5x5 same-padded 2-D convolutions (1->2->2->2->1 channels).

    SELU between layers and a logistic output, so every mask value lies
    strictly inside (0, 1).
    """

    def __init__(self, channels: tuple[int, ...] = (1, 2, 2, 2, 1), kernel_size: int = 5):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(c_in, c_out, kernel_size, stride=1, dilation=1, padding=kernel_size // 2)
            for c_in, c_out in zip(channels[:-1], channels[1:]))

    def logits(self, s_tilde: torch.Tensor) -> torch.Tensor:
        if s_tilde.ndim not in (2, 3):
            raise InvalidInputError(f"generator expects (F, T) or (B, F, T), got {tuple(s_tilde.shape)}")
        x = s_tilde.unsqueeze(0) if s_tilde.ndim == 2 else s_tilde
        x = standardize(x.to(self.convs[0].weight.dtype)).unsqueeze(1)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.selu(x)
        x = x.squeeze(1)
        return x[0] if s_tilde.ndim == 2 else x

    def forward(self, s_tilde: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(s_tilde))


def cross_entropy(log_probs: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-likelihood of ``labels`` under ``log_probs``."""
    if log_probs.ndim == 1:
        log_probs = log_probs.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.shape[0] != log_probs.shape[0]:
        raise InvalidInputError(f"{labels.shape[0]} labels for {log_probs.shape[0]} predictions")
    n_classes = log_probs.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidInputError(f"labels must lie in [0, {n_classes})")
    return F.nll_loss(log_probs, labels)


def _init_uniform(module: nn.Module, gen: torch.Generator) -> None:
    # LeCun-uniform (variance 1/fan_in) on weights and biases; SELU's fixed point.
    for name, p in module.named_parameters():
        owner = module.get_submodule(name.rsplit(".", 1)[0])
        w = owner.weight
        fan_in = w.shape[1] * math.prod(w.shape[2:]) if w.ndim > 1 else w.shape[0]
        bound = math.sqrt(3.0 / fan_in)
        with torch.no_grad():
            p.copy_(torch.empty(p.shape, dtype=torch.float64).uniform_(-bound, bound, generator=gen))


def init_params(seed: int, n_freq: int = N_FREQ, n_classes: int = N_CLASSES,
                dtype: torch.dtype = torch.float32) -> tuple[Recognizer, Generator]:
    """Fresh recognizer and generator; the same seed gives bit-identical weights."""
    gen = torch.Generator().manual_seed(int(seed))
    rec = Recognizer(n_freq=n_freq, n_classes=n_classes).to(dtype)
    mask_gen = Generator().to(dtype)
    _init_uniform(rec, gen)
    _init_uniform(mask_gen, gen)
    return rec, mask_gen


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def param_dict(module: nn.Module) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in module.named_parameters()}


def gradient(loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
             params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar ``loss_fn(params)`` w.r.t. every entry of ``params``."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves)
    if loss.ndim != 0:
        raise InvalidInputError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss.item()}")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    return {k: torch.zeros_like(leaves[k]) if g is None else g for k, g in zip(names, grads)}


def functional(module: nn.Module) -> Callable[[Mapping[str, torch.Tensor], torch.Tensor], torch.Tensor]:
    """``fn(params, x)`` evaluating ``module`` with substituted parameters."""
    def call(params, x):
        return torch.func.functional_call(module, dict(params), (x,))
    return call
