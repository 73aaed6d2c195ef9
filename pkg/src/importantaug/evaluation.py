"""Error rates, SNR-grid evaluation, the two hyperparameter sweeps, and report export."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .augment import AugmentPolicy
from .data import EvalSet
from .errors import InvalidInputError
from .models import Generator, Recognizer
from .training import OptimConfig, TrainData, train_recognizer

TABLE_HEADER = ["condition", "snr_db", "error_rate_percent", "n"]


@dataclass(frozen=True)
class EvalResult:
    condition: str
    snr_db: float
    error_rate: float
    n_examples: int

    def __post_init__(self):
        if not 0.0 <= self.error_rate <= 100.0:
            raise InvalidInputError(f"error rate {self.error_rate} outside [0, 100]")
        if self.n_examples <= 0:
            raise InvalidInputError("an evaluation needs at least one example")


def error_rate(preds, labels) -> float:
    """Percentage of positions where ``preds`` and ``labels`` differ."""
    p = torch.as_tensor(preds).reshape(-1)
    y = torch.as_tensor(labels).reshape(-1)
    if p.shape != y.shape:
        raise InvalidInputError(f"{p.numel()} predictions for {y.numel()} labels")
    if p.numel() == 0:
        raise InvalidInputError("cannot score an empty set")
    return 100.0 * int((p != y).sum()) / p.numel()


def predict(rec: Recognizer, eval_set: EvalSet, batch_size: int = 256) -> torch.Tensor:
    """Argmax class per utterance; exact ties go to the lowest class index."""
    rec.eval()
    out = []
    with torch.no_grad():
        for feats, _ in eval_set.batches(batch_size):
            out.append(rec(feats).argmax(dim=-1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def evaluate(rec: Recognizer, eval_set: EvalSet, condition: str = "",
             batch_size: int = 256) -> EvalResult:
    if len(eval_set) == 0:
        raise InvalidInputError("evaluation set is empty")
    err = error_rate(predict(rec, eval_set, batch_size), eval_set.labels)
    return EvalResult(condition or eval_set.name, eval_set.snr_db, err, len(eval_set))


def snr_grid_eval(rec: Recognizer, noisy_sets: Mapping[float, EvalSet], condition: str = "",
                  batch_size: int = 256) -> list[EvalResult]:
    """One result per SNR, in the mapping's order."""
    return [evaluate(rec, s, condition, batch_size) for s in noisy_sets.values()]


def mean_error(results: Sequence[EvalResult]) -> float:
    return float(np.mean([r.error_rate for r in results]))


def _best(results: Sequence[EvalResult], key=lambda r: r.error_rate) -> EvalResult:
    # lowest error; equal errors resolve to the higher SNR (less corruption)
    return min(results, key=lambda r: (key(r), -r.snr_db))


@dataclass
class SweepOutcome:
    rows: list[EvalResult]
    best: EvalResult
    models: dict


def noiseaug_snr_sweep(init_rec: Recognizer, data: TrainData, snr_grid: Sequence[float],
                       dev_sets: Mapping[float, EvalSet] | EvalSet, cfg: OptimConfig, seed: int,
                       log_dir: str | os.PathLike | None = None) -> SweepOutcome:
    """Conventional noise augmentation at each training SNR, scored on dev.

    ``dev_sets`` is the clean dev set or a grid of noisy dev sets; with a
    grid the score is the mean error over it. The best SNR is the dev
    argmin, ties going to the higher SNR.
    """
    if not snr_grid:
        raise InvalidInputError("snr_grid is empty")
    grid = dev_sets.values() if isinstance(dev_sets, Mapping) else [dev_sets]
    rows, models = [], {}
    for v in snr_grid:
        v = float(v)
        log_path = None if log_dir is None else Path(log_dir) / f"noiseaug_{v:g}.csv"
        res = train_recognizer(init_rec, data, AugmentPolicy("conventional", snr_db=v), cfg, seed,
                               log_path=log_path)
        models[v] = res.model
        scores = [evaluate(res.model, s) for s in grid]
        rows.append(EvalResult("noiseaug dev", v, mean_error(scores), scores[0].n_examples))
    return SweepOutcome(rows, _best(rows), models)


def binarize_q_sweep(frozen_gen: Generator, init_rec: Recognizer, data: TrainData,
                     q_list: Sequence[float], dev_set: EvalSet, test_set: EvalSet,
                     cfg: OptimConfig, seed: int, snr_db: float = -12.5, max_roll: int = 30,
                     log_dir: str | os.PathLike | None = None) -> SweepOutcome:
    """Stage-2 retraining with binarized masks for each ``q``; dev and test error per ``q``.

    Rows alternate ``q=<q>:dev`` / ``q=<q>:test``; their ``snr_db`` is the
    test set's SNR. The best ``q`` is the dev argmin (ties to the smaller q).
    """
    rows, models = [], {}
    dev_rows = []
    for q in q_list:
        policy = AugmentPolicy("importantaug-binarized", snr_db=snr_db, max_roll=max_roll, q=float(q))
        log_path = None if log_dir is None else Path(log_dir) / f"binarized_q{q:g}.csv"
        res = train_recognizer(init_rec, data, policy, cfg, seed, frozen_gen, log_path)
        models[float(q)] = res.model
        dev = evaluate(res.model, dev_set, f"q={q:g}:dev")
        test = evaluate(res.model, test_set, f"q={q:g}:test")
        rows += [dev, test]
        dev_rows.append((float(q), dev))
    _, best_dev = min(dev_rows, key=lambda item: (item[1].error_rate, item[0]))
    return SweepOutcome(rows, best_dev, models)


# --------------------------------------------------------------------- export

def mask_to_image(mask) -> np.ndarray:
    """uint8 image rows = frequency bins with the lowest bin at the bottom."""
    m = torch.as_tensor(mask).detach().to(torch.float64).numpy()
    if m.ndim != 2:
        raise InvalidInputError(f"expected an (F, T) mask, got shape {m.shape}")
    if np.any(m < 0) or np.any(m > 1) or not np.all(np.isfinite(m)):
        raise InvalidInputError("mask values must lie in [0, 1]")
    return np.flipud(np.floor(255.0 * m + 0.5).astype(np.uint8))


def export_mask_image(mask, path: str | os.PathLike) -> Path:
    """Write a mask as an 8-bit grayscale PNG (white = 1 = admits noise)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(mask_to_image(mask)), mode="L").save(path, format="PNG")
    return path


def read_mask_image(path: str | os.PathLike) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return np.flipud(img) / 255.0


def format_snr(v: float) -> str:
    return "inf" if v == math.inf else f"{v:g}"


def emit_table(results: Sequence[EvalResult], path: str | os.PathLike) -> Path:
    """CSV ``condition,snr_db,error_rate_percent,n`` with errors to two decimals."""
    if not results:
        raise InvalidInputError("no results to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for r in results:
            w.writerow([r.condition, format_snr(r.snr_db), f"{r.error_rate:.2f}", r.n_examples])
    return path


def read_table(path: str | os.PathLike) -> list[EvalResult]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TABLE_HEADER:
            raise InvalidInputError(f"{path}: unexpected header {header}")
        return [EvalResult(c, float(s), float(e), int(n)) for c, s, e, n in reader]
