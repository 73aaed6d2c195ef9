import csv
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from importantaug import data, training
from importantaug.data import DatasetSplit, ToySpec
from importantaug.errors import InvalidConfigError, InvalidInputError, NumericError
from importantaug.training import (LossWeights, OptimConfig, TrainState, adam_step, fit, loss_terms,
                                   lr_at, total_loss)


def _log_probs(n=2, k=5, seed=0):
    return torch.log_softmax(torch.randn(n, k, generator=torch.Generator().manual_seed(seed)), dim=-1)


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 0.001), (19, 0.001), (20, 0.0005), (45, 0.00025)])
    def test_values(self, epoch, lr):
        assert lr_at(epoch, OptimConfig()) == pytest.approx(lr)

    def test_piecewise_constant_and_nonincreasing(self):
        rates = [lr_at(e, OptimConfig()) for e in range(200)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        breaks = [e for e in range(1, 200) if rates[e] != rates[e - 1]]
        assert breaks == list(range(20, 200, 20))

    def test_negative_epoch(self):
        with pytest.raises(InvalidInputError):
            lr_at(-1, OptimConfig())


class TestConfigs:
    def test_defaults(self):
        cfg = OptimConfig()
        assert (cfg.initial_lr, cfg.halve_every, cfg.batch_size, cfg.max_epochs, cfg.patience) == \
            (0.001, 20, 256, 200, 30)
        assert LossWeights() == LossWeights(1.0, 3.0, 3.0, 3.0)

    @pytest.mark.parametrize("kw", [dict(initial_lr=0), dict(batch_size=-1), dict(patience=300),
                                    dict(adam_beta1=1.0)])
    def test_bad_optim(self, kw):
        with pytest.raises(InvalidConfigError):
            OptimConfig(**kw)

    @pytest.mark.parametrize("kw", [dict(lambda_e=-1.0), dict(lambda_r=math.inf), dict(lambda_t=math.nan)])
    def test_bad_weights(self, kw):
        with pytest.raises(InvalidConfigError):
            LossWeights(**kw)


class TestLoss:
    def test_all_ones_is_recognition_only(self):
        lp, y = _log_probs(), torch.tensor([1, 3])
        ce = float(training.cross_entropy(lp, y))
        for w in [LossWeights(), LossWeights(1.0, 0.0, 0.0, 0.0), LossWeights(2.0, 7.0, 0.1, 9.0)]:
            assert float(total_loss(lp, y, torch.ones(2, 257, 126), w)) == w.lambda_r * ce

    def test_constant_half_gives_ln2(self):
        w = LossWeights(0.0, 1.0, 0.0, 0.0)
        out = float(total_loss(_log_probs(), [0, 0], torch.full((2, 257, 126), 0.5), w))
        assert out == pytest.approx(math.log(2), rel=1e-6)

    def test_checkerboard_by_direct_summation(self):
        f, t = np.indices((4, 4))
        m = np.where((f + t) % 2 == 0, 0.25, 0.75)
        # forward differences, no wraparound, divided by F*T
        tv_f = sum(abs(m[i + 1, j] - m[i, j]) for i in range(3) for j in range(4)) / 16
        tv_t = sum(abs(m[i, j + 1] - m[i, j]) for i in range(4) for j in range(3)) / 16
        terms = loss_terms(_log_probs(1), [0], torch.tensor(m), LossWeights(1.0, 1.0, 2.0, 3.0))
        assert float(terms["smooth_f"]) == pytest.approx(2.0 * tv_f) == pytest.approx(0.75)
        assert float(terms["smooth_t"]) == pytest.approx(3.0 * tv_t)

    def test_transpose_swaps_axis_terms(self):
        m = torch.rand(5, 7, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        w = LossWeights(1.0, 1.0, 1.0, 1.0)
        a = loss_terms(_log_probs(1), [0], m, w)
        b = loss_terms(_log_probs(1), [0], m.T.contiguous(), w)
        assert float(a["smooth_f"]) == pytest.approx(float(b["smooth_t"]))
        assert float(a["smooth_t"]) == pytest.approx(float(b["smooth_f"]))
        assert float(a["smooth_f"]) > 0

    def test_zero_mask_is_numeric_error(self):
        m = torch.ones(1, 4, 4)
        m[0, 1, 1] = 0.0
        with pytest.raises(NumericError):
            total_loss(_log_probs(1), [0], m)


class TestAdam:
    def test_zero_grads_decay_moments(self):
        state = TrainState.start({"w": torch.tensor([1.0, -2.0])})
        state.exp_avg["w"] += 1.0
        state.exp_avg_sq["w"] += 4.0
        adam_step(state, {"w": torch.zeros(2)}, 0.1)
        assert torch.allclose(state.exp_avg["w"], torch.full((2,), 0.9))
        assert torch.allclose(state.exp_avg_sq["w"], torch.full((2,), 4 * 0.999))

    def test_zero_grads_fixed_point_from_start(self):
        state = TrainState.start({"w": torch.tensor([1.0, -2.0])})
        adam_step(state, {"w": torch.zeros(2)}, 0.1)
        assert torch.equal(state.params["w"], torch.tensor([1.0, -2.0]))

    @pytest.mark.parametrize("g", [3.0, -0.02])
    def test_first_step_is_lr_sign(self, g):
        state = TrainState.start({"w": torch.tensor([0.5], dtype=torch.float64)})
        adam_step(state, {"w": torch.tensor([g], dtype=torch.float64)}, 0.01)
        assert float(state.params["w"]) == pytest.approx(0.5 - 0.01 * math.copysign(1.0, g), abs=1e-8)

    def test_deterministic(self):
        def run():
            state = TrainState.start({"w": torch.zeros(3)})
            g = torch.Generator().manual_seed(0)
            for _ in range(5):
                adam_step(state, {"w": torch.randn(3, generator=g)}, 0.1)
            return state.params["w"]
        assert torch.equal(run(), run())

    def test_non_finite(self):
        state = TrainState.start({"w": torch.zeros(2)})
        with pytest.raises(NumericError):
            adam_step(state, {"w": torch.tensor([1.0, math.nan])}, 0.1)


class _Scalar(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(1))


def test_fit_restores_best_dev_epoch(tmp_path):
    module = _Scalar()
    dev_losses = iter([5.0, 3.0, 1.0, 2.0, 4.0, 0.9, 6.0, 7.0, 8.0, 9.0])
    snapshots = []

    def dev_metrics():
        snapshots.append(module.w.item())
        return next(dev_losses), 0.0

    cfg = OptimConfig(batch_size=2, max_epochs=10, patience=3)
    res = fit(module, lambda idx: (module.w - 1.0).square().sum(), dev_metrics, 4, cfg, 0,
              tmp_path / "log.csv")
    assert res.best_epoch == 5 and res.best_dev_loss == 0.9
    assert len(res.history) == 9  # three epochs without improvement after epoch 5
    assert module.w.item() == snapshots[5]
    assert res.best_dev_loss == min(h.dev_loss for h in res.history)
    with open(tmp_path / "log.csv", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == training.LOG_HEADER and len(rows) == 10


def test_fit_rejects_empty_training_set():
    with pytest.raises(InvalidInputError):
        fit(_Scalar(), lambda idx: torch.zeros(()), lambda: (0.0, 0.0), 0, OptimConfig(), 0)


def test_fit_surfaces_non_finite_loss():
    module = _Scalar()
    with pytest.raises(NumericError):
        fit(module, lambda idx: module.w.sum() * math.inf, lambda: (0.0, 0.0), 2,
            OptimConfig(max_epochs=2, patience=1), 0)


@pytest.fixture(scope="module")
def split():
    return data.gen_toy_dataset(2, 5, ToySpec(n_noise=4), np.random.default_rng(0)).split


class TestTrainData:
    def test_clean_dev_by_default(self, split):
        td = training.TrainData.from_split(split)
        assert td.dev_set.snr_db == math.inf and len(td.dev_set) == len(split.dev)

    def test_noisy_dev_realizes_snr(self, split):
        td = training.TrainData.from_split(split, dev_snr_db=-5.0, seed=3)
        assert abs(td.dev_set.measured_snr() + 5.0) < 1e-6
        again = training.TrainData.from_split(split, dev_snr_db=-5.0, seed=3)
        assert torch.equal(td.dev_set.noise, again.dev_set.noise)

    def test_empty_splits(self, split):
        with pytest.raises(InvalidInputError):
            training.TrainData.from_split(DatasetSplit(train=[], dev=split.dev))
