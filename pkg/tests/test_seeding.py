import numpy as np
import torch

from importantaug import seeding


def test_streams_are_reproducible():
    a = seeding.substream(3, "roll").integers(0, 1000, 10)
    b = seeding.substream(3, "roll").integers(0, 1000, 10)
    assert np.array_equal(a, b)


def test_streams_are_independent_by_name_and_seed():
    draws = {(s, n): tuple(seeding.substream(s, n).integers(0, 2**31, 4))
             for s in (0, 1) for n in seeding.STREAMS}
    assert len(set(draws.values())) == len(draws)


def test_torch_generator():
    a = torch.randn(5, generator=seeding.torch_generator(0, "init"))
    b = torch.randn(5, generator=seeding.torch_generator(0, "init"))
    assert torch.equal(a, b)
    assert 0 <= seeding.torch_seed(0, "init") < 2**63
