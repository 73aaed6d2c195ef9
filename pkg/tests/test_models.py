import math

import pytest
import torch

from importantaug import models
from importantaug.errors import InvalidInputError, NumericError
from importantaug.models import Generator, Recognizer, init_params

from oracles import TERMS, central_difference, relative_error, term_fn, tiny_problem


@pytest.fixture(scope="module")
def nets():
    return init_params(0)


def test_recognizer_shapes(nets):
    rec, _ = nets
    assert rec.depthwise[0].weight.shape == (257, 1, 9)
    assert rec.pointwise[0].weight.shape == (257, 257, 1)
    assert len(rec.depthwise) == len(rec.pointwise) == 5
    assert rec.head.weight.shape == (35, 257)


def test_generator_shapes(nets):
    _, gen = nets
    assert [tuple(c.weight.shape) for c in gen.convs] == [(2, 1, 5, 5), (2, 2, 5, 5), (2, 2, 5, 5), (1, 2, 5, 5)]


def test_recognizer_output_normalizes(nets):
    rec, _ = nets
    out = rec(torch.randn(3, 257, 126) * 30)
    assert out.shape == (3, 35)
    assert torch.allclose(out.exp().sum(-1), torch.ones(3), atol=1e-6)
    assert rec(torch.randn(257, 126)).shape == (35,)


def test_zero_head_gives_uniform():
    rec, _ = init_params(1)
    with torch.no_grad():
        rec.head.weight.zero_()
        rec.head.bias.zero_()
    out = rec(torch.randn(257, 126))
    assert torch.allclose(out.exp(), torch.full((35,), 1 / 35), atol=1e-7)


def test_forward_is_repeatable(nets):
    rec, gen = nets
    x = torch.randn(2, 257, 126, generator=torch.Generator().manual_seed(3))
    assert torch.equal(rec(x), rec(x))
    assert torch.equal(gen(x), gen(x))


def test_generator_codomain(nets):
    _, gen = nets
    m = gen(torch.randn(2, 257, 126) * 50)
    assert m.shape == (2, 257, 126)
    assert torch.all((m >= 0) & (m <= 1))


def test_generator_saturates_to_ones():
    _, gen = init_params(2)
    with torch.no_grad():
        gen.convs[-1].bias.fill_(1e4)
    assert torch.all(gen(torch.randn(257, 126)) == 1.0)


@pytest.mark.parametrize("shape", [(256, 126), (1, 2, 257, 126), (126,)])
def test_shape_errors(nets, shape):
    rec, gen = nets
    with pytest.raises(InvalidInputError):
        rec(torch.zeros(shape))
    if len(shape) not in (2, 3):
        with pytest.raises(InvalidInputError):
            gen(torch.zeros(shape))


def test_interior_frames_are_translation_consistent(nets):
    rec, _ = nets
    x = torch.randn(1, 257, 126, dtype=torch.float32, generator=torch.Generator().manual_seed(4))
    shift = 3
    a = rec.activations(x)
    b = rec.activations(torch.roll(x, shift, dims=-1))
    # five kernel-9 blocks see 4 frames each side per block -> 20-frame halo;
    # standardization is global, so rolling leaves its statistics unchanged
    halo = 5 * 4
    inner = slice(halo + shift, 126 - halo)
    assert torch.allclose(b[..., inner], a[..., inner.start - shift:inner.stop - shift], atol=1e-5)


class TestCrossEntropy:
    def test_perfect(self):
        lp = torch.log(torch.tensor([[1.0, 0.0, 0.0]]).clamp_min(1e-300))
        assert float(models.cross_entropy(lp, [0])) == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        lp = torch.full((1, 35), -math.log(35))
        assert float(models.cross_entropy(lp, [7])) == pytest.approx(3.5553, abs=1e-4)

    def test_half(self):
        lp = torch.log(torch.tensor([0.5, 0.25, 0.25]))
        assert float(models.cross_entropy(lp, 0)) == pytest.approx(math.log(2))

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            models.cross_entropy(torch.zeros(2, 35), [0, 35])
        with pytest.raises(InvalidInputError):
            models.cross_entropy(torch.zeros(2, 35), [-1, 0])


class TestInit:
    def test_same_seed_same_bits(self):
        (r1, g1), (r2, g2) = init_params(7), init_params(7)
        for a, b in zip(list(r1.parameters()) + list(g1.parameters()),
                        list(r2.parameters()) + list(g2.parameters())):
            assert torch.equal(a, b)

    def test_different_seeds_differ(self):
        (r1, _), (r2, _) = init_params(7), init_params(8)
        assert not torch.equal(r1.head.weight, r2.head.weight)


class TestGradient:
    def test_constant_loss(self):
        params = {"w": torch.randn(3)}
        g = models.gradient(lambda p: p["w"].sum() * 0 + 4.0, params)
        assert torch.equal(g["w"], torch.zeros(3))

    def test_sum(self):
        params = {"w": torch.randn(2, 3), "b": torch.randn(4)}
        g = models.gradient(lambda p: p["w"].sum() + p["b"].sum(), params)
        assert torch.equal(g["w"], torch.ones(2, 3)) and torch.equal(g["b"], torch.ones(4))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            models.gradient(lambda p: torch.log(p["w"] * 0).sum(), {"w": torch.ones(2)})

    def test_linearity(self):
        gen, rec, s, n, labels = tiny_problem(1)
        params = models.param_dict(gen)
        f1 = term_fn(gen, rec, s, n, labels, "recognition")
        f2 = term_fn(gen, rec, s, n, labels, "smooth_t")
        g1, g2 = models.gradient(f1, params), models.gradient(f2, params)
        combo = models.gradient(lambda p: 2.0 * f1(p) - 0.5 * f2(p), params)
        expected = {k: 2.0 * g1[k] - 0.5 * g2[k] for k in params}
        assert relative_error(combo, expected) < 1e-9

    @pytest.mark.parametrize("term", TERMS)
    def test_finite_differences(self, term):
        gen, rec, s, n, labels = tiny_problem(0)
        params = models.param_dict(gen)
        fn = term_fn(gen, rec, s, n, labels, term)
        assert relative_error(models.gradient(fn, params), central_difference(fn, params)) < 1e-4
