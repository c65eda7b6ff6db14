import pytest

from qe.costmodel import LayerShape, flops, params
from qe.errors import InvalidInputError


def square(d, s=128, r=64, n_experts=8):
    return LayerShape(seq_len=s, d_in=d, d_out=d, rank=r, n_experts=n_experts)


class TestFlops:
    def test_degenerate_unit(self):
        shape = LayerShape(seq_len=1, d_in=1, d_out=1, rank=0, n_experts=0)
        assert flops(shape, "origin") == 1
        assert flops(shape, "qe") == 1

    def test_reference_square_layer(self):
        shape = square(3584)
        assert flops(shape, "origin") == 1_644_167_168
        assert flops(shape, "qe") - flops(shape, "origin") == 62_390_272

    def test_zero_rank_matches_origin(self):
        shape = square(256, r=0, n_experts=0)
        assert flops(shape, "qe") == flops(shape, "origin")

    def test_square_closed_form(self):
        for d, r, n in [(64, 16, 4), (128, 64, 8), (512, 32, 2)]:
            shape = square(d, s=7, r=r, n_experts=n)
            assert flops(shape, "qe") == 7 * d * d + 7 * d * (2 * r + n)

    def test_rectangular_general_form(self):
        shape = LayerShape(seq_len=128, d_in=3584, d_out=18944, rank=64, n_experts=8)
        expect = 128 * 3584 * 18944 + 128 * (3584 + 18944) * 64 + 128 * 3584 * 8
        assert flops(shape, "qe") == expect

    def test_overhead_monotone_in_rank_and_experts(self):
        base = square(512, r=16, n_experts=2)
        more_rank = square(512, r=32, n_experts=2)
        more_experts = square(512, r=16, n_experts=6)
        def overhead(s):
            return flops(s, "qe") - flops(s, "origin")
        assert overhead(more_rank) > overhead(base)
        assert overhead(more_experts) > overhead(base)

    def test_qe_never_below_origin(self):
        for d in (1, 7, 100):
            shape = square(d, s=3, r=5, n_experts=3)
            assert flops(shape, "qe") >= flops(shape, "origin")


class TestParams:
    def test_reference_square_layer(self):
        shape = square(3584)
        assert params(shape, "origin") == 12_845_056
        assert params(shape, "qe", "paper") == 14_909_440

    def test_zero_rank(self):
        shape = square(64, r=0, n_experts=0)
        assert params(shape, "qe", "paper") == params(shape, "origin")

    def test_detailed_member_count(self):
        shape = square(64, r=64, n_experts=8)
        # origin + shared pair + 8 routed pairs + router columns
        assert params(shape, "qe", "detailed") == 4096 + 4096 + 8 * 4096 + 512
        assert params(shape, "qe", "detailed") == 41_472

    def test_paper_mode_requires_square(self):
        shape = LayerShape(seq_len=1, d_in=8, d_out=16, rank=4, n_experts=2)
        with pytest.raises(InvalidInputError):
            params(shape, "qe", "paper")
        assert params(shape, "qe", "detailed") > params(shape, "origin")

    def test_unknown_variant_and_mode(self):
        shape = square(16)
        with pytest.raises(InvalidInputError):
            params(shape, "fast")
        with pytest.raises(InvalidInputError):
            params(shape, "qe", "approximate")


def test_shape_validation():
    with pytest.raises(InvalidInputError):
        LayerShape(seq_len=0, d_in=1, d_out=1, rank=0, n_experts=0)
    with pytest.raises(InvalidInputError):
        LayerShape(seq_len=1, d_in=1, d_out=1, rank=-1, n_experts=0)


def test_rank_split_even_and_odd():
    assert square(8, r=64).rank_split() == (32, 32)
    assert square(8, r=7).rank_split() == (3, 4)
