import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnodereach.geometry import Star
from gnodereach.layers import (Activation, BranchLimitError, FcLayer, ReachMode, UnsupportedModeError,
                               apply_activation, fc_reach, relu_step_approx, satlin_step_approx,
                               smooth_step_approx)

APPROX, EXACT = ReachMode.APPROX_STAR, ReachMode.EXACT_STAR
PIECEWISE = [Activation.RELU, Activation.LEAKY_RELU, Activation.SATLIN, Activation.LINEAR]
ALL = PIECEWISE + [Activation.TANH, Activation.SIGMOID]


def random_layer(rng, n_in, n_out, act):
    return FcLayer(rng.normal(size=(n_out, n_in)), rng.normal(scale=0.5, size=n_out), act)


def union_contains(sets, y):
    return any(s.contains(y) for s in sets)


class TestFcLayer:
    def test_shape_check(self):
        with pytest.raises(ValueError):
            FcLayer(np.ones((2, 3)), np.ones(3), Activation.RELU)

    def test_leaky_slope_range(self):
        with pytest.raises(ValueError):
            FcLayer(np.eye(1), np.zeros(1), Activation.LEAKY_RELU, slope=1.5)

    def test_evaluate(self):
        lay = FcLayer(np.array([[1.0, -1.0]]), np.array([0.5]), Activation.RELU)
        assert lay.evaluate([1.0, 3.0]).tolist() == [0.0]
        assert lay.evaluate([3.0, 1.0]).tolist() == [2.5]


class TestExamples:
    def test_linear_modes_agree(self):
        S = Star.from_box([-1, -1], [1, 1])
        lay = FcLayer(np.array([[1.0, 2.0]]), np.array([1.0]), Activation.LINEAR)
        a, = fc_reach(lay, S, APPROX)
        e, = fc_reach(lay, S, EXACT)
        assert a.box_bounds().lower == pytest.approx(e.box_bounds().lower)
        assert a.bounds(0) == pytest.approx((-2.0, 4.0))

    def test_relu_positive_orthant_unchanged(self):
        S = Star.from_box([1, 2], [2, 3])
        out, = fc_reach(FcLayer(np.eye(2), np.zeros(2), Activation.RELU), S, APPROX)
        assert out.n_pred == S.n_pred
        assert out.box_bounds().lower.tolist() == [1, 2]

    def test_relu_exact_interval(self):
        lay = FcLayer(np.eye(1), np.zeros(1), Activation.RELU)
        outs = fc_reach(lay, Star.from_box([-1], [1]), EXACT)
        bounds = sorted(o.bounds(0) for o in outs)
        assert len(outs) == 2
        assert bounds[0] == pytest.approx((0.0, 0.0)) and bounds[1] == pytest.approx((0.0, 1.0))

    def test_relu_approx_interval(self):
        lay = FcLayer(np.eye(1), np.zeros(1), Activation.RELU)
        S = Star.from_box([-1], [1])
        a, = fc_reach(lay, S, APPROX)
        lo, hi = a.bounds(0)
        assert lo == pytest.approx(0.0, abs=1e-9) and hi == pytest.approx(1.0, abs=1e-9)
        for e in fc_reach(lay, S, EXACT):
            for y in e.sample(50, np.random.default_rng(0)):
                assert a.contains(y)

    def test_smooth_rejected_in_exact_mode(self):
        with pytest.raises(UnsupportedModeError):
            fc_reach(FcLayer(np.eye(1), np.zeros(1), Activation.TANH), Star.from_box([-1], [1]), EXACT)

    def test_empty_input_gives_empty_list(self):
        from gnodereach.geometry import EMPTY
        assert fc_reach(FcLayer(np.eye(1), np.zeros(1), Activation.RELU), EMPTY, APPROX) == []

    def test_branch_cap(self):
        lay = FcLayer(np.eye(4), np.zeros(4), Activation.RELU)
        with pytest.raises(BranchLimitError):
            fc_reach(lay, Star.from_box(-np.ones(4), np.ones(4)), EXACT, branch_cap=8)


class TestRelaxations:
    def graph_star(self, lo, hi):
        # 2-D star (x, y=x) so the relaxation on dim 1 can be inspected against x
        return Star([0.5 * (lo + hi)] * 2, [[0.5 * (hi - lo)], [0.5 * (hi - lo)]], pred_lb=[-1.0], pred_ub=[1.0])

    def test_relu_stable_cases(self):
        S = self.graph_star(1, 3)
        assert relu_step_approx(S, 1, 1, 3) is S
        Z = relu_step_approx(self.graph_star(-3, -1), 1, -3, -1)
        assert Z.bounds(1) == (0.0, 0.0)

    def test_relu_triangle(self):
        T = relu_step_approx(self.graph_star(-1, 1), 1, -1, 1)
        assert T.contains([-1, 0]) and T.contains([1, 1])
        assert not T.contains([1, -0.1])
        assert not T.contains([0, 0.6])  # above the chord y <= (x+1)/2

    def test_tanh_sigmoid_pinned(self):
        S = Star.point([0.0])
        t = smooth_step_approx(S, 0, Activation.TANH, 0.0, 0.0)
        s = smooth_step_approx(S, 0, Activation.SIGMOID, 0.0, 0.0)
        assert t.bounds(0) == pytest.approx((0.0, 0.0), abs=1e-9)
        assert s.bounds(0) == pytest.approx((0.5, 0.5), abs=1e-9)

    @pytest.mark.parametrize("act", [Activation.TANH, Activation.SIGMOID])
    @pytest.mark.parametrize("lo,hi", [(-1, 1), (0.2, 2.5), (-3, -0.5), (-0.1, 4.0), (-5, 0.3)])
    def test_smooth_graph_membership(self, act, lo, hi):
        S = self.graph_star(lo, hi)
        T = smooth_step_approx(S, 1, act, lo, hi)
        xs = np.linspace(lo, hi, 1000)
        ys = apply_activation(act, xs)
        for x, y in zip(xs[::10], ys[::10]):
            assert T.contains([x, y])

    def test_satlin_graph(self):
        S = self.graph_star(-1, 2)
        T = satlin_step_approx(S, 1, -1, 2)
        for x in np.linspace(-1, 2, 31):
            assert T.contains([x, np.clip(x, 0, 1)])


def _check_soundness(lay, S, mode, rng, n=1000):
    outs = fc_reach(lay, S, mode)
    xs = S.sample(n, rng, boundary_fraction=0.2)
    ys = lay.evaluate(xs)
    boxes = [o.box_bounds() for o in outs]
    for y in ys:
        inside = [k for k, b in enumerate(boxes) if np.all(y >= b.lower - 1e-7) and np.all(y <= b.upper + 1e-7)]
        assert inside, f"{y} outside every output box"
    for y in ys[:: max(1, n // 40)]:
        assert union_contains(outs, y)


@pytest.mark.parametrize("act", ALL)
def test_approx_soundness(act):
    rng = np.random.default_rng(hash(act.value) % 2**32)
    for _ in range(3):
        lay = random_layer(rng, 3, 4, act)
        S = Star.from_box(-np.ones(3), np.ones(3)).add_constraint(rng.normal(size=3), 0.5)
        _check_soundness(lay, S, APPROX, rng)


@pytest.mark.parametrize("act", PIECEWISE)
def test_exact_soundness(act):
    rng = np.random.default_rng(5)
    lay = random_layer(rng, 2, 3, act)
    _check_soundness(lay, Star.from_box([-1, -1], [1, 1]), EXACT, rng)


@pytest.mark.parametrize("act", PIECEWISE)
def test_exact_within_approx(act):
    rng = np.random.default_rng(11)
    lay = random_layer(rng, 2, 3, act)
    S = Star.from_box([-1, -1], [1, 1])
    approx, = fc_reach(lay, S, APPROX)
    for e in fc_reach(lay, S, EXACT):
        for y in e.sample(30, rng, boundary_fraction=0.3):
            assert approx.contains(y)


@pytest.mark.parametrize("act", [Activation.RELU, Activation.LEAKY_RELU, Activation.SATLIN])
def test_approx_monotone_piecewise(act):
    rng = np.random.default_rng(3)
    lay = random_layer(rng, 2, 3, act)
    big = Star.from_box([-1, -1], [1, 1])
    small = Star.from_box([-0.3, -0.5], [0.6, 0.2])
    out_big, = fc_reach(lay, big, APPROX)
    out_small, = fc_reach(lay, small, APPROX)
    for y in out_small.sample(200, rng, boundary_fraction=0.3):
        assert out_big.contains(y)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(ALL), st.integers(0, 2**32 - 1))
def test_approx_soundness_property(act, seed):
    rng = np.random.default_rng(seed)
    lay = random_layer(rng, 2, 2, act)
    c = rng.normal(size=2)
    S = Star.from_box(c - 0.7, c + 0.7)
    out, = fc_reach(lay, S, APPROX)
    b = out.box_bounds()
    ys = lay.evaluate(S.sample(300, rng, boundary_fraction=0.3))
    assert np.all(ys >= b.lower - 1e-7) and np.all(ys <= b.upper + 1e-7)
