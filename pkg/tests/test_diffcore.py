import numpy as np
import pytest

from symkp import diffcore as dc


def finite_diff(build_fn, leaf, step=1e-5):
    """Independent central-difference oracle over every entry of one leaf."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(build_fn().data)
        flat[i] = orig - step
        dn = float(build_fn().data)
        flat[i] = orig
        out[i] = (up - dn) / (2 * step)
    return grad


class TestForwardValues:
    def test_relu(self):
        assert dc.relu(dc.Tensor([-1.0])).data[0] == 0.0
        assert dc.relu(dc.Tensor([2.0])).data[0] == 2.0

    def test_leaky_relu(self):
        out = dc.leaky_relu(dc.Tensor([-2.0, 3.0]), slope=0.1)
        assert np.allclose(out.data, [-0.2, 3.0])

    def test_huber(self):
        assert dc.huber(dc.Tensor(0.5), delta=1.0).data == pytest.approx(0.125)
        assert dc.huber(dc.Tensor(2.0), delta=1.0).data == pytest.approx(1.5)
        assert dc.huber(dc.Tensor(-2.0), delta=1.0).data == pytest.approx(1.5)

    def test_max_over_set(self):
        out = dc.max_over_set(dc.Tensor([[1.0, 3.0], [2.0, 0.0]]))
        assert np.allclose(out.data, [2.0, 3.0])

    def test_min_over_set(self):
        out = dc.min_over_set(dc.Tensor([[1.0, 3.0], [2.0, 0.0]]))
        assert np.allclose(out.data, [1.0, 0.0])

    def test_mean_over_set(self):
        out = dc.mean_over_set(dc.Tensor([[1.0, 3.0], [3.0, 1.0]]))
        assert np.allclose(out.data, [2.0, 2.0])

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(dc.ShapeMismatchError, match=r"\(2,\).*\(3,\)"):
            dc.add(dc.Tensor([1.0, 2.0]), dc.Tensor([1.0, 2.0, 3.0]))
        with pytest.raises(dc.ShapeMismatchError):
            dc.matmul(dc.Tensor(np.zeros((2, 3))), dc.Tensor(np.zeros((2, 3))))

    def test_min_sqdist(self):
        x = dc.Tensor([[0.0, 0, 0], [2.0, 0, 0]])
        refs = dc.Tensor([[1.0, 0, 0]])
        assert np.allclose(dc.min_sqdist_to_set(x, refs).data, [1.0, 1.0])


class TestBackwardBasics:
    def test_sum_of_squares(self):
        x = dc.Tensor([1.0, 2.0], requires_grad=True)
        dc.tsum(dc.square(x)).backward()
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_max_winner_routing(self):
        x = dc.Tensor([3.0, 1.0], requires_grad=True)
        dc.max_over_set(x).backward()
        assert np.allclose(x.grad, [1.0, 0.0])

    def test_backward_requires_scalar(self):
        x = dc.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            dc.square(x).backward()

    def test_grad_accumulates_across_calls(self):
        x = dc.Tensor([1.0, 2.0], requires_grad=True)
        dc.tsum(dc.square(x)).backward()
        dc.tsum(dc.square(x)).backward()
        assert np.allclose(x.grad, [4.0, 8.0])

    def test_determinism(self):
        rng = np.random.default_rng(0)
        x = dc.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        w = dc.Tensor(rng.normal(size=(4, 3)), requires_grad=True)

        def run():
            x.zero_grad()
            w.zero_grad()
            dc.tsum(dc.square(dc.leaky_relu(dc.matmul(x, w)))).backward()
            return np.array(x.grad), np.array(w.grad)

        gx1, gw1 = run()
        gx2, gw2 = run()
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


class TestGradCheckOracle:
    def test_linear_map_nearly_exact(self):
        rng = np.random.default_rng(1)
        w = dc.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = dc.Tensor(rng.normal(size=(2, 4)))

        def build():
            return dc.tsum(dc.matmul(x, w))

        assert dc.grad_check(build, [w]) < 1e-9

    def test_three_layer_perceptron(self):
        rng = np.random.default_rng(2)
        x = dc.Tensor(rng.normal(size=(6, 3)))
        leaves = []
        for fan_in, fan_out in ((3, 8), (8, 8), (8, 1)):
            leaves.append(dc.Tensor(rng.normal(size=(fan_in, fan_out)) * 0.5,
                                    requires_grad=True))
            leaves.append(dc.Tensor(rng.normal(size=fan_out) * 0.5, requires_grad=True))

        def build():
            h = x
            for i in range(0, 6, 2):
                h = dc.affine(h, leaves[i], leaves[i + 1])
                if i < 4:
                    h = dc.leaky_relu(h, 0.1)
            return dc.tsum(dc.square(h))

        assert dc.grad_check(build, leaves, step=1e-5) < 1e-5
        for leaf in leaves:
            leaf.zero_grad()
        build().backward()
        oracle = finite_diff(build, leaves[0])
        assert np.abs(leaves[0].grad - oracle).max() < 1e-5

    def test_chamfer_style_graph(self):
        rng = np.random.default_rng(3)
        a = dc.Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        b = dc.Tensor(rng.normal(size=(4, 3)) * 2, requires_grad=True)

        def build():
            return dc.add(dc.tsum(dc.min_sqdist_to_set(a, b)),
                          dc.tsum(dc.min_sqdist_to_set(b, a)))

        assert dc.grad_check(build, [a, b], step=1e-5, skip_ties=True) < 1e-4


class TestOpGradients:
    """Central-difference oracles for every remaining op."""

    def _check(self, build, leaves, tol=1e-6):
        assert dc.grad_check(build, leaves, step=1e-6) < tol

    def test_elementwise_and_reductions(self):
        rng = np.random.default_rng(4)
        x = dc.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        self._check(lambda: dc.tsum(dc.mul(dc.sub(dc.square(x), 1.5), 0.7)), [x])
        self._check(lambda: dc.tsum(dc.sqrt(x)), [x])
        self._check(lambda: dc.tsum(dc.square(dc.mean_over_set(x))), [x])
        self._check(lambda: dc.tsum(dc.square(dc.max_over_set(x))), [x])
        self._check(lambda: dc.tsum(dc.square(dc.min_over_set(x))), [x])
        self._check(lambda: dc.tsum(dc.sin(x)) + dc.tsum(dc.cos(x)), [x])

    def test_structural_ops(self):
        rng = np.random.default_rng(5)
        x = dc.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        self._check(lambda: dc.tsum(dc.square(dc.transpose(x))), [x])
        self._check(lambda: dc.tsum(dc.square(dc.reshape(x, (3, 4)))), [x])
        self._check(lambda: dc.tsum(dc.square(dc.concat([x, x], axis=1))), [x])
        self._check(lambda: dc.tsum(dc.square(dc.gather_rows(x, [0, 2, 2, 1]))), [x])

    def test_segment_max(self):
        rng = np.random.default_rng(6)
        x = dc.Tensor(rng.normal(size=(7, 3)), requires_grad=True)
        ids = np.array([0, 1, 0, 2, 1, 2, 0])
        self._check(lambda: dc.tsum(dc.square(dc.segment_max(x, ids, 3))), [x])

    def test_segment_mean(self):
        rng = np.random.default_rng(9)
        x = dc.Tensor(rng.normal(size=(7, 3)), requires_grad=True)
        ids = np.array([0, 1, 0, 2, 1, 2, 0])
        out = dc.segment_mean(x, ids, 3)
        assert np.allclose(out.data[0], x.data[[0, 2, 6]].mean(axis=0))
        self._check(lambda: dc.tsum(dc.square(dc.segment_mean(x, ids, 3))), [x])
        with pytest.raises(ValueError, match="empty"):
            dc.segment_mean(x, np.zeros(7, dtype=int), 2)

    def test_prod3_and_huber(self):
        x = dc.Tensor(np.array([1.3, 0.7, 2.1]), requires_grad=True)
        self._check(lambda: dc.prod3(x), [x])
        y = dc.Tensor(np.array([0.4, -1.7, 2.2]), requires_grad=True)
        self._check(lambda: dc.tsum(dc.huber(y, delta=1.0)), [y])

    def test_rotate_and_unit2(self):
        rng = np.random.default_rng(7)
        pts = dc.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        cs = dc.Tensor(np.array([0.6, -0.8]), requires_grad=True)
        self._check(lambda: dc.tsum(dc.square(dc.rotate_about_up(pts, cs))), [pts, cs])
        raw = dc.Tensor(np.array([1.3, -0.4]), requires_grad=True)

        def build():
            u, _ = dc.unit2(raw)
            return dc.tsum(dc.square(dc.add(u, np.array([0.2, 0.5]))))

        self._check(build, [raw])

    def test_unit2_degenerate_flag(self):
        u, degenerate = dc.unit2(dc.Tensor(np.zeros(2)))
        assert degenerate
        assert np.allclose(u.data, [1.0, 0.0])

    def test_affine_all_args(self):
        rng = np.random.default_rng(8)
        x = dc.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        w = dc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = dc.Tensor(rng.normal(size=4), requires_grad=True)
        self._check(lambda: dc.tsum(dc.square(dc.affine(x, w, b))), [x, w, b])


class TestFiniteChecks:
    def test_flag_catches_nan(self):
        dc.set_finite_checks(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
                dc.sqrt(dc.Tensor([-1.0]))
        finally:
            dc.set_finite_checks(False)
