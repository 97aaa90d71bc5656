import numpy as np
import pytest

from malfuse.errors import (
    ArityMismatch,
    LabelOutOfRange,
    NonFiniteGradient,
    ShapeMismatch,
)
from malfuse.nnet import (
    Conv3x3,
    Dense,
    Flatten,
    FuseOp,
    FusionSpec,
    MaxPool2x2,
    ReLU,
    Sequential,
    Tensor,
    conv2d,
    conv2d_backward,
    dense,
    dense_backward,
    fuse,
    fuse_backward,
    grad_check,
    load_checkpoint,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
    save_checkpoint,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
)

from reference import naive_conv3x3, naive_dense, naive_pool2x2, naive_softmax_ce


def spec(op, arity=2):
    return FusionSpec(FuseOp(op), input_arity=arity)


class TestConv:
    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            c = int(rng.integers(1, 4))
            x = rng.normal(size=(c, int(rng.integers(2, 9)), int(rng.integers(2, 9))))
            w = np.zeros((c, c, 3, 3))
            for ch in range(c):
                w[ch, ch, 1, 1] = 1.0
            assert np.allclose(conv2d(x, w, np.zeros(c)), x, atol=0, rtol=0)

    def test_all_ones_padding_pattern(self):
        x = np.ones((1, 5, 5))
        w = np.ones((1, 1, 3, 3))
        y = conv2d(x, w, np.zeros(1))[0]
        assert y[2, 2] == 9
        assert y[0, 0] == y[0, 4] == y[4, 0] == y[4, 4] == 4
        assert y[0, 2] == y[2, 0] == y[2, 4] == y[4, 2] == 6

    def test_bias_only(self):
        x = np.random.default_rng(1).normal(size=(2, 4, 4))
        w = np.zeros((3, 2, 3, 3))
        y = conv2d(x, w, np.array([1.5, -2.0, 0.25]))
        assert np.allclose(y[0], 1.5) and np.allclose(y[1], -2.0) and np.allclose(y[2], 0.25)

    def test_matches_naive_four_loop(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        assert np.allclose(conv2d(x, w, b), naive_conv3x3(x, w, b), atol=1e-12)

    def test_batched_equals_stacked(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(4, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        batched = conv2d(xs, w, b)
        for i in range(4):
            assert np.allclose(batched[i], conv2d(xs[i], w, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))


class TestMaxPool:
    def test_two_by_two(self):
        y, _ = maxpool2x2(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert y.tolist() == [[[4.0]]]

    def test_tie_breaks_to_first_row_major(self):
        y, idx = maxpool2x2(np.full((1, 2, 2), 7.0))
        assert y[0, 0, 0] == 7.0
        assert idx[0, 0, 0] == 0

    def test_odd_edges_singleton_windows(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 3))
        y, _ = maxpool2x2(x)
        assert y.shape == (2, 2, 2)
        assert np.allclose(y, naive_pool2x2(x))

    def test_backward_routes_one_unit_per_window(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 4, 6))
        y, idx = maxpool2x2(x)
        dy = np.ones_like(y)
        dx = maxpool2x2_backward(dy, idx, x.shape)
        assert dx.sum() == y.size
        assert ((dx == 0) | (dx == 1)).all()


class TestDense:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(dense(x, np.eye(3), np.zeros(3)), x)

    def test_small_example(self):
        assert dense(np.array([2.0, 3.0]), np.array([[1.0, 1.0]]), np.zeros(1)).tolist() == [5.0]

    def test_matches_naive(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=4)
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=3)
        assert np.max(np.abs(dense(x, w, b) - naive_dense(x, w, b))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dense(np.ones(3), np.ones((2, 4)), np.zeros(2))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_nine_classes(self):
        loss, probs = softmax_cross_entropy(np.zeros(9), 4)
        assert abs(loss - np.log(9)) < 1e-12
        assert np.allclose(probs, 1 / 9)

    def test_extreme_logits_stable(self):
        loss, probs = softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
        assert loss < 1e-12
        assert np.isfinite(probs).all()

    def test_matches_naive_at_moderate_magnitude(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=6)
        loss, probs = softmax_cross_entropy(z, 2)
        nloss, nprobs = naive_softmax_ce(z, 2)
        assert abs(loss - nloss) < 1e-12
        assert np.max(np.abs(probs - nprobs)) < 1e-12

    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            _, probs = softmax_cross_entropy(rng.normal(size=9) * 10, 0)
            assert abs(probs.sum() - 1.0) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            softmax_cross_entropy(np.zeros(4), 4)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        losses, probs = softmax_cross_entropy(z, labels)
        for i in range(5):
            li, pi = softmax_cross_entropy(z[i], int(labels[i]))
            assert abs(losses[i] - li) < 1e-12
            assert np.allclose(probs[i], pi, atol=1e-15)


class TestFuse:
    def test_elementwise_examples(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        assert fuse([a, b], spec("add")).tolist() == [4.0, 6.0]
        assert fuse([a, b], spec("avg")).tolist() == [2.0, 3.0]
        assert fuse([np.array([1.0, 5.0]), np.array([4.0, 2.0])], spec("max")).tolist() == [4.0, 5.0]

    def test_concat_three(self):
        out = fuse([np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0])], spec("concat", 3))
        assert out.tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]

    def test_idempotence(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=8)
        assert np.array_equal(fuse([x, x.copy()], spec("avg")), x)
        assert np.array_equal(fuse([x, x.copy()], spec("max")), x)

    def test_arity_mismatch(self):
        with pytest.raises(ArityMismatch):
            fuse([np.ones(2)], spec("add"))

    def test_spec_only_allows_arity_two_or_three(self):
        with pytest.raises(ArityMismatch):
            FusionSpec(FuseOp.ADD, input_arity=1)
        with pytest.raises(ArityMismatch):
            FusionSpec(FuseOp.CONCAT, input_arity=4)

    def test_shape_mismatch_no_broadcast(self):
        with pytest.raises(ShapeMismatch):
            fuse([np.ones(2), np.ones(3)], spec("add"))
        with pytest.raises(ShapeMismatch):
            fuse([np.ones((2, 2)), np.ones((3, 4))], spec("concat"))

    def test_max_backward_routes_to_first_attaining(self):
        a = np.array([1.0, 5.0, 2.0])
        b = np.array([1.0, 3.0, 7.0])
        dy = np.array([1.0, 1.0, 1.0])
        da, db = fuse_backward(dy, [a, b], spec("max"))
        assert da.tolist() == [1.0, 1.0, 0.0]  # tie at index 0 goes to first input
        assert db.tolist() == [0.0, 0.0, 1.0]

    def test_concat_backward_slices(self):
        dy = np.arange(6.0)
        da, db, dc = fuse_backward(dy, [np.zeros(1), np.zeros(2), np.zeros(3)], spec("concat", 3))
        assert da.tolist() == [0.0]
        assert db.tolist() == [1.0, 2.0]
        assert dc.tolist() == [3.0, 4.0, 5.0]


class TestGradCheck:
    def test_dense_layer(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, size=6)
        w = rng.uniform(-1, 1, size=(4, 6))
        b = rng.uniform(-1, 1, size=4)
        r = rng.normal(size=4)

        def op(x, w, b):
            y = dense(x, w, b)
            dx, dw, db = dense_backward(r, x, w)
            return float((y * r).sum()), [dx, dw, db]

        assert grad_check(op, [x, w, b], epsilon=1e-5) < 1e-6

    def test_conv_layer(self):
        rng = np.random.default_rng(12)
        x = rng.uniform(-1, 1, size=(2, 4, 4))
        w = rng.uniform(-1, 1, size=(3, 2, 3, 3))
        b = rng.uniform(-1, 1, size=3)
        r = rng.normal(size=(3, 4, 4))

        def op(x, w, b):
            y = conv2d(x, w, b)
            dx, dw, db = conv2d_backward(r, x, w)
            return float((y * r).sum()), [dx, dw, db]

        assert grad_check(op, [x, w, b], epsilon=1e-5) < 1e-6

    def test_relu(self):
        rng = np.random.default_rng(13)
        x = rng.uniform(0.2, 1.0, size=12) * rng.choice([-1.0, 1.0], size=12)
        r = rng.normal(size=12)

        def op(x):
            return float((relu(x) * r).sum()), [relu_backward(r, x)]

        assert grad_check(op, [x], epsilon=1e-5) < 1e-6

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(14)
        z = rng.uniform(-1, 1, size=9)

        def op(z):
            loss, probs = softmax_cross_entropy(z, 3)
            return loss, [softmax_cross_entropy_backward(probs, 3)]

        assert grad_check(op, [z], epsilon=1e-5) < 1e-6

    def test_nonfinite_rejected(self):
        def op(x):
            return float("nan"), [np.zeros_like(x)]

        with pytest.raises(NonFiniteGradient):
            grad_check(op, [np.ones(2)], epsilon=1e-5)

    def test_epsilon_range_enforced(self):
        with pytest.raises(ValueError):
            grad_check(lambda x: (0.0, [np.zeros_like(x)]), [np.ones(1)], epsilon=1e-2)


class TestLayersAndCheckpoint:
    def _stack(self, rng):
        return Sequential(
            [
                Conv3x3(1, 2, rng=rng),
                ReLU(),
                MaxPool2x2(),
                Flatten(),
                Dense(2 * 3 * 3, 5, rng=rng),
            ]
        )

    def test_forward_backward_shapes(self):
        rng = np.random.default_rng(15)
        seq = self._stack(rng)
        x = rng.normal(size=(1, 5, 5))
        y = seq.forward(x)
        assert y.shape == (5,)
        dx = seq.backward(np.ones(5))
        assert dx.shape == x.shape
        assert all(p.grad is not None for p in seq.params())

    def test_checkpoint_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(16)
        seq = self._stack(rng)
        path = tmp_path / "weights.ckpt"
        save_checkpoint(path, seq.layers)
        original = [p.data.copy() for p in seq.params()]
        for p in seq.params():
            p.data = np.zeros_like(p.data)
        load_checkpoint(path, seq.layers)
        for before, after in zip(original, (p.data for p in seq.params())):
            assert np.array_equal(before, after)
            assert before.dtype == after.dtype == np.float64

    def test_checkpoint_file_deterministic(self, tmp_path):
        rng = np.random.default_rng(17)
        seq = self._stack(rng)
        save_checkpoint(tmp_path / "a.ckpt", seq.layers)
        save_checkpoint(tmp_path / "b.ckpt", seq.layers)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_checkpoint_kind_mismatch_rejected(self, tmp_path):
        rng = np.random.default_rng(18)
        seq = self._stack(rng)
        save_checkpoint(tmp_path / "w.ckpt", seq.layers)
        other = Sequential([Dense(4, 4)])
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "w.ckpt", other.layers)

    def test_checkpoint_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTCKPT" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(path, Sequential([Dense(2, 2)]).layers)

    def test_tensor_accumulates(self):
        t = Tensor(np.zeros(3))
        t.accumulate(np.ones(3))
        t.accumulate(np.ones(3))
        assert t.grad.tolist() == [2.0, 2.0, 2.0]
        t.zero_grad()
        assert t.grad is None
