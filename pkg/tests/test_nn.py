import numpy as np
import pytest

from sldp import nn
from _oracles import central_difference, generic_point, kink_crossings, lenet_lite
from sldp.nn import (ConvTranspose2D, Conv2D, Dense, Flatten, MaxPool2D, ReLU, Sequential, ShapeError,
                     TraceError, backward, forward, grad_check, softmax_cross_entropy)


class TestForwardExamples:
    def test_relu(self):
        m = Sequential([ReLU()], (3,))
        out, _ = forward(m, np.array([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])

    def test_maxpool_2x2(self):
        m = Sequential([MaxPool2D(2)], (1, 2, 2))
        out, _ = forward(m, np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        np.testing.assert_array_equal(out, [[[[4.0]]]])

    def test_identity_conv(self):
        conv = Conv2D(1, 1, 1)
        conv.params["W"][...] = 1.0
        m = Sequential([conv], (1, 5, 5))
        x = np.random.default_rng(0).random((2, 1, 5, 5))
        np.testing.assert_array_equal(forward(m, x)[0], x)

    def test_shape_mismatch_raises(self):
        m = Sequential([Conv2D(1, 2, 3)], (1, 8, 8))
        with pytest.raises(ShapeError):
            forward(m, np.zeros((1, 1, 9, 9)))

    def test_incompatible_graph_rejected_at_construction(self):
        with pytest.raises(ShapeError):
            Sequential([Flatten(), Dense(10, 3)], (1, 4, 4))

    @pytest.mark.parametrize("layer,shape,expected", [
        (Conv2D(1, 6, 5), (1, 28, 28), (6, 24, 24)),
        (Conv2D(3, 8, 3, padding=1), (3, 32, 32), (8, 32, 32)),
        (MaxPool2D(2), (6, 24, 24), (6, 12, 12)),
        (ConvTranspose2D(6, 1, 4, 2, 1), (6, 14, 14), (1, 28, 28)),
        (ConvTranspose2D(6, 1, 6, 2, 0), (6, 12, 12), (1, 28, 28)),
        (Flatten(), (16, 4, 4), (256,)),
    ])
    def test_output_shapes(self, layer, shape, expected):
        assert layer.output_shape(shape) == expected

    def test_forward_is_deterministic(self):
        m = lenet_lite()
        x = np.random.default_rng(1).random((4, 1, 28, 28))
        a, b = forward(m, x)[0], forward(m, x)[0]
        assert a.tobytes() == b.tobytes()

    def test_parameterless_layers(self):
        for layer in (ReLU(), MaxPool2D(2), Flatten()):
            assert layer.params == {}


class TestBackwardExamples:
    def test_relu_mask(self):
        m = Sequential([ReLU()], (2,))
        _, tr = forward(m, np.array([[-1.0, 2.0]]))
        dx, _ = backward(m, tr, np.array([[1.0, 1.0]]))
        np.testing.assert_array_equal(dx, [[0.0, 1.0]])

    def test_dense_input_grad_matches_fd(self):
        d = Dense(2, 2)
        d.params["W"] = np.array([[1.0, 2.0], [3.0, -4.0]])
        m = Sequential([d], (2,))
        x = np.array([[0.5, -1.5]])
        r = np.array([[1.0, -2.0]])
        _, tr = forward(m, x)
        dx, _ = backward(m, tr, r)
        fd = central_difference(lambda v: float((forward(m, v)[0] * r).sum()), x.copy(), 1e-4)
        np.testing.assert_allclose(dx, fd, rtol=1e-8)
        np.testing.assert_allclose(dx, r @ d.params["W"])

    def test_conv_transpose_fd_all_params(self):
        layer = ConvTranspose2D(1, 1, 3, 1, 0)
        m = Sequential([layer], (1, 3, 3)).init(np.random.default_rng(3))
        x = np.random.default_rng(4).standard_normal((1, 1, 3, 3))
        assert grad_check(m, x, step=1e-3) < 1e-4

    def test_missing_trace(self):
        m = Sequential([ReLU()], (2,))
        with pytest.raises(TraceError):
            backward(m, None, np.zeros((1, 2)))

    def test_stale_trace(self):
        m = Sequential([Dense(2, 2)], (2,)).init(np.random.default_rng(0))
        _, tr = forward(m, np.ones((1, 2)))
        m.set_parameters([p + 1 for p in m.parameters()])
        with pytest.raises(TraceError):
            backward(m, tr, np.ones((1, 2)))

    def test_output_grad_shape_checked(self):
        m = Sequential([Dense(2, 3)], (2,)).init(np.random.default_rng(0))
        _, tr = forward(m, np.ones((1, 2)))
        with pytest.raises(ShapeError):
            backward(m, tr, np.ones((1, 2)))


def _layer_cases():
    yield "Dense", Sequential([Dense(5, 4)], (5,)), (3, 5)
    yield "ReLU", Sequential([Dense(5, 4), ReLU()], (5,)), (3, 5)
    yield "Flatten", Sequential([Flatten(), Dense(12, 3)], (3, 2, 2)), (2, 3, 2, 2)
    yield "Conv2D", Sequential([Conv2D(2, 3, 3)], (2, 5, 5)), (2, 2, 5, 5)
    yield "Conv2D-strided-padded", Sequential([Conv2D(2, 3, 3, stride=2, padding=1)], (2, 5, 5)), (2, 2, 5, 5)
    yield "MaxPool2D", Sequential([MaxPool2D(2)], (2, 4, 4)), (2, 2, 4, 4)
    yield "MaxPool2D-overlapping", Sequential([MaxPool2D(3, stride=1)], (1, 5, 5)), (2, 1, 5, 5)
    yield "ConvTranspose2D", Sequential([ConvTranspose2D(2, 3, 4, 2, 1)], (2, 3, 3)), (2, 2, 3, 3)
    yield "ConvTranspose2D-6x2", Sequential([ConvTranspose2D(2, 1, 6, 2, 0)], (2, 3, 3)), (1, 2, 3, 3)


@pytest.mark.parametrize("name,model,xshape", list(_layer_cases()), ids=[c[0] for c in _layer_cases()])
def test_grad_check_every_layer_kind(name, model, xshape):
    model.init(np.random.default_rng(11))
    x = np.random.default_rng(12).standard_normal(xshape)
    assert grad_check(model, x, step=1e-3) < 1e-4


def test_grad_check_linear_is_exact():
    m = Sequential([Dense(4, 3)], (4,)).init(np.random.default_rng(0))
    assert grad_check(m, np.random.default_rng(1).standard_normal((2, 4))) < 1e-8


def test_grad_check_small_lenet_generic_point():
    m = generic_point(lenet_lite(5), seed=5)
    x = np.random.default_rng(6).random((2, 1, 28, 28))
    assert kink_crossings(m, x, 1e-3) == 0
    assert grad_check(m, x, step=1e-3) < 1e-4


def test_grad_check_small_lenet_exact_with_tiny_step():
    # at glorot scale a 1e-3 step straddles ReLU kinks; a tiny step does not
    m = lenet_lite(5)
    x = np.random.default_rng(6).random((2, 1, 28, 28))
    assert grad_check(m, x, step=1e-6) < 1e-4


def test_grad_check_empty_model():
    m = Sequential([], (3,))
    assert grad_check(m, np.ones((1, 3))) < 1e-10


class TestMaxPoolRouting:
    def test_ties_go_to_first_index(self):
        m = Sequential([MaxPool2D(2)], (1, 2, 2))
        x = np.array([[[[5.0, 5.0], [5.0, 5.0]]]])
        _, tr = forward(m, x)
        dx, _ = backward(m, tr, np.array([[[[1.0]]]]))
        np.testing.assert_array_equal(dx, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_overlapping_ties_first_index(self):
        m = Sequential([MaxPool2D(2, stride=1)], (1, 2, 3))
        x = np.array([[[[1.0, 7.0, 7.0], [7.0, 1.0, 1.0]]]])
        _, tr = forward(m, x)
        dx, _ = backward(m, tr, np.ones((1, 1, 1, 2)))
        np.testing.assert_array_equal(dx, [[[[0.0, 2.0, 0.0], [0.0, 0.0, 0.0]]]])

    def test_one_position_per_window_and_sum_preserved(self):
        rng = np.random.default_rng(2)
        m = Sequential([MaxPool2D(2)], (3, 6, 6))
        x = rng.integers(0, 3, size=(4, 3, 6, 6)).astype(float)  # many ties
        dy = rng.standard_normal((4, 3, 3, 3))
        _, tr = forward(m, x)
        dx, _ = backward(m, tr, dy)
        assert np.isclose(dx.sum(), dy.sum())
        blocks = dx.reshape(4, 3, 3, 2, 3, 2).transpose(0, 1, 2, 4, 3, 5).reshape(4, 3, 3, 3, 4)
        assert np.all((blocks != 0).sum(axis=-1) <= 1)


def test_split_composition_is_exact():
    m = lenet_lite(7)
    x = np.random.default_rng(8).random((3, 1, 28, 28))
    full = forward(m, x)[0]
    for cut in range(1, len(m)):
        head, tail = m[:cut], m[cut:]
        np.testing.assert_array_equal(forward(tail, forward(head, x)[0])[0], full)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros((4, 10)), np.array([0, 3, 5, 9]))
        assert loss == pytest.approx(np.log(10), abs=1e-12)

    def test_margin_limit(self):
        losses = []
        for margin in (1.0, 5.0, 20.0, 50.0):
            logits = np.zeros((1, 10))
            logits[0, 2] = margin
            losses.append(softmax_cross_entropy(logits, np.array([2]))[0])
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-20

    def test_two_class_hand_case(self):
        loss, d = softmax_cross_entropy(np.array([[0.0, np.log(3.0)]]), np.array([0]))
        assert loss == pytest.approx(np.log(4.0), rel=1e-14)
        np.testing.assert_allclose(d, [[0.25 - 1.0, 0.75]])

    def test_gradient_is_mean_reduced(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((5, 4))
        labels = rng.integers(0, 4, 5)
        _, d = softmax_cross_entropy(logits, labels)
        fd = central_difference(lambda v: softmax_cross_entropy(v, labels)[0], logits.copy(), 1e-5)
        np.testing.assert_allclose(d, fd, atol=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


def test_mse_loss_gradient():
    rng = np.random.default_rng(0)
    p, t = rng.random((2, 3)), rng.random((2, 3))
    _, g = nn.mse_loss(p, t)
    fd = central_difference(lambda v: nn.mse_loss(v, t)[0], p.copy(), 1e-6)
    np.testing.assert_allclose(g, fd, atol=1e-9)
