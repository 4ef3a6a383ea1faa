import numpy as np
import pytest

from plantreg import fileio, nn


def composite_vec(pred, target):
    """Vector-form composite loss for gradient checking: sum of per-head
    squared errors on a single sample."""
    diff = np.asarray(pred, np.float64) - np.asarray(target, np.float64)
    return float(np.sum(diff * diff)), 2.0 * diff


def single_layer(weight, bias):
    spec = nn.MlpSpec((len(weight[0]), len(weight)))
    return nn.MlpModel(
        spec=spec,
        weights=[np.array(weight, np.float32)],
        biases=[np.array(bias, np.float32)],
    )


class TestInit:
    def test_deterministic(self):
        spec = nn.MlpSpec((4, 8, 2))
        a = nn.init_params(spec, 42)
        b = nn.init_params(spec, 42)
        for wa, wb in zip(a.weights, b.weights):
            assert wa.tobytes() == wb.tobytes()

    def test_different_seeds_differ(self):
        spec = nn.MlpSpec((4, 8, 2))
        a = nn.init_params(spec, 1)
        b = nn.init_params(spec, 2)
        assert a.weights[0].tobytes() != b.weights[0].tobytes()

    def test_biases_zero(self):
        model = nn.init_params(nn.MlpSpec((3, 5, 2)), 0)
        assert all(not b.any() for b in model.biases)

    def test_shapes(self):
        model = nn.init_params(nn.MlpSpec((2, 3, 1)), 0)
        assert [w.shape for w in model.weights] == [(3, 2), (1, 3)]
        assert [b.shape for b in model.biases] == [(3,), (1,)]

    def test_bounds_follow_fan_in(self):
        model = nn.init_params(nn.MlpSpec((8, 1000, 2)), 3)
        bound = np.sqrt(6.0 / 8)
        assert np.abs(model.weights[0]).max() <= bound
        assert np.abs(model.weights[0]).max() > 0.8 * bound  # actually fills range

    def test_bad_specs(self):
        with pytest.raises(ValueError):
            nn.MlpSpec((5,))
        with pytest.raises(ValueError):
            nn.MlpSpec((5, 0, 1))


class TestForward:
    def test_zero_weights_output_is_bias(self):
        model = single_layer([[0.0, 0.0]], [4.5])
        for x in ([1.0, 2.0], [-3.0, 7.0]):
            out, _ = nn.forward(model, np.array(x))
            assert out.tolist() == [4.5]

    def test_hand_value_single_layer(self):
        model = single_layer([[2.0]], [1.0])
        out, _ = nn.forward(model, np.array([3.0]))
        assert out.tolist() == [7.0]  # 2*3 + 1

    def test_hand_value_relu_net(self):
        # [1,2,1]: W1=[[1],[-1]], b1=0, W2=[[1,1]], b2=0, x=[-2]
        # pre-activations [-2, 2] -> ReLU [0, 2] -> output [2]
        model = nn.MlpModel(
            spec=nn.MlpSpec((1, 2, 1)),
            weights=[np.array([[1.0], [-1.0]], np.float32), np.array([[1.0, 1.0]], np.float32)],
            biases=[np.zeros(2, np.float32), np.zeros(1, np.float32)],
        )
        out, tape = nn.forward(model, np.array([-2.0]))
        assert out.tolist() == [2.0]
        assert tape.pre_activations[0].tolist() == [[-2.0, 2.0]]

    def test_batch_matches_vector(self):
        # batched and single-row matmuls may use different BLAS kernels,
        # so agreement is to rounding, not bit-exact
        model = nn.init_params(nn.MlpSpec((4, 6, 2)), 0)
        xs = np.random.default_rng(1).standard_normal((5, 4)).astype(np.float32)
        batch_out, _ = nn.forward(model, xs)
        for i in range(5):
            single, _ = nn.forward(model, xs[i])
            np.testing.assert_allclose(single, batch_out[i], rtol=1e-6)

    def test_dimension_mismatch(self):
        model = nn.init_params(nn.MlpSpec((4, 2)), 0)
        with pytest.raises(ValueError, match="features"):
            nn.forward(model, np.zeros(3, np.float32))

    def test_shape_total_finite(self):
        rng = np.random.default_rng(9)
        for seed in range(5):
            model = nn.init_params(nn.MlpSpec((6, 12, 4, 2)), seed)
            x = (rng.standard_normal(6) * 1e3).astype(np.float32)
            out, _ = nn.forward(model, x)
            assert np.isfinite(out).all()


class TestBackward:
    def test_zero_grad_output(self):
        model = nn.init_params(nn.MlpSpec((3, 5, 2)), 0)
        _, tape = nn.forward(model, np.ones(3, np.float32))
        grads = nn.backward(model, tape, np.zeros(2, np.float32))
        assert all(not g.any() for g in grads.weights)
        assert all(not g.any() for g in grads.biases)

    def test_hand_chain_rule(self):
        model = single_layer([[2.0]], [0.0])
        _, tape = nn.forward(model, np.array([3.0]))
        grads = nn.backward(model, tape, np.array([1.0]))
        assert grads.weights[0].tolist() == [[3.0]]
        assert grads.biases[0].tolist() == [1.0]

    def test_relu_gradient_zero_at_zero(self):
        # pre-activation exactly 0: subgradient convention is 0
        model = nn.MlpModel(
            spec=nn.MlpSpec((1, 1, 1)),
            weights=[np.array([[1.0]], np.float32), np.array([[1.0]], np.float32)],
            biases=[np.zeros(1, np.float32), np.zeros(1, np.float32)],
        )
        _, tape = nn.forward(model, np.array([0.0]))
        grads = nn.backward(model, tape, np.array([1.0]))
        assert grads.weights[0][0, 0] == 0.0

    def test_tape_model_mismatch(self):
        model = nn.init_params(nn.MlpSpec((3, 5, 2)), 0)
        other = nn.init_params(nn.MlpSpec((3, 5, 5, 2)), 0)
        _, tape = nn.forward(model, np.ones(3, np.float32))
        with pytest.raises(ValueError):
            nn.backward(other, tape, np.zeros(2, np.float32))

    def test_matches_finite_differences(self):
        model = nn.init_params(nn.MlpSpec((4, 8, 4, 2)), 11)
        x = np.array([0.7, -1.3, 0.4, 2.1])
        target = np.array([1.0, -2.0])
        error = nn.grad_check(model, x, target, composite_vec)
        assert error < 1e-4


class TestMseLoss:
    def test_perfect(self):
        loss, grad = nn.mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        assert loss == 0.0
        assert grad.tolist() == [0.0, 0.0]

    def test_hand_values(self):
        loss, grad = nn.mse_loss(np.array([0.0]), np.array([2.0]))
        assert loss == 4.0  # (0-2)^2
        assert grad.tolist() == [-4.0]  # 2*(0-2)/1

        loss, _ = nn.mse_loss(np.array([1.0, 3.0]), np.array([1.0, 1.0]))
        assert loss == 2.0  # (0 + 4) / 2

    def test_errors(self):
        with pytest.raises(ValueError):
            nn.mse_loss(np.array([1.0]), np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            nn.mse_loss(np.array([]), np.array([]))


class TestAdam:
    def test_zero_gradient_no_change(self):
        model = single_layer([[3.0]], [1.0])
        state = nn.AdamState.init(model)
        grads = nn.Gradients(
            weights=[np.zeros((1, 1), np.float32)], biases=[np.zeros(1, np.float32)]
        )
        before = model.weights[0].copy()
        nn.adam_step(model, grads, state)
        assert state.t == 1
        assert np.array_equal(model.weights[0], before)

    def test_first_step_closed_form(self):
        # m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps)
        model = single_layer([[1.0]], [0.0])
        state = nn.AdamState.init(model, learning_rate=0.001)
        grads = nn.Gradients(
            weights=[np.array([[1.0]], np.float32)], biases=[np.zeros(1, np.float32)]
        )
        nn.adam_step(model, grads, state)
        expected = 1.0 - 0.001 / (1.0 + 1e-8)
        assert abs(float(model.weights[0][0, 0]) - expected) < 1e-7

    def test_three_steps_decrease_quadratic(self):
        # f(theta) = theta^2 via model output theta * x with x=1
        model = single_layer([[1.0]], [0.0])
        state = nn.AdamState.init(model)
        history = [abs(float(model.weights[0][0, 0]))]
        for _ in range(3):
            out, tape = nn.forward(model, np.array([1.0]))
            grads = nn.backward(model, tape, np.array([2.0 * out[0]], np.float32))
            nn.adam_step(model, grads, state)
            history.append(abs(float(model.weights[0][0, 0])))
        assert all(b < a for a, b in zip(history, history[1:]))

    def test_lr_zero_never_changes_parameters(self):
        model = nn.init_params(nn.MlpSpec((3, 4, 2)), 0)
        state = nn.AdamState.init(model, learning_rate=0.0)
        before = [w.copy() for w in model.weights] + [b.copy() for b in model.biases]
        for step in range(3):
            grads = nn.Gradients(
                weights=[np.full_like(w, 0.5) for w in model.weights],
                biases=[np.full_like(b, -0.25) for b in model.biases],
            )
            nn.adam_step(model, grads, state)
        after = list(model.weights) + list(model.biases)
        for b, a in zip(before, after):
            assert np.array_equal(b, a)

    def test_non_finite_gradient_names_layer(self):
        model = nn.init_params(nn.MlpSpec((2, 3, 1)), 0)
        state = nn.AdamState.init(model)
        grads = nn.Gradients(
            weights=[np.zeros((3, 2), np.float32), np.array([[np.nan, 0, 0]], np.float32)],
            biases=[np.zeros(3, np.float32), np.zeros(1, np.float32)],
        )
        with pytest.raises(ValueError, match="layer 1 weights"):
            nn.adam_step(model, grads, state)


class TestGradCheck:
    def test_linear_model_quadratic_loss(self):
        # central differences are exact on quadratics; only float64
        # rounding remains
        model = nn.init_params(nn.MlpSpec((3, 2)), 4)
        error = nn.grad_check(
            model, np.array([0.5, -1.0, 2.0]), np.array([1.0, 0.0]), composite_vec
        )
        assert error < 1e-8

    def test_random_net_composite(self):
        model = nn.init_params(nn.MlpSpec((8, 16, 8, 2)), 21)
        x = np.random.default_rng(3).standard_normal(8)
        error = nn.grad_check(model, x, np.array([0.5, -0.5]), composite_vec)
        assert error < 1e-4

    def test_corrupted_backward_detected(self, monkeypatch):
        real = nn._backward_arrays

        def flipped(weights, tape, grad_output):
            gw, gb = real(weights, tape, grad_output)
            gw[0] = -gw[0]
            return gw, gb

        monkeypatch.setattr(nn, "_backward_arrays", flipped)
        model = nn.init_params(nn.MlpSpec((4, 6, 2)), 8)
        x = np.random.default_rng(5).standard_normal(4)
        error = nn.grad_check(model, x, np.array([1.0, 2.0]), composite_vec)
        assert error > 0.1


class TestFit:
    def _data(self, n=40, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, 3)).astype(np.float32)
        Y = (X @ np.array([[1.0], [-2.0], [0.5]], np.float32)).astype(np.float32)
        return X, Y

    @staticmethod
    def _loss(pred, target):
        diff = pred.astype(np.float64) - target.astype(np.float64)
        loss = float(np.mean(diff**2))
        return loss, {}, (2.0 * diff / diff.size).astype(np.float32)

    def test_history_length_and_determinism(self):
        X, Y = self._data()
        a = nn.init_params(nn.MlpSpec((3, 8, 1)), 5)
        hist_a = nn.fit(a, X, Y, self._loss, epochs=4, seed=5)
        b = nn.init_params(nn.MlpSpec((3, 8, 1)), 5)
        hist_b = nn.fit(b, X, Y, self._loss, epochs=4, seed=5)
        assert len(hist_a) == 4
        assert hist_a == hist_b
        for wa, wb in zip(a.weights, b.weights):
            assert wa.tobytes() == wb.tobytes()

    def test_lr_zero_keeps_params(self):
        X, Y = self._data()
        model = nn.init_params(nn.MlpSpec((3, 8, 1)), 5)
        before = [w.copy() for w in model.weights]
        nn.fit(model, X, Y, self._loss, learning_rate=0.0, epochs=2, seed=1)
        for b, w in zip(before, model.weights):
            assert np.array_equal(b, w)

    def test_empty_training_set(self):
        model = nn.init_params(nn.MlpSpec((3, 1)), 0)
        with pytest.raises(ValueError, match="empty"):
            nn.fit(model, np.zeros((0, 3), np.float32), np.zeros((0, 1), np.float32), self._loss)

    def test_non_finite_loss_reports_position(self):
        X, Y = self._data()
        Y = Y.copy()
        Y[0] = np.nan
        model = nn.init_params(nn.MlpSpec((3, 1)), 0)
        with pytest.raises(ValueError, match="epoch 0 batch"):
            nn.fit(model, X, Y, self._loss, shuffle=False, epochs=1)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = nn.init_params(nn.MlpSpec((4, 8, 2)), 17)
        base = tmp_path / "model"
        nn.save_model(model, base, mode="unimodal")
        loaded = nn.load_model(base)
        assert loaded.mode == "unimodal"
        assert loaded.model.spec == model.spec
        assert loaded.model.rng_seed == 17
        for a, b in zip(loaded.model.weights, model.weights):
            assert a.tobytes() == b.tobytes()
        for a, b in zip(loaded.model.biases, model.biases):
            assert a.tobytes() == b.tobytes()
        assert loaded.adam_state is None

    def test_round_trip_with_adam_state(self, tmp_path):
        model = nn.init_params(nn.MlpSpec((3, 5, 1)), 2)
        state = nn.AdamState.init(model, learning_rate=0.01)
        grads = nn.Gradients(
            weights=[np.ones_like(w) for w in model.weights],
            biases=[np.ones_like(b) for b in model.biases],
        )
        nn.adam_step(model, grads, state)
        base = tmp_path / "with_adam"
        nn.save_model(model, base, adam_state=state, mode="level")
        loaded = nn.load_model(base)
        assert loaded.adam_state is not None
        assert loaded.adam_state.t == 1
        assert loaded.adam_state.learning_rate == 0.01
        for a, b in zip(loaded.adam_state.m_weights, state.m_weights):
            assert a.tobytes() == b.tobytes()

    def test_save_is_deterministic(self, tmp_path):
        model = nn.init_params(nn.MlpSpec((4, 8, 2)), 17)
        nn.save_model(model, tmp_path / "a")
        nn.save_model(model, tmp_path / "b")
        assert (tmp_path / "a.f32bin").read_bytes() == (tmp_path / "b.f32bin").read_bytes()
        assert (tmp_path / "a.manifest.json").read_bytes() == (
            tmp_path / "b.manifest.json"
        ).read_bytes()

    def test_truncated_checkpoint(self, tmp_path):
        model = nn.init_params(nn.MlpSpec((4, 8, 2)), 17)
        base = tmp_path / "model"
        nn.save_model(model, base)
        payload = fileio.payload_path(base)
        data = payload.read_bytes()
        payload.write_bytes(data[:-8])
        with pytest.raises((fileio.PayloadTruncatedError, fileio.CountMismatchError)):
            nn.load_model(base)
