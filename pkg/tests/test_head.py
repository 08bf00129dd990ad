import numpy as np
import pytest

from core.errors import ConfigError, ShapeMismatchError
from core.head import (
    NonlinearParams, init_head, elementwise_flow, mlp_flow, head_predict,
    head_predict_at, head_gradient, _forward
)
from core.model import JuliaModel, loss
from core.models import SparseTensor


def _random_entries(shape, count, rng):
    cells = np.array(list(np.ndindex(*shape)), dtype=np.int64)
    chosen = rng.choice(len(cells), size=count, replace=False)
    return SparseTensor(shape, cells[chosen], rng.standard_normal(count))


def _head_loss(params, tensor):
    residuals = params.predict_batch(tensor.indices) - tensor.values
    return float(np.dot(residuals, residuals))


def _numeric_gradient(params, tensor, h=1e-6):
    theta = params.flatten()
    numeric = np.empty_like(theta)
    for k in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        numeric[k] = (_head_loss(params.unflatten(up), tensor)
                      - _head_loss(params.unflatten(down), tensor)) / (2 * h)
    return numeric


def _scalar_head(**overrides):
    """N = 1, F = 1 identity head with zero biases and an even gate."""
    values = dict(embeddings=[np.zeros((2, 1))], mlp_w1=[[0.0]], mlp_b1=[0.0], mlp_w2=[[0.0]], mlp_b2=[0.0],
                  gate_z=[0.5], out_w=[1.0], out_bias=0.0, activation='identity')
    values.update(overrides)
    return NonlinearParams(**values)


def _permute_components(head, perm):
    f = head.rank
    rows = np.concatenate([m * f + np.asarray(perm) for m in range(head.ndim)])
    return NonlinearParams(
        embeddings=[b[:, perm] for b in head.embeddings],
        mlp_w1=head.mlp_w1[rows], mlp_b1=head.mlp_b1,
        mlp_w2=head.mlp_w2[:, perm], mlp_b2=head.mlp_b2[perm],
        gate_z=head.gate_z[perm], out_w=head.out_w[perm], out_bias=head.out_bias,
        activation=head.activation,
    )


class TestInit:
    def test_shapes_and_constants(self):
        head = init_head((4, 5, 6), 3, np.random.default_rng(0))
        assert head.rank == 3
        assert head.shape == (4, 5, 6)
        assert head.mlp_w1.shape == (9, 9)
        assert head.mlp_w2.shape == (9, 3)
        np.testing.assert_array_equal(head.gate_z, [0.5, 0.5, 0.5])
        np.testing.assert_array_equal(head.mlp_b1, np.zeros(9))
        assert head.out_bias == 0.1

    def test_rank_zero_rejected(self):
        with pytest.raises(ConfigError):
            init_head((2, 2), 0, np.random.default_rng(0))

    def test_inconsistent_dimensions(self):
        head = init_head((2, 3), 2, np.random.default_rng(0))
        with pytest.raises(ShapeMismatchError):
            NonlinearParams(head.embeddings, np.zeros((3, 4)), head.mlp_b1, head.mlp_w2,
                            head.mlp_b2, head.gate_z, head.out_w, head.out_bias)

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            init_head((2, 2), 1, np.random.default_rng(0), activation='tanh')


class TestFlows:
    def test_elementwise_relu(self):
        np.testing.assert_array_equal(elementwise_flow([[1.0, 2.0], [3.0, -4.0]]), [3.0, 0.0])

    def test_elementwise_identity(self):
        np.testing.assert_array_equal(elementwise_flow([[1.0, 2.0], [3.0, -4.0]], 'identity'), [3.0, -8.0])

    def test_elementwise_mismatched_rows(self):
        with pytest.raises(ShapeMismatchError):
            elementwise_flow([[1.0, 2.0], [3.0]])

    def test_elementwise_zero_row_annihilates(self):
        rows = [[1.5, -2.0], [0.0, 0.0], [3.0, 4.0]]
        np.testing.assert_array_equal(elementwise_flow(rows, 'identity'), [0.0, 0.0])

    def test_elementwise_ones(self):
        np.testing.assert_array_equal(elementwise_flow([[1.0, 1.0]] * 3), [1.0, 1.0])

    def test_mlp_zero_network(self):
        head = init_head((3, 3, 3), 2, np.random.default_rng(1))
        zeroed = head.unflatten(np.zeros(head.size))
        np.testing.assert_array_equal(mlp_flow([np.array([0.4, -1.0])] * 3, zeroed), [0.0, 0.0])

    def test_mlp_scalar_identity_chain(self):
        head = _scalar_head(mlp_w1=[[1.0]], mlp_w2=[[1.0]])
        np.testing.assert_array_equal(mlp_flow([np.array([2.0])], head), [2.0])

    def test_mlp_matches_straight_line_evaluation(self):
        head = init_head((2, 3, 2), 2, np.random.default_rng(8), std=1.0)
        rows = [np.array([0.3, -0.7]), np.array([1.1, 0.2]), np.array([-0.4, 0.9])]
        x = [0.3, -0.7, 1.1, 0.2, -0.4, 0.9]
        hidden = []
        for k in range(4):
            s = head.mlp_b1[k] + sum(x[i] * head.mlp_w1[i, k] for i in range(6))
            hidden.append(max(s, 0.0))
        expected = []
        for j in range(2):
            s = head.mlp_b2[j] + sum(hidden[k] * head.mlp_w2[k, j] for k in range(4))
            expected.append(max(s, 0.0))
        np.testing.assert_allclose(mlp_flow(rows, head), expected, rtol=1e-12, atol=1e-15)

    def test_mlp_identity_is_affine(self):
        head = init_head((3, 3), 2, np.random.default_rng(1), activation='identity')
        rows = [np.array([0.1, 0.2]), np.array([-0.3, 0.4])]
        x = np.concatenate(rows)
        expected = (x @ head.mlp_w1 + head.mlp_b1) @ head.mlp_w2 + head.mlp_b2
        np.testing.assert_allclose(mlp_flow(rows, head), expected)

    def test_mlp_wrong_row_count(self):
        head = init_head((3, 3), 2, np.random.default_rng(1))
        with pytest.raises(ShapeMismatchError):
            mlp_flow([np.zeros(2)], head)

    def test_gate_mixes_flows(self):
        head = init_head((3, 3, 3), 2, np.random.default_rng(2), activation='identity')
        rows = [b[1] for b in head.embeddings]
        b_tilde = elementwise_flow(rows, 'identity')
        b_breve = mlp_flow(rows, head)
        b = head.gate_z * b_tilde + (1 - head.gate_z) * b_breve
        assert head_predict(head, rows) == pytest.approx(float(b @ head.out_w + head.out_bias))

    def test_single_index_matches_batch(self):
        head = init_head((3, 4, 5), 2, np.random.default_rng(3))
        batch = head.predict_batch(np.array([[2, 3, 4]]))
        assert head_predict_at(head, (2, 3, 4)) == batch[0]
        with pytest.raises(ShapeMismatchError):
            head_predict_at(head, (3, 0, 0))


class TestPredict:
    def test_all_ones_gate_ignores_mlp_flow(self):
        head = init_head((3, 4, 5), 2, np.random.default_rng(9), std=1.0)
        head.gate_z = np.ones(2)
        other = head.copy()
        other.mlp_w1 = other.mlp_w1 + 3.0
        other.mlp_b2 = other.mlp_b2 - 1.0
        indices = np.array(list(np.ndindex(3, 4, 5)))
        np.testing.assert_array_equal(head.predict_batch(indices), other.predict_batch(indices))

    @pytest.mark.parametrize("out_w, expected", [([1.0, 0.0], 5.0), ([0.0, 1.0], 8.0), ([1.0, 1.0], 13.0)])
    def test_gate_selects_per_coordinate(self, out_w, expected):
        # b_tilde = [5, 6] from the rows, b_breve = [7, 8] from the bias alone
        head = NonlinearParams(
            embeddings=[np.array([[5.0, 6.0]]), np.array([[1.0, 1.0]])],
            mlp_w1=np.zeros((4, 4)), mlp_b1=np.zeros(4), mlp_w2=np.zeros((4, 2)), mlp_b2=[7.0, 8.0],
            gate_z=[1.0, 0.0], out_w=out_w, out_bias=0.0, activation='identity',
        )
        assert head_predict_at(head, (0, 0)) == expected

    def test_constant_head(self):
        head = init_head((3, 4), 3, np.random.default_rng(10), std=1.0)
        head.out_w = np.zeros(3)
        head.out_bias = 2.0
        np.testing.assert_array_equal(head.predict_batch(np.array(list(np.ndindex(3, 4)))), np.full(12, 2.0))

    def test_relu_output_nonnegative(self):
        head = init_head((4, 5, 6), 3, np.random.default_rng(11), std=1.5)
        head.out_bias = -0.5
        out = head.predict_batch(np.array(list(np.ndindex(4, 5, 6))))
        assert np.all(out >= 0.0)
        assert np.any(out > 0.0)

    @pytest.mark.parametrize("activation", ['relu', 'identity'])
    def test_component_permutation_invariance(self, activation):
        head = init_head((3, 4, 5), 3, np.random.default_rng(12), activation=activation, std=1.0)
        head.gate_z = np.array([0.2, 0.9, -0.3])
        head.mlp_b2 = np.array([0.1, -0.2, 0.3])
        permuted = _permute_components(head, [2, 0, 1])
        indices = np.array(list(np.ndindex(3, 4, 5)))
        np.testing.assert_allclose(permuted.predict_batch(indices), head.predict_batch(indices),
                                   rtol=1e-12, atol=1e-14)

    def test_flatten_unflatten_identity(self):
        head = init_head((2, 3, 4), 2, np.random.default_rng(13))
        back = head.unflatten(head.flatten())
        for a, b in zip(head.arrays(), back.arrays()):
            np.testing.assert_array_equal(a, b)
        assert back.activation == head.activation
        with pytest.raises(ShapeMismatchError):
            head.unflatten(np.zeros(head.size + 1))


class TestGradient:
    def test_two_mode_scalar_chain_rule(self):
        # a=2, c=3; h1 = 0.5a - c + 0.25 = -1.75; b_breve = 2h1 + 1 = -2.5; b = 0.25*6 + 0.75*(-2.5)
        head = NonlinearParams(
            embeddings=[np.array([[2.0]]), np.array([[3.0]])],
            mlp_w1=[[0.5], [-1.0]], mlp_b1=[0.25], mlp_w2=[[2.0]], mlp_b2=[1.0],
            gate_z=[0.25], out_w=[1.5], out_bias=0.5, activation='identity',
        )
        grad = head_gradient(head, np.array([[0, 0]]), np.array([1.0]))
        assert grad.out_w[0] == pytest.approx(-0.75)
        assert grad.out_bias == pytest.approx(2.0)
        assert grad.gate_z[0] == pytest.approx(25.5)
        assert grad.mlp_b2[0] == pytest.approx(2.25)
        assert grad.mlp_w2[0, 0] == pytest.approx(-3.9375)
        assert grad.mlp_b1[0] == pytest.approx(4.5)
        np.testing.assert_allclose(grad.mlp_w1[:, 0], [9.0, 13.5])
        assert grad.embeddings[0][0, 0] == pytest.approx(4.5)
        assert grad.embeddings[1][0, 0] == pytest.approx(-3.0)

    def test_identity_head_matches_central_differences(self):
        rng = np.random.default_rng(4)
        head = init_head((4, 5, 6), 3, rng, activation='identity', std=0.8)
        tensor = _random_entries(head.shape, 12, rng)
        residuals = head.predict_batch(tensor.indices) - tensor.values
        analytic = head_gradient(head, tensor.indices, residuals).flatten()
        np.testing.assert_allclose(analytic, _numeric_gradient(head, tensor), rtol=1e-5, atol=1e-6)

    def test_relu_joint_gradient_random_trials(self):
        rng = np.random.default_rng(5)
        checked = 0
        for _ in range(100):
            shape = tuple(int(d) for d in rng.integers(2, 7, size=3))
            model = JuliaModel.initialize(shape, 2, 3, seed=int(rng.integers(1 << 30)))
            head = init_head(shape, 3, rng, std=1.0)
            model.head = head
            tensor = _random_entries(shape, min(10, int(np.prod(shape))), rng)

            rows = [b[tensor.indices[:, m]] for m, b in enumerate(head.embeddings)]
            cache = _forward(head, rows)
            pre = np.concatenate([cache[k].ravel() for k in ('prod', 'h1_pre', 'h2_pre', 'out_pre')])
            if np.min(np.abs(pre)) < 1e-4:
                continue

            cp_grad, head_grad, _ = model.gradient(tensor.indices, tensor.values)
            analytic = np.concatenate([cp_grad.flatten(), head_grad.flatten()])
            theta_cp, theta_head = model.cp.flatten(), head.flatten()
            theta = np.concatenate([theta_cp, theta_head])
            split = theta_cp.size

            def total(vector):
                shifted = JuliaModel(shape, model.cp.unflatten(vector[:split]), head.unflatten(vector[split:]))
                return loss(shifted, tensor)

            h = 1e-6
            numeric = np.empty_like(theta)
            for k in range(theta.size):
                up, down = theta.copy(), theta.copy()
                up[k] += h
                down[k] -= h
                numeric[k] = (total(up) - total(down)) / (2 * h)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-6)
            checked += 1
        assert checked >= 50

    def test_empty_batch(self):
        head = init_head((2, 2), 1, np.random.default_rng(0))
        grad = head_gradient(head, np.zeros((0, 2), dtype=np.int64), np.zeros(0))
        assert np.all(grad.flatten() == 0)
