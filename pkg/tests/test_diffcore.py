import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import gradient_error, random_graph
from headergan import diffcore as dc
from headergan.errors import ArtifactError, ShapeError


def test_matmul_example():
    out = dc.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_relu_example():
    np.testing.assert_array_equal(dc.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])


def test_mse_self_is_zero_with_zero_grad():
    x = dc.Parameter(np.array([[1.0, -2.0, 0.5]]), "x")
    loss = dc.mse(x, x)
    dc.backward(loss)
    assert float(loss.data) == 0.0
    np.testing.assert_array_equal(x.grad, 0.0)


def test_mean_square_grad():
    x = dc.Parameter(np.array([3.0]), "x")
    dc.backward(dc.mean(dc.mul(x, x)))
    np.testing.assert_allclose(x.grad, [6.0])


def test_gradients_accumulate():
    x = dc.Parameter(np.array([[0.3, -1.2]]), "x")
    dc.backward(dc.mean(dc.tanh(x)))
    once = x.grad.copy()
    dc.backward(dc.mean(dc.tanh(x)))
    np.testing.assert_array_equal(x.grad, 2 * once)


def test_unreachable_grad_untouched():
    x = dc.Parameter(np.ones((1, 2)), "x")
    y = dc.Parameter(np.ones((1, 2)), "y")
    y.grad = np.full((1, 2), 7.0)
    dc.backward(dc.mean(x))
    np.testing.assert_array_equal(y.grad, 7.0)


def test_non_scalar_loss_rejected():
    with pytest.raises(ShapeError, match="scalar"):
        dc.backward(dc.Parameter(np.ones((2, 2)), "x"))


@pytest.mark.parametrize(
    "call",
    [
        lambda: dc.matmul(np.ones((2, 3)), np.ones((2, 3))),
        lambda: dc.add(np.ones((2, 3)), np.ones((2, 2))),
        lambda: dc.mul(np.ones((2, 3)), np.ones((3, 2))),
        lambda: dc.concat_rows([np.ones((2, 3)), np.ones((3, 3))]),
    ],
)
def test_shape_mismatch_reports_shapes(call):
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        call()


def test_mlp_matches_finite_differences(rng):
    mlp = dc.MLP(rng, [5, 7, 3], "m")
    x = rng.standard_normal((4, 5))
    y = rng.standard_normal((4, 3))
    assert gradient_error(mlp.parameters(), lambda: dc.mse(mlp(x), y)) < 1e-3


def test_random_graphs_match_finite_differences():
    rng = np.random.default_rng(2024)
    for _ in range(25):
        params, loss = random_graph(rng)
        assert gradient_error(params, loss) < 1e-3


def test_log_sigmoid_stable():
    y = dc.log_sigmoid(np.array([-1000.0, 0.0, 1000.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [-1000.0, -np.log(2.0), 0.0])


def test_softmax_segments_sum_to_one(rng):
    y = dc.softmax_segments(rng.standard_normal((3, 5)) * 50, [(0, 2), (2, 5)]).data
    np.testing.assert_allclose(y[:, :2].sum(axis=1), 1.0)
    np.testing.assert_allclose(y[:, 2:].sum(axis=1), 1.0)


# -- optimizers ------------------------------------------------------------------


def test_rmsprop_zero_grad_fixed_point():
    p = dc.Parameter(np.array([1.5, -2.0]), "p")
    p.grad = np.zeros(2)
    dc.rmsprop_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    assert p.grad is None


@pytest.mark.parametrize("g", [0.7, -0.3])
def test_rmsprop_moves_against_gradient(g):
    p = dc.Parameter(np.array([0.0]), "p")
    state, trail = {}, [0.0]
    for _ in range(20):
        p.grad = np.array([g])
        dc.rmsprop_step([p], 0.01, state)
        trail.append(float(p.data[0]))
    steps = np.diff(trail)
    assert np.all(np.sign(steps) == -np.sign(g))


def test_rmsprop_quadratic_bowl(rng):
    p = dc.Parameter(rng.standard_normal(4) * 3, "p")
    start = float(np.sum(p.data**2))
    opt = dc.RMSProp([p], lr=0.01)
    for _ in range(200):
        dc.backward(dc.mean(dc.mul(p, p)))
        opt.step()
    assert float(np.sum(p.data**2)) < start


def test_adam_quadratic_bowl(rng):
    p = dc.Parameter(rng.standard_normal(4) * 3, "p")
    start = float(np.sum(p.data**2))
    opt = dc.Adam([p], lr=0.05)
    for _ in range(200):
        dc.backward(dc.mean(dc.mul(p, p)))
        opt.step()
    assert float(np.sum(p.data**2)) < 0.1 * start


def test_clip_examples():
    p = dc.Parameter(np.array([0.5, -0.5, 0.004]), "p")
    dc.clip_weights([p], 0.01)
    np.testing.assert_array_equal(p.data, [0.01, -0.01, 0.004])


def test_clip_requires_positive_c():
    with pytest.raises(ValueError):
        dc.clip_weights([], 0.0)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=12),
    st.floats(1e-4, 5.0),
)
def test_clip_idempotent_and_order_free(values, c):
    a = [dc.Parameter(np.array(values), "a"), dc.Parameter(np.array(values[::-1]), "b")]
    b = [dc.Parameter(np.array(values), "a"), dc.Parameter(np.array(values[::-1]), "b")]
    dc.clip_weights(a, c)
    once = [p.data.copy() for p in a]
    dc.clip_weights(a, c)
    dc.clip_weights(b[::-1], c)
    for x, y, z in zip(once, a, b):
        np.testing.assert_array_equal(x, y.data)
        np.testing.assert_array_equal(x, z.data)
        assert np.all(np.abs(x) <= c)


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    mlp = dc.MLP(rng, [3, 4, 2], "m")
    dc.save_checkpoint(mlp.parameters(), tmp_path / "m.ckpt")
    other = dc.MLP(np.random.default_rng(99), [3, 4, 2], "m")
    dc.load_checkpoint(other.parameters(), tmp_path / "m.ckpt")
    for a, b in zip(mlp.parameters(), other.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_shape_mismatch(tmp_path, rng):
    dc.save_checkpoint(dc.MLP(rng, [3, 4, 2], "m").parameters(), tmp_path / "m.ckpt")
    with pytest.raises(ArtifactError, match="shape"):
        dc.load_checkpoint(dc.MLP(rng, [3, 5, 2], "m").parameters(), tmp_path / "m.ckpt")


def test_checkpoint_truncated(tmp_path, rng):
    path = tmp_path / "m.ckpt"
    dc.save_checkpoint(dc.MLP(rng, [3, 4, 2], "m").parameters(), path)
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ArtifactError):
        dc.read_checkpoint(path)


def test_checkpoint_rejects_duplicate_names(tmp_path):
    with pytest.raises(ValueError):
        dc.save_checkpoint([dc.Parameter(np.ones(1), "a"), dc.Parameter(np.ones(1), "a")], tmp_path / "x")
