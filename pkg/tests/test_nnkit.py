import numpy as np
import pytest

from enap.nnkit import (
    Optimizer,
    RnnBatch,
    ShapeMismatch,
    init_mlp,
    init_rnn,
    load_params,
    max_relative_error,
    mlp_forward,
    mlp_grads,
    optimizer_step,
    rnn_forward,
    rnn_inputs,
    rnn_loss_and_grads,
    save_params,
)


def random_batch(rng, n_sym=3, d_a=2, B=3, T=6):
    seqs = []
    for _ in range(B):
        n = int(rng.integers(2, T + 1))
        # runs of repeated symbols so both contrast branches are exercised
        c = np.repeat(rng.integers(0, n_sym, size=n), 2)[:n]
        seqs.append((rng.standard_normal((n, d_a)), c))
    return RnnBatch.from_sequences(seqs)


def test_zero_rnn_gives_zero_hiddens():
    p = {k: np.zeros_like(v) for k, v in init_rnn(3, 2, hidden=8, embed=4).items()}
    hs, _, _ = rnn_forward(p, np.ones((5, 6)))
    assert np.all(hs == 0)


def test_first_step_ignores_recurrent_weights():
    p = init_rnn(3, 2, hidden=8, embed=4, rng=np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal((1, 6))
    hs, _, _ = rnn_forward(p, x)
    np.testing.assert_allclose(hs[0], np.tanh(x[0] @ p["W_x"] + p["b"]))


def test_rnn_is_deterministic_and_batch_consistent():
    p = init_rnn(3, 2, hidden=8, embed=4, rng=np.random.default_rng(1))
    x = rnn_inputs(p, np.ones((4, 2)), [0, 1, 2, 1])
    a = rnn_forward(p, x)
    b = rnn_forward(p, x)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    batched, _, _ = rnn_forward(p, x[None])
    np.testing.assert_allclose(batched[0], a[0])


def test_rnn_inputs_reject_bad_symbols():
    p = init_rnn(3, 2, hidden=4, embed=2)
    with pytest.raises(ShapeMismatch):
        rnn_inputs(p, np.zeros((1, 2)), [3])


def test_constant_run_has_zero_contrast_and_action_loss():
    # hidden 1 with a saturating bias keeps h_k equal along the run
    p = init_rnn(1, 1, hidden=1, embed=1)
    p = {k: np.zeros_like(v) for k, v in p.items()}
    p["b"] = np.array([3.0])
    batch = RnnBatch.from_sequences([(np.full((4, 1), 0.0), [0, 0, 0, 0])])
    loss, _, parts = rnn_loss_and_grads(p, batch, 0.5, return_parts=True)
    assert parts["act"] == 0.0
    assert parts["contrast"] == pytest.approx(0.0, abs=1e-10)
    assert parts["state"] == pytest.approx(0.0)  # single-symbol softmax


def test_lambda_zero_is_sum_of_two_terms():
    rng = np.random.default_rng(0)
    p = init_rnn(3, 2, hidden=8, embed=4, rng=rng)
    batch = random_batch(rng)
    loss, _, parts = rnn_loss_and_grads(p, batch, 0.0, return_parts=True)
    assert loss == parts["act"] + parts["state"]


@pytest.mark.parametrize("seed", range(20))
def test_rnn_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = init_rnn(3, 2, hidden=int(rng.integers(4, 17)), embed=4, rng=rng)
    batch = random_batch(rng)
    _, g = rnn_loss_and_grads(p, batch, 0.5)
    err = max_relative_error(lambda q: rnn_loss_and_grads(q, batch, 0.5)[0], p, g, step=1e-5)
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_mlp_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = init_mlp([4, 8, 8, 2], rng)
    # nonzero biases keep pre-activations off the ReLU kink
    p = {k: v + 0.1 * rng.standard_normal(v.shape) if k.startswith("b") else v for k, v in p.items()}
    x, y = rng.standard_normal((10, 4)), rng.standard_normal((10, 2))
    _, g = mlp_grads(p, x, y)
    assert max_relative_error(lambda q: mlp_grads(q, x, y)[0], p, g) < 1e-4


def test_zero_mlp_outputs_final_bias():
    p = {k: np.zeros_like(v) for k, v in init_mlp([3, 5, 2], np.random.default_rng(0)).items()}
    p["b1"] = np.array([0.5, -2.0])
    np.testing.assert_array_equal(mlp_forward(p, np.ones((4, 3))), np.tile([0.5, -2.0], (4, 1)))


def test_identity_linear_layer():
    p = {"W0": np.eye(3), "b0": np.zeros(3)}
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(mlp_forward(p, x), x)
    with pytest.raises(ShapeMismatch):
        mlp_forward(p, np.ones((1, 4)))


def test_optimizer_noop_cases():
    p = {"w": np.array([1.0, -2.0])}
    np.testing.assert_array_equal(Optimizer(lr=0.1).step(p, {"w": np.zeros(2)})["w"], p["w"])
    np.testing.assert_array_equal(Optimizer(lr=0.0).step(p, {"w": np.ones(2)})["w"], p["w"])
    with pytest.raises(ShapeMismatch):
        Optimizer().step(p, {"w": np.ones(3)})


def test_gradient_descent_on_quadratic_bowl():
    w = {"w": np.array([0.6, 0.8])}
    opt = Optimizer(lr=0.1, adaptive=False)
    for _ in range(100):
        w = optimizer_step(opt, w, {"w": 2 * w["w"]})
    # each step contracts by exactly 0.8
    assert np.linalg.norm(w["w"]) == pytest.approx(0.8**100, rel=1e-9)
    assert np.linalg.norm(w["w"]) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    p = init_rnn(2, 2, hidden=3, embed=2, rng=np.random.default_rng(5))
    save_params(p, tmp_path / "p.json", {"kind": "test"})
    q, header = load_params(tmp_path / "p.json")
    assert header == {"kind": "test"}
    for k in p:
        np.testing.assert_array_equal(p[k], q[k])
