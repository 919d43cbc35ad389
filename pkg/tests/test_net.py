import numpy as np
import pytest

from raillab.errors import ReplayError, TrainingFault
from raillab.net import (
    LstmState, RMSPropState, SharedModel, Trajectory, a3c_gradients, apply_update, checkpoint_bytes,
    clip_by_global_norm, discounted_returns, forward, init_params, parse_checkpoint, zero_state,
)

from oracles import gradient_check, reference_loss, reference_outputs, reference_returns


def random_traj(rng, input_dim, n_actions, length, use_lstm, masked=False, done=False):
    traj = Trajectory(init_state=LstmState(rng.normal(0, 0.3, 64), rng.normal(0, 0.3, 64)) if use_lstm else None)
    for _ in range(length):
        mask = None
        if masked:
            mask = rng.random(n_actions) < 0.7
            mask[rng.integers(n_actions)] = True
        legal = np.flatnonzero(mask) if masked else np.arange(n_actions)
        traj.append(rng.random(input_dim), rng.choice(legal), mask)
        traj.rewards[-1] = float(rng.normal())
    traj.dones[-1] = done
    traj.bootstrap = float(rng.normal())
    return traj


def test_init_shapes_and_forget_bias():
    p = init_params(112, 5, seed=0)
    assert p.tensors["W1"].shape == (112, 128)
    assert p.tensors["Wl"].shape == (128, 256)
    assert np.all(p.tensors["bl"][64:128] == 1.0)
    assert np.all(p.tensors["bl"][:64] == 0.0)
    assert p.lstm_size == 64
    assert init_params(112, 5, seed=0, use_lstm=False).lstm_size == 0


def test_forward_matches_reference():
    rng = np.random.default_rng(1)
    p = init_params(6, 3, seed=1)
    obs = rng.random((4, 6))
    state = zero_state()
    ref = reference_outputs(p.tensors, True, obs, np.zeros(64), np.zeros(64))
    for x, (rp, rv) in zip(obs, ref):
        probs, value, state = forward(p, x, state)
        assert np.allclose(probs, rp) and value == pytest.approx(rv)
        assert probs.sum() == pytest.approx(1.0)


def test_forward_batch_equals_rows():
    rng = np.random.default_rng(2)
    p = init_params(6, 3, seed=2)
    obs = rng.random((3, 6))
    probs, values, _ = forward(p, obs)
    for k in range(3):
        pk, vk, _ = forward(p, obs[k])
        assert np.allclose(probs[k], pk) and values[k] == pytest.approx(vk)


def test_mask_zeroes_illegal_actions():
    p = init_params(6, 4, seed=0)
    probs, _, _ = forward(p, np.ones(6), mask=np.array([True, False, True, False]))
    assert probs[1] == 0 and probs[3] == 0
    assert probs.sum() == pytest.approx(1.0)


def test_forward_rejects_nan():
    p = init_params(6, 3, seed=0)
    with pytest.raises(TrainingFault):
        forward(p, np.full(6, np.nan))


def test_discounted_returns():
    assert np.allclose(discounted_returns([1, 1, 1], [False, False, False], 2.0, 0.5), [2.0, 2.0, 2.0])
    assert np.allclose(discounted_returns([1, 1, 1], [False, False, False], 0.0, 0.5), [1.75, 1.5, 1.0])
    assert np.allclose(discounted_returns([1, 1], [False, True], 5.0, 0.5), [1.5, 1.0])
    assert np.allclose(
        discounted_returns([0.3, -1, 2], [False, False, False], 0.7, 0.9),
        reference_returns([0.3, -1, 2], False, 0.7, 0.9),
    )


@pytest.mark.parametrize("use_lstm", [True, False])
def test_analytic_loss_equals_reference(use_lstm):
    rng = np.random.default_rng(3)
    p = init_params(6, 3, seed=3, use_lstm=use_lstm)
    traj = random_traj(rng, 6, 3, 5, use_lstm)
    _, diag = a3c_gradients(p, traj, 0.99, 0.5, 0.01)
    h0 = traj.init_state.hidden if use_lstm else None
    c0 = traj.init_state.cell if use_lstm else None
    outs = reference_outputs(p.tensors, use_lstm, traj.obs, h0, c0)
    R = reference_returns(traj.rewards, traj.dones[-1], traj.bootstrap, 0.99)
    adv = [r - v for r, (_, v) in zip(R, outs)]
    expected = reference_loss(p.tensors, use_lstm, traj.obs, traj.actions, R, adv, h0, c0, 0.5, 0.01)
    assert diag["loss"] == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("use_lstm, masked", [(True, False), (False, False), (True, True)])
def test_gradients_match_finite_differences(use_lstm, masked):
    rng = np.random.default_rng(4)
    p = init_params(6, 3, seed=4, use_lstm=use_lstm)
    traj = random_traj(rng, 6, 3, 5, use_lstm, masked=masked)
    grads, _ = a3c_gradients(p, traj, 0.99, 0.5, 0.01)
    errors = gradient_check(p, traj, 0.99, 0.5, 0.01, grads, rng)
    assert set(errors) == set(p.names)
    assert max(errors.values()) < 1e-4


def test_zero_advantage_gives_zero_policy_gradient():
    p = init_params(6, 3, seed=5)
    p.tensors["Wv"][:] = 0.0
    traj = random_traj(np.random.default_rng(5), 6, 3, 4, True)
    traj.rewards = [0.0] * len(traj)
    traj.bootstrap = 0.0
    grads, _ = a3c_gradients(p, traj, 0.99, value_coef=0.0, entropy_coef=0.0)
    assert all(not np.any(g) for g in grads.values())


def test_gradient_argument_checks():
    p = init_params(6, 3, seed=0)
    traj = random_traj(np.random.default_rng(0), 6, 3, 2, True)
    with pytest.raises(ValueError):
        a3c_gradients(p, traj, gamma=0.0)
    with pytest.raises(ValueError):
        a3c_gradients(p, Trajectory(), 0.99)


def test_zero_gradient_leaves_params():
    p = init_params(6, 3, seed=0)
    before = p.copy()
    apply_update(p, p.zeros_like(), RMSPropState.for_params(p), lr=0.1)
    for k in p.names:
        assert np.array_equal(p.tensors[k], before.tensors[k])


def test_clipping():
    grads = {"a": np.full(4, 30.0)}
    clipped, norm = clip_by_global_norm(grads, 40.0)
    assert norm == pytest.approx(60.0)
    assert np.sqrt(np.sum(clipped["a"] ** 2)) == pytest.approx(40.0)
    same, _ = clip_by_global_norm({"a": np.ones(4)}, 40.0)
    assert np.array_equal(same["a"], np.ones(4))


def test_rmsprop_step_value():
    p = init_params(6, 3, seed=0)
    shared = SharedModel(p.copy(), lr=0.01)
    g = p.zeros_like()
    g["bv"][0] = 2.0
    shared.apply(g)
    # first step: sq = 0.01 * 4, update = lr * 2 / sqrt(0.04 + 1e-5)
    expected = p.tensors["bv"][0] - 0.01 * 2.0 / np.sqrt(0.04 + 1e-5)
    assert shared.params.tensors["bv"][0] == pytest.approx(expected)
    assert shared.updates == 1


def test_snapshot_is_a_copy():
    shared = SharedModel(init_params(6, 3, seed=0), lr=0.01)
    snap = shared.snapshot()
    snap.tensors["W1"][:] = 0
    assert np.any(shared.params.tensors["W1"] != 0)


def test_checkpoint_round_trip_is_exact():
    p = init_params(10, 4, seed=9)
    data = checkpoint_bytes(p, {"note": "x"})
    q, hyper = parse_checkpoint(data)
    assert hyper == {"note": "x"}
    assert all(np.array_equal(p.tensors[k], q.tensors[k]) for k in p.names)
    assert checkpoint_bytes(q, hyper) == data


@pytest.mark.parametrize("cut", [0, 3, 10, 40, -5])
def test_corrupt_checkpoint_reports_position(cut):
    data = checkpoint_bytes(init_params(6, 3, seed=0))
    broken = data[:cut] if cut > 0 else (b"XXXXXX" + data[6:] if cut == 0 else data[:cut])
    with pytest.raises(ReplayError) as info:
        parse_checkpoint(broken)
    assert "byte" in str(info.value)


def test_checkpoint_with_nan_rejected():
    p = init_params(6, 3, seed=0)
    p.tensors["b1"][0] = np.nan
    with pytest.raises(TrainingFault):
        parse_checkpoint(checkpoint_bytes(p))


def test_init_gain_widens_non_recurrent_weights():
    base = init_params(16, 3, seed=2)
    wide = init_params(16, 3, seed=2, gain=2.0)
    assert np.allclose(wide.tensors["W1"], 2.0 * base.tensors["W1"])
    assert np.allclose(wide.tensors["Wp"], 2.0 * base.tensors["Wp"])
    assert np.array_equal(wide.tensors["Wl"], base.tensors["Wl"])
    assert np.all(np.abs(base.tensors["W1"]) <= 1 / np.sqrt(16))
    with pytest.raises(ValueError):
        init_params(16, 3, seed=0, gain=0.0)
