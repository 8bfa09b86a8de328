import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lanebench import drl, nn, toy
from lanebench.drl import PPOBatch, ReplayBuffer, RolloutBatch, TrainConfig, TransitionBatch

# chi-square critical value, 9 degrees of freedom, upper 0.1% tail
CHI2_9_999 = 27.877


def _dueling_spec(n_in=2, n_actions=2):
    return nn.NetworkSpec((n_in,), (), (("value", (nn.Dense(1),)), ("advantage", (nn.Dense(n_actions),))))


def _dueling_params(v, adv):
    """Linear heads on one-hot states: row ``s`` of each weight is that state's output."""
    v = np.asarray(v, float)
    adv = np.asarray(adv, float)
    return {"value.0.W": v[:, None], "value.0.b": np.zeros(1),
            "advantage.0.W": adv, "advantage.0.b": np.zeros(adv.shape[1])}


def _ac_spec(n_in=1, n_actions=2):
    return nn.NetworkSpec((n_in,), (), (("policy", (nn.Dense(n_actions),)), ("value", (nn.Dense(1),))))


# -- D3QN ---------------------------------------------------------------------------

def _toy_batch(rewards, dones, actions=(0, 1), states=(0, 1), next_states=(1, 0)):
    eye = np.eye(2)
    return TransitionBatch(eye[list(states)], np.array(actions), np.array(rewards, float),
                           eye[list(next_states)], np.array(dones))


def test_terminal_target_is_reward():
    spec = _dueling_spec()
    p = _dueling_params([5.0, 5.0], [[1.0, 0.0], [0.0, 1.0]])
    y = drl.d3qn_target(_toy_batch([-2.0, -2.0], [True, True]), spec, p, p, 0.99)
    np.testing.assert_array_equal(y, [-2.0, -2.0])


def test_myopic_target_is_reward():
    spec = _dueling_spec()
    p = _dueling_params([5.0, 5.0], [[1.0, 0.0], [0.0, 1.0]])
    y = drl.d3qn_target(_toy_batch([0.3, -1.0], [False, False]), spec, p, p, 0.0)
    np.testing.assert_array_equal(y, [0.3, -1.0])


def test_double_dqn_hand_evaluation():
    # online net prefers action 0 in state 1; target net prefers action 1 there
    spec = _dueling_spec()
    online = _dueling_params([0.0, 0.0], [[0.0, 0.0], [1.0, 0.0]])
    target = _dueling_params([0.0, 0.5], [[0.0, 0.0], [0.0, 3.0]])
    # target Q(s1) = 0.5 + ([0, 3] - 1.5) = [-1, 2]; a* = 0 from the online net
    batch = _toy_batch([0.1, 0.0], [False, True], actions=(0, 0), states=(0, 1), next_states=(1, 1))
    y = drl.d3qn_target(batch, spec, online, target, 0.9)
    assert y[0] == pytest.approx(0.1 + 0.9 * -1.0, abs=1e-15)
    assert y[1] == 0.0
    # a plain max over the target net would have bootstrapped from 2
    assert drl.q_values(spec, target, np.eye(2)[[1]])[0].max() == 2.0


def test_target_rejects_empty_batch():
    spec = _dueling_spec()
    p = _dueling_params([0.0, 0.0], [[0.0, 0.0], [0.0, 0.0]])
    empty = TransitionBatch(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0), np.zeros((0, 2)), np.zeros(0, bool))
    with pytest.raises(ValueError):
        drl.d3qn_target(empty, spec, p, p, 0.9)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(-100, 100))
def test_dueling_constant_shift_invariance(adv, c):
    out = {"value": np.array([[0.7]]), "advantage": np.array([adv])}
    shifted = {"value": out["value"], "advantage": out["advantage"] + c}
    np.testing.assert_allclose(drl.dueling_q(shifted), drl.dueling_q(out), rtol=0, atol=1e-12)


def _tiny_q_net(seed=0):
    spec = nn.NetworkSpec((4,), (nn.Dense(6), nn.ReLU()), (("value", (nn.Dense(1),)), ("advantage", (nn.Dense(3),))))
    rng = np.random.default_rng(seed)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in nn.init_params(spec, rng).items()}
    return spec, params, rng


def test_d3qn_loss_zero_at_target():
    spec, params, rng = _tiny_q_net()
    obs = rng.standard_normal((5, 4))
    actions = rng.integers(0, 3, 5)
    q = drl.q_values(spec, params, obs)[np.arange(5), actions]
    batch = TransitionBatch(obs, actions, q, obs, np.ones(5, bool))
    loss, grads, _ = drl.d3qn_loss(batch, spec, params, params, 0.0)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_d3qn_loss_half_squared_error():
    spec, params, rng = _tiny_q_net()
    obs = rng.standard_normal((1, 4))
    q = drl.q_values(spec, params, obs)[0, 1]
    batch = TransitionBatch(obs, np.array([1]), np.array([q + 2.0]), obs, np.array([True]))
    loss, _, _ = drl.d3qn_loss(batch, spec, params, params, 0.99)
    assert loss == pytest.approx(2.0, abs=1e-12)


def _fd_agree(loss_fn, params, grads, tol=1e-5):
    for k in params:
        flat = params[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-6
            up = loss_fn(params)
            flat[i] = orig - 1e-6
            down = loss_fn(params)
            flat[i] = orig
            numeric = (up - down) / 2e-6
            analytic = grads[k].reshape(-1)[i]
            assert abs(numeric - analytic) <= tol * max(1.0, abs(numeric)), (k, i, numeric, analytic)


def test_d3qn_loss_gradient_matches_finite_differences():
    spec, params, rng = _tiny_q_net(1)
    _, target, _ = _tiny_q_net(2)
    batch = TransitionBatch(rng.standard_normal((6, 4)), rng.integers(0, 3, 6), rng.standard_normal(6),
                            rng.standard_normal((6, 4)), rng.random(6) < 0.3)
    y = drl.d3qn_target(batch, spec, params, target, 0.9)
    _, grads, _ = drl.d3qn_loss(batch, spec, params, target, 0.9)

    def frozen_loss(p):
        q = drl.q_values(spec, p, batch.obs)[np.arange(6), batch.actions]
        return float(np.mean(0.5 * (y - q) ** 2))

    _fd_agree(frozen_loss, params, grads)


# -- A2C ------------------------------------------------------------------------------

def _single_rollout(reward, value, done=True, action=0, obs=1.0, boot=0.0):
    return RolloutBatch(np.array([[[obs]]]), np.array([[action]]), np.array([[reward]]),
                        np.array([[value]]), np.array([[math.log(0.5)]]), np.array([[done]]),
                        np.array([boot]))


def _ac_params(v=0.0):
    return {"policy.0.W": np.zeros((1, 2)), "policy.0.b": np.zeros(2),
            "value.0.W": np.zeros((1, 1)), "value.0.b": np.array([v])}


def test_a2c_hand_computed_direction():
    # pi = [0.5, 0.5], action 0, terminal: delta = r - V(s) = 1.5 - 0.25
    spec = _ac_spec()
    params = _ac_params(0.25)
    rule = nn.SGD(0.1)
    batch = _single_rollout(1.5, 0.25)
    new, _, info = drl.a2c_update(batch, spec, params, nn.init_optimizer(rule, params), rule, 0.99,
                                  value_coef=0.0, entropy_coef=0.0)
    delta = 1.25
    grad_logpi = np.array([0.5, -0.5])      # d log pi(a=0) / d logits
    np.testing.assert_allclose(new["policy.0.b"] - params["policy.0.b"], 0.1 * delta * grad_logpi,
                               rtol=1e-14, atol=0)
    np.testing.assert_allclose(new["policy.0.W"][0], 0.1 * delta * grad_logpi * 1.0, rtol=1e-14, atol=0)
    np.testing.assert_array_equal(new["value.0.b"], params["value.0.b"])
    assert info["advantage_mean"] == delta


def test_a2c_zero_advantage_is_neutral():
    spec = _ac_spec(3, 3)
    rng = np.random.default_rng(0)
    params = nn.init_params(spec, rng)
    obs = rng.standard_normal((4, 2, 3))
    # dyadic values and discount keep every delta exactly zero in floating point
    values = rng.integers(-8, 8, (4, 2)) / 4.0
    boot = rng.integers(-8, 8, 2) / 4.0
    dones = np.zeros((4, 2), bool)
    dones[1, 0] = True
    gamma = 0.5
    nxt = np.concatenate([values[1:], boot[None]])
    rewards = values - gamma * np.where(dones, 0.0, nxt)          # makes every delta zero
    batch = RolloutBatch(obs, rng.integers(0, 3, (4, 2)), rewards, values, np.zeros((4, 2)), dones, boot)
    adv, _ = drl.td_advantages(batch, gamma)
    assert not adv.any()
    rule = nn.Adam(1e-2)
    new, _, _ = drl.a2c_update(batch, spec, params, nn.init_optimizer(rule, params), rule, gamma,
                               value_coef=0.5, entropy_coef=0.0)
    for k in ("policy.0.W", "policy.0.b"):
        np.testing.assert_array_equal(new[k], params[k])


def test_a2c_learning_rate_linearity():
    spec = _ac_spec(3, 3)
    rng = np.random.default_rng(1)
    params = nn.init_params(spec, rng)
    batch = RolloutBatch(rng.standard_normal((3, 2, 3)), rng.integers(0, 3, (3, 2)), rng.standard_normal((3, 2)),
                         rng.standard_normal((3, 2)), np.zeros((3, 2)), np.zeros((3, 2), bool), rng.standard_normal(2))
    deltas = []
    for lr in (0.01, 0.02):
        rule = nn.SGD(lr)
        new, _, _ = drl.a2c_update(batch, spec, params, nn.init_optimizer(rule, params), rule, 0.9)
        deltas.append({k: new[k] - params[k] for k in params})
    for k in params:
        np.testing.assert_allclose(deltas[1][k], 2.0 * deltas[0][k], rtol=1e-12, atol=1e-16)


def test_actor_critic_gradient_matches_finite_differences():
    spec = nn.NetworkSpec((3,), (nn.Dense(5), nn.ReLU()), (("policy", (nn.Dense(3),)), ("value", (nn.Dense(1),))))
    rng = np.random.default_rng(2)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in nn.init_params(spec, rng).items()}
    obs = rng.standard_normal((6, 3))
    actions = rng.integers(0, 3, 6)
    weight = rng.standard_normal(6)
    target = rng.standard_normal(6)
    _, grads, _ = drl.actor_critic_grads(spec, params, obs, actions, weight, target, 0.5, 0.01)
    _fd_agree(lambda p: drl.actor_critic_grads(spec, p, obs, actions, weight, target, 0.5, 0.01)[0], params, grads)


# -- advantages ------------------------------------------------------------------------

def _rollout_2x1(rewards, values, dones, boot):
    t = len(rewards)
    return RolloutBatch(np.zeros((t, 1, 1)), np.zeros((t, 1), int), np.array(rewards, float)[:, None],
                        np.array(values, float)[:, None], np.zeros((t, 1)), np.array(dones)[:, None],
                        np.array([boot], float))


def test_td_and_discounted_returns_by_hand():
    b = _rollout_2x1([1.0, 2.0, 3.0], [0.5, 0.25, 1.0], [False, True, False], 4.0)
    adv, target = drl.td_advantages(b, 0.5)
    np.testing.assert_allclose(target[:, 0], [1.0 + 0.5 * 0.25, 2.0, 3.0 + 0.5 * 4.0])
    np.testing.assert_allclose(adv[:, 0], target[:, 0] - [0.5, 0.25, 1.0])
    ret = drl.discounted_returns(b, 0.5)
    np.testing.assert_allclose(ret[:, 0], [1.0 + 0.5 * 2.0, 2.0, 3.0 + 0.5 * 4.0])


def test_gae_limits():
    rng = np.random.default_rng(3)
    b = RolloutBatch(np.zeros((5, 2, 1)), np.zeros((5, 2), int), rng.standard_normal((5, 2)),
                     rng.standard_normal((5, 2)), np.zeros((5, 2)), rng.random((5, 2)) < 0.3, rng.standard_normal(2))
    np.testing.assert_allclose(drl.gae_advantages(b, 0.9, 0.0), drl.td_advantages(b, 0.9)[0], atol=1e-14)
    np.testing.assert_allclose(drl.gae_advantages(b, 0.9, 1.0), drl.discounted_returns(b, 0.9) - b.values,
                               atol=1e-12)


# -- PPO ------------------------------------------------------------------------------------

@pytest.mark.parametrize("ratio,adv,expected", [
    (1.0, 0.7, 0.7), (1.0, -3.0, -3.0), (1.5, 1.0, 1.2), (0.5, -1.0, -0.8),
    (0.5, 1.0, 0.5), (1.5, -1.0, -1.5),
])
def test_clipped_surrogate_cases(ratio, adv, expected):
    assert float(drl.clipped_surrogate(ratio, adv, 0.2)) == pytest.approx(expected, abs=1e-15)


@given(st.floats(0.0, 20.0), st.floats(-10.0, 10.0), st.floats(0.01, 0.9))
def test_clipped_surrogate_bound(ratio, adv, eps):
    s = float(drl.clipped_surrogate(ratio, adv, eps))
    assert s <= max(adv * (1 - eps), adv * (1 + eps)) + 1e-12


def test_ppo_loss_gradient_matches_finite_differences():
    spec = nn.NetworkSpec((3,), (nn.Dense(5), nn.ReLU()), (("policy", (nn.Dense(3),)), ("value", (nn.Dense(1),))))
    rng = np.random.default_rng(4)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in nn.init_params(spec, rng).items()}
    obs = rng.standard_normal((8, 3))
    actions = rng.integers(0, 3, 8)
    logits, _ = drl.policy_values(spec, params, obs)
    logp = nn.log_softmax(logits)[np.arange(8), actions]
    # ratios spread on both sides of the clip range, none on its edges
    old = logp - np.array([0.5, -0.5, 0.05, -0.05, 0.4, -0.4, 0.0, 0.1])
    batch = PPOBatch(obs, actions, old, rng.standard_normal(8), rng.standard_normal(8))
    _, grads, info = drl.ppo_loss(batch, spec, params, 0.2)
    assert 0 < info["clip_fraction"] < 1
    _fd_agree(lambda p: drl.ppo_loss(batch, spec, p, 0.2)[0], params, grads)


def test_ppo_loss_at_ratio_one_equals_mean_advantage():
    spec = _ac_spec(2, 3)
    params = nn.init_params(spec, np.random.default_rng(5))
    obs = np.random.default_rng(6).standard_normal((4, 2))
    actions = np.array([0, 1, 2, 0])
    logits, v = drl.policy_values(spec, params, obs)
    logp = nn.log_softmax(logits)[np.arange(4), actions]
    adv = np.array([1.0, -2.0, 0.5, 0.25])
    _, _, info = drl.ppo_loss(PPOBatch(obs, actions, logp, adv, v), spec, params, 0.2)
    assert info["surrogate"] == pytest.approx(adv.mean(), abs=1e-15)
    assert info["value_loss"] == 0.0


def test_normalize_advantages():
    a = drl.normalize_advantages(np.array([1.0, 2.0, 3.0, 6.0]))
    assert abs(a.mean()) < 1e-12 and a.std() == pytest.approx(1.0, abs=1e-6)


# -- replay -------------------------------------------------------------------------------

def test_replay_fifo_capacity():
    buf = ReplayBuffer(3, (1,), np.float64)
    for i in range(5):
        buf.add([i], i % 3, float(i), [i + 1], False)
        assert len(buf) == min(i + 1, 3)
    assert sorted(buf.rewards) == [2.0, 3.0, 4.0]
    with pytest.raises(ValueError):
        ReplayBuffer(3, (1,)).sample(1, np.random.default_rng(0))


def test_replay_sampling_uniform_chi_square():
    buf = ReplayBuffer(10, (1,), np.float64)
    for i in range(10):
        buf.add([i], 0, 0.0, [i], False)
    idx = buf.sample_indices(20_000, np.random.default_rng(12))
    counts = np.bincount(idx, minlength=10)
    expected = 2000.0
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_9_999


def test_replay_sampling_reproducible():
    buf = ReplayBuffer(50, (2,), np.float64)
    for i in range(50):
        buf.add([i, i], 1, float(i), [i, i], i % 7 == 0)
    a = buf.sample(16, np.random.default_rng(3))
    b = buf.sample(16, np.random.default_rng(3))
    np.testing.assert_array_equal(a.obs, b.obs)
    np.testing.assert_array_equal(a.rewards, b.rewards)


# -- config, curve, training --------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.5)
    with pytest.raises(ValueError):
        TrainConfig(clip=0.0)
    with pytest.raises(ValueError):
        TrainConfig(algo="sarsa")
    with pytest.raises(ValueError):
        TrainConfig(workers=0)
    assert TrainConfig(algo="a2c").learning_rate == 7e-4
    assert TrainConfig(algo="ppo", lr=0.1).learning_rate == 0.1


def test_epsilon_schedule():
    cfg = TrainConfig(algo="d3qn", total_steps=1000)
    assert cfg.epsilon(0) == 1.0
    assert cfg.epsilon(150) == pytest.approx(1.0 - 0.5 * 0.95)
    assert cfg.epsilon(300) == pytest.approx(0.05) and cfg.epsilon(999) == pytest.approx(0.05)


def test_curve_smoothing_and_text_round_trip():
    c = drl.LearningCurve(window=3)
    for i, r in enumerate([1.0, 2.0, 3.0, 10.0]):
        c.add(10 * (i + 1), r)
    assert c.smoothed == [1.0, 1.5, 2.0, 5.0]
    assert c.first_full_window() == 2.0 and c.final() == 5.0
    back = drl.LearningCurve.from_text(c.to_text(), window=3)
    assert (back.steps, back.raw, back.smoothed) == (c.steps, c.raw, c.smoothed)
    assert drl.LearningCurve(window=5).first_full_window() is None


def _toy_cfg(algo, **kw):
    base = {"d3qn": dict(total_steps=4000, learning_starts=200, target_sync=50, train_freq=1,
                         buffer_capacity=2000, lr=5e-3),
            "a2c": dict(total_steps=6000, workers=4, n_steps=5, lr=5e-3),
            "ppo": dict(total_steps=6000, workers=4, ppo_n_steps=32, minibatch_size=32, lr=5e-3)}[algo]
    base.update(kw)
    return TrainConfig(algo=algo, gamma=toy.TOY_GAMMA, hidden=(16,), **base)


@pytest.mark.parametrize("algo", drl.ALGORITHMS)
def test_zero_steps_returns_initialisation(algo):
    cfg = _toy_cfg(algo, total_steps=0, seed=3)
    res = drl.train(algo, lambda i: toy.CorridorEnv(), cfg)
    init = nn.init_params(res.spec, drl.make_rng(3, drl.STREAM_INIT))
    assert nn.checkpoint_bytes(res.spec, res.params) == nn.checkpoint_bytes(res.spec, init)
    assert len(res.curve) == 0 and res.updates == 0


@pytest.mark.parametrize("algo", drl.ALGORITHMS)
def test_training_bit_reproducible(algo):
    runs = []
    for _ in range(2):
        cfg = _toy_cfg(algo, total_steps=600, learning_starts=50, seed=5)
        res = drl.train(algo, lambda i: toy.CorridorEnv(), cfg)
        runs.append((nn.checkpoint_bytes(res.spec, res.params), res.curve.to_text()))
    assert runs[0] == runs[1]
    assert len(runs[0][1].splitlines()) > 1


@pytest.mark.parametrize("algo", drl.ALGORITHMS)
def test_toy_corridor_reaches_optimal_greedy_policy(algo):
    optimum = toy.optimal_policy()
    obs = [toy.CorridorEnv.encode(s) for s in range(toy.N_STATES)]
    for seed in range(2):
        res = drl.train(algo, lambda i: toy.CorridorEnv(), _toy_cfg(algo, seed=seed))
        pol = drl.NetworkPolicy(res.spec, res.params, algo)
        np.testing.assert_array_equal(drl.greedy_table(pol, obs), optimum)


def test_checkpoint_callback_cadence():
    seen = []
    cfg = _toy_cfg("a2c", total_steps=200, workers=2, n_steps=5, checkpoint_every=50)
    drl.train("a2c", lambda i: toy.CorridorEnv(), cfg, on_checkpoint=lambda s, spec, p: seen.append(s))
    assert seen == [50, 100, 150, 200]


class _NanEnv(toy.CorridorEnv):
    def step(self, action):
        out = super().step(action)
        return toy.ToyStep(out.observation, float("nan"), out.done, out.info)


@pytest.mark.parametrize("algo", drl.ALGORITHMS)
def test_non_finite_loss_aborts_with_diagnostic(algo, tmp_path):
    cfg = _toy_cfg(algo, total_steps=400, learning_starts=10)
    with pytest.raises(drl.NumericalError) as err:
        drl.train(algo, lambda i: _NanEnv(), cfg)
    diag = err.value.diagnostic
    assert diag["algo"] == algo and "param_abs_max" in diag
    path = tmp_path / "diag" / "d.json"
    drl.write_diagnostic(str(path), err.value)
    assert path.read_text().startswith("{")


def test_lane_env_training_smoke_deterministic():
    from lanebench.env import LaneChangeEnv
    from lanebench.scenarios import TrainingConfig, gen_training
    scn = TrainingConfig(segment_length=150.0)

    def factory(i):
        return LaneChangeEnv(lambda s: gen_training(s, scn))

    outs = []
    for _ in range(2):
        cfg = TrainConfig(algo="d3qn", total_steps=120, learning_starts=40, batch_size=8, train_freq=8,
                          buffer_capacity=200, seed=1)
        res = drl.train("d3qn", factory, cfg)
        outs.append((nn.checkpoint_bytes(res.spec, res.params), res.curve.to_text()))
    assert outs[0] == outs[1]
    assert res.spec.param_count() == 307_508


def test_network_policy_rejects_bad_params():
    spec = drl.network_for("ppo", (3,), 3, (8,))
    with pytest.raises(ValueError):
        drl.NetworkPolicy(spec, {}, "ppo")
    with pytest.raises(ValueError):
        drl.NetworkPolicy(spec, nn.init_params(spec, np.random.default_rng(0)), "qlearn")


def test_random_policy_return_deterministic():
    a = drl.random_policy_return(lambda i: toy.CorridorEnv(), 50, 7)
    assert a == drl.random_policy_return(lambda i: toy.CorridorEnv(), 50, 7)
    assert 0.0 < a < 1.0
