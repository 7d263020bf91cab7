import numpy as np
import pytest

from commnav.maddpg import (
    MaddpgConfig,
    ReplayBuffer,
    TransitionSample,
    act_explore,
    actor_gradient,
    critic_target,
    init_agent_nets,
    load_agents,
    save_agents,
    train_step,
    update_actor,
    update_critic,
    _joint_input,
)
from commnav.neural import MlpParams, forward


CFG = MaddpgConfig(n_agents=4, obs_dim=24, batch_size=32, warmup=32,
                   buffer_capacity=512)


class FixedThreshold:
    """Stands in for a Generator when a test needs a chosen delta'."""

    def __init__(self, value):
        self.value = value

    def random(self):
        return self.value


def fresh_nets(seed=0):
    return init_agent_nets(CFG, np.random.default_rng(seed))


def random_batch(rng, B=32, n=4, obs_dim=24):
    return {
        "obs": rng.normal(size=(B, n, obs_dim)),
        "scores": rng.uniform(0.05, 0.95, size=(B, n, n - 1)),
        "reward": rng.normal(size=B),
        "next_obs": rng.normal(size=(B, n, obs_dim)),
        "cut": np.zeros(B),
    }


class TestActExplore:
    def test_high_scores_low_threshold_requests_everyone(self):
        nets = fresh_nets()
        actor = nets[0].actor
        actor.biases[-1][:] = 10.0  # scores ~ 1
        _, row = act_explore(actor, np.zeros(24), FixedThreshold(0.5))
        assert row.tolist() == [1, 1, 1]

    def test_threshold_near_one_requests_nobody(self):
        nets = fresh_nets()
        _, row = act_explore(nets[0].actor, np.zeros(24),
                             FixedThreshold(1.0 - 1e-12))
        assert row.tolist() == [0, 0, 0]

    def test_request_probability_equals_score(self):
        nets = fresh_nets(1)
        actor = nets[0].actor
        for w in actor.weights:
            w[:] = 0.0
        score = 0.2
        actor.biases[-1][:] = np.log(score / (1 - score))
        rng = np.random.default_rng(2)
        draws = 4000
        hits = sum(act_explore(actor, np.zeros(24), rng)[1][0]
                   for _ in range(draws))
        sigma = np.sqrt(score * (1 - score) / draws)
        assert abs(hits / draws - score) < 3 * sigma


class TestReplayBuffer:
    def sample_of(self, reward=0.0, terminal=False, collision=False):
        rng = np.random.default_rng(3)
        return TransitionSample(
            obs=rng.normal(size=(4, 24)),
            scores=rng.uniform(0.1, 0.9, size=(4, 3)),
            matrix=np.zeros((4, 4), int),
            reward=reward,
            next_obs=rng.normal(size=(4, 24)),
            terminal=terminal,
            collision=collision,
        )

    def test_push_and_sample_shapes(self):
        buf = ReplayBuffer(16, 4, 24)
        for i in range(10):
            buf.push(self.sample_of(reward=float(i)))
        batch = buf.sample(np.random.default_rng(0), 8)
        assert batch["obs"].shape == (8, 4, 24)
        assert batch["scores"].shape == (8, 4, 3)
        assert batch["reward"].shape == (8,)

    def test_ring_wraparound(self):
        buf = ReplayBuffer(4, 4, 24)
        for i in range(7):
            buf.push(self.sample_of(reward=float(i)))
        assert len(buf) == 4
        assert buf.cursor == 3
        assert set(buf.reward.tolist()) == {3.0, 4.0, 5.0, 6.0}

    def test_sample_rejects_invalid_scores(self):
        with pytest.raises(ValueError):
            TransitionSample(
                obs=np.zeros((4, 24)),
                scores=np.zeros((4, 3)),  # 0.0 is outside (0, 1)
                matrix=np.zeros((4, 4), int),
                reward=0.0,
                next_obs=np.zeros((4, 24)),
                terminal=False,
                collision=False,
            )


class TestCriticTarget:
    def test_terminal_sample_is_pure_reward(self):
        nets = fresh_nets(4)
        rng = np.random.default_rng(5)
        batch = random_batch(rng)
        batch["cut"] = np.ones(32)
        y = critic_target(0, batch, nets, gamma=0.98)
        assert np.allclose(y, batch["reward"])

    def test_gamma_zero_is_pure_reward(self):
        nets = fresh_nets(4)
        batch = random_batch(np.random.default_rng(6))
        y = critic_target(0, batch, nets, gamma=0.0)
        assert np.allclose(y, batch["reward"])

    def test_matches_scalar_oracle(self):
        nets = fresh_nets(7)
        batch = random_batch(np.random.default_rng(8), B=5)
        gamma = 0.98
        y = critic_target(1, batch, nets, gamma)
        for s in range(5):
            acts = np.array([
                forward(nets[j].actor_target, batch["next_obs"][s, j])[0]
                for j in range(4)
            ])
            xa = np.concatenate([batch["next_obs"][s].reshape(-1),
                                 acts.reshape(-1)])
            q = forward(nets[1].critic_target, xa)[0][0]
            want = batch["reward"][s] + gamma * (1 - batch["cut"][s]) * q
            assert np.isclose(y[s], want, atol=1e-12)


class TestUpdates:
    def test_perfectly_fit_critic_keeps_still(self):
        nets = fresh_nets(9)
        batch = random_batch(np.random.default_rng(10))
        batch["cut"] = np.ones(32)  # y = reward exactly
        q, _ = forward(nets[0].critic, _joint_input(batch["obs"], batch["scores"]))
        batch["reward"] = q[:, 0].copy()
        before = nets[0].critic.copy()
        loss = update_critic(0, nets, batch, gamma=0.98)
        assert loss < 1e-20
        drift = max(float(np.abs(a - b).max()) for a, b in
                    zip(before.weights, nets[0].critic.weights))
        assert drift < 1e-12

    def test_critic_overfits_fixed_batch(self):
        nets = fresh_nets(11)
        batch = random_batch(np.random.default_rng(12))
        batch["cut"] = np.ones(32)
        first = update_critic(0, nets, batch, gamma=0.98)
        for _ in range(99):
            last = update_critic(0, nets, batch, gamma=0.98)
        assert last < first

    def test_actor_gradient_zero_when_critic_ignores_actions(self):
        nets = fresh_nets(13)
        for w in nets[0].critic.weights:
            w[:] = 0.0
        batch = random_batch(np.random.default_rng(14))
        _, _, grads = actor_gradient(0, nets, batch)
        assert all(float(np.abs(g).max()) == 0.0 for g in grads.d_weights)

    def test_actor_scores_rise_when_critic_rewards_requests(self):
        nets = fresh_nets(15)
        n, obs_dim = 4, 24
        # critic = sum of agent 0's action slot, exactly
        critic = MlpParams(
            weights=[np.zeros((1, CFG.critic_in_dim))],
            biases=[np.zeros(1)],
            output_activation="identity",
        )
        critic.weights[0][0, n * obs_dim:n * obs_dim + (n - 1)] = 1.0
        nets[0].critic = critic
        batch = random_batch(np.random.default_rng(16))
        before, _ = forward(nets[0].actor, batch["obs"][:, 0])
        for _ in range(5):
            update_actor(0, nets, batch)
        after, _ = forward(nets[0].actor, batch["obs"][:, 0])
        assert after.mean() > before.mean()


class TestTrainStep:
    def test_empty_buffer_is_noop(self):
        nets = fresh_nets(17)
        buf = ReplayBuffer(CFG.buffer_capacity, 4, 24)
        diag = train_step(nets, buf, CFG, np.random.default_rng(0))
        assert diag == {"trained": False}

    def test_after_warmup_all_counters_advance(self):
        nets = fresh_nets(18)
        buf = ReplayBuffer(CFG.buffer_capacity, 4, 24)
        rng = np.random.default_rng(19)
        for _ in range(CFG.warmup):
            buf.push(TransitionSample(
                obs=rng.normal(size=(4, 24)),
                scores=rng.uniform(0.1, 0.9, size=(4, 3)),
                matrix=np.zeros((4, 4), int),
                reward=rng.normal(),
                next_obs=rng.normal(size=(4, 24)),
                terminal=False,
                collision=False,
            ))
        diag = train_step(nets, buf, CFG, rng)
        assert diag["trained"]
        assert len(diag["critic_loss"]) == 4
        for agent in nets:
            assert agent.actor_opt.step == 1
            assert agent.critic_opt.step == 1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        nets = fresh_nets(20)
        buf = ReplayBuffer(64, 4, 24)
        path = tmp_path / "agents.npz"
        save_agents(path, nets, extra={"episode": 7}, buffer=buf)
        loaded, meta = load_agents(path)
        assert meta["extra"]["episode"] == 7
        assert meta["buffer"]["capacity"] == 64
        for a, b in zip(nets, loaded):
            for wa, wb in zip(a.actor.weights, b.actor.weights):
                assert np.array_equal(wa, wb)
            assert a.critic_opt.step == b.critic_opt.step
