import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safeplatoon.nn_policy import (
    LOG_STD_MAX, LOG_STD_MIN, Adam, Mlp, PolicyBundle, PpoHyper, RolloutBuffer, actor_objective,
    clipped_surrogate, critic_loss, gae_and_returns, gaussian_log_prob, policy_forward, ppo_update,
    sample_action,
)
from safeplatoon.safety_layer import SafetyParams
from safeplatoon.vehicle_dynamics import PlatoonConfig

from oracles import central_difference


def tiny_bundle(seed=0, safety=None):
    b = PolicyBundle.create(4, hidden=(8,), log_std=-0.3, safety=safety, seed=seed)
    # larger output weights so every gradient is well above round-off
    b.actor.W[-1] *= 50.0
    return b


def fixed_batch(bundle, rng, n=16):
    obs = rng.normal(size=(n, 4))
    mean, log_std = policy_forward(bundle, obs)
    u = mean + math.exp(log_std) * rng.normal(size=n)
    return {
        "obs": obs,
        "u_rl": u,
        "mean": mean.copy(),
        "log_prob": gaussian_log_prob(u, mean, log_std) + rng.normal(0, 0.05, n),
        "adv": rng.normal(size=n),
        "du_final_du_rl": rng.uniform(0.2, 1.0, n),
        "du_final_dk": np.zeros((n, 0)),
    }


# gradients ------------------------------------------------------------------------

def _check(analytic, numeric):
    assert np.asarray(analytic).ravel() == pytest.approx(np.asarray(numeric).ravel(), rel=1e-4, abs=1e-9)


def test_actor_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    b = tiny_bundle()
    batch = fixed_batch(b, rng)
    _, grads, g_log_std, _ = actor_objective(b, batch, clip=np.inf)
    for p, g in zip(b.actor.params, grads):
        base = p.copy()

        def f(flat, p=p, base=base):
            p[...] = flat.reshape(base.shape)
            val = actor_objective(b, batch, clip=np.inf)[0]
            p[...] = base
            return val

        _check(g, central_difference(f, base.ravel(), 1e-5))

    def f_std(x):
        b.log_std[0] = x[0]
        return actor_objective(b, batch, clip=np.inf)[0]

    ls = b.log_std[0]
    fd = central_difference(f_std, [ls], 1e-5)
    b.log_std[0] = ls
    _check(g_log_std, fd[0])


def test_actor_gradients_with_clipping_away_from_kinks():
    rng = np.random.default_rng(1)
    b = tiny_bundle(1)
    batch = fixed_batch(b, rng)
    batch["log_prob"] += rng.choice([-0.6, 0.0, 0.6], size=len(batch["u_rl"]))
    _, grads, _, _ = actor_objective(b, batch, clip=0.2)
    p = b.actor.W[0]
    base = p.copy()

    def f(flat):
        p[...] = flat.reshape(base.shape)
        val = actor_objective(b, batch, clip=0.2)[0]
        p[...] = base
        return val

    _check(grads[0], central_difference(f, base.ravel(), 1e-5))


def test_critic_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    b = tiny_bundle(2)
    obs, ret = rng.normal(size=(12, 4)), rng.normal(size=12)
    _, grads = critic_loss(b, obs, ret)
    for p, g in zip(b.critic.params, grads):
        base = p.copy()

        def f(flat, p=p, base=base):
            p[...] = flat.reshape(base.shape)
            val = critic_loss(b, obs, ret)[0]
            p[...] = base
            return val

        _check(g, central_difference(f, base.ravel(), 1e-5))


def test_mlp_flat_roundtrip_and_errors():
    m = Mlp((3, 5, 1), 0)
    flat = m.get_flat()
    m2 = m.copy()
    m2.set_flat(flat * 2)
    assert np.allclose(m2.get_flat(), 2 * flat) and np.allclose(m.get_flat(), flat)
    with pytest.raises(ValueError):
        m.set_flat(flat[:-1])
    m.W[-1][...] = np.nan
    with pytest.raises(FloatingPointError):
        m(np.ones((1, 3)))


# GAE ---------------------------------------------------------------------------------

def test_gae_two_step_hand_case():
    buf = RolloutBuffer()
    for _ in range(2):
        buf.add(np.zeros(2), 0, 0, 0, 0, reward=1.0, value=0.5)
    buf.end_episode()
    gae_and_returns(buf, 0.99, 0.95)
    d1 = 1.0 - 0.5
    d0 = 1.0 + 0.99 * 0.5 - 0.5
    assert buf.advantages == pytest.approx([d0 + 0.99 * 0.95 * d1, d1])
    assert buf.returns == pytest.approx(buf.advantages + 0.5)


def test_gae_bootstrap_and_episode_boundaries():
    buf = RolloutBuffer()
    buf.add(np.zeros(2), 0, 0, 0, 0, 1.0, 0.0)
    buf.end_episode(last_value=10.0, terminal=False)
    buf.add(np.zeros(2), 0, 0, 0, 0, 1.0, 0.0)
    buf.end_episode()
    gae_and_returns(buf, 0.9, 1.0)
    assert buf.advantages == pytest.approx([1.0 + 9.0, 1.0])


def test_gae_errors():
    with pytest.raises(ValueError):
        gae_and_returns(RolloutBuffer())
    buf = RolloutBuffer()
    buf.add(np.zeros(2), 0, 0, 0, 0, 1.0, 0.0)
    with pytest.raises(ValueError):
        gae_and_returns(buf)
    with pytest.raises(ValueError):
        RolloutBuffer().end_episode()


# PPO objective ---------------------------------------------------------------------------

def test_clip_arithmetic():
    assert clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert clipped_surrogate(1.1, 1.0, 0.2) == pytest.approx(1.1)


def test_zero_advantage_gives_zero_actor_gradient():
    rng = np.random.default_rng(3)
    b = tiny_bundle(3)
    batch = fixed_batch(b, rng)
    batch["adv"][:] = 0.0
    _, grads, g_log_std, _ = actor_objective(b, batch, 0.2)
    assert all(np.all(g == 0.0) for g in grads) and g_log_std == 0.0


def _one_minibatch_buffer(b, rng, n=32):
    buf = RolloutBuffer()
    for t in range(n):
        obs = rng.normal(size=4)
        u, mean, lp = sample_action(b, obs[None], rng)
        buf.add(obs, u, u, mean, lp, rng.normal(), 0.0)
    buf.end_episode()
    return gae_and_returns(buf)


def test_clip_inertness_with_infinite_epsilon():
    rng = np.random.default_rng(4)
    b = tiny_bundle(4)
    buf = _one_minibatch_buffer(b, rng)
    hyper = PpoHyper(clip=np.inf, epochs=1, minibatch_size=32, max_grad_norm=np.inf)
    clipped = PolicyBundle(b.actor.copy(), b.critic.copy(), b.log_std.copy())
    ppo_update(clipped, buf, hyper, rng=0)

    # plain policy gradient step on the same normalised batch
    plain = PolicyBundle(b.actor.copy(), b.critic.copy(), b.log_std.copy())
    data = buf.arrays()
    adv = (buf.advantages - buf.advantages.mean()) / (buf.advantages.std() + 1e-8)
    order = np.random.default_rng(0).permutation(32)
    batch = {k: data[k][order] for k in ("obs", "u_rl", "mean", "log_prob", "du_final_du_rl", "du_final_dk")}
    batch["adv"] = adv[order]
    mean, log_std = policy_forward(plain, batch["obs"])
    std2 = math.exp(2 * log_std)
    d_mean = batch["adv"] * (batch["u_rl"] - mean) / std2 / 32
    grads = plain.actor.backward(plain.actor.forward(batch["obs"])[1], d_mean[:, None])
    d_ls = float(np.sum(batch["adv"] * ((batch["u_rl"] - mean) ** 2 / std2 - 1.0)) / 32)
    Adam(plain.actor.params + [plain.log_std], 3e-4).step([-g for g in grads] + [np.array([-d_ls])])
    diff = np.concatenate([clipped.actor.get_flat() - plain.actor.get_flat(), clipped.log_std - plain.log_std])
    assert np.linalg.norm(diff) <= 1e-8


def test_critic_fits_synthetic_value_function():
    rng = np.random.default_rng(5)
    b = PolicyBundle.create(4, hidden=(16, 16), seed=5)
    obs = rng.uniform(-1, 1, size=(256, 4))
    target = 0.5 * np.sin(obs[:, 0]) + 0.3 * obs[:, 1] * obs[:, 2]
    opt = Adam(b.critic.params, 1e-2)
    for _ in range(2000):
        loss, grads = critic_loss(b, obs, target)
        opt.step(grads)
    assert critic_loss(b, obs, target)[0] < 1e-3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_safety_trainables_stay_positive(seed):
    rng = np.random.default_rng(seed)
    safety = SafetyParams.for_config(PlatoonConfig())
    b = PolicyBundle.create(4, hidden=(8,), safety=safety, seed=seed)
    buf = RolloutBuffer()
    for _ in range(64):
        obs = rng.normal(size=4)
        u, mean, lp = sample_action(b, obs[None], rng)
        # adversarial sensitivities push every coefficient down hard
        buf.add(obs, u, u, mean, lp, rng.normal(), 0.0, 1.0, -1e4 * np.sign(u - mean) * np.ones(4))
    buf.end_episode()
    for _ in range(3):
        buf.advantages = None
        ppo_update(b, buf, PpoHyper(lr=1.0, epochs=2, minibatch_size=16), rng=seed)
    assert b.safety.k.min() > 0 and b.safety.k_f > 0
    assert LOG_STD_MIN <= b.log_std[0] <= LOG_STD_MAX


def test_filtered_samples_do_not_move_the_policy():
    rng = np.random.default_rng(6)
    b = tiny_bundle(6)
    batch = fixed_batch(b, rng)
    batch["du_final_du_rl"][:] = 0.0
    _, grads, g_log_std, _ = actor_objective(b, batch, 0.2)
    assert all(np.all(g == 0.0) for g in grads) and g_log_std == 0.0


def test_sample_action_is_reproducible():
    b = tiny_bundle(7)
    obs = np.ones((1, 4))
    a = sample_action(b, obs, np.random.default_rng(1))
    c = sample_action(b, obs, np.random.default_rng(1))
    assert a == c
    assert a[2] == pytest.approx(float(gaussian_log_prob(a[0], a[1], b.log_std[0])))
