import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from desknav.comm import CommMode
from desknav.learn import (
    Method, RolloutBuffer, TrainConfig, bc_train, build_batch, compute_gae, ppo_loss, ppo_update,
    sequence_forward, train_run,
)
from desknav.policy import NavPolicy, ParamSet, gradients, squashed_log_prob
from desknav.rollout import run_policy_episodes

from learn_helpers import TINY, synthetic_batch


def gae_by_sums(r, v, d, gamma, lam):
    """Advantage as a discounted sum of TD errors, truncated at the first done."""
    n = len(r)
    delta = [r[t] + gamma * (v[t + 1] if t + 1 < n else 0.0) * (1 - d[t]) - v[t] for t in range(n)]
    adv = []
    for t in range(n):
        total, w = 0.0, 1.0
        for k in range(t, n):
            total += w * delta[k]
            if d[k]:
                break
            w *= gamma * lam
        adv.append(total)
    return np.array(adv)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.booleans()), min_size=1, max_size=30),
       st.floats(0.5, 1.0), st.floats(0.0, 1.0))
def test_gae_matches_discounted_sums(steps, gamma, lam):
    r, v, d = map(list, zip(*steps))
    d[-1] = True
    adv, ret = compute_gae(r, v, d, gamma, lam)
    np.testing.assert_allclose(adv, gae_by_sums(r, v, d, gamma, lam), atol=1e-10)
    np.testing.assert_allclose(ret, adv + np.array(v), atol=1e-12)


def test_gae_hand_example():
    adv, ret = compute_gae([1.0, 0.0, 2.0], [0.5, 0.5, 1.0], [False, False, True], 0.9, 0.5)
    # deltas: 1 + .45 - .5 = .95 ; 0 + .9 - .5 = .4 ; 2 - 1 = 1
    np.testing.assert_allclose(adv, [0.95 + 0.45 * (0.4 + 0.45 * 1.0), 0.4 + 0.45, 1.0])


def test_gae_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        compute_gae([1.0, 2.0], [0.0], [False, True], 0.99, 0.95)


def test_config_validation_and_json():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.gamma, cfg.gae_lambda, cfg.clip_eps) == (1e-5, 0.99, 0.95, 0.2)
    assert (cfg.ppo_epochs, cfg.minibatches, cfg.parallel_envs) == (8, 5, 8)
    assert TrainConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig.from_json({"learning_rate": 1.0})


@pytest.mark.parametrize("mode", list(CommMode))
@pytest.mark.parametrize("n", [2, 3])
def test_replay_reproduces_rollout(tiny_splits, mode, n):
    from desknav.dataset import DatasetSpec, generate_split
    if n == 2:
        split = tiny_splits["train"]
    else:
        split = generate_split(DatasetSpec.uniform("CommonGoal", 3, arenas={"train": 1, "val": 1, "test": 1},
                                                   episodes_per_bin={"train": 1, "val": 1, "test": 1}), "train")
    pol = NavPolicy(seed=2)
    res = run_policy_episodes(pol, split.jobs(range(2)), mode, "sample", np.random.default_rng(1), horizon=25)
    batch = build_batch([q for r in res for q in r.sequences], pol.arch.d_v)
    with torch.no_grad():
        mean, log_std, value, msg = sequence_forward(pol, batch)
        ratio = torch.exp(squashed_log_prob(batch.pre_squash, mean, log_std) - batch.old_log_prob)
    m = batch.mask.bool()
    assert float((ratio - 1)[m].abs().max()) < 1e-9
    assert float((msg - batch.messages)[m].abs().max()) < 1e-12
    assert float((value - batch.old_value)[m].abs().max()) < 1e-12


def central_difference(policy, loss_fn, h=1e-6):
    ps = ParamSet.from_policy(policy)
    base = ps.values.clone()
    out = torch.zeros_like(base)
    for k in range(base.numel()):
        for sign in (1, -1):
            ps.values = base.clone()
            ps.values[k] += sign * h
            ps.load_into(policy)
            with torch.no_grad():
                out[k] += sign * float(loss_fn())
    ps.values = base
    ps.load_into(policy)
    return out / (2 * h)


@pytest.mark.parametrize("mode", [CommMode.VANILLA, CommMode.MEMORY])
def test_ppo_gradient_matches_finite_differences(mode):
    pol = NavPolicy(TINY, seed=1)
    rng = np.random.default_rng(0)
    batch = synthetic_batch(pol, rng, mode=mode, lengths=[6, 4, 5])
    batch.old_log_prob = batch.old_log_prob + torch.as_tensor(rng.normal(scale=0.05, size=batch.old_log_prob.shape))
    cfg = TrainConfig()
    loss_fn = lambda: ppo_loss(pol, batch, cfg)[0]
    g = gradients(pol, loss_fn)
    fd = central_difference(pol, loss_fn)
    assert float((g - fd).norm() / fd.norm()) < 1e-4


def test_clipped_samples_give_no_policy_gradient():
    pol = NavPolicy(TINY, seed=3)
    batch = synthetic_batch(pol, np.random.default_rng(1))
    batch.advantages = torch.ones_like(batch.advantages)
    batch.old_log_prob = batch.old_log_prob - math.log(1.5)  # ratio 1.5 > 1 + eps with positive advantage
    cfg = TrainConfig(value_coef=1e-12, entropy_coef=1e-12)
    g = gradients(pol, lambda: ppo_loss(pol, batch, cfg)[0])
    assert float(g.abs().max()) < 1e-9


def test_sequence_padding_is_ignored():
    pol = NavPolicy(TINY, seed=4)
    batch = synthetic_batch(pol, np.random.default_rng(2), lengths=[3, 6, 6])
    cfg = TrainConfig()
    before = ppo_loss(pol, batch, cfg)[0].item()
    batch.advantages[0, 3:] = 1e6
    batch.returns[0, 3:] = -1e6
    assert ppo_loss(pol, batch, cfg)[0].item() == before


def test_ppo_update_rejects_non_finite(tiny_splits):
    pol = NavPolicy(seed=0)
    res = run_policy_episodes(pol, tiny_splits["train"].jobs([0]), "vanilla", "sample", np.random.default_rng(0), 10)
    buf = RolloutBuffer()
    buf.add(res[0].sequences)
    buf.sequences[0].rewards[0] = float("nan")
    opt = torch.optim.Adam(pol.parameters(), lr=1e-3)
    with pytest.raises(FloatingPointError):
        ppo_update(pol, opt, buf, TrainConfig(), np.random.default_rng(0))


def test_ppo_update_improves_value_fit(tiny_splits):
    pol = NavPolicy(seed=0)
    res = run_policy_episodes(pol, tiny_splits["train"].jobs(range(4)), "memory", "sample",
                              np.random.default_rng(0), 30)
    seqs = [q for r in res for q in r.sequences]
    cfg = TrainConfig(lr=1e-3, ppo_epochs=4)
    first = ppo_update(pol, torch.optim.Adam(pol.parameters(), lr=cfg.lr), RolloutBuffer(list(seqs)), cfg,
                       np.random.default_rng(0))
    assert pol.version == 1
    opt = torch.optim.Adam(pol.parameters(), lr=cfg.lr)
    later = ppo_update(pol, opt, RolloutBuffer(list(seqs)), cfg, np.random.default_rng(1))
    assert later["value_loss"] < first["value_loss"]


def test_incomplete_buffer_rejected():
    with pytest.raises(ValueError):
        ppo_update(NavPolicy(TINY), None, RolloutBuffer(), TrainConfig(), np.random.default_rng(0))


def test_method_names():
    assert Method.parse("ippo") is Method.IPPO_NO_COM
    assert Method.parse("memory_com").comm_mode is CommMode.MEMORY


def test_train_run_writes_curve_and_checkpoint(tmp_path, tiny_splits):
    cfg = TrainConfig(updates=1, parallel_envs=2, ppo_epochs=1, minibatches=2, horizon=15, probe_episodes=2)
    res = train_run("ippo", cfg, tiny_splits["train"], tiny_splits["val"], tmp_path)
    assert res.comm_scalars == 0 and res.checkpoint.exists()
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0].startswith("update,episodes,mean_episode_reward,train_sr,val_sr")
    assert len(lines) == 3


def test_bc_zero_steps_keeps_initialization(tmp_path, tiny_splits):
    from desknav.policy import load_checkpoint
    res = bc_train(TrainConfig(seed=5), tiny_splits["train"], tmp_path, steps=0)
    loaded, _ = load_checkpoint(res.checkpoint)
    assert torch.equal(ParamSet.from_policy(loaded).values, ParamSet.from_policy(NavPolicy(seed=5)).values)


def test_bc_loss_non_increasing(tiny_splits):
    cfg = TrainConfig(minibatches=1, horizon=30)
    res = bc_train(cfg, tiny_splits["train"], steps=10, episodes=4, lr=1e-3)
    losses = [row["policy_loss"] for row in res.curve]
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses
