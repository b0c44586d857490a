import json
import math

import numpy as np
import pytest

from mindqa import agent, mind, trainer
from mindqa.harness import checkpoint as ckpt
from mindqa.harness.checks import TINY_AGENT, TINY_MIND
from mindqa.harness.config import RunConfig
from mindqa.ndnet import NonFiniteError, Tape, Tensor


def tiny_run_config(**over):
    d = {"seed": 0, "mind": dict(TINY_MIND), "agent": dict(TINY_AGENT),
         "vae": {"epochs": 2, "lr": 1e-3}, "imagery": {"epochs": 2, "lr": 1e-3},
         "qa": {"epochs": 2}, "bc": {"max_epochs": 2, "eval_rollouts": False},
         "rl": {"updates": 2, "episodes_per_update": 2, "spawn_k": 3}}
    d.update(over)
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------- returns

def gae_oracle(r, v, gamma, lam):
    """Direct sum over future TD errors."""
    T = len(r)
    delta = [r[t] + gamma * v[t + 1] - v[t] for t in range(T)]
    return [sum((gamma * lam) ** (l - t) * delta[l] for l in range(t, T)) for t in range(T)]


@pytest.mark.parametrize("gamma,lam", [(0.99, 1.0), (0.9, 0.95), (1.0, 0.0), (0.5, 0.5)])
def test_gae_matches_direct_sum(gamma, lam):
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=7), rng.normal(size=8)
    assert np.allclose(trainer.gae_advantages(r, v, gamma, lam), gae_oracle(r, v, gamma, lam))


def test_gae_lambda_one_is_reward_to_go_minus_value():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=6), np.append(rng.normal(size=6), 0.0)
    adv = trainer.gae_advantages(r, v, 0.99, 1.0)
    assert np.allclose(adv, trainer.discounted_returns(r, 0.99) - v[:-1])


def test_gae_lambda_zero_is_td_error():
    r, v = np.array([1.0, 2.0]), np.array([0.5, 0.25, 0.0])
    assert np.allclose(trainer.gae_advantages(r, v, 0.9, 0.0), [1 + 0.9 * 0.25 - 0.5, 2 - 0.25])


def test_gae_length_check():
    with pytest.raises(ValueError):
        trainer.gae_advantages([1.0, 2.0], [0.0, 0.0], 0.9, 1.0)


def test_discounted_returns_hand_values():
    assert np.allclose(trainer.discounted_returns([1, 1, 1], 0.5), [1.75, 1.5, 1.0])


def test_rl_config_validation():
    with pytest.raises(ValueError):
        trainer.RLConfig(gamma=1.5)
    with pytest.raises(ValueError):
        trainer.RLConfig(sync_mode="hogwild")


# --------------------------------------------------------------------- BC

def test_uniform_policy_bc_loss_is_log4():
    logp = Tensor(np.full((6, 4), -math.log(4)))
    assert trainer.bc_loss(logp, [0, 1, 2, 3, 0, 1]).item() == pytest.approx(math.log(4))
    z = Tensor(np.zeros(3))
    loss = trainer.bc_loss(logp, [0, 1, 2, 3, 0, 1], z, [1, 0, 1])
    assert loss.item() == pytest.approx((6 * math.log(4) + 3 * math.log(2)) / 9)


def test_bc_loss_length_mismatch():
    with pytest.raises(ValueError):
        trainer.bc_loss(Tensor(np.zeros((3, 4))), [0, 1])


def test_curriculum_offsets():
    cfg = trainer.BCConfig(initial_offset=5, backtrack=5)
    assert [trainer.curriculum_spawn(p, cfg=cfg) for p in range(4)] == [5, 10, 15, 20]
    assert trainer.curriculum_spawn(3, demo_length=12, cfg=cfg) == 12
    with pytest.raises(ValueError):
        trainer.curriculum_spawn(-1)


def test_demo_items_truncate_to_offset(tiny):
    t = tiny.trained
    ep = max(tiny.dataset.episodes["train"], key=lambda e: len(e.actions))
    house = tiny.dataset.house(ep)
    full = trainer.demo_items(house, ep, 10_000, t.features, t.mind_model, t.policy.cfg)
    short = trainer.demo_items(house, ep, 2, t.features, t.mind_model, t.policy.cfg)
    assert full.actions[-1] == agent.Action.STOP and short.actions[-1] == agent.Action.STOP
    moves = len(short.actions) - 1 + len(short.ctrl_targets) - short.ctrl_targets.tolist().count(0)
    assert moves == 2
    assert len(full.actions) >= len(short.actions)


def test_bc_reduces_loss(tiny):
    t = trainer.Trained(agent.Policy({k: v.copy() for k, v in tiny.trained.policy.nav.items()},
                                     tiny.trained.policy.qa, tiny.trained.policy.cfg),
                        tiny.trained.mind_model, tiny.trained.features)
    items = [trainer.demo_items(tiny.dataset.house(ep), ep, 10_000, t.features, t.mind_model, t.policy.cfg)
             for ep in tiny.dataset.episodes["train"]]
    before = trainer.bc_loss(*trainer.bc_forward(t.policy.nav, items)[:4]).item()
    cfg = trainer.BCConfig(initial_offset=100, max_epochs=30, lr=1e-2, eval_rollouts=False)
    _, hist = trainer.train_bc(t, tiny.dataset, cfg)
    after = trainer.bc_loss(*trainer.bc_forward(t.policy.nav, items)[:4]).item()
    assert after < 0.85 * before
    assert {"phase", "offset", "success_rate", "accuracy"} <= set(hist[-1])


# ------------------------------------------------------------ actor-critic

def rollout_batch(tiny, seed=0):
    t = tiny.trained
    eps = tiny.dataset.episodes["train"][:2]
    trajs = [agent.run_episode(t.policy, t.mind_model, t.features, tiny.dataset.house(ep), ep, mode="sample",
                               rng=np.random.default_rng([seed, i])) for i, ep in enumerate(eps)]
    return trajs, eps


def ac_grads(tiny, trajs, eps, cfg, mutate=None):
    t = tiny.trained
    with Tape() as tape:
        W = tape.watch(t.policy.nav)
        batch = trainer.prepare_batch(trainer.replay_batch(t, tiny.dataset, trajs, eps, W), cfg)
        if mutate:
            mutate(batch)
        pl, vl, ent = trainer.actor_critic_losses(batch, cfg)
        return tape.backward(trainer.total_loss(pl, vl, ent, cfg)), (pl, vl, ent)


def test_zero_advantage_gives_no_policy_gradient(tiny):
    trajs, eps = rollout_batch(tiny)
    cfg = trainer.RLConfig(value_weight=0.0, entropy_weight=0.0)

    def zero(batch):
        batch.advantages = [np.zeros_like(a) for a in batch.advantages]

    grads, _ = ac_grads(tiny, trajs, eps, cfg, mutate=zero)
    assert all(np.abs(g).max() == 0 for g in grads.values())


def test_positive_advantage_raises_logp(tiny):
    trajs, eps = rollout_batch(tiny)
    cfg = trainer.RLConfig(value_weight=0.0, entropy_weight=0.0)

    def ones(batch):
        batch.advantages = [np.ones_like(a) for a in batch.advantages]

    grads, _ = ac_grads(tiny, trajs, eps, cfg, mutate=ones)
    t = tiny.trained

    def logp_sum(P):
        b = trainer.replay_batch(t, tiny.dataset, trajs, eps, P)
        return sum(float(x.data) for ep in b.logp for x in ep)

    stepped = {k: v - 1e-3 * grads[k] for k, v in t.policy.nav.items()}
    assert logp_sum(stepped) > logp_sum(t.policy.nav)


def test_value_loss_does_not_touch_policy_head(tiny):
    trajs, eps = rollout_batch(tiny)
    cfg = trainer.RLConfig(value_weight=1.0, entropy_weight=0.0)

    def only_value(batch):
        batch.advantages = [np.zeros_like(a) for a in batch.advantages]

    grads, _ = ac_grads(tiny, trajs, eps, cfg, mutate=only_value)
    assert np.abs(grads["plan.pi.w"]).max() == 0 and np.abs(grads["ctrl.fc2.w"]).max() == 0
    assert np.abs(grads["plan.v.w"]).max() > 0


def test_losses_require_prepared_batch(tiny):
    trajs, eps = rollout_batch(tiny)
    t = tiny.trained
    batch = trainer.replay_batch(t, tiny.dataset, trajs, eps, t.policy.nav)
    with pytest.raises(ValueError):
        trainer.actor_critic_losses(batch, trainer.RLConfig())


def test_replay_reproduces_rollout_logp(tiny):
    trajs, eps = rollout_batch(tiny, seed=3)
    t = tiny.trained
    batch = trainer.replay_batch(t, tiny.dataset, trajs, eps, t.policy.nav)
    for tr, lps, r in zip(trajs, batch.logp, batch.rewards):
        assert np.allclose([float(x.data) for x in lps], [s.logp for s in tr.steps if not s.forced], atol=1e-5)
        assert r.sum() == pytest.approx(sum(s.reward for s in tr.steps))


def fresh_trained(tiny):
    t = tiny.trained
    return trainer.Trained(agent.Policy({k: v.copy() for k, v in t.policy.nav.items()}, t.policy.qa, t.policy.cfg),
                           t.mind_model, t.features)


def test_rl_needs_a_worker(tiny):
    with pytest.raises(trainer.TrainingError):
        trainer.train_rl(fresh_trained(tiny), tiny.dataset, trainer.RLConfig(workers=0))


def test_sync_rl_is_deterministic(tiny):
    cfg = trainer.RLConfig(updates=2, episodes_per_update=3, spawn_k=3, lr=1e-3)
    a, ha = trainer.train_rl(fresh_trained(tiny), tiny.dataset, cfg, seed=4)
    b, hb = trainer.train_rl(fresh_trained(tiny), tiny.dataset, cfg, seed=4)
    assert ha == hb and all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["plan.pi.w"], tiny.trained.policy.nav["plan.pi.w"])


@pytest.mark.parametrize("workers,staleness", [(1, 1), (2, 2)])
def test_async_rl_runs(tiny, workers, staleness):
    cfg = trainer.RLConfig(updates=3, episodes_per_update=2, spawn_k=3, sync_mode="asynchronous",
                           workers=workers, staleness=staleness)
    P, hist = trainer.train_rl(fresh_trained(tiny), tiny.dataset, cfg, seed=1)
    assert len(hist) == 3 and all(np.isfinite(r["loss"]) for r in hist)


def test_async_with_parallel_workers_matches_serial_collection(tiny):
    kw = dict(updates=2, episodes_per_update=3, spawn_k=3)
    a, _ = trainer.train_rl(fresh_trained(tiny), tiny.dataset, trainer.RLConfig(workers=1, **kw), seed=2)
    b, _ = trainer.train_rl(fresh_trained(tiny), tiny.dataset, trainer.RLConfig(workers=3, **kw), seed=2)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_planned_reward_switch(tiny):
    t = tiny.trained
    ep = tiny.dataset.episodes["train"][0]
    house = tiny.dataset.house(ep)
    on = agent.run_episode(t.policy, t.mind_model, t.features, house, ep, mode="sample",
                           rng=np.random.default_rng(0))
    off = agent.run_episode(t.policy, t.mind_model, t.features, house, ep, mode="sample",
                            rng=np.random.default_rng(0), planned_reward=False)
    assert any(s.r_m != 0 for s in on.steps if not s.terminal)
    assert all(s.r_m == 0 for s in off.steps)
    assert [s.r_p for s in on.steps] == [s.r_p for s in off.steps]


# ------------------------------------------------------------ VAE/imagery

def test_vae_loss_decreases(tiny):
    frames = trainer.demo_frames(tiny.dataset, size=8)
    cfg = trainer.VAETrainConfig(lr=1e-3, epochs=3, batch=8)
    _, hist = trainer.train_vae(frames, tiny.mcfg, cfg, seed=0)
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_imagery_nll_masks_padding(tiny):
    rng = np.random.default_rng(0)
    D = tiny.mcfg.latent_dim
    long = trainer.TransitionSeq(rng.normal(size=(4, D)), np.array([0, 1, 2, 0]), rng.normal(size=(4, D)))
    short = trainer.TransitionSeq(long.latents[:2], long.actions[:2], long.targets[:2])
    P = tiny.trained.mind_model.imagery
    both = trainer.imagery_nll(P, tiny.mcfg, [long, short]).item()
    a = trainer.imagery_nll(P, tiny.mcfg, [long]).item()
    b = trainer.imagery_nll(P, tiny.mcfg, [short]).item()
    assert both == pytest.approx((4 * a + 2 * b) / 6, rel=1e-5)


def test_imagery_training_reduces_nll(tiny):
    seqs = trainer.macro_transitions(tiny.dataset, tiny.trained.features)
    P0 = mind.init_imagery(tiny.mcfg, 0)
    before = trainer.imagery_nll(P0, tiny.mcfg, seqs).item()
    P, _ = trainer.train_imagery(seqs, tiny.mcfg, trainer.ImageryTrainConfig(lr=1e-2, epochs=20, batch=4))
    assert trainer.imagery_nll(P, tiny.mcfg, seqs).item() < before


# ----------------------------------------------------------- stage driver

def test_stage_gating(tiny, tmp_path):
    cfg = tiny_run_config()
    with pytest.raises(trainer.TrainingError, match="needs a bc checkpoint"):
        trainer.train_stage("rl", tiny.dataset, cfg, tmp_path)
    with pytest.raises(trainer.TrainingError):
        trainer.train_stage("imagery", tiny.dataset, cfg, tmp_path)
    with pytest.raises(trainer.TrainingError):
        trainer.train_stage("dance", tiny.dataset, cfg, tmp_path)


def test_all_stages_write_checkpoints(tiny, tmp_path):
    cfg = tiny_run_config()
    for stage in trainer.STAGES:
        path = trainer.train_stage(stage, tiny.dataset, cfg, tmp_path)
        _, manifest = ckpt.load_checkpoint(path, model=stage)
        assert manifest["meta"]["epoch"] >= 1
    rows = (tmp_path / "metrics.jsonl").read_text().splitlines()
    stages = {json.loads(r)["stage"] for r in rows}
    assert stages == {"vae", "imagery", "bc-qa", "bc", "rl"}
    t, _ = trainer.load_trained(trainer.stage_path(tmp_path, "rl"), cfg, tiny.dataset)
    assert set(t.policy.nav) == set(tiny.trained.policy.nav)


def test_non_finite_loss_aborts_keeping_last_checkpoint(tiny, tmp_path, monkeypatch):
    cfg = tiny_run_config(vae={"epochs": 3, "batch": 1000})
    real = mind.vae_loss
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NonFiniteError("loss went to inf")
        return real(*a, **kw)

    monkeypatch.setattr(mind, "vae_loss", flaky)
    with pytest.raises(trainer.TrainingError, match="non-finite"):
        trainer.train_stage("vae", tiny.dataset, cfg, tmp_path)
    _, manifest = ckpt.load_checkpoint(trainer.stage_path(tmp_path, "vae"))
    assert manifest["meta"]["epoch"] == 0
