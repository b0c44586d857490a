"""Finite-difference checks of every training loss on deliberately tiny models."""

from dataclasses import dataclass

import numpy as np

from .. import agent, eqagen, mind, trainer
from .. import gridhouse as gh
from ..ndnet import grad_check

TINY_MIND = dict(frame_size=8, latent_dim=4, imagery_hidden=6, n_mix=2,
                 enc_channels=(3, 4, 4, 5), dec_channels=(4, 3, 3))
TINY_AGENT = dict(q_embed=4, q_dim=5, planner_hidden=6, ctrl_hidden=4, max_actions=20)


@dataclass
class Fixture:
    mcfg: mind.MindConfig
    dataset: eqagen.Dataset
    trained: trainer.Trained


def tiny_fixture(seed=0):
    mcfg = mind.MindConfig(**TINY_MIND)
    acfg = agent.AgentConfig(**TINY_AGENT)
    ds = eqagen.world_dataset(seed=seed, size=7, n_rooms=2, n_episodes=4, spawn_ks=(4, 6))
    vae = mind.init_vae(mcfg, seed)
    img = mind.init_imagery(mcfg, seed + 1)
    nw, na = len(ds.vocab.words), len(ds.vocab.answers)
    pol = agent.Policy(agent.init_navigator(acfg, nw, mcfg.latent_dim, mcfg.imagery_hidden, seed + 2),
                       agent.init_qa(acfg, nw, na, mcfg.latent_dim, seed + 3), acfg)
    tr = trainer.Trained(pol, agent.MindModel(vae, img, mcfg), agent.FeatureCache(vae, mcfg))
    return Fixture(mcfg, ds, tr)


def check_vae(fx, max_coords=8, seed=0):
    rng = np.random.default_rng(seed)
    house = next(iter(fx.dataset.houses.values()))
    poses = house.walkable_poses()[:3]
    frames = np.stack([gh.render(house, p, size=fx.mcfg.frame_size) for p in poses])
    eps = rng.standard_normal((len(frames), fx.mcfg.latent_dim))
    return grad_check(lambda P: mind.vae_loss(P, fx.mcfg, frames, 4.0, eps=eps), fx.trained.mind_model.vae,
                      max_coords=max_coords, rng=rng)


def check_mdn(fx, max_coords=8, seed=0):
    rng = np.random.default_rng(seed)
    seqs = [trainer.TransitionSeq(rng.standard_normal((3, fx.mcfg.latent_dim)), rng.integers(0, 3, 3),
                                  rng.standard_normal((3, fx.mcfg.latent_dim))) for _ in range(2)]
    seqs[1] = trainer.TransitionSeq(seqs[1].latents[:2], seqs[1].actions[:2], seqs[1].targets[:2])
    return grad_check(lambda P: trainer.imagery_nll(P, fx.mcfg, seqs), fx.trained.mind_model.imagery,
                      max_coords=max_coords, rng=rng)


def check_bc(fx, max_coords=8, seed=0):
    rng = np.random.default_rng(seed)
    t = fx.trained
    items = [trainer.demo_items(fx.dataset.house(ep), ep, 100, t.features, t.mind_model, t.policy.cfg)
             for ep in fx.dataset.episodes["train"][:3]]
    return grad_check(lambda P: trainer.bc_loss(*trainer.bc_forward(P, items)[:4]), t.policy.nav,
                      max_coords=max_coords, rng=rng)


def check_actor_critic(fx, max_coords=8, seed=0):
    rng = np.random.default_rng(seed)
    t = fx.trained
    cfg = trainer.RLConfig()
    eps = fx.dataset.episodes["train"][:2]
    trajs = [agent.run_episode(t.policy, t.mind_model, t.features, fx.dataset.house(ep), ep, mode="sample",
                               rng=np.random.default_rng([seed, i])) for i, ep in enumerate(eps)]
    base = trainer.prepare_batch(trainer.replay_batch(t, fx.dataset, trajs, eps, t.policy.nav), cfg)

    def fn(P):
        b = trainer.replay_batch(t, fx.dataset, trajs, eps, P)
        b.advantages, b.targets = base.advantages, base.targets
        return trainer.total_loss(*trainer.actor_critic_losses(b, cfg), cfg)

    return grad_check(fn, t.policy.nav, max_coords=max_coords, rng=rng)


CHECKS = {
    "vae_loss": check_vae,
    "mdn_nll": check_mdn,
    "bc_loss": check_bc,
    "actor_critic": check_actor_critic,
}


def run_all(seed=0, max_coords=8):
    fx = tiny_fixture(seed)
    return {name: float(fn(fx, max_coords=max_coords, seed=seed)) for name, fn in CHECKS.items()}
