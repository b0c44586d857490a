"""Staged training: MIND pretraining (VAE, imagery), QA head, behavior cloning
with a distance curriculum, then actor-critic fine-tuning with GAE."""

import json
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agent, mind, rewards
from . import gridhouse as gh
from .agent import Action, N_ACTIONS
from .harness import checkpoint as ckpt
from .ndnet import NonFiniteError, Tape, Tensor, nn, ops
from .ndnet.optim import AdamState, adam_step, clip_global_norm


class TrainingError(RuntimeError):
    pass


@dataclass
class VAETrainConfig:
    lr: float = 1e-4
    beta: float = 4.0
    batch: int = 32
    epochs: int = 10
    max_frames: int = 2000
    clip: float = 5.0


@dataclass
class ImageryTrainConfig:
    lr: float = 1e-5
    batch: int = 16
    epochs: int = 10
    clip: float = 5.0


@dataclass
class QATrainConfig:
    lr: float = 1e-3
    batch: int = 20
    epochs: int = 20
    clip: float = 5.0


@dataclass
class BCConfig:
    batch: int = 20
    backtrack: int = 5
    initial_offset: int = 5
    advance_threshold: float = 0.8
    max_epochs: int = 50
    lr: float = 1e-3
    clip: float = 5.0
    stop_accuracy: float = 0.0  # > 0: stop once the final phase reaches this accuracy
    eval_rollouts: bool = True

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.backtrack < 1 or self.initial_offset < 1:
            raise ValueError("curriculum offsets must be positive")


@dataclass
class RLConfig:
    gamma: float = 0.99
    lam: float = 1.0
    lr: float = 1e-4
    workers: int = 1
    sync_mode: str = "synchronous"
    staleness: int = 1
    value_weight: float = 0.5
    entropy_weight: float = 0.01
    value_target: str = "return"  # or "one-step"
    episodes_per_update: int = 20
    updates: int = 20
    spawn_k: int = 10
    planned_reward: bool = True
    clip: float = 5.0

    def __post_init__(self):
        for name in ("gamma", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.sync_mode not in ("synchronous", "asynchronous"):
            raise ValueError(f"unknown sync_mode {self.sync_mode!r}")
        if self.value_target not in ("return", "one-step"):
            raise ValueError(f"unknown value_target {self.value_target!r}")


def _fit(params, grads, state, clip):
    grads = clip_global_norm(grads, clip)
    adam_step(params, grads, state)


def _stable_seed(*parts):
    return zlib.crc32("|".join(str(p) for p in parts).encode())


# ---------------------------------------------------------------------- VAE

def demo_poses(house, episode):
    return gh.replay(house, episode.spawn, episode.actions)


def demo_frames(dataset, split="train", size=gh.FRAME_SIZE, limit=None, seed=0):
    """Distinct frames observed along the expert demonstrations."""
    seen, frames = set(), []
    for ep in dataset.episodes[split]:
        house = dataset.house(ep)
        for p in demo_poses(house, ep):
            key = (house.house_id, p)
            if key not in seen:
                seen.add(key)
                frames.append(gh.render(house, p, size=size))
    frames = np.stack(frames)
    if limit is not None and len(frames) > limit:
        idx = np.sort(np.random.default_rng(seed).choice(len(frames), limit, replace=False))
        frames = frames[idx]
    return frames


def vae_eval(params, mcfg, frames, seed=0, batch=64):
    """Mean per-frame (reconstruction, KL) with a fixed noise draw."""
    eps = np.random.default_rng(seed).standard_normal((len(frames), mcfg.latent_dim))
    rec = kl = 0.0
    for i in range(0, len(frames), batch):
        r, k = mind.vae_terms(params, mcfg, frames[i:i + batch], eps[i:i + batch])
        rec += float(r.data.sum())
        kl += float(k.data.sum())
    return rec / len(frames), kl / len(frames)


def train_vae(frames, mcfg, cfg, seed=0, params=None, on_epoch=None):
    params = params if params is not None else mind.init_vae(mcfg, seed)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(frames))
        losses = []
        for i in range(0, len(frames), cfg.batch):
            batch = frames[perm[i:i + cfg.batch]]
            with Tape() as tape:
                W = tape.watch(params)
                loss = mind.vae_loss(W, mcfg, batch, cfg.beta, rng=rng)
                grads = tape.backward(loss)
            _fit(params, grads, state, cfg.clip)
            losses.append(float(loss.data))
        rec, kl = vae_eval(params, mcfg, frames, seed=seed + 1)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "recon": rec, "kl": kl}
        history.append(row)
        if on_epoch:
            on_epoch(row, params)
    return params, history


# ------------------------------------------------------------------ imagery

@dataclass
class TransitionSeq:
    latents: np.ndarray  # (T, D) latent at the start of each macro step
    actions: np.ndarray  # (T,)
    targets: np.ndarray  # (T, D) latent after the macro step


def macro_transitions(dataset, features, split="train"):
    """Per-episode macro-step transition sequences from the expert demos."""
    seqs = []
    for ep in dataset.episodes[split]:
        house = dataset.house(ep)
        pose = ep.spawn
        lat, act, tgt = [], [], []
        for a, run in agent.macro_steps(ep.actions):
            if a == Action.STOP:
                break
            start = pose
            for _ in range(run):
                pose = gh.step(house, pose, a)
            lat.append(features.feature(house, start))
            act.append(int(a))
            tgt.append(features.feature(house, pose))
        if lat:
            seqs.append(TransitionSeq(np.stack(lat), np.array(act), np.stack(tgt)))
    return seqs


def imagery_nll(P, mcfg, seqs):
    """Mean NLL over every macro step of a batch of sequences (teacher forced)."""
    B = len(seqs)
    T = max(len(s.actions) for s in seqs)
    D = mcfg.latent_dim
    lengths = np.array([len(s.actions) for s in seqs])
    state = mind.ImageryState.zeros(mcfg, B)
    total = None
    for t in range(T):
        live = lengths > t
        m = np.zeros((B, D), dtype=np.float32)
        y = np.zeros((B, D), dtype=np.float32)
        a = np.zeros(B, dtype=np.int64)
        for b, s in enumerate(seqs):
            if live[b]:
                m[b], y[b], a[b] = s.latents[t], s.targets[t], s.actions[t]
        mix, state = mind.imagery_step(P, mcfg, m, state, a)
        ll = ops.sum(ops.mul(mind.mdn_log_density(mix, y), live.astype(np.float32)))
        total = ll if total is None else ops.add(total, ll)
    return ops.scale(total, -1.0 / lengths.sum())


def train_imagery(seqs, mcfg, cfg, seed=0, params=None, on_epoch=None, held_out=None):
    params = params if params is not None else mind.init_imagery(mcfg, seed)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(seqs))
        losses = []
        for i in range(0, len(seqs), cfg.batch):
            batch = [seqs[j] for j in perm[i:i + cfg.batch]]
            with Tape() as tape:
                W = tape.watch(params)
                loss = imagery_nll(W, mcfg, batch)
                grads = tape.backward(loss)
            _fit(params, grads, state, cfg.clip)
            losses.append(float(loss.data))
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if held_out:
            row["held_out_nll"] = float(imagery_nll(params, mcfg, held_out).data)
        history.append(row)
        if on_epoch:
            on_epoch(row, params)
    return params, history


# ----------------------------------------------------------------------- QA

def qa_examples(dataset, features, split="train"):
    """(question, five newest demo frames, answer) triples."""
    out = []
    for ep in dataset.episodes[split]:
        house = dataset.house(ep)
        buf = agent.FrameBuffer()
        for p in demo_poses(house, ep):
            buf.push(features.feature(house, p))
        out.append((ep.question, buf.slots(), ep.answer))
    return out


def qa_loss(P, examples):
    Q = agent.encode_question(P, "qa", [e[0] for e in examples])
    logp, _ = agent.qa_log_probs(P, Q, np.stack([e[1] for e in examples]))
    ans = np.array([e[2] for e in examples])
    picked = logp[np.arange(len(examples)), ans]
    acc = float((np.argmax(logp.data, axis=1) == ans).mean())
    return ops.neg(ops.mean(picked)), acc


def train_qa(examples, acfg, n_words, n_answers, feat_dim, cfg, seed=0, on_epoch=None):
    params = agent.init_qa(acfg, n_words, n_answers, feat_dim, seed)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(examples))
        losses = []
        for i in range(0, len(examples), cfg.batch):
            batch = [examples[j] for j in perm[i:i + cfg.batch]]
            with Tape() as tape:
                W = tape.watch(params)
                loss, _ = qa_loss(W, batch)
                grads = tape.backward(loss)
            _fit(params, grads, state, cfg.clip)
            losses.append(float(loss.data))
        _, acc = qa_loss(params, examples)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "qa_accuracy": acc}
        history.append(row)
        if on_epoch:
            on_epoch(row, params)
    return params, history


# ----------------------------------------------------------------------- BC

def curriculum_spawn(phase, demo_length=None, cfg=None):
    """Spawn offset (primitive actions before the target) for a curriculum phase."""
    cfg = cfg or BCConfig()
    if phase < 0:
        raise ValueError("phase must be >= 0")
    offset = cfg.initial_offset + cfg.backtrack * phase
    return offset if demo_length is None else min(offset, demo_length)


@dataclass
class DemoItems:
    """Teacher-forcing inputs for one (possibly truncated) demonstration."""
    question: list
    feats: np.ndarray  # (T, F) frame at each planner step
    prev: np.ndarray  # (T,) previous action
    img_h: np.ndarray  # (T, H) imagery hidden state fed to the planner
    actions: np.ndarray  # (T,) planner targets
    ctrl_step: np.ndarray  # (Nc,) planner step owning each controller decision
    ctrl_feats: np.ndarray  # (Nc, F)
    ctrl_targets: np.ndarray  # (Nc,)


def demo_items(house, episode, offset, features, mind_model, acfg):
    """Macro-step targets for the last ``offset`` movement actions of the expert demo."""
    poses = demo_poses(house, episode)
    L = len(poses) - 1
    start = L - min(offset, L)
    pose = poses[start]
    steps = agent.demo_plan(episode.actions[start:], acfg.max_repeat)
    mcfg = mind_model.cfg
    img = mind.ImageryState.zeros(mcfg)
    feats, prev, hs, acts = [], [], [], []
    c_step, c_feat, c_tgt = [], [], []
    last = int(Action.STOP)
    prev_f = features.feature(house, pose)
    for t, (a, decisions) in enumerate(steps):
        f = features.feature(house, pose)
        feats.append(prev_f if acfg.frame_timing == "previous" else f)
        prev.append(last)
        hs.append(img.h[0] if acfg.use_imagery else np.zeros(mcfg.imagery_hidden, np.float32))
        acts.append(int(a))
        last = int(a)
        if a == Action.STOP:
            break
        _, img = mind.imagery_step(mind_model.imagery, mcfg, f[None], img, a)
        img = mind.ImageryState(img.h.data, img.c.data)
        prev_f = f
        pose = gh.step(house, pose, a)
        for d in decisions:
            c_step.append(t)
            c_feat.append(features.feature(house, pose))
            c_tgt.append(d)
            if d == 1:
                pose = gh.step(house, pose, a)
    F = len(feats[0])
    return DemoItems(
        question=list(episode.question), feats=np.stack(feats), prev=np.array(prev), img_h=np.stack(hs),
        actions=np.array(acts), ctrl_step=np.array(c_step, dtype=np.int64),
        ctrl_feats=np.stack(c_feat) if c_feat else np.zeros((0, F), np.float32),
        ctrl_targets=np.array(c_tgt, dtype=np.int64),
    )


def bc_forward(P, items):
    """Teacher-forced navigator outputs for a batch of demos.

    Returns (planner log-probs (N, 4), planner targets (N,), controller
    logits (Nc,), controller targets (Nc,), episode index of each row).
    """
    B = len(items)
    T = max(len(it.actions) for it in items)
    lengths = np.array([len(it.actions) for it in items])
    Q = agent.encode_question(P, "qenc", [it.question for it in items])
    Hd = P["plan.pi.w"].shape[0]
    F = items[0].feats.shape[1]
    Himg = items[0].img_h.shape[1]
    dtype = Q.data.dtype
    h = c = np.zeros((B, Hd), dtype=dtype)
    logps, hs, rows, targets = [], [], [], []
    for t in range(T):
        live = lengths > t
        feat = np.zeros((B, F), dtype=np.float32)
        imgh = np.zeros((B, Himg), dtype=np.float32)
        prev = np.full(B, int(Action.STOP))
        for b, it in enumerate(items):
            if live[b]:
                feat[b], imgh[b], prev[b] = it.feats[t], it.img_h[t], it.prev[t]
        x = ops.concat([Tensor(feat), Q, nn.one_hot(prev, N_ACTIONS, dtype=dtype), Tensor(imgh)], axis=-1)
        h2, c2 = nn.lstm(P, "plan.lstm", x, h, c)
        logp = ops.log_softmax(nn.linear(P, "plan.pi", h2), axis=-1)
        idx = np.flatnonzero(live)
        logps.append(logp[idx])
        rows.extend(idx)
        targets.extend(items[b].actions[t] for b in idx)
        h = h2 if live.all() else nn.mask_blend(live, h2, h)
        c = c2 if live.all() else nn.mask_blend(live, c2, c)
        hs.append(ops.reshape(h2, (B, 1, Hd)))
    plan_logp = ops.concat(logps, axis=0)
    c_rows = np.concatenate([b * T + it.ctrl_step for b, it in enumerate(items)])
    c_tgt = np.concatenate([it.ctrl_targets for it in items])
    if len(c_rows) == 0:
        return plan_logp, np.array(targets), None, c_tgt, np.array(rows)
    H_all = ops.reshape(ops.concat(hs, axis=1), (B * T, Hd))
    c_b = np.concatenate([np.full(len(it.ctrl_step), b) for b, it in enumerate(items)])
    c_act = np.concatenate([it.actions[it.ctrl_step] for it in items])
    c_feat = np.concatenate([it.ctrl_feats for it in items])
    # same layout as agent.controller_logit: [planner h, feature, Q, action]
    x = ops.concat([H_all[c_rows], Tensor(c_feat), Q[c_b], nn.one_hot(c_act, N_ACTIONS, dtype=dtype)], axis=-1)
    z = nn.linear(P, "ctrl.fc2", ops.elu(nn.linear(P, "ctrl.fc1", x)))
    return plan_logp, np.array(targets), ops.reshape(z, (z.shape[0],)), c_tgt, np.array(rows)


def bc_loss(plan_logp, actions, ctrl_logit=None, ctrl_targets=None):
    """Negative mean log-likelihood of the demo's planner actions and controller decisions."""
    actions = np.asarray(actions, dtype=np.int64)
    if plan_logp.shape[0] != len(actions):
        raise ValueError(f"{plan_logp.shape[0]} planner outputs for {len(actions)} demo actions")
    total = ops.sum(plan_logp[np.arange(len(actions)), actions])
    n = len(actions)
    if ctrl_logit is not None and ctrl_logit.shape[0] > 0:
        tgt = np.asarray(ctrl_targets)
        if ctrl_logit.shape[0] != len(tgt):
            raise ValueError(f"{ctrl_logit.shape[0]} controller outputs for {len(tgt)} decisions")
        # log sigmoid(z) for target 1, log sigmoid(-z) for target 0
        signed = ops.mul(ctrl_logit, np.where(tgt == 1, 1.0, -1.0))
        total = ops.add(total, ops.neg(ops.sum(ops.softplus(ops.neg(signed)))))
        n += len(tgt)
    return ops.scale(total, -1.0 / n)


def bc_scores(P, items):
    """Per-episode success (every decision right under argmax) and overall decision accuracy."""
    plan_logp, acts, z, c_tgt, rows = bc_forward(P, items)
    ok_p = np.argmax(plan_logp.data, axis=1) == acts
    ok = np.ones(len(items), dtype=bool)
    np.logical_and.at(ok, rows, ok_p)
    right, total = int(ok_p.sum()), len(ok_p)
    if z is not None:
        ok_c = (z.data > 0).astype(np.int64) == c_tgt
        c_b = np.concatenate([np.full(len(it.ctrl_step), b) for b, it in enumerate(items)])
        np.logical_and.at(ok, c_b, ok_c)
        right += int(ok_c.sum())
        total += len(ok_c)
    return ok, right / total


@dataclass
class Trained:
    """Everything a navigation run needs."""
    policy: agent.Policy
    mind_model: agent.MindModel
    features: agent.FeatureCache


def mean_d_delta(trained, dataset, episodes, spawn_k=None, rng_seed=0, planned_reward=False):
    """Greedy rollouts; ``spawn_k`` re-spawns each episode that many actions out."""
    out = []
    for ep in episodes:
        house = dataset.house(ep)
        spawn = None
        if spawn_k is not None:
            spawn = gh.spawn_at_distance(house, ep.target_cell, spawn_k, _stable_seed(ep.episode_id, spawn_k)).pose
        tr = agent.run_episode(trained.policy, trained.mind_model, trained.features, house, ep, mode="greedy",
                               rng=np.random.default_rng(rng_seed), spawn=spawn, planned_reward=planned_reward)
        out.append(tr.d_delta)
    return float(np.mean(out)) if out else 0.0


def train_bc(trained, dataset, cfg, seed=0, split="train", on_epoch=None):
    """Curriculum behavior cloning of the navigator; updates trained.policy.nav in place."""
    P = trained.policy.nav
    acfg = trained.policy.cfg
    eps = dataset.episodes[split]
    if not eps:
        raise TrainingError(f"split {split!r} has no episodes")
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(seed)
    lengths = [len(demo_poses(dataset.house(ep), ep)) - 1 for ep in eps]
    final_offset = max(lengths)
    cache = {}

    def items_at(offset):
        if offset not in cache:
            cache[offset] = [demo_items(dataset.house(ep), ep, offset, trained.features, trained.mind_model, acfg)
                             for ep in eps]
        return cache[offset]

    phase = 0
    history = []
    for epoch in range(cfg.max_epochs):
        offset = min(curriculum_spawn(phase, cfg=cfg), final_offset)
        items = items_at(offset)
        perm = rng.permutation(len(items))
        losses = []
        for i in range(0, len(items), cfg.batch):
            batch = [items[j] for j in perm[i:i + cfg.batch]]
            with Tape() as tape:
                W = tape.watch(P)
                loss = bc_loss(*bc_forward(W, batch)[:4])
                grads = tape.backward(loss)
            _fit(P, grads, state, cfg.clip)
            losses.append(float(loss.data))
        ok, _ = bc_scores(P, items)
        _, full_acc = bc_scores(P, items_at(final_offset))
        success = float(ok.mean())
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "phase": phase, "offset": offset,
               "success_rate": success, "accuracy": full_acc}
        if cfg.eval_rollouts:
            row["mean_d_delta"] = mean_d_delta(trained, dataset, eps)
        history.append(row)
        if on_epoch:
            on_epoch(row, P)
        final = offset >= final_offset
        if final and cfg.stop_accuracy > 0 and full_acc >= cfg.stop_accuracy:
            break
        if not final and success >= cfg.advance_threshold:
            phase += 1
    return P, history


# ----------------------------------------------------------------------- RL

def gae_advantages(rewards_, values, gamma, lam):
    """Generalized advantages by backward recursion; ``values`` carries a trailing bootstrap."""
    r = np.asarray(rewards_, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if len(v) != len(r) + 1:
        raise ValueError(f"need len(values) == len(rewards) + 1, got {len(v)} and {len(r)}")
    delta = r + gamma * v[1:] - v[:-1]
    adv = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return adv


def discounted_returns(rewards_, gamma, bootstrap=0.0):
    out = np.zeros(len(rewards_))
    acc = bootstrap
    for t in range(len(rewards_) - 1, -1, -1):
        acc = rewards_[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class RolloutBatch:
    """Replayed episodes: per-step tensors plus the numbers the losses need."""
    logp: list  # per episode: list of scalar tensors
    values: list  # per episode: list of scalar tensors
    entropy: list
    rewards: list  # per episode: np.ndarray
    advantages: list = None
    targets: list = None
    trajectories: list = field(default_factory=list)


def prepare_batch(batch, cfg):
    """Fill advantages and value targets (constants) from the recorded rewards."""
    batch.advantages, batch.targets = [], []
    for r, vals in zip(batch.rewards, batch.values):
        v = np.array([float(x.data) for x in vals] + [0.0])
        batch.advantages.append(gae_advantages(r, v, cfg.gamma, cfg.lam))
        if cfg.value_target == "return":
            batch.targets.append(discounted_returns(r, cfg.gamma))
        else:
            batch.targets.append(np.asarray(r, dtype=np.float64))
    return batch


def actor_critic_losses(batch, cfg):
    """(policy loss, value loss, entropy) means over all steps; advantages are constants."""
    if batch.advantages is None or batch.targets is None:
        raise ValueError("advantages not computed; call prepare_batch first")
    pol, val, ent = [], [], []
    for lps, vs, es, adv, tgt in zip(batch.logp, batch.values, batch.entropy, batch.advantages, batch.targets):
        if len(lps) != len(adv):
            raise ValueError("advantage length does not match the episode")
        for lp, v, e, a, g in zip(lps, vs, es, adv, tgt):
            pol.append(ops.scale(lp, -float(a)))
            val.append(ops.square(ops.sub(v, float(g))))
            ent.append(e)
    n = len(pol)

    def mean(xs):
        return ops.scale(ops.sum(ops.concat([ops.reshape(x, (1,)) for x in xs], axis=0)), 1.0 / n)

    return mean(pol), mean(val), mean(ent)


def total_loss(policy_loss, value_loss, entropy, cfg):
    return ops.sub(ops.add(policy_loss, ops.scale(value_loss, cfg.value_weight)),
                   ops.scale(entropy, cfg.entropy_weight))


def replay_batch(trained, dataset, trajectories, episodes, nav_params):
    """Re-run recorded trajectories in forced mode so log-probs and values live on the tape."""
    batch = RolloutBatch([], [], [], [], trajectories=trajectories)
    for tr, ep in zip(trajectories, episodes):
        house = dataset.house(ep)
        rep = agent.run_episode(trained.policy, trained.mind_model, trained.features, house, ep,
                                mode="demo-forced", spawn=tr.poses[0], plan=agent.trajectory_plan(tr),
                                planned_reward=False, nav_params=nav_params)
        steps = [s for s in rep.steps if not s.forced]
        orig = [s for s in tr.steps if not s.forced]
        if not steps:
            continue
        batch.logp.append([s.logp_t for s in steps])
        batch.values.append([s.value_t for s in steps])
        batch.entropy.append([s.entropy_t for s in steps])
        r = np.array([s.reward for s in orig], dtype=np.float64)
        if len(r) != len(steps):
            raise TrainingError("replay diverged from the recorded trajectory")
        batch.rewards.append(r)
    return batch


def rl_spawn(house, episode, k):
    return gh.spawn_at_distance(house, episode.target_cell, k, _stable_seed(episode.episode_id, "rl", k)).pose


def collect_rollouts(trained, nav_snapshot, dataset, episodes, cfg, reward_cfg, seed, update, workers):
    """Sample-mode episodes under a fixed parameter snapshot; order matches ``episodes``."""
    policy = agent.Policy(nav_snapshot, trained.policy.qa, trained.policy.cfg)

    def one(i):
        ep = episodes[i]
        house = dataset.house(ep)
        rng = np.random.default_rng([seed, update, i])
        return agent.run_episode(policy, trained.mind_model, trained.features, house, ep, mode="sample", rng=rng,
                                 reward_cfg=reward_cfg, spawn=rl_spawn(house, ep, cfg.spawn_k),
                                 planned_reward=cfg.planned_reward)

    if workers == 1:
        return [one(i) for i in range(len(episodes))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(episodes))))


def train_rl(trained, dataset, cfg, reward_cfg=None, seed=0, split="train", on_epoch=None):
    """Actor-critic fine-tuning of the navigator; updates trained.policy.nav in place.

    Synchronous mode collects every batch with the current parameters.
    Asynchronous mode overlaps collection of the next batch with the current
    update, so rollouts run on a snapshot at most ``staleness`` updates old.
    """
    if cfg.workers < 1:
        raise TrainingError("rl needs at least one rollout worker")
    eps = dataset.episodes[split]
    if not eps:
        raise TrainingError(f"split {split!r} has no episodes")
    reward_cfg = reward_cfg or rewards.RewardConfig(n_max=trained.policy.cfg.max_actions)
    P = trained.policy.nav
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(seed)
    # prepare distance fields and features up front so workers only read caches
    for ep in eps:
        house = dataset.house(ep)
        gh.distance_field(house, ep.target_cell)
        trained.features.table(house)

    plan = []
    for _ in range(cfg.updates):
        plan.append([eps[i] for i in rng.choice(len(eps), cfg.episodes_per_update,
                                                replace=len(eps) < cfg.episodes_per_update)])

    def snapshot():
        return {k: v.copy() for k, v in P.items()}

    def collect(u, snap):
        return collect_rollouts(trained, snap, dataset, plan[u], cfg, reward_cfg, seed, u, cfg.workers)

    lag = cfg.staleness if cfg.sync_mode == "asynchronous" else 0
    bg = ThreadPoolExecutor(max_workers=1) if lag > 0 else None
    inflight = {}
    history = []
    try:
        for u in range(cfg.updates):
            if bg is not None:
                # batches up to u + lag start now on the current snapshot
                for k in range(u, min(u + lag, cfg.updates - 1) + 1):
                    if k not in inflight:
                        inflight[k] = bg.submit(collect, k, snapshot())
                trajs = inflight.pop(u).result()
            else:
                trajs = collect(u, snapshot())
            with Tape() as tape:
                W = tape.watch(P)
                batch = prepare_batch(replay_batch(trained, dataset, trajs, plan[u], W), cfg)
                pl, vl, ent = actor_critic_losses(batch, cfg)
                loss = total_loss(pl, vl, ent, cfg)
                grads = tape.backward(loss)
            _fit(P, grads, state, cfg.clip)
            row = {
                "epoch": u,
                "loss": float(loss.data),
                "policy_loss": float(pl.data),
                "value_loss": float(vl.data),
                "entropy": float(ent.data),
                "success_rate": float(np.mean([t.dT == 0 for t in trajs])),
                "mean_d_delta": float(np.mean([t.d_delta for t in trajs])),
                "qa_accuracy": float(np.mean([t.correct for t in trajs])),
                "mean_return": float(np.mean([r.sum() for r in batch.rewards])),
            }
            history.append(row)
            if on_epoch:
                on_epoch(row, P)
    finally:
        if bg is not None:
            bg.shutdown(wait=True, cancel_futures=True)
    return P, history


# -------------------------------------------------------------- stage driver

STAGES = ("vae", "imagery", "bc", "rl")
PREREQS = {"vae": (), "imagery": ("vae",), "bc": ("vae", "imagery"), "rl": ("bc",)}


def stage_path(out_dir, stage):
    return Path(out_dir) / "checkpoints" / f"{stage}.ckpt"


class MetricsLog:
    """Append-only JSON-lines metrics file (one row per epoch)."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def write(self, row):
        with self._lock, open(self.path, "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _require(out_dir, stage):
    for need in PREREQS[stage]:
        if not stage_path(out_dir, need).exists():
            raise TrainingError(f"stage {stage} needs a {need} checkpoint at {stage_path(out_dir, need)}")


def load_trained(path, run_cfg, dataset):
    """Rebuild policy + MIND from a bc or rl checkpoint."""
    tensors, manifest = ckpt.load_checkpoint(path)
    groups = ckpt.split_groups(tensors)
    for g in ("vae", "imagery", "nav", "qa"):
        if g not in groups:
            raise ckpt.CheckpointError(f"{path}: no {g} tensors (not a navigation checkpoint)")
    mcfg = run_cfg.mind
    mm = agent.MindModel(groups["vae"], groups["imagery"], mcfg)
    return Trained(agent.Policy(groups["nav"], groups["qa"], run_cfg.agent), mm,
                   agent.FeatureCache(groups["vae"], mcfg)), manifest


def train_stage(stage, dataset, run_cfg, out_dir, log=None):
    """Run one stage, writing metrics rows and a checkpoint after every epoch.

    A non-finite loss aborts with the previous epoch's checkpoint left in place.
    """
    if stage not in STAGES:
        raise TrainingError(f"unknown stage {stage!r}")
    _require(out_dir, stage)
    log = log or MetricsLog(Path(out_dir) / "metrics.jsonl")
    cfg_json = run_cfg.to_json()
    seed = run_cfg.seed
    path = stage_path(out_dir, stage)
    mcfg = run_cfg.mind

    def saver(groups):
        def on_epoch(row, _params):
            log.write({"stage": stage, **row})
            ckpt.save_checkpoint(path, ckpt.join_groups(groups), model=stage, config=cfg_json,
                                 meta={"epoch": row["epoch"]})
        return on_epoch

    try:
        if stage == "vae":
            frames = demo_frames(dataset, size=mcfg.frame_size, limit=run_cfg.vae.max_frames, seed=seed)
            groups = {}
            params = mind.init_vae(mcfg, seed)
            groups["vae"] = params
            train_vae(frames, mcfg, run_cfg.vae, seed=seed, params=params, on_epoch=saver(groups))
        elif stage == "imagery":
            vae, _ = ckpt.load_checkpoint(stage_path(out_dir, "vae"), model="vae")
            vae = ckpt.split_groups(vae)["vae"]
            seqs = macro_transitions(dataset, agent.FeatureCache(vae, mcfg))
            if not seqs:
                raise TrainingError("no macro-step transitions in the training split")
            params = mind.init_imagery(mcfg, seed + 1)
            groups = {"vae": vae, "imagery": params}
            train_imagery(seqs, mcfg, run_cfg.imagery, seed=seed, params=params, on_epoch=saver(groups))
        elif stage == "bc":
            t, _ = ckpt.load_checkpoint(stage_path(out_dir, "imagery"), model="imagery")
            g = ckpt.split_groups(t)
            features = agent.FeatureCache(g["vae"], mcfg)
            acfg = run_cfg.agent
            nw, na = len(dataset.vocab.words), len(dataset.vocab.answers)
            qa, qa_hist = train_qa(qa_examples(dataset, features), acfg, nw, na, mcfg.latent_dim, run_cfg.qa,
                                   seed=seed + 2)
            for row in qa_hist:
                log.write({"stage": "bc-qa", **row})
            nav = agent.init_navigator(acfg, nw, mcfg.latent_dim, mcfg.imagery_hidden, seed + 3)
            trained = Trained(agent.Policy(nav, qa, acfg), agent.MindModel(g["vae"], g["imagery"], mcfg), features)
            groups = {"vae": g["vae"], "imagery": g["imagery"], "qa": qa, "nav": nav}
            train_bc(trained, dataset, run_cfg.bc, seed=seed, on_epoch=saver(groups))
        else:
            trained, _ = load_trained(stage_path(out_dir, "bc"), run_cfg, dataset)
            groups = {"vae": trained.mind_model.vae, "imagery": trained.mind_model.imagery,
                      "qa": trained.policy.qa, "nav": trained.policy.nav}
            train_rl(trained, dataset, run_cfg.rl, reward_cfg=run_cfg.rewards, seed=seed, on_epoch=saver(groups))
    except NonFiniteError as e:
        raise TrainingError(f"non-finite value during {stage} training ({e}); last good checkpoint kept") from None
    return path
