"""Hierarchical navigator (planner LSTM + repeat controller) with a
five-frame attention QA head, and the episode loop tying them to the
simulator and the imagery model."""

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import gridhouse as gh
from . import mind
from . import rewards
from .gridhouse import Action
from .ndnet import Tensor, nn, ops

N_ACTIONS = 4
FRAME_SLOTS = 5


@dataclass
class AgentConfig:
    q_embed: int = 32
    q_dim: int = 64
    planner_hidden: int = 128
    ctrl_hidden: int = 64
    qa_hidden: int = 128
    max_actions: int = 80
    max_repeat: int = 5
    use_imagery: bool = True
    frame_timing: str = "current"  # or "previous": planner sees the frame before the last macro step

    def __post_init__(self):
        if self.frame_timing not in ("current", "previous"):
            raise ValueError(f"frame_timing must be 'current' or 'previous', got {self.frame_timing!r}")


class AgentError(RuntimeError):
    pass


def init_navigator(cfg, n_words, feat_dim, imagery_hidden, seed):
    rng = np.random.default_rng(seed)
    P = {"qenc.embed": rng.normal(0, 0.3, size=(n_words, cfg.q_embed)).astype(np.float32)}
    nn.init_lstm(rng, P, "qenc.lstm", cfg.q_embed, cfg.q_dim)
    n_in = feat_dim + cfg.q_dim + N_ACTIONS + imagery_hidden
    nn.init_lstm(rng, P, "plan.lstm", n_in, cfg.planner_hidden)
    nn.init_linear(rng, P, "plan.pi", cfg.planner_hidden, N_ACTIONS)
    nn.init_linear(rng, P, "plan.v", cfg.planner_hidden, 1)
    nn.init_linear(rng, P, "ctrl.fc1", cfg.planner_hidden + feat_dim + cfg.q_dim + N_ACTIONS, cfg.ctrl_hidden)
    nn.init_linear(rng, P, "ctrl.fc2", cfg.ctrl_hidden, 1)
    return P


def init_qa(cfg, n_words, n_answers, feat_dim, seed):
    rng = np.random.default_rng(seed)
    P = {"qa.embed": rng.normal(0, 0.3, size=(n_words, cfg.q_embed)).astype(np.float32)}
    nn.init_lstm(rng, P, "qa.lstm", cfg.q_embed, cfg.q_dim)
    nn.init_linear(rng, P, "qa.proj", feat_dim, cfg.q_dim)
    nn.init_linear(rng, P, "qa.fc1", 2 * cfg.q_dim, cfg.qa_hidden)
    nn.init_linear(rng, P, "qa.out", cfg.qa_hidden, n_answers)
    return P


# --------------------------------------------------------- question encoder

def encode_question(P, prefix, questions):
    """Final LSTM hidden state over token embeddings, (B, q_dim).

    ``questions`` is a list of token-id lists (ragged; shorter ones are masked).
    """
    embed = P[f"{prefix}.embed"]
    n_words = embed.shape[0]
    lengths = np.array([len(q) for q in questions])
    if (lengths == 0).any():
        raise AgentError("empty question")
    B, L = len(questions), int(lengths.max())
    ids = np.zeros((B, L), dtype=np.int64)
    for b, q in enumerate(questions):
        if min(q) < 0 or max(q) >= n_words:
            raise AgentError(f"unknown token id in question {q}")
        ids[b, :len(q)] = q
    H = P[f"{prefix}.lstm.b"].shape[0] // 4
    dtype = embed.data.dtype if isinstance(embed, Tensor) else embed.dtype
    h = c = np.zeros((B, H), dtype=dtype)
    for t in range(L):
        x = ops.index(embed, ids[:, t])
        h2, c2 = nn.lstm(P, f"{prefix}.lstm", x, h, c)
        live = lengths > t
        if live.all():
            h, c = h2, c2
        else:
            h, c = nn.mask_blend(live, h2, h), nn.mask_blend(live, c2, c)
    return h


# ------------------------------------------------------- planner/controller

@dataclass
class PlannerState:
    h: object
    c: object
    last_action: np.ndarray

    @classmethod
    def initial(cls, cfg, batch=1):
        z = np.zeros((batch, cfg.planner_hidden), dtype=np.float32)
        return cls(z, z.copy(), np.full(batch, int(Action.STOP)))


def planner_step(P, state, feature, Q, imagery_h):
    """One planner step; returns (log action probabilities (B, 4), value (B,), new state).

    Input vector: [frame feature, question encoding, one-hot previous action,
    imagery hidden state].
    """
    feature = feature if isinstance(feature, Tensor) else Tensor(np.atleast_2d(feature))
    prev = nn.one_hot(state.last_action, N_ACTIONS, dtype=feature.data.dtype)
    x = ops.concat([feature, Q, prev, imagery_h], axis=-1)
    h, c = nn.lstm(P, "plan.lstm", x, state.h, state.c)
    logp = ops.log_softmax(nn.linear(P, "plan.pi", h), axis=-1)
    value = ops.reshape(nn.linear(P, "plan.v", h), (h.shape[0],))
    return logp, value, PlannerState(h, c, state.last_action)


def controller_logit(P, planner_h, feature, Q, action):
    """Logit of 'repeat once more' (1) versus 'return control' (0), shape (B,)."""
    feature = feature if isinstance(feature, Tensor) else Tensor(np.atleast_2d(feature))
    a = nn.one_hot(np.atleast_1d(action), N_ACTIONS, dtype=feature.data.dtype)
    x = ops.concat([planner_h, feature, Q, a], axis=-1)
    z = nn.linear(P, "ctrl.fc2", ops.elu(nn.linear(P, "ctrl.fc1", x)))
    return ops.reshape(z, (z.shape[0],))


def controller_step(P, planner_h, feature, Q, action, count, max_repeat=5, mode="greedy", rng=None):
    """Decision in {0, 1} plus its log-probability tensor (None when forced).

    ``count`` is how many times the planner's action has executed in the
    current run; at ``max_repeat`` control always returns to the planner.
    """
    if not 0 <= count <= max_repeat:
        raise AgentError(f"consecutive count {count} outside [0, {max_repeat}]")
    if count >= max_repeat:
        return 0, None
    z = controller_logit(P, planner_h, feature, Q, action)
    p1 = 0.5 * (math.tanh(0.5 * float(z.data[0])) + 1.0)
    if mode == "sample":
        d = int(rng.random() < p1)
    else:
        d = int(p1 > 0.5)
    logp = ops.neg(ops.softplus(ops.neg(z) if d == 1 else z))
    return d, logp


# ------------------------------------------------------------------- QA head

class FrameBuffer:
    """Last five frame features, newest first; short histories repeat the oldest."""

    def __init__(self, first=None):
        self._frames = deque(maxlen=FRAME_SLOTS)
        if first is not None:
            self.push(first)

    def push(self, feature):
        self._frames.appendleft(np.asarray(feature))

    def __len__(self):
        return len(self._frames)

    def slots(self):
        if not self._frames:
            raise AgentError("empty frame buffer")
        items = list(self._frames)
        items += [items[-1]] * (FRAME_SLOTS - len(items))
        return np.stack(items)

    def with_mental(self, latent):
        s = self.slots()
        s[-1] = latent
        return s


def qa_log_probs(P, Q, frames):
    """Attention over frame slots, then a softmax classifier; frames (B, 5, F)."""
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    B, S, F = frames.shape
    q_dim = Q.shape[-1]
    proj = ops.reshape(nn.linear(P, "qa.proj", ops.reshape(frames, (B * S, F))), (B, S, q_dim))
    sim = ops.scale(ops.sum(ops.mul(proj, ops.reshape(Q, (B, 1, q_dim))), axis=-1), 1.0 / math.sqrt(q_dim))
    att = ops.softmax(sim, axis=-1)
    pooled = ops.sum(ops.mul(proj, ops.reshape(att, (B, S, 1))), axis=1)
    hidden = ops.elu(nn.linear(P, "qa.fc1", ops.concat([pooled, Q], axis=-1)))
    return ops.log_softmax(nn.linear(P, "qa.out", hidden), axis=-1), att


def qa_answer(P, question, buffer, mental=None, Q=None):
    """Answer distribution (numpy, sums to 1) for one question.

    With ``mental`` the oldest slot is replaced by the imagined latent, so the
    head sees the four newest real frames plus the mental image. ``Q`` may
    carry a precomputed question encoding.
    """
    Q = Q if Q is not None else encode_question(P, "qa", [question])
    frames = buffer.slots() if mental is None else buffer.with_mental(mental)
    logp, _ = qa_log_probs(P, Q, frames[None])
    return np.exp(logp.data[0].astype(np.float64))


def qa_answer_pair(P, Q, buffer, mental):
    """(distribution with the mental slot, distribution with five real frames) in one batch."""
    frames = np.stack([buffer.with_mental(mental), buffer.slots()])
    Q2 = Tensor(np.repeat(np.asarray(Q.data if isinstance(Q, Tensor) else Q), 2, axis=0))
    logp, _ = qa_log_probs(P, Q2, frames)
    p = np.exp(logp.data.astype(np.float64))
    return p[0], p[1]


# ------------------------------------------------------- macro segmentation

def macro_steps(actions, max_repeat=5):
    """Split a demonstration into planner steps: runs of one action, at most
    ``max_repeat`` long; the trailing STOP becomes a zero-length step."""
    out = []
    for a in actions:
        a = Action(a)
        if a == Action.STOP:
            out.append((a, 0))
            break
        if out and out[-1][0] == a and out[-1][1] < max_repeat:
            out[-1] = (a, out[-1][1] + 1)
        else:
            out.append((a, 1))
    return out


def controller_targets(length, max_repeat=5):
    """Decisions the controller should emit after 1..length executions (None = forced)."""
    out = []
    for count in range(1, length + 1):
        if count >= max_repeat:
            out.append(None)
        else:
            out.append(1 if count < length else 0)
    return out


# ----------------------------------------------------------------- episodes

class FeatureCache:
    """Per-pose encoder means for one MIND autoencoder, filled lazily per house."""

    def __init__(self, vae_params, mind_cfg):
        self.params = vae_params
        self.cfg = mind_cfg
        self._houses = {}

    def table(self, house):
        tab = self._houses.get(house.house_id)
        if tab is None:
            poses = house.walkable_poses()
            frames = np.stack([gh.render(house, p, size=self.cfg.frame_size) for p in poses])
            mu = mind.encode_mean(self.params, self.cfg, frames)
            tab = {p: mu[i] for i, p in enumerate(poses)}
            self._houses[house.house_id] = tab
        return tab

    def feature(self, house, pose):
        return self.table(house)[gh.AgentPose(*pose)]


@dataclass
class StepRecord:
    pose: gh.AgentPose
    action: int
    decisions: list = field(default_factory=list)
    feature: np.ndarray = None
    mental: np.ndarray = None
    logp: float = 0.0
    value: float = 0.0
    r_p: list = field(default_factory=list)
    r_m: float = 0.0
    r_f: float = 0.0
    terminal: bool = False
    forced: bool = False
    logp_t: object = field(default=None, repr=False)
    value_t: object = field(default=None, repr=False)
    entropy_t: object = field(default=None, repr=False)

    @property
    def reward(self):
        return rewards.total_reward(sum(self.r_p), self.r_m, self.r_f if self.terminal else 0.0, self.terminal)

    def to_json(self):
        return {
            "pose": self.pose.to_json(),
            "action": Action(self.action).symbol,
            "decisions": list(self.decisions),
            "feature": None if self.feature is None else [float(v) for v in self.feature],
            "mental": None if self.mental is None else [float(v) for v in self.mental],
            "logp": self.logp,
            "value": self.value,
            "r_p": list(self.r_p),
            "r_m": self.r_m,
            "r_f": self.r_f,
            "terminal": self.terminal,
            "forced": self.forced,
        }


@dataclass
class TrajectoryRecord:
    episode_id: str
    house_id: str
    mode: str
    poses: list
    steps: list
    n_actions: int
    d0: int
    dT: int
    answer: int = -1
    answer_probs: np.ndarray = None
    correct: bool = False
    forced_stop: bool = False

    @property
    def d_delta(self):
        return self.d0 - self.dT

    def to_json(self):
        return {
            "episode_id": self.episode_id,
            "house_id": self.house_id,
            "mode": self.mode,
            "poses": [p.to_json() for p in self.poses],
            "steps": [s.to_json() for s in self.steps],
            "n_actions": self.n_actions,
            "d0": self.d0,
            "dT": self.dT,
            "d_delta": self.d_delta,
            "answer": self.answer,
            "correct": self.correct,
            "forced_stop": self.forced_stop,
        }


@dataclass
class Policy:
    """Navigator and QA parameters with their configuration."""
    nav: dict
    qa: dict
    cfg: AgentConfig


@dataclass
class MindModel:
    vae: dict
    imagery: dict
    cfg: mind.MindConfig


def demo_plan(actions, max_repeat=5):
    """Expert actions as forced planner steps: [(action, controller decisions)]."""
    return [(a, [d for d in controller_targets(run, max_repeat) if d is not None])
            for a, run in macro_steps(actions, max_repeat)]


def trajectory_plan(traj):
    """Forced planner steps that replay a recorded trajectory."""
    return [(s.action, list(s.decisions)) for s in traj.steps if not s.forced]


def _bernoulli_logp(z, d):
    return ops.neg(ops.softplus(ops.neg(z) if d == 1 else z))


def run_episode(policy, mind_model, features, house, episode, mode="greedy", rng=None,
                reward_cfg=None, spawn=None, planned_reward=True, nav_params=None, plan=None):
    """Roll one episode; returns a TrajectoryRecord.

    ``mode`` is 'greedy', 'sample' or 'demo-forced'. Demo-forced replays
    ``plan`` (default: the expert's macro steps from the spawn) and logs the
    policy's log-probabilities of it. ``nav_params`` may be tape-watched
    tensors so the rollout is differentiable.
    """
    if mode not in ("greedy", "sample", "demo-forced"):
        raise AgentError(f"unknown mode {mode!r}")
    if episode.house_id != house.house_id:
        raise AgentError(f"episode {episode.episode_id} belongs to {episode.house_id}, not {house.house_id}")
    cfg = policy.cfg
    reward_cfg = reward_cfg or rewards.RewardConfig(n_max=cfg.max_actions)
    P = nav_params if nav_params is not None else policy.nav
    mcfg = mind_model.cfg
    rng = rng if rng is not None else np.random.default_rng(0)
    dist = gh.distance_field(house, episode.target_cell)

    def d(p):
        return int(dist[p[0], p[1], p[2]])

    pose = gh.AgentPose(*(spawn if spawn is not None else episode.spawn))
    if mode == "demo-forced" and plan is None:
        plan = demo_plan(expert_actions(house, pose, episode), cfg.max_repeat)
    poses = [pose]
    d0 = d(pose)
    Q = encode_question(P, "qenc", [episode.question])
    Q_qa = encode_question(policy.qa, "qa", [episode.question])
    img_state = mind.ImageryState.zeros(mcfg)
    pstate = PlannerState.initial(cfg)
    f = features.feature(house, pose)
    prev_f = f
    buffer = FrameBuffer(f)
    steps = []
    n = 0
    forced_stop = False
    j = 0
    while True:
        if n >= cfg.max_actions or (plan is not None and j >= len(plan)):
            forced_stop = True
            break
        f = features.feature(house, pose)
        seen = prev_f if cfg.frame_timing == "previous" else f
        img_h = img_state.h if cfg.use_imagery else np.zeros_like(img_state.h)
        logp, value, pstate = planner_step(P, pstate, seen[None], Q, img_h)
        probs = np.exp(logp.data[0].astype(np.float64))
        if plan is not None:
            a, decisions = plan[j]
            a = int(a)
        elif mode == "sample":
            a = int(rng.choice(N_ACTIONS, p=probs / probs.sum()))
        else:
            a = int(np.argmax(probs))
        j += 1
        rec = StepRecord(pose=pose, action=a, feature=f, logp=float(logp.data[0, a]), value=float(value.data[0]))
        rec.logp_t = logp[0, a]
        rec.value_t = value[0]
        rec.entropy_t = ops.neg(ops.sum(ops.mul(ops.exp(logp), logp)))
        steps.append(rec)
        pstate.last_action = np.array([a])
        if a == Action.STOP:
            rec.terminal = True
            break
        # imagine the outcome of the chosen action before executing it
        mix, img_state = mind.imagery_step(mind_model.imagery, mcfg, f[None], img_state, a)
        img_state = mind.ImageryState(img_state.h.data, img_state.c.data)
        if mode == "sample":
            mental = mind.sample_imagery(mix, rng, mcfg.temperature)[0]
        else:
            mental = mind.mixture_mode(mix)[0]
        rec.mental = mental
        if planned_reward:
            p_with, p_without = qa_answer_pair(policy.qa, Q_qa, buffer, mental)
            p_with, p_without = p_with[episode.answer], p_without[episode.answer]
            rec.r_m = rewards.planned_reward(min(p_with, 1.0), min(p_without, 1.0))
        # execute once, then the controller decides whether to repeat
        prev_f = buffer.slots()[0]
        count = 0
        k = 0
        while True:
            before = d(pose)
            pose = gh.step(house, pose, a)
            n += 1
            count += 1
            poses.append(pose)
            rec.r_p.append(rewards.progressive_reward(before, d(pose)))
            buffer.push(features.feature(house, pose))
            if n >= cfg.max_actions:
                break
            if count >= cfg.max_repeat:
                break
            fc = features.feature(house, pose)[None]
            if plan is not None:
                if k >= len(decisions):
                    break
                dec = int(decisions[k])
                lp = _bernoulli_logp(controller_logit(P, pstate.h, fc, Q, a), dec)
                k += 1
            else:
                dec, lp = controller_step(P, pstate.h, fc, Q, a, count, cfg.max_repeat, mode, rng)
            rec.logp += float(lp.data[0])
            rec.logp_t = ops.add(rec.logp_t, lp[0])
            rec.decisions.append(dec)
            if dec == 0:
                break
    if forced_stop:
        if steps:
            steps[-1].terminal = True
        else:
            steps.append(StepRecord(pose=pose, action=int(Action.STOP), terminal=True, forced=True))
    probs = qa_answer(policy.qa, episode.question, buffer, Q=Q_qa)
    answer = int(np.argmax(probs))
    correct = answer == episode.answer
    steps[-1].r_f = rewards.final_reward(correct, n, reward_cfg)
    return TrajectoryRecord(
        episode_id=episode.episode_id, house_id=house.house_id, mode=mode, poses=poses, steps=steps,
        n_actions=n, d0=d0, dT=d(pose), answer=answer, answer_probs=probs, correct=correct,
        forced_stop=forced_stop,
    )


def expert_actions(house, pose, episode):
    """Expert actions from ``pose``: the stored demo when it starts there, else a fresh one."""
    if tuple(pose) == tuple(episode.spawn):
        return list(episode.actions)
    from .eqagen import expert_actions_to_target
    return expert_actions_to_target(house, gh.AgentPose(*pose), episode.target)
