"""Per-tier navigation (d_delta) and answering accuracy."""

import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .. import agent
from .. import gridhouse as gh
from ..trainer import _stable_seed


class EvalError(RuntimeError):
    pass


def tier_spawn(house, episode, k, seed=0):
    return gh.spawn_at_distance(house, episode.target_cell, k, _stable_seed(episode.episode_id, "tier", k, seed))


def evaluate(trained, dataset, split="test", tiers=(10, 30, 50), seed=0, fingerprint=None, mode="greedy",
             workers=1, max_episodes=0, trajectories=None):
    """Re-spawn every episode at each tier offset and roll out; returns the report dict.

    Spawns that cannot reach the tier distance are excluded from that tier and
    listed under ``deviations``. Forced stops at the action limit count as the
    agent's stop. ``trajectories``, if a list, receives every TrajectoryRecord.
    """
    eps = dataset.episodes.get(split) or []
    if max_episodes:
        eps = eps[:max_episodes]
    if not eps:
        raise EvalError(f"split {split!r} has no episodes")
    jobs, deviations = [], []
    for k in tiers:
        for i, ep in enumerate(eps):
            house = dataset.house(ep)
            sp = tier_spawn(house, ep, k, seed)
            if sp.fallback:
                deviations.append({"tier": k, "episode_id": ep.episode_id, "reason": "tier unattainable",
                                   "max_distance": sp.distance})
                continue
            jobs.append((k, i, ep, house, sp.pose))
    for _, _, ep, house, _ in jobs:
        gh.distance_field(house, ep.target_cell)
        trained.features.table(house)

    def run(job):
        k, i, ep, house, pose = job
        rng = np.random.default_rng([seed, k, i])
        return agent.run_episode(trained.policy, trained.mind_model, trained.features, house, ep, mode=mode,
                                 rng=rng, spawn=pose, planned_reward=False)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    per_tier = {}
    for k in tiers:
        rows = [(j, t) for j, t in zip(jobs, results) if j[0] == k]
        dd = [t.d_delta for _, t in rows]
        per_tier[str(k)] = {
            "episodes": len(rows),
            "excluded": sum(1 for d in deviations if d["tier"] == k),
            "mean_d_delta": float(np.mean(dd)) if dd else None,
            "qa_accuracy": float(np.mean([t.correct for _, t in rows])) if rows else None,
            "mean_dT": float(np.mean([t.dT for _, t in rows])) if rows else None,
            "timeouts": sum(t.forced_stop for _, t in rows),
        }
    if trajectories is not None:
        trajectories.extend(results)
    return {
        "split": split,
        "mode": mode,
        "seed": seed,
        "config_fingerprint": fingerprint,
        "tiers": per_tier,
        "deviations": deviations,
        "notes": {"timeouts_included": True, "d0": "geodesic actions from the spawn pose"},
    }


def dumps_report(report):
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
