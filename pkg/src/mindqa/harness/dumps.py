"""Binary PPM (P6) output, top-down trajectory maps and mental-imagery strips."""

from pathlib import Path

import numpy as np

from .. import agent, mind
from .. import gridhouse as gh


class DumpError(ValueError):
    pass


TRAJ_COLORS = [
    (0.85, 0.10, 0.10), (0.10, 0.45, 0.85), (0.10, 0.65, 0.20), (0.90, 0.55, 0.00),
    (0.55, 0.15, 0.75), (0.00, 0.65, 0.65), (0.80, 0.20, 0.55), (0.45, 0.45, 0.10),
]
OBJECT_RGB = (0.6, 0.6, 0.6)
DOOR_RGB = gh.DOOR_RGB


def to_ppm(img):
    """Bytes of a P6 image from floats in [0, 1], shape (H, W, 3)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DumpError(f"expected (H, W, 3) image, got {img.shape}")
    if not np.isfinite(img).all():
        raise DumpError("image has non-finite values")
    px = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w, _ = px.shape
    return b"P6\n%d %d\n255\n" % (w, h) + px.tobytes()


def read_ppm(data):
    """Parse bytes written by :func:`to_ppm` back into uint8 (H, W, 3)."""
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise DumpError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    px = np.frombuffer(parts[3], dtype=np.uint8)
    if px.size != w * h * 3:
        raise DumpError("PPM payload size mismatch")
    return px.reshape(h, w, 3)


def write_ppm(path, img):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_ppm(img))
    return path


def _poses(traj):
    if isinstance(traj, agent.TrajectoryRecord):
        return list(traj.poses)
    return [gh.AgentPose(*p) for p in traj]


def _line(img, p0, p1, color, width=1):
    (r0, c0), (r1, c1) = p0, p1
    n = max(abs(r1 - r0), abs(c1 - c0)) + 1
    for t in np.linspace(0.0, 1.0, n):
        r = int(round(r0 + (r1 - r0) * t))
        c = int(round(c0 + (c1 - c0) * t))
        img[max(r - width // 2, 0):r + width // 2 + 1, max(c - width // 2, 0):c + width // 2 + 1] = color


def topdown(house, trajectories=(), scale=8):
    """Float image: walls black, floor white, doors brown, objects grey, one colour per trajectory.

    Each move between cells is a segment joining the cell centres; the start
    is a filled square and the stop a hollow one.
    """
    R, C = house.grid.shape
    img = np.ones((R * scale, C * scale, 3))
    for r in range(R):
        for c in range(C):
            cell = house.grid[r, c]
            block = img[r * scale:(r + 1) * scale, c * scale:(c + 1) * scale]
            if cell == gh.WALL:
                block[:] = 0.0
            elif cell == gh.DOOR:
                block[:] = DOOR_RGB
    for o in house.objects:
        r, c = o.cell
        img[r * scale + 1:(r + 1) * scale - 1, c * scale + 1:(c + 1) * scale - 1] = OBJECT_RGB
    half = scale // 2
    for i, traj in enumerate(trajectories):
        poses = _poses(traj)
        for p in poses:
            if not (0 <= p[0] < R and 0 <= p[1] < C):
                raise DumpError(f"pose {tuple(p)} outside the {R}x{C} grid")
        if not poses:
            continue
        color = TRAJ_COLORS[i % len(TRAJ_COLORS)]
        centers = [(p[0] * scale + half, p[1] * scale + half) for p in poses]
        for a, b in zip(centers, centers[1:]):
            if a != b:
                _line(img, a, b, color, width=max(1, scale // 4))
        q = max(1, scale // 4)
        (sr, sc), (er, ec) = centers[0], centers[-1]
        img[sr - q:sr + q + 1, sc - q:sc + q + 1] = color
        img[er - q - 1:er + q + 2, ec - q - 1:ec + q + 2] = color
        img[er - q + 1:er + q, ec - q + 1:ec + q] = 1.0
    return img


def count_segments(house, trajectory):
    poses = _poses(trajectory)
    return sum(1 for a, b in zip(poses, poses[1:]) if a.cell != b.cell)


def dump_topdown(house, trajectories, path, scale=8):
    return write_ppm(path, topdown(house, trajectories, scale))


def dump_mental_rollout(mind_model, house, episode, step, length, out_dir, rng=None):
    """Imagine ``length`` macro steps ahead from planner step ``step`` of the expert demo.

    Writes real.ppm (observed frame at that step), mental_NNN.ppm (decoded
    imagined frames) and actual_NNN.ppm (frames the expert actually reached).
    Returns the list of written paths.
    """
    mcfg = mind_model.cfg
    plan = agent.macro_steps(episode.actions)
    moves = [(a, run) for a, run in plan if a != gh.Action.STOP]
    if not 0 <= step <= len(moves):
        raise DumpError(f"step {step} out of range [0, {len(moves)}]")
    if length < 0:
        raise DumpError("rollout length must be >= 0")
    features = agent.FeatureCache(mind_model.vae, mcfg)
    rng = rng if rng is not None else np.random.default_rng(0)
    pose = episode.spawn
    state = mind.ImageryState.zeros(mcfg)
    for a, run in moves[:step]:
        _, state = mind.imagery_step(mind_model.imagery, mcfg, features.feature(house, pose)[None], state, a)
        state = mind.ImageryState(state.h.data, state.c.data)
        for _ in range(run):
            pose = gh.step(house, pose, a)
    out_dir = Path(out_dir)
    written = [write_ppm(out_dir / "real.ppm", gh.render(house, pose, size=mcfg.frame_size))]
    ahead = moves[step:step + length]
    if not ahead:
        return written
    rollout, _ = mind.imagine_rollout(mind_model.imagery, mcfg, features.feature(house, pose)[None], state,
                                      [a for a, _ in ahead], rng)
    actual = pose
    for i, ((a, run), (_, latent)) in enumerate(zip(ahead, rollout)):
        for _ in range(run):
            actual = gh.step(house, actual, a)
        written.append(write_ppm(out_dir / f"mental_{i:03d}.ppm", mind.decode(mind_model.vae, mcfg, latent[0])))
        written.append(write_ppm(out_dir / f"actual_{i:03d}.ppm", gh.render(house, actual, size=mcfg.frame_size)))
    return written
