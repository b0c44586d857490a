"""Final, progressive and planned rewards and their per-step combination."""

from dataclasses import dataclass


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    lambda_f: float = 0.01
    n_max: int = 80

    def __post_init__(self):
        if self.lambda_f < 0:
            raise RewardError(f"lambda_f must be >= 0, got {self.lambda_f}")
        if self.n_max < 1:
            raise RewardError(f"n_max must be >= 1, got {self.n_max}")


def final_reward(correct, n, cfg=RewardConfig()):
    """1 plus an efficiency bonus for unused actions when the answer is right, else 0."""
    if n < 0:
        raise RewardError(f"action count must be >= 0, got {n}")
    if not correct:
        return 0.0
    return 1.0 + cfg.lambda_f * max(cfg.n_max - n, 0)


def progressive_reward(d_t, d_t1):
    """Decrease in geodesic distance to the target over one primitive action."""
    if d_t < 0 or d_t1 < 0:
        raise RewardError(f"distances must be >= 0, got {d_t}, {d_t1}")
    return float(d_t - d_t1)


def planned_reward(p_with_mental, p_without):
    """Gain in the correct answer's probability when the mental image joins the QA window."""
    for p in (p_with_mental, p_without):
        if not 0.0 <= p <= 1.0:
            raise RewardError(f"probability outside [0, 1]: {p}")
    return float(p_with_mental) - float(p_without)


def total_reward(r_p, r_m, r_f=0.0, terminal=False):
    if not terminal and r_f != 0:
        raise RewardError("final reward given on a non-terminal step")
    return r_p + r_m + (r_f if terminal else 0.0)
