import pytest

from mindqa import rewards as rw

CFG = rw.RewardConfig(lambda_f=0.01, n_max=80)


@pytest.mark.parametrize("correct,n,want", [
    (True, 0, 1.8), (True, 10, 1.7), (True, 80, 1.0), (True, 95, 1.0),
    (False, 0, 0.0), (False, 10, 0.0),
])
def test_final_reward_table(correct, n, want):
    assert rw.final_reward(correct, n, CFG) == pytest.approx(want)


def test_final_reward_negative_count():
    with pytest.raises(rw.RewardError):
        rw.final_reward(True, -1, CFG)


@pytest.mark.parametrize("d0,d1,want", [(5, 4, 1.0), (4, 5, -1.0), (3, 3, 0.0), (0, 0, 0.0)])
def test_progressive_reward(d0, d1, want):
    assert rw.progressive_reward(d0, d1) == want


def test_progressive_reward_telescopes():
    ds = [9, 8, 8, 9, 7, 6, 6, 3]
    assert sum(rw.progressive_reward(a, b) for a, b in zip(ds, ds[1:])) == ds[0] - ds[-1]


def test_progressive_reward_errors():
    with pytest.raises(rw.RewardError):
        rw.progressive_reward(-1, 2)


@pytest.mark.parametrize("pw,po,want", [(0.9, 0.4, 0.5), (0.2, 0.7, -0.5), (0.3, 0.3, 0.0)])
def test_planned_reward(pw, po, want):
    assert rw.planned_reward(pw, po) == pytest.approx(want)


def test_planned_reward_bounds():
    with pytest.raises(rw.RewardError):
        rw.planned_reward(1.2, 0.5)
    with pytest.raises(rw.RewardError):
        rw.planned_reward(0.5, -0.1)


def test_total_reward():
    assert rw.total_reward(1.0, 0.25) == 1.25
    assert rw.total_reward(1.0, 0.25, 1.5, terminal=True) == 2.75
    with pytest.raises(rw.RewardError):
        rw.total_reward(1.0, 0.0, 1.0, terminal=False)


def test_config_validation():
    with pytest.raises(rw.RewardError):
        rw.RewardConfig(lambda_f=-0.1)
    with pytest.raises(rw.RewardError):
        rw.RewardConfig(n_max=0)
