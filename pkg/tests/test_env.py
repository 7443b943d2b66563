import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imvol.env import (AllocationAction, DomainError, RenderingSite, SystemConfig, UserState,
                       VolumetricEnv, cov, download_rate, frame_latency, normalize_action, qoe,
                       reset, reward, step, upload_rate)

pos = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False)


def user(a_ul=1.0, a_comp=10.0, a_dl=20.0, gain=1.0, p_ul=1.0, tier=0):
    return UserState(gain=gain, a_ul=a_ul, a_comp=a_comp, a_dl=a_dl, p_ul=p_ul, tier=tier)


@pytest.mark.parametrize("args, expected", [
    ((1, 1, 1, 1), 1.0),
    ((2, 3, 1, 1), 4.0),
    ((1, 0, 2, 1), 0.0),
])
def test_download_rate(args, expected):
    assert download_rate(*args) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("args, expected", [
    ((1, 1, 1, 1), 1.0),
    ((4, 1, 1, 1), 4.0),
    ((0, 1, 1, 1), 0.0),
])
def test_upload_rate(args, expected):
    assert upload_rate(*args) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("bad", [(-1, 1, 1, 1), (1, math.nan, 1, 1), (1, 1, 0, 1),
                                 (1, 1, 1, 0), (math.inf, 1, 1, 1)])
def test_rate_domain_errors(bad):
    with pytest.raises(DomainError):
        download_rate(*bad)


@given(b=pos, p=pos, g=pos, db=pos)
def test_download_rate_increasing_in_bandwidth(b, p, g, db):
    assert download_rate(b + db, p, g, 1.0) > download_rate(b, p, g, 1.0)


@given(b=pos, p=pos, g=st.floats(0.5, 2.0), dp=st.floats(1e-2, 1e3))
def test_download_rate_increasing_in_power(b, p, g, dp):
    assert download_rate(b, p + dp, g, 1.0) > download_rate(b, p, g, 1.0)


def test_frame_latency_examples():
    cfg = SystemConfig(num_users=1)
    # R^U = 2 * log2(2) = 2, R^D = 10 * log2(2) = 10
    out = frame_latency(user(), b_ul=2, f=5, b_dl=10, p_dl=1, phi=0.5, config=cfg)
    assert out == pytest.approx((0.5, 1.0, 1.0, 2.5), rel=1e-12)

    out = frame_latency(user(), b_ul=1, f=0, b_dl=0, p_dl=0, phi=0.0, config=cfg)
    assert out == (1.0, 0.0, 0.0, 1.0)

    cloud = cfg.replace(rendering_site=RenderingSite.CLOUD, backhaul_latency=0.25)
    out = frame_latency(user(), b_ul=2, f=5, b_dl=10, p_dl=1, phi=0.5, config=cloud)
    assert out[3] == pytest.approx(3.0, rel=1e-12)


@pytest.mark.parametrize("alloc", [
    dict(b_ul=0, f=1, b_dl=1, p_dl=1, phi=0.5),
    dict(b_ul=1, f=0, b_dl=1, p_dl=1, phi=0.5),
    dict(b_ul=1, f=1, b_dl=0, p_dl=1, phi=0.5),
    dict(b_ul=1, f=1, b_dl=1, p_dl=0, phi=0.5),
])
def test_frame_latency_infeasible_is_inf(alloc):
    *_, total = frame_latency(user(), config=SystemConfig(num_users=1), **alloc)
    assert math.isinf(total)


@given(phi=st.floats(0.01, 1.0), f=st.floats(0.1, 10.0))
def test_latency_linear_in_phi_and_inverse_in_f(phi, f):
    cfg = SystemConfig(num_users=1)
    _, tc, td, _ = frame_latency(user(), 1, f, 1, 1, phi, cfg)
    _, tc2, td2, _ = frame_latency(user(), 1, f, 1, 1, phi / 2, cfg)
    _, tc_f, _, _ = frame_latency(user(), 1, 2 * f, 1, 1, phi, cfg)
    assert tc2 == pytest.approx(tc / 2, rel=1e-12)
    assert td2 == pytest.approx(td / 2, rel=1e-12)
    assert tc_f == pytest.approx(tc / 2, rel=1e-12)


@pytest.mark.parametrize("t, phi, expected", [
    (0.0, 1.0, math.log(2)),
    (5.0, 1.0, 0.0),
    (2.5, 1.0, 0.5 * math.log(2)),
])
def test_qoe_examples(t, phi, expected):
    assert qoe(t, phi, 5.0) == pytest.approx(expected, abs=1e-12)


def test_qoe_negative_past_threshold_and_floor():
    assert qoe(10.0, 1.0, 5.0) < 0
    assert qoe(math.inf, 0.5, 5.0, floor=-1.0) == -1.0
    with pytest.raises(DomainError):
        qoe(1.0, 1.2, 5.0)


@given(phi=st.floats(0, 1), t=st.floats(0, 1e6))
def test_qoe_boundaries(phi, t):
    assert qoe(5.0, phi, 5.0) == 0.0
    assert qoe(t, 0.0, 5.0) == 0.0


@pytest.mark.parametrize("values, expected", [([2, 2, 2], 0.0), ([1, 3], 0.5), ([5], 0.0)])
def test_cov(values, expected):
    # the 1e-8 denominator guard shifts the value by ~2.5e-9
    assert cov(values) == pytest.approx(expected, abs=1e-8)


def test_cov_empty():
    with pytest.raises(DomainError):
        cov([])


@pytest.mark.parametrize("qoes, beta, expected", [
    ([1, 1, 1, 1], 0.5, 4.0),
    ([1, 3], 1.0, 3.5),
    # hand oracle: mean = std = 0.34655 so CoV is 1 up to the 1e-8 guard
    ([0.6931, 0.0], 0.5, 0.19310001442793212),
])
def test_reward(qoes, beta, expected):
    assert reward(qoes, beta) == pytest.approx(expected, rel=1e-9)


@given(c=st.floats(1e-3, 100))
def test_reward_prefers_equal_split(c):
    assert reward([c, c], 0.5) > reward([2 * c, 0.0], 0.5)


def test_normalize_examples():
    cfg = SystemConfig(num_users=2, f_max=10.0)
    a = normalize_action([0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.3, 0.7], cfg)
    assert a.f == pytest.approx([5, 5], rel=1e-9)
    assert a.phi.tolist() == [0.3, 0.7]
    a = normalize_action([0, 0, 1, 0, 0, 0, 0, 0, 1, 1], cfg)
    assert a.f == pytest.approx([10, 0], abs=1e-6)

    cfg4 = SystemConfig(num_users=4)
    a = normalize_action(np.zeros(20), cfg4)
    assert a.b_dl == pytest.approx([10] * 4, rel=1e-12)
    assert a.p_dl == pytest.approx([2.5] * 4, rel=1e-12)


def test_normalize_wrong_length():
    with pytest.raises(DomainError):
        normalize_action(np.zeros(9), SystemConfig(num_users=2))


@settings(max_examples=200)
@given(st.integers(1, 16).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.floats(0, 1), min_size=5 * n, max_size=5 * n))))
def test_normalize_satisfies_constraints(case):
    n, raw = case
    cfg = SystemConfig(num_users=n)
    a = normalize_action(raw, cfg)
    for group, budget in cfg.budgets().items():
        assert np.sum(getattr(a, group)) == pytest.approx(budget, rel=1e-6)
    assert np.all((a.phi >= 0) & (a.phi <= 1))
    assert a.violations(cfg) == []


def test_step_single_user_example():
    cfg = SystemConfig(num_users=1)
    s = [user(a_ul=1.0, a_comp=10.0, a_dl=10.0)]
    act = AllocationAction(b_ul=[40], f=[10], b_dl=[40], p_dl=[10], phi=[1.0])
    nxt, out = step(s, act, cfg, np.random.default_rng(0))
    # frozen from direct evaluation of the three closed forms
    assert out.t_ul[0] == pytest.approx(0.025, rel=1e-12)
    assert out.t_comp[0] == pytest.approx(1.0, rel=1e-12)
    assert out.t_dl[0] == pytest.approx(0.07226620657947197, rel=1e-12)
    assert out.t_total[0] == pytest.approx(1.0972662065794718, rel=1e-12)
    assert out.qoe[0] == pytest.approx(0.5410337850770918, rel=1e-12)
    assert out.success[0]
    assert out.reward == pytest.approx(0.5410337850770918, rel=1e-12)
    assert 0.5 <= nxt[0].gain <= 2.0
    assert nxt[0].a_comp == 10.0 and nxt[0].tier == 0


def test_step_zero_phi_and_infeasible():
    cfg = SystemConfig(num_users=3)
    states = reset(cfg, 0)
    act = AllocationAction(b_ul=[1] * 3, f=[1] * 3, b_dl=[1] * 3, p_dl=[1] * 3, phi=[0] * 3)
    _, out = step(states, act, cfg, np.random.default_rng(1))
    assert np.all(out.qoe == 0) and out.reward == 0.0

    act = AllocationAction(b_ul=[1] * 3, f=[0, 1, 1], b_dl=[1] * 3, p_dl=[1] * 3,
                           phi=[0.5] * 3)
    _, out = step(states, act, cfg, np.random.default_rng(1))
    assert not out.success[0] and out.qoe[0] == cfg.qoe_floor
    assert out.t_total[1] == out.t_ul[1] + out.t_comp[1] + out.t_dl[1]


def test_reset_tiers_and_determinism():
    cfg = SystemConfig(num_users=8)
    states = reset(cfg, 42)
    assert [s.tier for s in states] == [0, 1, 2, 3, 0, 1, 2, 3]
    assert [s.a_comp for s in states] == [10, 20, 30, 40, 10, 20, 30, 40]
    assert [s.a_dl for s in states] == [10, 20, 30, 40, 10, 20, 30, 40]
    assert states == reset(cfg, 42)
    assert all(0.5 <= s.gain <= 2.0 and s.p_ul == 1.0 and s.a_ul == 0.1 for s in states)


def test_env_determinism():
    cfg = SystemConfig(num_users=4)
    act = normalize_action(np.full(20, 0.5), cfg)
    runs = []
    for _ in range(2):
        env = VolumetricEnv(cfg, seed=3)
        env.reset()
        runs.append([env.step(act)[1] for _ in range(5)])
    assert all(a.equals(b) for a, b in zip(*runs))


def test_config_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"num_users": 4, "t_th": 7.5, "gain_range": [0.6, 1.5]}))
    cfg = SystemConfig.from_json(path)
    assert cfg.num_users == 4 and cfg.t_th == 7.5 and cfg.gain_range == (0.6, 1.5)
    assert cfg.b_max_dl == 40.0
    assert SystemConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(DomainError):
        SystemConfig.from_dict({"bogus": 1})
    with pytest.raises(DomainError):
        SystemConfig(t_th=0)
    with pytest.raises(DomainError):
        SystemConfig(gain_range=(2.0, 1.0))
