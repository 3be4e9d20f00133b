"""Schedules: endpoint identities, the variance-preserving constraint, forward
moments against analytic values, and both reverse integrators."""
import numpy as np
import pytest

from d2c.schedule import (
    alpha_sigma, ddpm_discrete, ddpm_reverse_step, euler_flow_step,
    linear_flow, make_schedule, perturb, vp_continuous,
)
from conftest import rng


def test_linear_flow_endpoints():
    s = linear_flow()
    assert alpha_sigma(s, 0.0) == (1.0, 0.0)
    a, sig = alpha_sigma(s, 0.5)
    assert a == 0.5 and sig == 0.5


def test_vp_variance_preserving_identity():
    s = vp_continuous()
    t = rng(0).uniform(0, 1, 10 ** 6)
    a, sig = alpha_sigma(s, t)
    assert np.max(np.abs(a * a + sig * sig - 1.0)) < 1e-12


def test_linear_flow_sums_to_one():
    s = linear_flow()
    t = rng(1).uniform(0, 1, 1000)
    a, sig = alpha_sigma(s, t)
    assert np.max(np.abs(a + sig - 1.0)) == 0.0


def test_t_domain_errors():
    with pytest.raises(ValueError):
        alpha_sigma(linear_flow(), 1.5)
    with pytest.raises(ValueError):
        alpha_sigma(vp_continuous(), -0.1)
    with pytest.raises(ValueError):
        alpha_sigma(ddpm_discrete(), 0)
    with pytest.raises(ValueError):
        alpha_sigma(ddpm_discrete(T=10), 11)


def test_ddpm_tables_consistent():
    s = ddpm_discrete(T=100)
    assert s.betas[0] == 1e-4 and s.betas[-1] == 0.02
    assert np.all(s.betas > 0) and np.all(s.betas < 1)
    # alpha-bar equals the running product of (1 - beta) and strictly decreases
    assert np.allclose(s.alphas_bar, np.cumprod(1 - s.betas), rtol=1e-12)
    assert np.all(np.diff(s.alphas_bar) < 0)


def test_make_schedule_factory():
    assert make_schedule("linear-flow").kind == "linear-flow"
    assert make_schedule("ddpm-discrete", T=10).T == 10
    with pytest.raises(ValueError):
        make_schedule("cosine")


def test_perturb_sigma_zero_returns_x0_exactly():
    s = linear_flow()
    x0 = rng(2).standard_normal(8)
    out = perturb(s, x0, 0.0, rng(3))
    assert np.array_equal(out.x_t, x0)


def test_perturb_seeded_determinism():
    s = vp_continuous()
    x0 = rng(4).standard_normal((5, 3))
    t = np.full(5, 0.3)
    a = perturb(s, x0, t, np.random.default_rng(77))
    b = perturb(s, x0, t, np.random.default_rng(77))
    assert np.array_equal(a.x_t, b.x_t) and np.array_equal(a.epsilon, b.epsilon)


def test_perturb_rejects_nonfinite():
    with pytest.raises(ValueError):
        perturb(linear_flow(), np.array([np.inf]), 0.5, rng(0))


@pytest.mark.parametrize("t", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_forward_moments_match_analytic(t):
    # 1e5 draws: mean within 4 standard errors of alpha*x0, variance within 2%
    s = vp_continuous()
    n = 10 ** 5
    x0 = np.full(n, 1.7)
    out = perturb(s, x0, t, np.random.default_rng(int(t * 1000)))
    a, sig = alpha_sigma(s, t)
    se = sig / np.sqrt(n)
    assert abs(out.x_t.mean() - a * 1.7) < 4 * se
    assert abs(out.x_t.var() - sig * sig) < 0.02 * sig * sig


def test_ddpm_reverse_step_hand_value():
    s = ddpm_discrete(T=10)
    t = 5
    beta = s.betas[t - 1]
    abar = s.alphas_bar[t - 1]
    x = np.array([0.8])
    e = np.array([-0.3])
    # independent straight-line arithmetic of the reverse mean
    want = (0.8 - beta / np.sqrt(1 - abar) * (-0.3)) / np.sqrt(1 - beta)
    got = ddpm_reverse_step(s, x, t, e, np.random.default_rng(0))
    noise = got[0] - want
    # reproduce the noise term with the same rng stream
    z = np.random.default_rng(0).standard_normal(1)[0]
    assert abs(noise - np.sqrt(beta) * z) < 1e-12


def test_ddpm_reverse_final_step_deterministic():
    s = ddpm_discrete(T=10)
    x = rng(5).standard_normal(4)
    e = rng(6).standard_normal(4)
    a = ddpm_reverse_step(s, x, 1, e, np.random.default_rng(1))
    b = ddpm_reverse_step(s, x, 1, e, np.random.default_rng(2))
    assert np.array_equal(a, b)  # rng unused at t=1


def test_ddpm_reverse_small_beta_limit():
    s = ddpm_discrete(T=1000, beta_start=1e-9, beta_end=1e-8)
    x = np.array([1.0, -2.0])
    out = ddpm_reverse_step(s, x, 1, np.zeros(2), np.random.default_rng(0))
    assert np.allclose(out, x, atol=1e-7)


def test_ddpm_reverse_t0_rejected():
    with pytest.raises(ValueError):
        ddpm_reverse_step(ddpm_discrete(), np.zeros(1), 0, np.zeros(1),
                          np.random.default_rng(0))


def test_euler_step_identity_and_formula():
    x = np.array([2.0, 3.0])
    v = np.array([0.5, -0.5])
    assert np.array_equal(euler_flow_step(x, 0.7, v, 0.0), x)
    got = euler_flow_step(x, 1.0, v, 0.25)
    assert np.allclose(got, x - 0.25 * v)
    with pytest.raises(ValueError):
        euler_flow_step(x, 0.1, v, 0.2)


def test_euler_full_integration_recovers_x0():
    # with the exact velocity v = eps - x0, integrating t: 1 -> 0 recovers x0
    r = rng(7)
    x0 = r.standard_normal(6)
    eps = r.standard_normal(6)
    v = eps - x0
    x = x0 * 0.0 + eps  # x at t=1 on the linear path
    steps = 64
    for i in range(steps):
        t = 1.0 - i / steps
        x = euler_flow_step(x, t, v, 1.0 / steps)
    assert np.max(np.abs(x - x0)) < 1e-6
