import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dragdiff.denoisers import MixtureDenoiser
from dragdiff.rng import generator
from dragdiff.samplers import (
    QuadraticTarget,
    SamplerConfig,
    ddim_sample_batch,
    ddim_step,
    ge_combine,
    guided_step,
    img2img_init,
    naive_pixel_descent,
    pgd_step,
    run_sampler,
)
from dragdiff.schedule import GuidanceWeights, NoiseSchedule, make_schedule

TWO = NoiseSchedule(sigmas=np.array([0.0, 1.0, 2.0]))
W400 = GuidanceWeights(eta0=400.0)


def test_ddim_step_worked_example():
    out = ddim_step(np.array([4.0]), 2, TWO, np.array([2.0]))
    assert out[0] == 2.0


def test_ddim_step_degenerate_spacing():
    s = NoiseSchedule(sigmas=np.array([0.0, 1.0, 1.0 + 1e-12]))
    x = np.array([3.3])
    out = ddim_step(x, 2, s, np.array([5.0]))
    assert abs(out[0] - x[0]) < 1e-10


def test_ddim_step_bounds():
    with pytest.raises(ValueError):
        ddim_step(np.array([0.0]), 0, TWO, np.array([0.0]))
    with pytest.raises(ValueError):
        ddim_step(np.array([0.0]), 3, TWO, np.array([0.0]))
    with pytest.raises(ValueError):
        ddim_step(np.array([0.0, 1.0]), 1, TWO, np.array([0.0]))


def test_guided_equals_pgd_on_worked_instance():
    """x_t=4, sigma 2 -> 1, eps=2, grad=0.001, eta0=400 gives 1.6422291."""
    x = np.array([4.0])
    eps = np.array([2.0])
    grad = np.array([0.001])
    a = guided_step(x, 2, TWO, eps, grad, W400)
    b = pgd_step(x, 2, TWO, eps, grad, W400)
    assert a[0] == 1.6422291236000337
    assert np.array_equal(a, b)


def test_guided_step_zero_eta_is_ddim():
    x = generator(31, 0).random((3, 4, 4))
    eps = generator(31, 1).random((3, 4, 4))
    grad = generator(31, 2).random((3, 4, 4))
    base = ddim_step(x, 2, TWO, eps)
    off = guided_step(x, 2, TWO, eps, grad, GuidanceWeights(eta0=0.0))
    assert np.array_equal(base, off)
    zero_grad = guided_step(x, 2, TWO, eps, np.zeros_like(grad), W400)
    np.testing.assert_allclose(base, zero_grad, atol=1e-15)


def test_pgd_rejects_zero_sigma():
    s = NoiseSchedule(sigmas=np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        pgd_step(np.array([1.0]), 0, s, np.array([0.0]), np.array([0.0]), W400)


def test_pgd_final_step_lands_on_drag_estimate():
    # sigma_{t-1} = 0 means alpha = 1: the output is exactly x_drag
    x = np.array([2.0])
    eps = np.array([1.0])
    grad = np.array([0.5])
    out = pgd_step(x, 1, TWO, eps, grad, W400)
    sigma = 1.0
    gamma = 400.0 * sigma / np.sqrt(sigma ** 2 + 1) * sigma
    assert out[0] == pytest.approx((x - sigma * eps - gamma * grad)[0], rel=1e-14)


def test_ge_combine_identities():
    rng = generator(32, 0)
    a, b = rng.random((2, 3, 2, 2))
    assert np.array_equal(ge_combine(a, b, 1.0), a)
    assert ge_combine(np.array([2.0]), np.array([1.0]), 2.0)[0] == 3.0
    for gamma in (-1.0, 0.0, 0.5, 2.0):
        assert np.array_equal(ge_combine(a, a, gamma), a)
    with pytest.raises(ValueError):
        ge_combine(a, b[:1], 2.0)


def test_img2img_init_contract():
    x0 = generator(33, 0).random((3, 5, 5))
    assert np.array_equal(img2img_init(x0, 0.0, 1), x0)
    a = img2img_init(x0, 2.0, 7, 3)
    b = img2img_init(x0, 2.0, 7, 3)
    c = img2img_init(x0, 2.0, 7, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        img2img_init(x0, -1.0, 0)


def test_img2img_moments():
    big = img2img_init(np.zeros(10_000), 2.0, 12)
    assert abs(float(big.mean())) < 0.06
    assert abs(float(big.std()) - 2.0) < 0.05


def quad_mix():
    means = np.array([[-1.0], [1.0]])
    return MixtureDenoiser(means)


def test_run_sampler_single_point_contracts():
    mix = MixtureDenoiser(np.array([[0.7, -0.2]]))
    sched = make_schedule("log_linear", 20, 0.0, 5.0)
    cfg = SamplerConfig(schedule=sched, sampler_kind="ddim", seed=0)
    traj = run_sampler(mix, None, cfg, np.array([3.0, 3.0]))
    np.testing.assert_allclose(traj.final, [0.7, -0.2], atol=1e-6)


def test_run_sampler_symmetry_axis():
    mix = quad_mix()
    sched = make_schedule("linear", 10, 0.0, 3.0)
    cfg = SamplerConfig(schedule=sched, sampler_kind="ddim", seed=0, record_trajectory=True)
    traj = run_sampler(mix, None, cfg, np.array([0.0]))
    for t, state in traj.states:
        assert state[0] == 0.0


def test_run_sampler_trajectory_bookkeeping():
    mix = quad_mix()
    sched = make_schedule("linear", 6, 0.0, 2.0)
    target = QuadraticTarget(np.array([0.3]), scale=1e-3)
    cfg = SamplerConfig(
        schedule=sched,
        weights=GuidanceWeights(eta0=1.0),
        sampler_kind="ddim",
        seed=0,
        record_trajectory=True,
    )
    traj = run_sampler(mix, target, cfg, np.array([1.5]))
    assert [t for t, _ in traj.states] == [6, 5, 4, 3, 2, 1, 0]
    assert [t for t, _ in traj.denoised] == [6, 5, 4, 3, 2, 1]
    assert [t for t, _ in traj.drag_track] == [6, 5, 4, 3, 2, 1]
    assert np.array_equal(traj.states[-1][1], traj.final)


def test_run_sampler_eta0_zero_matches_detached_target():
    mix = quad_mix()
    sched = make_schedule("log_linear", 8, 0.0, 4.0)
    init = img2img_init(np.zeros(1), 4.0, 5)
    plain = run_sampler(
        mix, None, SamplerConfig(schedule=sched, sampler_kind="ddim", seed=0), init
    )
    tracked = run_sampler(
        mix,
        QuadraticTarget(np.zeros(1)),
        SamplerConfig(
            schedule=sched,
            weights=GuidanceWeights(eta0=0.0),
            sampler_kind="ddim",
            seed=0,
        ),
        init,
    )
    assert np.array_equal(plain.final, tracked.final)
    assert len(tracked.drag_track) == 8


def test_run_sampler_guided_vs_pgd_kind():
    mix = quad_mix()
    sched = make_schedule("log_linear", 12, 0.0, 4.0)
    target = QuadraticTarget(np.array([0.5]), scale=1e-3)
    init = img2img_init(np.zeros(1), 4.0, 6)
    a = run_sampler(
        mix,
        target,
        SamplerConfig(schedule=sched, weights=W400, sampler_kind="ddim", seed=0),
        init,
    )
    b = run_sampler(
        mix,
        target,
        SamplerConfig(schedule=sched, weights=W400, sampler_kind="ddim_pgd_form", seed=0),
        init,
    )
    scale = max(abs(float(a.final[0])), abs(float(b.final[0])), 1e-300)
    assert abs(float(a.final[0] - b.final[0])) / scale <= 1e-7


def test_run_sampler_ge_gamma_one_is_ddim():
    mix = quad_mix()
    sched = make_schedule("log_linear", 10, 0.0, 3.0)
    init = img2img_init(np.zeros(1), 3.0, 9)
    ddim = run_sampler(
        mix, None, SamplerConfig(schedule=sched, sampler_kind="ddim", seed=0), init
    )
    ge = run_sampler(
        mix,
        None,
        SamplerConfig(
            schedule=sched,
            weights=GuidanceWeights(ge_gamma=1.0),
            sampler_kind="gradient_estimation",
            seed=0,
        ),
        init,
    )
    assert np.array_equal(ddim.final, ge.final)


def test_run_sampler_ge_differs_from_ddim_at_other_gamma():
    mix = quad_mix()
    sched = make_schedule("log_linear", 10, 0.0, 3.0)
    init = img2img_init(np.zeros(1), 3.0, 9)
    ddim = run_sampler(
        mix, None, SamplerConfig(schedule=sched, sampler_kind="ddim", seed=0), init
    )
    ge = run_sampler(
        mix,
        None,
        SamplerConfig(
            schedule=sched,
            weights=GuidanceWeights(ge_gamma=2.0),
            sampler_kind="gradient_estimation",
            seed=0,
        ),
        init,
    )
    assert not np.array_equal(ddim.final, ge.final)


def labeled_mix():
    return MixtureDenoiser(
        np.array([[-2.0], [2.0]]), labels=["lo", "hi"]
    )


class _SingleBranchDenoiser:
    """Forwards every query to one fixed condition of a labeled mixture."""

    def __init__(self, mix, condition):
        self.mix = mix
        self.fixed = condition
        self.shape = mix.shape

    def predict_epsilon(self, y, sigma, condition=None):
        return self.mix.predict_epsilon(y, sigma, self.fixed)


def test_run_sampler_cfg_degenerate_weights():
    mix = labeled_mix()
    sched = make_schedule("log_linear", 6, 0.0, 3.0)
    init = img2img_init(np.zeros(1), 3.0, 10)
    cond_run = run_sampler(
        mix,
        None,
        SamplerConfig(
            schedule=sched,
            weights=GuidanceWeights(cfg_w=1.0),
            sampler_kind="ddim",
            seed=0,
            condition="hi",
        ),
        init,
    )
    cond_only = run_sampler(
        _SingleBranchDenoiser(mix, "hi"),
        None,
        SamplerConfig(schedule=sched, sampler_kind="ddim", seed=0),
        init,
    )
    assert np.array_equal(cond_run.final, cond_only.final)

    uncond_run = run_sampler(
        mix,
        None,
        SamplerConfig(
            schedule=sched,
            weights=GuidanceWeights(cfg_w=0.0),
            sampler_kind="ddim",
            seed=0,
            condition="hi",
        ),
        init,
    )
    uncond_only = run_sampler(
        _SingleBranchDenoiser(mix, None),
        None,
        SamplerConfig(schedule=sched, sampler_kind="ddim", seed=0),
        init,
    )
    assert np.array_equal(uncond_run.final, uncond_only.final)


def test_sampler_config_rejects_unknown_kind():
    sched = make_schedule("linear", 2, 0.0, 1.0)
    with pytest.raises(ValueError):
        SamplerConfig(schedule=sched, sampler_kind="euler")


def test_batch_sampler_matches_loop():
    rng = generator(34, 0)
    means = rng.random((4, 2, 3, 3))
    mix = MixtureDenoiser(means)
    sched = make_schedule("log_linear", 7, 0.0, 2.0)
    inits = rng.random((5, 2, 3, 3)) * 2
    batch = ddim_sample_batch(mix, sched, inits)
    for i in range(5):
        one = run_sampler(
            mix, None, SamplerConfig(schedule=sched, sampler_kind="ddim", seed=0), inits[i]
        )
        np.testing.assert_allclose(batch[i], one.final, atol=1e-12)


def test_naive_descent_quadratic_converges():
    target = QuadraticTarget(np.array([1.0, -2.0]))
    traj = naive_pixel_descent(target, np.array([5.0, 5.0]), 50, 0.2)
    phis = [p for _, p in traj.drag_track]
    assert all(b <= a for a, b in zip(phis, phis[1:]))
    np.testing.assert_allclose(traj.final, [1.0, -2.0], atol=1e-6)
    assert len(traj.states) == 51


def test_naive_descent_single_step_and_validation():
    target = QuadraticTarget(np.zeros(2))
    traj = naive_pixel_descent(target, np.ones(2), 1, 0.25)
    np.testing.assert_allclose(traj.final, 0.5)
    with pytest.raises(ValueError):
        naive_pixel_descent(target, np.ones(2), 0, 0.1)
    with pytest.raises(ValueError):
        naive_pixel_descent(target, np.ones(2), 5, -0.1)


def test_naive_descent_zero_scale_stays_put():
    target = QuadraticTarget(np.zeros(3), scale=0.0)
    traj = naive_pixel_descent(target, np.ones(3), 5, 1.0)
    assert np.array_equal(traj.final, np.ones(3))
    assert all(p == 0.0 for _, p in traj.drag_track)


def test_naive_descent_aborts_on_blowup():
    # step size far above 1/L makes the quadratic iterate diverge to inf
    target = QuadraticTarget(np.zeros(2), scale=1e150)
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        naive_pixel_descent(target, np.full(2, 1e200), 10, 1e10)


@settings(deadline=None, max_examples=60)
@given(
    st.floats(0.2, 10.0),
    st.floats(0.01, 0.99),
    st.floats(-3.0, 3.0),
    st.floats(-1.0, 1.0),
    st.floats(0.0, 500.0),
)
def test_guided_and_pgd_forms_agree(sigma_t, ratio, x, grad, eta0):
    """The eps-offset and projected-gradient forms are the same affine map."""
    sched = NoiseSchedule(sigmas=np.array([0.0, ratio * sigma_t, sigma_t]))
    w = GuidanceWeights(eta0=eta0)
    xs = np.array([x])
    eps = np.array([0.3 * x - 0.1])
    g = np.array([grad])
    a = guided_step(xs, 2, sched, eps, g, w)
    b = pgd_step(xs, 2, sched, eps, g, w)
    scale = max(abs(float(a[0])), abs(float(b[0])), 1e-300)
    assert abs(float(a[0] - b[0])) / scale <= 1e-9
