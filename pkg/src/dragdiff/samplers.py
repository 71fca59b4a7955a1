"""Samplers: plain DDIM, drag-guided DDIM, its projected-gradient form, the
gradient-estimation variant, image-to-image initialization, and the naive
pixel-space descent baseline.

All samplers run in the sigma parameterization.  One step from level t to
t - 1 is

    ddim:    x_{t-1} = x_t - (sigma_t - sigma_{t-1}) * eps_hat
    guided:  x_{t-1} = x_t - (sigma_t - sigma_{t-1}) * (eps_hat + eta_t * g)
    pgd:     x0_hat   = x_t - sigma_t * eps_hat
             x_drag   = x0_hat - gamma_t * g
             x_{t-1} = (1 - alpha_t) * x_t + alpha_t * x_drag

with g the target gradient at x0_hat.  The guided and pgd forms are the same
map written two ways (alpha_t = 1 - sigma_{t-1}/sigma_t, gamma_t =
sigma_t * eta_t); keeping both implementations lets that equivalence be
checked numerically instead of assumed.
"""

from dataclasses import dataclass, field

import numpy as np

from .denoisers import cfg_combine, denoised_estimate, predict_epsilon, predict_epsilon_batch
from .rng import generator
from .schedule import GuidanceWeights, NoiseSchedule, alpha, eta, gamma_t

__all__ = [
    "SamplerConfig",
    "Trajectory",
    "QuadraticTarget",
    "ddim_step",
    "guided_step",
    "pgd_step",
    "ge_combine",
    "img2img_init",
    "run_sampler",
    "ddim_sample_batch",
    "naive_pixel_descent",
]

SAMPLER_KINDS = ("ddim", "ddim_pgd_form", "gradient_estimation")


@dataclass
class SamplerConfig:
    """Everything that determines a sampling run (schedule, knobs, seed)."""

    schedule: NoiseSchedule
    weights: GuidanceWeights = field(default_factory=GuidanceWeights)
    sampler_kind: str = "ddim"
    seed: int = 0
    record_trajectory: bool = False
    condition: object = None

    def __post_init__(self):
        if self.sampler_kind not in SAMPLER_KINDS:
            raise ValueError(f"sampler_kind must be one of {SAMPLER_KINDS}, got {self.sampler_kind!r}")


@dataclass
class Trajectory:
    """Recorded run: states and denoised estimates are (t, array) pairs with
    t strictly decreasing; drag_track holds (t, phi(x0_hat_t)) whenever a
    guidance target was attached.  ``naive_pixel_descent`` reuses the type
    with ascending step indices instead.
    """

    states: list = field(default_factory=list)
    denoised: list = field(default_factory=list)
    drag_track: list = field(default_factory=list)
    final: np.ndarray = None


class QuadraticTarget:
    """phi(x) = scale * ||x - center||^2, the simplest guidance target.

    Exposes the same predict/grad interface as a surrogate model; used for
    analytic guidance checks where phi must have a known exact gradient.
    """

    def __init__(self, center, scale=1.0):
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)

    def predict(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return self.scale * float(np.sum(d * d))

    def grad(self, x):
        return 2.0 * self.scale * (np.asarray(x, dtype=float) - self.center)

    def value_and_grad(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return self.scale * float(np.sum(d * d)), 2.0 * self.scale * d


def _check_step_shapes(x_t, eps_hat):
    x_t = np.asarray(x_t, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: state {x_t.shape} vs eps {eps_hat.shape}")
    return x_t, eps_hat


def ddim_step(x_t, t, schedule, eps_hat):
    """x_{t-1} = x_t - (sigma_t - sigma_{t-1}) * eps_hat."""
    x_t, eps_hat = _check_step_shapes(x_t, eps_hat)
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    ds = schedule.sigmas[t] - schedule.sigmas[t - 1]
    return x_t - ds * eps_hat


def guided_step(x_t, t, schedule, eps_hat, drag_grad, weights):
    """Drag-guided step: the gradient enters as an eps-space offset.

    x_{t-1} = x_t - (sigma_t - sigma_{t-1}) * (eps_hat + eta_t * drag_grad),
    where drag_grad is the target gradient evaluated at x0_hat.
    """
    x_t, eps_hat = _check_step_shapes(x_t, eps_hat)
    drag_grad = np.asarray(drag_grad, dtype=float)
    if drag_grad.shape != x_t.shape:
        raise ValueError(f"shape mismatch: state {x_t.shape} vs grad {drag_grad.shape}")
    eta_t = eta(weights, schedule.sigmas[t])
    if eta_t == 0.0:
        return ddim_step(x_t, t, schedule, eps_hat)
    ds = schedule.sigmas[t] - schedule.sigmas[t - 1]
    return x_t - ds * (eps_hat + eta_t * drag_grad)


def pgd_step(x_t, t, schedule, eps_hat, drag_grad, weights):
    """The same update as ``guided_step`` in projected-gradient form:
    denoise, take a gradient step of size gamma_t on the estimate, damp back
    toward x_t with coefficient alpha_t.
    """
    x_t, eps_hat = _check_step_shapes(x_t, eps_hat)
    drag_grad = np.asarray(drag_grad, dtype=float)
    if drag_grad.shape != x_t.shape:
        raise ValueError(f"shape mismatch: state {x_t.shape} vs grad {drag_grad.shape}")
    sigma_t = schedule.sigmas[int(t)]
    if sigma_t <= 0:
        raise ValueError(f"pgd form needs sigma_t > 0, got {sigma_t}")
    x0_hat = denoised_estimate(x_t, sigma_t, eps_hat)
    x_drag = x0_hat - gamma_t(weights, sigma_t) * drag_grad
    a = alpha(schedule, t)
    return (1.0 - a) * x_t + a * x_drag


def ge_combine(eps_curr, eps_prev, gamma):
    """Gradient-estimation mix gamma * eps_curr + (1 - gamma) * eps_prev.

    gamma = 1 returns eps_curr bit-exactly (plain DDIM); the general case is
    computed as eps_prev + gamma * (eps_curr - eps_prev) so identical inputs
    pass through unchanged for every gamma.
    """
    eps_curr = np.asarray(eps_curr, dtype=float)
    eps_prev = np.asarray(eps_prev, dtype=float)
    if eps_curr.shape != eps_prev.shape:
        raise ValueError(f"shape mismatch {eps_curr.shape} vs {eps_prev.shape}")
    if gamma == 1.0:
        return eps_curr.copy()
    return eps_prev + gamma * (eps_curr - eps_prev)


def img2img_init(x0, sigma_T, seed, *path):
    """Noised start state x_T = x0 + sigma_T * eps, eps ~ N(0, I).

    The draw comes from the counter-based stream (seed, *path), so callers
    fanning out many runs derive independent noises from one root seed.
    """
    x0 = np.asarray(x0, dtype=float)
    sigma_T = float(sigma_T)
    if not np.isfinite(sigma_T) or sigma_T < 0:
        raise ValueError(f"sigma_T must be finite and >= 0, got {sigma_T}")
    eps = generator(seed, *path).standard_normal(x0.shape)
    return x0 + sigma_T * eps


def run_sampler(denoiser, guidance_target, config, init):
    """Iterate the configured step rule from t = T down to 1.

    ``denoiser`` is anything with a ``predict_epsilon(y, sigma, condition)``
    method.  ``guidance_target``, when given, must expose ``predict(x)`` and
    ``grad(x)`` (a fused ``value_and_grad(x)`` is used when present); its
    value at each denoised estimate is recorded in ``drag_track`` and its
    gradient steers the update.  If
    ``config.condition`` is set, predictions are the classifier-free
    combination of the unconditional and conditional branches with weight
    ``config.weights.cfg_w``.  The gradient_estimation kind mixes in the
    previous step's raw prediction; at t = T (no previous prediction) it
    falls back to plain DDIM.
    """
    sched = config.schedule
    weights = config.weights
    x = np.asarray(init, dtype=float).copy()
    den_shape = getattr(denoiser, "shape", None)
    if den_shape is not None and x.shape != den_shape:
        raise ValueError(f"init shape {x.shape} != denoiser shape {den_shape}")

    traj = Trajectory()
    if config.record_trajectory:
        traj.states.append((sched.T, x.copy()))

    eps_prev = None
    for t in range(sched.T, 0, -1):
        sigma_t = float(sched.sigmas[t])
        if config.condition is None:
            eps_raw = predict_epsilon(denoiser, x, sigma_t, None)
        else:
            eps_u = predict_epsilon(denoiser, x, sigma_t, None)
            eps_c = predict_epsilon(denoiser, x, sigma_t, config.condition)
            eps_raw = cfg_combine(eps_u, eps_c, weights.cfg_w)

        if config.sampler_kind == "gradient_estimation" and eps_prev is not None:
            eps_hat = ge_combine(eps_raw, eps_prev, weights.ge_gamma)
        else:
            eps_hat = eps_raw
        eps_prev = eps_raw

        x0_hat = denoised_estimate(x, sigma_t, eps_hat)
        if config.record_trajectory:
            traj.denoised.append((t, x0_hat))

        if guidance_target is not None:
            vg = getattr(guidance_target, "value_and_grad", None)
            if vg is not None:
                phi, g = vg(x0_hat)
            else:
                phi, g = guidance_target.predict(x0_hat), guidance_target.grad(x0_hat)
            traj.drag_track.append((t, float(phi)))
        else:
            g = None

        if config.sampler_kind == "ddim_pgd_form":
            if g is None:
                g = np.zeros_like(x)
            x = pgd_step(x, t, sched, eps_hat, g, weights)
        elif g is not None:
            x = guided_step(x, t, sched, eps_hat, g, weights)
        else:
            x = ddim_step(x, t, sched, eps_hat)

        if config.record_trajectory:
            traj.states.append((t - 1, x.copy()))

    traj.final = x
    return traj


def ddim_sample_batch(denoiser, schedule, inits, condition=None):
    """Plain unguided DDIM over a batch of initial states (n, *shape)."""
    X = np.asarray(inits, dtype=float).copy()
    for t in range(schedule.T, 0, -1):
        sigma_t = float(schedule.sigmas[t])
        eps = predict_epsilon_batch(denoiser, X, sigma_t, condition)
        X -= (sigma_t - schedule.sigmas[t - 1]) * eps
    return X


def naive_pixel_descent(model, x0, steps, step_size):
    """Plain gradient descent x <- x - step_size * grad(x) on the target.

    Records phi at every iterate (indices ascend 0..steps here, unlike
    sampler trajectories).  The demo point of this baseline: phi drops while
    the image drifts off the data manifold.
    """
    steps = int(steps)
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    step_size = float(step_size)
    if not np.isfinite(step_size) or step_size < 0:
        raise ValueError(f"step_size must be finite and >= 0, got {step_size}")

    x = np.asarray(x0, dtype=float).copy()
    traj = Trajectory()
    traj.states.append((0, x.copy()))
    traj.drag_track.append((0, float(model.predict(x))))
    for k in range(1, steps + 1):
        g = model.grad(x)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"nonfinite gradient at descent step {k} (|x| max {np.max(np.abs(x)):.3g})"
            )
        x = x - step_size * g
        traj.states.append((k, x.copy()))
        traj.drag_track.append((k, float(model.predict(x))))
    traj.final = x
    return traj
