"""Noise predictors.

The central object is an exact denoiser for a Gaussian-mixture data
distribution: for data x ~ sum_i pi_i N(mu_i, s_i^2 I) and observation
y = x + sigma * eps, the minimizer of E || eps_hat(y, sigma) - eps ||^2 is

    eps_hat = (y - E[x | y]) / sigma,

with posterior component weights proportional to
pi_i (s_i^2 + sigma^2)^(-d/2) exp(-||y - mu_i||^2 / (2 (s_i^2 + sigma^2)))
and per-component posterior means (s_i^2 y + sigma^2 mu_i) / (s_i^2 + sigma^2).
An empirical dataset is the special case s_i = 0.  Because the denoiser is
exact, every sampler identity downstream can be checked against analytic
truth instead of a trained network.
"""

import json
import math
import os

import numpy as np

from .imageops import load_png
from .rng import generator

__all__ = [
    "MixtureDenoiser",
    "predict_epsilon",
    "predict_epsilon_batch",
    "cfg_combine",
    "denoised_estimate",
    "mc_training_loss",
    "sample_prior",
    "load_mixture",
    "empirical_denoiser",
]

# n * K * d threshold below which the batched posterior uses the exact
# elementwise difference tensor instead of the gemm expansion of ||y - mu||^2
_DIFF_PATH_BUDGET = 1 << 25


class MixtureDenoiser:
    """Exact eps-predictor for an isotropic Gaussian mixture.

    Immutable after construction.  ``labels`` optionally tags each component
    with a discrete condition; conditional prediction restricts the mixture
    to components whose tag matches.
    """

    def __init__(self, means, iso_stds=None, weights=None, labels=None):
        means = [np.asarray(m, dtype=float) for m in means]
        if len(means) == 0:
            raise ValueError("mixture needs at least one component")
        shape = means[0].shape
        for m in means:
            if m.shape != shape:
                raise ValueError(f"component shapes differ: {m.shape} vs {shape}")
        K = len(means)
        flat = np.stack([m.ravel() for m in means])
        if not np.all(np.isfinite(flat)):
            raise ValueError("component means must be finite")

        if iso_stds is None:
            iso_stds = np.zeros(K)
        iso_stds = np.asarray(iso_stds, dtype=float)
        if iso_stds.shape != (K,) or not np.all(np.isfinite(iso_stds)):
            raise ValueError("iso_stds must be K finite values")
        if np.any(iso_stds < 0):
            raise ValueError("iso_stds must be >= 0")

        if weights is None:
            weights = np.full(K, 1.0 / K)
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (K,) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be K finite values")
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        weights = weights / weights.sum()

        if labels is not None:
            labels = tuple(labels)
            if len(labels) != K:
                raise ValueError("labels must match component count")

        self.shape = shape
        self.dim = flat.shape[1]
        self.means = flat
        self.iso_stds = iso_stds
        self.weights = weights
        self.labels = labels
        for arr in (self.means, self.iso_stds, self.weights):
            arr.setflags(write=False)

    @property
    def n_components(self):
        return len(self.weights)

    def _component_mask(self, condition):
        if condition is None:
            return slice(None)
        if self.labels is None:
            raise ValueError(f"condition {condition!r} given but mixture has no labels")
        idx = np.array([i for i, lab in enumerate(self.labels) if lab == condition])
        if idx.size == 0:
            raise ValueError(f"no component matches condition {condition!r}")
        return idx

    def predict_epsilon(self, y, sigma, condition=None):
        out = self.predict_epsilon_batch(np.asarray(y, dtype=float)[None], sigma, condition)
        return out[0]

    def predict_epsilon_batch(self, Y, sigma, condition=None):
        """Vectorized eps_hat for a batch Y of shape (n, *self.shape)."""
        sigma = float(sigma)
        if not math.isfinite(sigma) or sigma <= 0:
            raise ValueError(f"sigma must be finite and > 0, got {sigma}")
        Y = np.asarray(Y, dtype=float)
        if Y.shape[1:] != self.shape:
            raise ValueError(f"state shape {Y.shape[1:]} != mixture shape {self.shape}")
        n = Y.shape[0]
        Yf = Y.reshape(n, self.dim)

        sel = self._component_mask(condition)
        mu = self.means[sel]
        s2 = self.iso_stds[sel] ** 2
        pi = self.weights[sel]
        pi = pi / pi.sum()
        K = len(pi)
        v = s2 + sigma * sigma

        if n * K * self.dim <= _DIFF_PATH_BUDGET:
            diff = Yf[:, None, :] - mu[None, :, :]
            sq = np.einsum("nkd,nkd->nk", diff, diff)
        else:
            sq = (
                np.einsum("nd,nd->n", Yf, Yf)[:, None]
                + np.einsum("kd,kd->k", mu, mu)[None, :]
                - 2.0 * Yf @ mu.T
            )
            np.maximum(sq, 0.0, out=sq)

        logw = np.log(pi)[None, :] - 0.5 * self.dim * np.log(v)[None, :] - sq / (2.0 * v)[None, :]
        logw -= logw.max(axis=1, keepdims=True)
        r = np.exp(logw)
        r /= r.sum(axis=1, keepdims=True)

        # E[x|y] = (sum_i r_i s_i^2/v_i) y + sum_i r_i (sigma^2/v_i) mu_i
        y_coef = r @ (s2 / v)
        post = (r * (sigma * sigma / v)[None, :]) @ mu
        Ex = y_coef[:, None] * Yf + post
        eps = (Yf - Ex) / sigma
        return eps.reshape(Y.shape)

    def sample(self, n, rng, condition=None):
        """Draw n points from the (optionally restricted) mixture."""
        sel = self._component_mask(condition)
        mu = self.means[sel]
        s = self.iso_stds[sel]
        pi = self.weights[sel]
        pi = pi / pi.sum()
        comp = rng.choice(len(pi), size=n, p=pi)
        x = mu[comp] + s[comp, None] * rng.standard_normal((n, self.dim))
        return x.reshape((n,) + self.shape)


def predict_epsilon(denoiser, y, sigma, condition=None):
    """eps_hat(y, sigma) for any denoiser exposing ``predict_epsilon``."""
    return denoiser.predict_epsilon(y, sigma, condition)


def predict_epsilon_batch(denoiser, Y, sigma, condition=None):
    fn = getattr(denoiser, "predict_epsilon_batch", None)
    if fn is not None:
        return fn(Y, sigma, condition)
    return np.stack([denoiser.predict_epsilon(y, sigma, condition) for y in Y])


def cfg_combine(eps_uncond, eps_cond, w):
    """Classifier-free combination (1 - w) * eps_uncond + w * eps_cond.

    w = 0 and w = 1 return the respective input bit-exactly; the general
    case uses eps_uncond + w * (eps_cond - eps_uncond), which is the same
    affine map and leaves identical predictions unchanged for every w.
    """
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    eps_cond = np.asarray(eps_cond, dtype=float)
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch {eps_uncond.shape} vs {eps_cond.shape}")
    if w == 0.0:
        return eps_uncond.copy()
    if w == 1.0:
        return eps_cond.copy()
    return eps_uncond + w * (eps_cond - eps_uncond)


def denoised_estimate(x_t, sigma_t, eps_hat):
    """One-shot denoised estimate x0_hat = x_t - sigma_t * eps_hat."""
    x_t = np.asarray(x_t, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {x_t.shape} vs {eps_hat.shape}")
    return x_t - sigma_t * eps_hat


def mc_training_loss(denoiser, schedule, n_samples, seed, predictor=None):
    """Monte-Carlo estimate of E || eps_hat(x + sigma eps, sigma) - eps ||^2.

    x is drawn from ``denoiser``'s mixture, sigma uniformly from the
    schedule's positive levels, eps standard normal.  ``predictor`` swaps in
    an alternative eps-model evaluated on the same draws (the data
    distribution still comes from ``denoiser``), which makes paired
    comparisons possible; it is either another denoiser object or a plain
    callable (Y, sigma) -> eps_hat over batches.  Deterministic given seed.
    """
    n_samples = int(n_samples)
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    levels = schedule.sigmas[schedule.sigmas > 0]
    if levels.size == 0:
        raise ValueError("schedule has no positive noise levels")
    if predictor is None:
        predict = lambda Y, s: predict_epsilon_batch(denoiser, Y, s)
    elif hasattr(predictor, "predict_epsilon"):
        predict = lambda Y, s: predict_epsilon_batch(predictor, Y, s)
    else:
        predict = predictor

    rng = generator(seed)
    lev = rng.integers(0, levels.size, n_samples)
    x = denoiser.sample(n_samples, rng)
    eps = rng.standard_normal(x.shape)

    total = 0.0
    for li in range(levels.size):
        mask = lev == li
        if not np.any(mask):
            continue
        sigma = float(levels[li])
        y = x[mask] + sigma * eps[mask]
        eps_hat = np.asarray(predict(y, sigma))
        if eps_hat.shape != y.shape:
            raise ValueError(f"predictor returned shape {eps_hat.shape}, want {y.shape}")
        resid = eps_hat - eps[mask]
        total += float(np.sum(resid * resid))
    return total / n_samples


def sample_prior(denoiser, n, seed, condition=None):
    """Seeded convenience wrapper around ``MixtureDenoiser.sample``."""
    return denoiser.sample(n, generator(seed), condition)


def empirical_denoiser(images, labels=None, iso_std=0.0):
    """Exact denoiser for the empirical distribution of ``images``.

    Each image is one mixture component with std ``iso_std`` (0 for the pure
    empirical case) and uniform weight.
    """
    images = list(images)
    stds = np.full(len(images), float(iso_std))
    return MixtureDenoiser(images, iso_stds=stds, labels=labels)


def load_mixture(path, dataset_dir=None):
    """Load a mixture spec from JSON.

    Layout: {"shape": [C, H, W], "components": [{"mean": [...] or
    {"png": "relative/path.png"}, "iso_std": s, "weight": w, "label": tag}]}.
    PNG references are resolved against ``dataset_dir`` (defaults to the
    spec file's directory).
    """
    with open(path) as fh:
        spec = json.load(fh)
    shape = tuple(spec["shape"])
    base = dataset_dir if dataset_dir is not None else os.path.dirname(os.path.abspath(path))

    means, stds, weights, labels = [], [], [], []
    for i, comp in enumerate(spec["components"]):
        mean = comp["mean"]
        if isinstance(mean, dict):
            img = load_png(os.path.join(base, mean["png"]))
            if img.shape != shape:
                raise ValueError(f"component {i}: PNG shape {img.shape} != {shape}")
            means.append(img)
        else:
            arr = np.asarray(mean, dtype=float)
            if arr.size != int(np.prod(shape)):
                raise ValueError(f"component {i}: mean length {arr.size} != prod{shape}")
            means.append(arr.reshape(shape))
        stds.append(float(comp.get("iso_std", 0.0)))
        weights.append(float(comp.get("weight", 1.0)))
        labels.append(comp.get("label"))

    has_labels = any(lab is not None for lab in labels)
    return MixtureDenoiser(
        means,
        iso_stds=np.array(stds),
        weights=np.array(weights),
        labels=labels if has_labels else None,
    )
