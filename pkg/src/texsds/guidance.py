"""Turning rendered views into image-space update signals.

A guidance backend owns a noise schedule, a mapping from images to its
working space (identity for the in-process analytic oracle, a remote latent
encoder for the diffusion client), and a conditional/unconditional noise
predictor. `sds_gradient` draws a timestep and a noise sample per view,
forms the noised input, applies classifier-free guidance, and returns the
working-space score-distillation gradient pulled back to image space.

The gradient convention: with denoised estimate x_hat = (z_t - sigma *
eps_hat) / alpha, the working-space gradient is

    g = w(t) * alpha(t) * sigma(t) * (eps_hat - eps) = w(t) * alpha(t)^2 * (x - x_hat)

so with uniform weighting, guidance toward a fixed target y is exactly the
gradient of 0.5 * alpha(t)^2 * ||x - y||^2.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class GuidanceConfig:
    prompt: str = ""
    negative_prompt: str = ""
    guidance_scale: float = 100.0
    t_range: tuple[float, float] = (0.02, 0.98)
    weighting: str = "uniform"  # or "sigma_sq"

    def validate(self) -> None:
        lo, hi = self.t_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"invalid timestep range [{lo}, {hi}]")
        if self.guidance_scale < 0:
            raise ConfigError("guidance_scale must be >= 0")
        if self.weighting not in ("uniform", "sigma_sq"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")


@dataclass
class NoisePrediction:
    eps_cond: np.ndarray
    eps_uncond: np.ndarray


@dataclass
class SdsStep:
    """One view's draw: schedule fraction, injected noise, noised input, weight."""

    t: float
    noise: np.ndarray
    noised_input: np.ndarray
    weight: float


@dataclass
class SdsResult:
    grad_images: np.ndarray  # same shape as the image batch
    loss_proxy: float  # mean squared weighted working-space residual
    steps: list[SdsStep] = field(default_factory=list)


def cosine_alpha_sigma(t: float) -> tuple[float, float]:
    """Cosine noise schedule: alpha = cos(pi t / 2), sigma = sin(pi t / 2)."""
    return math.cos(math.pi * t / 2.0), math.sin(math.pi * t / 2.0)


def sample_timestep(rng: np.random.Generator, t_range: tuple[float, float]) -> float:
    lo, hi = t_range
    if lo > hi:
        raise ConfigError(f"inverted timestep range [{lo}, {hi}]")
    return float(rng.uniform(lo, hi))


def cfg_combine(pred: NoisePrediction, scale: float) -> np.ndarray:
    """eps_uncond + scale * (eps_cond - eps_uncond)."""
    if pred.eps_cond.shape != pred.eps_uncond.shape:
        raise ValueError(
            f"shape mismatch: cond {pred.eps_cond.shape} vs uncond {pred.eps_uncond.shape}"
        )
    return pred.eps_uncond + scale * (pred.eps_cond - pred.eps_uncond)


def _step_weight(weighting: str, sigma: float) -> float:
    if weighting == "sigma_sq":
        return sigma * sigma
    return 1.0


class GuidanceBackend:
    """Interface every guidance backend implements.

    Backends are pure with respect to their inputs and must tolerate
    concurrent calls; the trainer issues one batched request per step.
    """

    name = "abstract"
    #: edge length of the depth conditioning map, or None for don't-care
    depth_size: int | None = None

    def encode(self, images: np.ndarray) -> np.ndarray:
        """Map an image batch (B, H, W, 3) into the working space."""
        raise NotImplementedError

    def alpha_sigma(self, t: float) -> tuple[float, float]:
        raise NotImplementedError

    def predict_noise(
        self,
        noised: np.ndarray,
        t: np.ndarray,
        depth: np.ndarray,
        prompt: str,
        negative_prompt: str,
    ) -> NoisePrediction:
        """Batched conditional and unconditional noise predictions."""
        raise NotImplementedError

    def encode_vjp(self, working_grad: np.ndarray, images: np.ndarray) -> np.ndarray:
        """Pull a working-space gradient back through the frozen encoder."""
        raise NotImplementedError


class AnalyticBackend(GuidanceBackend):
    """Optimal denoiser for the one-point data distribution {target}.

    eps_cond(z_t, t) = (z_t - alpha * target) / sigma and the unconditional
    branch equals the conditional one, so classifier-free guidance is inert.
    Depth and prompts are accepted and ignored. Works directly on pixels.
    """

    name = "analytic"
    depth_size = None

    def __init__(self, target: np.ndarray):
        target = np.asarray(target, dtype=np.float64)
        if target.min() < 0.0 or target.max() > 1.0:
            raise ConfigError("analytic target must lie in [0, 1]")
        self.target = target

    def encode(self, images: np.ndarray) -> np.ndarray:
        return np.asarray(images)

    def alpha_sigma(self, t: float) -> tuple[float, float]:
        return cosine_alpha_sigma(t)

    def predict_noise(self, noised, t, depth, prompt, negative_prompt):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        eps = np.empty_like(noised)
        for v in range(noised.shape[0]):
            alpha, sigma = cosine_alpha_sigma(float(t[v]))
            sigma = max(sigma, 1e-12)
            eps[v] = (noised[v] - alpha * self.target.astype(noised.dtype)) / sigma
        return NoisePrediction(eps_cond=eps, eps_uncond=eps.copy())

    def encode_vjp(self, working_grad, images):
        return np.asarray(working_grad)


def analytic_backend(target: np.ndarray) -> AnalyticBackend:
    """Backend whose true denoiser pulls images toward one target image."""
    return AnalyticBackend(target)


def sds_gradient(
    backend: GuidanceBackend,
    images: np.ndarray,
    depths: np.ndarray | None,
    config: GuidanceConfig,
    rng: np.random.Generator,
    steps: list[SdsStep] | None = None,
) -> SdsResult:
    """Score-distillation gradient for a batch of rendered views.

    images: (B, H, W, 3) in [0, 1]. depths: (B, h, w) conditioning maps or
    None when the backend ignores them. When `steps` is given, its (t,
    noise) draws are reused instead of sampling from rng; this is the seam
    batch-averaging and fixed-draw tests use.

    Returns the image-space gradient batch, a scalar loss proxy (mean
    squared weighted working-space residual, reporting only), and the
    per-view draws.
    """
    config.validate()
    images = np.asarray(images)
    batch = images.shape[0]
    working = backend.encode(images)

    if depths is None:
        depths = np.zeros((batch, 8, 8), dtype=np.float32)

    out_steps: list[SdsStep] = []
    noised = np.empty_like(working)
    t_vec = np.empty(batch, dtype=np.float64)
    for v in range(batch):
        if steps is not None:
            t = steps[v].t
            noise = steps[v].noise
        else:
            t = sample_timestep(rng, config.t_range)
            noise = rng.standard_normal(working[v].shape).astype(working.dtype, copy=False)
        alpha, sigma = backend.alpha_sigma(t)
        noised[v] = alpha * working[v] + sigma * noise
        t_vec[v] = t
        out_steps.append(
            SdsStep(t=t, noise=noise, noised_input=noised[v].copy(),
                    weight=_step_weight(config.weighting, sigma))
        )

    pred = backend.predict_noise(
        noised, t_vec, depths, config.prompt, config.negative_prompt
    )
    eps_hat = cfg_combine(pred, config.guidance_scale)

    grad_working = np.empty_like(working)
    for v in range(batch):
        alpha, sigma = backend.alpha_sigma(out_steps[v].t)
        grad_working[v] = (
            out_steps[v].weight * alpha * sigma * (eps_hat[v] - out_steps[v].noise)
        )

    grad_images = backend.encode_vjp(grad_working, images)
    loss_proxy = float(np.mean(np.square(grad_working)))
    return SdsResult(grad_images=grad_images, loss_proxy=loss_proxy, steps=out_steps)
