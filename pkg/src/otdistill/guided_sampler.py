"""Deterministic DDIM rollout over mixture latents with OT and diversity guidance.

The denoiser is the exact posterior mean of the known class mixture, so the
only learned-model stand-in is closed form. Each reverse step subtracts
rho * grad G_I + gamma * grad G_D + beta1 * grad G_W evaluated at z_t; the
opt-in "noise" guidance schedule scales that kick by sqrt(1 - alpha_bar_t).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from otdistill import kernels
from otdistill.data_gen import GmmSpec, LabeledDataset
from otdistill.errors import DistillError, InvalidInput, SamplingDiverged
from otdistill.ot_core import (
    SinkhornResult,
    cost_matrix,
    grad_fixed_plan,
    scaled_regularization,
    sinkhorn_uniform,
)
from otdistill.streams import make_rng, stream_id

logger = logging.getLogger(__name__)

LAMBDA_MODES = ("adaptive", "absolute")
GUIDANCE_METRICS = ("ot", "mmd")
GUIDANCE_SCHEDULES = ("constant", "noise")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alpha_bars: np.ndarray  # entry t-1 holds alpha_bar_t, t = 1..T_D

    def __post_init__(self) -> None:
        values = np.asarray(self.alpha_bars, dtype=np.float64)
        object.__setattr__(self, "alpha_bars", values)
        if values.ndim != 1 or values.size < 1:
            raise InvalidInput("noise schedule needs at least one step")
        if np.any(values <= 0) or np.any(values > 1):
            raise InvalidInput("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(values) >= 0):
            raise InvalidInput("alpha_bar must be strictly decreasing in t")
        if values[-1] > 0.05:
            raise InvalidInput("final alpha_bar must be <= 0.05", details={"alpha_bar_T": float(values[-1])})

    @property
    def steps(self) -> int:
        return int(self.alpha_bars.size)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.steps:
            raise InvalidInput("diffusion step out of range", details={"t": t, "steps": self.steps})
        return float(self.alpha_bars[t - 1])

    @classmethod
    def linear(
        cls,
        steps: int = 50,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        train_steps: int = 1000,
    ) -> "NoiseSchedule":
        """DDIM sub-sampling of a linear-beta DDPM schedule."""
        if not 1 <= steps <= train_steps:
            raise InvalidInput("steps must be between 1 and train_steps", details={"steps": steps})
        betas = np.linspace(beta_start, beta_end, train_steps)
        cumulative = np.cumprod(1.0 - betas)
        idx = np.round(np.linspace(0, train_steps - 1, steps)).astype(int)
        return cls(alpha_bars=cumulative[idx])


@dataclass
class SamplerState:
    class_id: int
    accumulated: np.ndarray
    current: np.ndarray
    step: int


@dataclass(frozen=True)
class GuidanceWeights:
    beta1: float = 1.0
    gamma: float = 0.05
    rho: float = 0.0
    lambda1: float = 1000.0

    def __post_init__(self) -> None:
        for name in ("beta1", "gamma", "rho", "lambda1"):
            if getattr(self, name) < 0:
                raise InvalidInput(f"guidance weight {name} must be >= 0")

    @property
    def active(self) -> bool:
        return self.beta1 > 0 or self.gamma > 0 or self.rho > 0


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    sinkhorn_iters: int = 20
    batch_size: int = 64
    p: float = 1.0
    lambda_mode: str = "adaptive"
    lambda_scale: float = 0.1
    guidance_metric: str = "ot"
    mmd_bandwidth: float = 0.0
    divergence_factor: float = 10.0
    guidance_schedule: str = "constant"

    def __post_init__(self) -> None:
        if self.lambda_mode not in LAMBDA_MODES:
            raise InvalidInput("unknown lambda mode", details={"lambda_mode": self.lambda_mode})
        if self.guidance_schedule not in GUIDANCE_SCHEDULES:
            raise InvalidInput("unknown guidance schedule", details={"guidance_schedule": self.guidance_schedule})
        if self.guidance_metric not in GUIDANCE_METRICS:
            raise InvalidInput("unknown guidance metric", details={"guidance_metric": self.guidance_metric})
        if self.batch_size < 1 or self.sinkhorn_iters < 1 or self.steps < 1:
            raise InvalidInput("batch_size, sinkhorn_iters and steps must be >= 1")


InfluenceHook = Callable[[SamplerState, int], np.ndarray]


def noise_latent(z0, alpha_bar: float, noise) -> np.ndarray:
    return np.sqrt(alpha_bar) * np.asarray(z0, dtype=np.float64) + np.sqrt(1.0 - alpha_bar) * np.asarray(noise, dtype=np.float64)


def forward_noise(z0, t: int, schedule: NoiseSchedule, noise) -> np.ndarray:
    if t < 1:
        raise InvalidInput("forward noising needs t >= 1", details={"t": t})
    return noise_latent(z0, schedule.alpha_bar(t), noise)


def posterior_mean(z_t, alpha_bar: float, class_id: int, spec: GmmSpec) -> np.ndarray:
    """E[z0 | z_t, c] for the class mixture under z_t = sqrt(ab) z0 + sqrt(1 - ab) eps."""
    if not 0 <= class_id < spec.num_classes:
        raise InvalidInput("class not present in the mixture spec", details={"class": class_id})
    z_t = np.asarray(z_t, dtype=np.float64)
    means = spec.mode_means[class_id]
    s2 = spec.mode_std**2
    root = np.sqrt(alpha_bar)
    var = alpha_bar * s2 + (1.0 - alpha_bar)
    diff = z_t[None, :] - root * means
    with np.errstate(divide="ignore"):
        log_resp = np.log(spec.mode_weights[class_id]) - 0.5 * np.sum(diff**2, axis=1) / var
    resp = np.exp(log_resp - logsumexp(log_resp))
    mode_posteriors = means + (root * s2 / var) * diff
    return resp @ mode_posteriors


def analytic_denoiser(z_t, t: int, class_id: int, spec: GmmSpec, schedule: NoiseSchedule) -> np.ndarray:
    alpha_bar = schedule.alpha_bar(t)
    if alpha_bar >= 1.0:
        raise DistillError("invalid_schedule", "denoiser undefined where alpha_bar = 1", details={"t": t})
    mean = posterior_mean(z_t, alpha_bar, class_id, spec)
    return (np.asarray(z_t, dtype=np.float64) - np.sqrt(alpha_bar) * mean) / np.sqrt(1.0 - alpha_bar)


def predicted_clean(z_t, eps_hat, alpha_bar: float) -> np.ndarray:
    return (np.asarray(z_t) - np.sqrt(1.0 - alpha_bar) * np.asarray(eps_hat)) / np.sqrt(alpha_bar)


def ddim_update(z_t, eps_hat, alpha_bar: float, alpha_bar_prev: float) -> np.ndarray:
    z0_hat = predicted_clean(z_t, eps_hat, alpha_bar)
    return np.sqrt(alpha_bar_prev) * z0_hat + np.sqrt(1.0 - alpha_bar_prev) * np.asarray(eps_hat)


def reverse_step(z_t, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    if t < 1:
        raise InvalidInput("reverse step needs t >= 1", details={"t": t})
    return ddim_update(z_t, eps_hat, schedule.alpha_bar(t), schedule.alpha_bar(t - 1))


def _candidate_set(state: SamplerState) -> np.ndarray:
    current = np.asarray(state.current, dtype=np.float64)[None, :]
    if state.accumulated.size == 0:
        return current
    return np.vstack([state.accumulated, current])


def ot_guidance(
    state: SamplerState,
    real_batch,
    lambda1: float,
    T: int,
    *,
    p: float = 1.0,
    lambda_mode: str = "adaptive",
    lambda_scale: float = 0.1,
) -> Tuple[SinkhornResult, np.ndarray]:
    """Sinkhorn result for [M, z_t] vs the real batch, and the fixed-plan gradient at z_t."""
    batch = np.asarray(real_batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise InvalidInput("real batch must be a nonempty (m, d) array")
    candidates = _candidate_set(state)
    D = cost_matrix(candidates, batch, p)
    lam = scaled_regularization(D, lambda_scale) if lambda_mode == "adaptive" else lambda1
    result = sinkhorn_uniform(D, lam, T)
    grad = grad_fixed_plan(result.plan, candidates.shape[0] - 1, candidates, batch, p)
    return result, grad


def ot_guidance_value(
    state: SamplerState,
    real_batch,
    lambda1: float,
    T: int,
    *,
    p: float = 1.0,
    lambda_mode: str = "adaptive",
    lambda_scale: float = 0.1,
) -> float:
    result, _ = ot_guidance(state, real_batch, lambda1, T, p=p, lambda_mode=lambda_mode, lambda_scale=lambda_scale)
    return result.distance


def mmd_guidance(state: SamplerState, real_batch, bandwidth: float = 0.0) -> Tuple[float, np.ndarray]:
    """Squared RBF MMD between [M, z_t] and the real batch, with its gradient at z_t."""
    batch = np.asarray(real_batch, dtype=np.float64)
    candidates = _candidate_set(state)
    bw = bandwidth if bandwidth > 0 else kernels.median_bandwidth(candidates, batch)
    value = kernels.mmd2(candidates, batch, bw)
    grad = kernels.mmd2_grad_x(candidates, batch, bw)[-1]
    return value, grad


def _cosines(z: np.ndarray, M: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    z_norm = float(np.linalg.norm(z))
    m_norms = np.linalg.norm(M, axis=1)
    valid = (m_norms > 0) & (z_norm > 0)
    cos = np.zeros(M.shape[0])
    cos[valid] = (M[valid] @ z) / (m_norms[valid] * z_norm)
    return cos, m_norms, z_norm


def diversity_guidance(z_t, accumulated) -> float:
    """Mean cosine similarity between z_t and the latents already sampled for the class."""
    M = np.asarray(accumulated, dtype=np.float64).reshape(-1, np.asarray(z_t).size)
    if M.shape[0] == 0:
        return 0.0
    cos, _, _ = _cosines(np.asarray(z_t, dtype=np.float64), M)
    return float(cos.mean())


def diversity_gradient(z_t, accumulated) -> np.ndarray:
    z = np.asarray(z_t, dtype=np.float64)
    M = np.asarray(accumulated, dtype=np.float64).reshape(-1, z.size)
    if M.shape[0] == 0:
        return np.zeros_like(z)
    cos, m_norms, z_norm = _cosines(z, M)
    grads = np.zeros_like(M)
    valid = (m_norms > 0) & (z_norm > 0)
    grads[valid] = M[valid] / (m_norms[valid, None] * z_norm) - cos[valid, None] * z[None, :] / z_norm**2
    return grads.mean(axis=0)


def guidance_gradient(
    state: SamplerState,
    real_batch,
    weights: GuidanceWeights,
    config: SamplerConfig,
    influence_hook: Optional[InfluenceHook] = None,
) -> np.ndarray:
    total = np.zeros_like(np.asarray(state.current, dtype=np.float64))
    if weights.rho > 0 and influence_hook is not None:
        total = total + weights.rho * np.asarray(influence_hook(state, state.step), dtype=np.float64)
    if weights.gamma > 0:
        total = total + weights.gamma * diversity_gradient(state.current, state.accumulated)
    if weights.beta1 > 0:
        if config.guidance_metric == "mmd":
            _, grad = mmd_guidance(state, real_batch, config.mmd_bandwidth)
        else:
            _, grad = ot_guidance(
                state,
                real_batch,
                weights.lambda1,
                config.sinkhorn_iters,
                p=config.p,
                lambda_mode=config.lambda_mode,
                lambda_scale=config.lambda_scale,
            )
        total = total + weights.beta1 * grad
    return total


def _draw_batch(real: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    if real.shape[0] <= size:
        return real
    return real[rng.choice(real.shape[0], size=size, replace=False)]


@dataclass
class ClassSample:
    class_id: int
    latents: np.ndarray
    streams: List[str] = field(default_factory=list)


def sample_class(
    class_id: int,
    ipc: int,
    real_latents,
    weights: GuidanceWeights,
    config: SamplerConfig,
    *,
    spec: GmmSpec,
    seed: int,
    schedule: Optional[NoiseSchedule] = None,
    influence_hook: Optional[InfluenceHook] = None,
) -> ClassSample:
    real = np.asarray(real_latents, dtype=np.float64)
    if real.ndim != 2 or real.shape[0] == 0:
        raise InvalidInput("real latents for the class must be a nonempty (n, d) array", details={"class": class_id})
    if ipc < 1:
        raise InvalidInput("IPC must be >= 1", details={"ipc": ipc})
    schedule = schedule or NoiseSchedule.linear(config.steps)
    dim = real.shape[1]
    noise_rng = make_rng("sample.noise", seed, class_id)
    batch_rng = make_rng("sample.batch", seed, class_id)
    bound = config.divergence_factor * max(float(np.abs(real).max()), 1.0)

    accumulated = np.empty((0, dim))
    for n in range(1, ipc + 1):
        state = SamplerState(class_id=class_id, accumulated=accumulated, current=noise_rng.standard_normal(dim), step=schedule.steps)
        for t in range(schedule.steps, 0, -1):
            state.step = t
            batch = _draw_batch(real, config.batch_size, batch_rng)
            eps_hat = analytic_denoiser(state.current, t, class_id, spec, schedule)
            z_prev = reverse_step(state.current, t, eps_hat, schedule)
            if weights.active:
                scale = 1.0 if config.guidance_schedule == "constant" else np.sqrt(1.0 - schedule.alpha_bar(t))
                z_prev = z_prev - scale * guidance_gradient(state, batch, weights, config, influence_hook)
            if not np.all(np.isfinite(z_prev)) or np.abs(z_prev).max() > bound:
                raise SamplingDiverged(
                    "latent left the finite data range during sampling",
                    details={"class": class_id, "sample": n, "step": t, "bound": bound},
                )
            state.current = z_prev
        accumulated = np.vstack([accumulated, state.current[None, :]])
        logger.debug(f"class {class_id}: finished latent {n}/{ipc}")
    return ClassSample(
        class_id=class_id,
        latents=accumulated,
        streams=[stream_id("sample.noise", seed, class_id), stream_id("sample.batch", seed, class_id)],
    )


def sample_all(
    train: LabeledDataset,
    ipc: int,
    weights: GuidanceWeights,
    config: SamplerConfig,
    *,
    spec: GmmSpec,
    seed: int,
    schedule: Optional[NoiseSchedule] = None,
    influence_hook: Optional[InfluenceHook] = None,
) -> Tuple[LabeledDataset, List[str]]:
    """Sample IPC latents for every class; returns the distilled set and the streams consumed."""
    schedule = schedule or NoiseSchedule.linear(config.steps)
    points, labels, streams = [], [], []
    for c in range(spec.num_classes):
        result = sample_class(
            c,
            ipc,
            train.class_points(c),
            weights,
            config,
            spec=spec,
            seed=seed,
            schedule=schedule,
            influence_hook=influence_hook,
        )
        points.append(result.latents)
        labels.append(np.full(ipc, c))
        streams.extend(result.streams)
        logger.info(f"Sampled {ipc} latents for class {c} (seed {seed}, beta1={weights.beta1})")
    distilled = LabeledDataset(np.vstack(points), np.concatenate(labels), "distilled")
    return distilled, streams
