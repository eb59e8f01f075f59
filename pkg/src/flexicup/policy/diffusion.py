"""DDPM machinery: cosine schedule, forward process, training step, sampler."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ACTION_DIM, DiffusionPolicy, cosine_alphas_bar

POSE_DIMS = 4
MAX_POSE_DELTA = 1.0


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alphas_bar: np.ndarray

    @classmethod
    def cosine(cls, T: int = 50, s: float = 0.008) -> "NoiseSchedule":
        """Cosine schedule normalised so that step 0 is noise-free."""
        return cls(cosine_alphas_bar(T, s))

    @property
    def T(self) -> int:
        return len(self.alphas_bar)

    @property
    def betas(self) -> np.ndarray:
        ab = self.alphas_bar
        prev = np.concatenate([[1.0], ab[:-1]])
        return np.clip(1.0 - ab / prev, 0.0, 0.999)


def forward_diffuse(chunk, t, noise, schedule: NoiseSchedule):
    """x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise, per batch item when ``t`` is a vector."""
    chunk = np.asarray(chunk, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != chunk.shape:
        raise ValueError("noise must match the chunk shape")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise ValueError(f"diffusion step out of range [0, {schedule.T})")
    ab = schedule.alphas_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (chunk.ndim - 1))
    return np.sqrt(ab) * chunk + np.sqrt(1.0 - ab) * noise


class SGDMomentum:
    def __init__(self, params: dict, lr: float = 1e-3, momentum: float = 0.9, clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        scale = 1.0
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v -= lr * scale * grads[k]
            p += v


class Adam(SGDMomentum):
    """Adam with bias correction and the same global-norm clipping."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        super().__init__(params, lr, betas[0], clip_norm)
        self.beta2 = betas[1]
        self.eps = eps
        self.second = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        scale = 1.0
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.momentum, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            m, v = self.velocity[k], self.second[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _grad_norms(policy: DiffusionPolicy, grads: dict) -> dict:
    out: dict[str, float] = {}
    for k, g in grads.items():
        mod = k.split(".")[0]
        out[mod] = out.get(mod, 0.0) + float(np.sum(g * g))
    return {k: math.sqrt(v) for k, v in out.items()}


def train_step(policy: DiffusionPolicy, batch, schedule: NoiseSchedule, lr: float | None = None,
               rng: np.random.Generator | None = None, optimizer: SGDMomentum | None = None) -> float:
    """One SGD-with-momentum step on the noise-prediction loss; returns the loss.

    ``batch`` is ``(obs, chunks)`` with stacked observation histories and
    action chunks of shape (B, H_p, 6), switches in [0, 1]. Diffusion steps are drawn from 1..T-1
    (step 0 is the identity) and noise is standard normal, per item. ``lr``
    overrides the optimizer's own rate for this step (1e-3 for a fresh one).
    """
    obs, chunks = batch
    x0 = to_model_space(chunks)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    rng = rng or np.random.default_rng()
    t = rng.integers(1, schedule.T, size=x0.shape[0])
    noise = rng.standard_normal(x0.shape)
    loss, grads = policy.loss_and_grads(obs, x0, t, noise, schedule)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise DivergenceError("non-finite loss or gradient", {"loss": loss, "grad_norms": _grad_norms(policy, grads)})
    if optimizer is None:
        optimizer = getattr(policy, "_optimizer", None)
        if optimizer is None or optimizer.params is not policy.params:
            optimizer = SGDMomentum(policy.params, 1e-3 if lr is None else lr)
            policy._optimizer = optimizer
    optimizer.step(grads, lr)
    return loss


def to_model_space(chunk) -> np.ndarray:
    """Action chunk (switches in [0, 1]) to the symmetric space the model denoises."""
    out = np.array(chunk, dtype=np.float64)
    out[..., POSE_DIMS:] = 2.0 * out[..., POSE_DIMS:] - 1.0
    return out


def clamp_actions(chunk: np.ndarray) -> np.ndarray:
    """Clamp pose deltas to the per-step limit and switch channels to [0, 1]."""
    out = np.array(chunk, dtype=np.float64)
    out[..., :POSE_DIMS] = np.clip(out[..., :POSE_DIMS], -MAX_POSE_DELTA, MAX_POSE_DELTA)
    out[..., POSE_DIMS:] = np.clip(out[..., POSE_DIMS:], 0.0, 1.0)
    return out


def to_action_space(x) -> np.ndarray:
    out = np.array(x, dtype=np.float64)
    out[..., POSE_DIMS:] = (out[..., POSE_DIMS:] + 1.0) / 2.0
    return clamp_actions(out)


def sample_chunk(policy: DiffusionPolicy, obs, schedule: NoiseSchedule, seed: int = 0,
                 clip_x0: float = 1.0) -> np.ndarray:
    """Ancestral DDPM sampling of action chunks, one per observation history.

    Returns (B, H_p, 6) action chunks: pose deltas clamped to [-1, 1] cm
    or degrees per step, LED and valve levels in [0, 1] (on above 0.5).
    """
    cfg = policy.config
    policy.check_schedule(schedule)
    cond, _ = policy.condition(obs)
    b = cond.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, cfg.horizon, ACTION_DIM))
    ab = schedule.alphas_bar
    betas = schedule.betas
    for t in range(schedule.T - 1, 0, -1):
        eps, _ = policy.forward(None, x, np.full(b, t), cond=cond)
        x0 = (x - math.sqrt(1.0 - ab[t]) * eps) / math.sqrt(ab[t])
        if clip_x0:
            x0 = np.clip(x0, -clip_x0, clip_x0)
        a_t = 1.0 - betas[t]
        c0 = math.sqrt(ab[t - 1]) * betas[t] / (1.0 - ab[t])
        ct = math.sqrt(a_t) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
        mean = c0 * x0 + ct * x
        var = betas[t] * (1.0 - ab[t - 1]) / (1.0 - ab[t])
        x = mean + (math.sqrt(var) * rng.standard_normal(x.shape) if var > 0 else 0.0)
    return to_action_space(x)
