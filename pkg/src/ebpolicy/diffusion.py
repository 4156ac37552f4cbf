"""Denoising-diffusion baseline sharing the energy model's trunk.

The backbone is the same network with its scalar head swapped for an
``n*d_a`` noise-prediction head, so parameter counts stay within a few
percent of the energy policy. Timestep conditioning is a sinusoidal code
added to the context embedding. Sampling is ancestral DDPM over an evenly
re-spaced subsequence of the training schedule, which is how fewer-step
variants are produced.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .energy_model import EnergyModel, ModelConfig, sinusoidal_embedding
from .inference import InferenceResult, denormalize_actions
from .sampler import ChainTrace
from .trainer import Adam, TrainConfig, EpochStats, clip_global_norm


@dataclass
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(T: int = 100, beta_lo: float = 1e-3, beta_hi: float = 0.2) -> DiffusionSchedule:
    """Linear-beta schedule whose terminal corruption is ~N(0, I)."""
    betas = np.linspace(beta_lo, beta_hi, T)
    if not np.all((betas > 0) & (betas < 1)):
        raise ValueError("betas must lie in (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def corrupt(y0: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Forward process: sqrt(abar_t) y0 + sqrt(1 - abar_t) eps, per sample."""
    ab = sched.alpha_bars[t].reshape(-1, 1)
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps


def _timestep_context(z: Tensor, t: np.ndarray, width: int) -> Tensor:
    emb = np.stack([sinusoidal_embedding(int(ti), width) for ti in t])
    return z + Tensor(emb)


def ddpm_train_step(
    model: EnergyModel,
    z: Tensor,
    y0: np.ndarray,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
) -> Tensor:
    """Noise-prediction MSE on one batch of normalized action chunks."""
    B, D = y0.shape
    t = rng.integers(0, sched.T, size=B)
    eps = rng.standard_normal((B, D))
    y_t = corrupt(y0, t, eps, sched)
    zt = _timestep_context(z, t, model.cfg.d_embed)
    eps_hat = model.predict(zt, Tensor(y_t))
    return dc.mse(eps_hat, Tensor(eps))


def ddpm_sample(
    z: Tensor,
    model: EnergyModel,
    sched: DiffusionSchedule,
    steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Ancestral sampling over an evenly spaced timestep subsequence."""
    if not (1 <= steps <= sched.T):
        raise ValueError(f"steps must be in [1, {sched.T}]")
    B = z.shape[0]
    D = model.cfg.flat_action_dim
    # evenly spaced subsequence, always anchored at the terminal timestep
    sub = np.unique(np.round(np.linspace(sched.T - 1, 0, steps)).astype(int))
    y = rng.standard_normal((B, D))
    for s in range(len(sub) - 1, -1, -1):
        ti = int(sub[s])
        ab = sched.alpha_bars[ti]
        ab_prev = sched.alpha_bars[int(sub[s - 1])] if s > 0 else 1.0
        beta = 1.0 - ab / ab_prev
        alpha = ab / ab_prev
        zt = _timestep_context(z, np.full(B, ti), model.cfg.d_embed)
        with dc.no_grad():
            eps_hat = model.predict(zt, Tensor(y)).data
        if not np.all(np.isfinite(eps_hat)):
            raise FloatingPointError("non-finite noise prediction during sampling")
        mean = (y - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
        if s > 0:
            var = (1.0 - ab_prev) / (1.0 - ab) * beta
            y = mean + np.sqrt(var) * rng.standard_normal((B, D))
        else:
            y = mean
    return y


def train_epoch_ddpm(
    model: EnergyModel,
    windows: np.ndarray,
    actions: np.ndarray,
    sched: DiffusionSchedule,
    train_cfg: TrainConfig,
    optimizer: Adam,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochStats:
    """One pass of noise-prediction training, mirroring the energy trainer."""
    import time

    t0 = time.perf_counter()
    params = model.parameters()
    n = windows.shape[0]
    order = rng.permutation(n)
    losses, grad_norms = [], []
    skipped = 0
    total = 0
    max_post_clip = 0.0
    for start in range(0, n, train_cfg.batch_size):
        batch = order[start:start + train_cfg.batch_size]
        total += 1
        try:
            z = model.encode(windows[batch])
            loss = ddpm_train_step(model, z, actions[batch], sched, rng)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                skipped += 1
                continue
            grads = [g.data for g in dc.grad(loss, params)]
        except dc.DiffcoreError:
            skipped += 1
            continue
        grads, pre_norm = clip_global_norm(grads, train_cfg.grad_clip_norm)
        post = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        max_post_clip = max(max_post_clip, post)
        optimizer.step(grads)
        losses.append(loss_val)
        grad_norms.append(pre_norm)
    return EpochStats(
        epoch=epoch,
        mean_loss=float(np.mean(losses)) if losses else float("nan"),
        mean_final_energy=float("nan"),
        grad_norm_p50=float(np.percentile(grad_norms, 50)) if grad_norms else float("nan"),
        grad_norm_p99=float(np.percentile(grad_norms, 99)) if grad_norms else float("nan"),
        seconds=time.perf_counter() - t0,
        skipped_batches=skipped,
        total_batches=total,
        unstable=(skipped > 0.1 * total) if total else False,
        max_post_clip_norm=max_post_clip,
    )


def ddpm_policy(model: EnergyModel, sched: DiffusionSchedule, steps: int, norm_stats):
    """Rollout adapter: sample a chunk conditioned on the observation window."""

    def plan(window: np.ndarray, rng: np.random.Generator) -> InferenceResult:
        with dc.no_grad():
            z = model.encode(window)
        flat = ddpm_sample(z.detach(), model, sched, steps, rng)[0]
        traj = flat.reshape(model.cfg.horizon, model.cfg.d_action)
        if norm_stats is not None:
            traj = denormalize_actions(traj, norm_stats)
        return InferenceResult(
            trajectory=traj, steps_used=steps, final_energy=float("nan"),
            final_grad_norm=float("nan"), trace=ChainTrace(steps=[]),
        )

    return plan


def diffusion_model_config(base: ModelConfig) -> ModelConfig:
    """The baseline's config: same trunk, vector head."""
    return replace(base, head="vector")
