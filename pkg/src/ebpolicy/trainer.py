"""Training loop: chain loss, gradient clipping, Adam updates.

Each batch runs a randomized-length refinement chain from pure noise and
accumulates the per-step MSE against the demonstrated action chunk. In
``truncated`` mode the candidate entering each step is treated as a
constant, so parameter gradients flow only through that step's energy
gradient (a mixed second derivative); ``full`` mode differentiates the
whole chain and is kept for ablations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .sampler import (
    ChainAborted,
    ChainTrace,
    SamplerConfig,
    refine_step,
    sample_step_size,
)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    chain_grad_mode: str = "truncated"   # "truncated" | "full"
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.chain_grad_mode not in ("truncated", "full"):
            raise ValueError(f"unknown chain_grad_mode {self.chain_grad_mode!r}")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_final_energy: float
    grad_norm_p50: float
    grad_norm_p99: float
    seconds: float
    skipped_batches: int = 0
    total_batches: int = 0
    unstable: bool = False
    max_post_clip_norm: float = 0.0


@dataclass
class TrainReport:
    entries: list[EpochStats] = field(default_factory=list)

    def to_csv(self, path) -> None:
        """Deterministic per-epoch metrics; wall-clock goes to the timing log."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "energy", "grad_norm_p50", "grad_norm_p99",
                        "skipped_batches", "unstable"])
            for e in self.entries:
                w.writerow([e.epoch, repr(e.mean_loss), repr(e.mean_final_energy),
                            repr(e.grad_norm_p50), repr(e.grad_norm_p99),
                            e.skipped_batches, int(e.unstable)])

    def to_timing_log(self, path) -> None:
        with open(path, "w") as f:
            for e in self.entries:
                f.write(f"epoch {e.epoch}: {e.seconds:.3f}s\n")


class Adam:
    """Adaptive moment optimizer over a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - update  # rebind, never mutate graph-held arrays


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale gradients so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads, total


def sample_chain_length(cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Chain length for one batch: base steps plus a uniform random extra."""
    return int(cfg.n_base + rng.integers(0, cfg.n_rand + 1))


def chain_loss(
    model,
    z: Tensor,
    y_target: np.ndarray,
    N: int,
    eta: float,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    grad_mode: str = "truncated",
) -> tuple[Tensor, ChainTrace]:
    """Mean per-step MSE of the refinement chain against the target chunk."""
    y_target = np.asarray(y_target, dtype=np.float64)
    B, D = y_target.shape
    y = Tensor(rng.standard_normal((B, D)), requires_grad=True)
    velocity: Tensor | None = None
    target = Tensor(y_target)
    trace = ChainTrace()
    loss: Tensor | None = None
    for i in range(N):
        if grad_mode == "truncated" and i > 0:
            y = Tensor(y.data, requires_grad=True)
            velocity = Tensor(velocity.data)
        y, velocity, step = refine_step(
            model, z, y, i, N, eta, velocity, cfg, rng,
            training=True, create_graph=True,
        )
        trace.steps.append(step)
        term = dc.mse(y, target)
        loss = term if loss is None else loss + term
    return loss * (1.0 / N), trace


def train_epoch(
    model,
    windows: np.ndarray,
    actions: np.ndarray,
    sampler_cfg: SamplerConfig,
    train_cfg: TrainConfig,
    optimizer: Adam,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochStats:
    """One pass over the dataset; actions must already be in [-1, 1] coords."""
    import time

    t0 = time.perf_counter()
    params = model.parameters()
    n = windows.shape[0]
    order = rng.permutation(n)
    losses: list[float] = []
    energies: list[float] = []
    grad_norms: list[float] = []
    skipped = 0
    total = 0
    max_post_clip = 0.0

    for start in range(0, n, train_cfg.batch_size):
        batch = order[start:start + train_cfg.batch_size]
        total += 1
        N = sample_chain_length(sampler_cfg, rng)
        eta = sample_step_size(sampler_cfg, rng)
        try:
            z = model.encode(windows[batch])
            loss, trace = chain_loss(
                model, z, actions[batch], N, eta, sampler_cfg, rng,
                grad_mode=train_cfg.chain_grad_mode,
            )
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                skipped += 1
                continue
            grads = [g.data for g in dc.grad(loss, params)]
        except (ChainAborted, dc.DiffcoreError):
            skipped += 1
            continue
        grads, pre_norm = clip_global_norm(grads, train_cfg.grad_clip_norm)
        post_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        max_post_clip = max(max_post_clip, post_norm)
        optimizer.step(grads)
        losses.append(loss_val)
        energies.append(trace.steps[-1].energy)
        grad_norms.append(pre_norm)

    done = total - skipped
    return EpochStats(
        epoch=epoch,
        mean_loss=float(np.mean(losses)) if losses else float("nan"),
        mean_final_energy=float(np.mean(energies)) if energies else float("nan"),
        grad_norm_p50=float(np.percentile(grad_norms, 50)) if grad_norms else float("nan"),
        grad_norm_p99=float(np.percentile(grad_norms, 99)) if grad_norms else float("nan"),
        seconds=time.perf_counter() - t0,
        skipped_batches=skipped,
        total_batches=total,
        unstable=(skipped > 0.1 * total) if total else False,
        max_post_clip_norm=max_post_clip,
    )
