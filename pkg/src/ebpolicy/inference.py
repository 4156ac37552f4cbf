"""Dynamic inference: energy descent with a gradient-norm cutoff.

Starting from pure noise, the candidate trajectory is refined until either
the step budget runs out or the energy gradient's norm drops below the
cutoff. The number of steps taken is the model's compute-allocation signal:
uncertain states keep the chain running longer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .sampler import ChainAborted, ChainTrace, SamplerConfig, refine_step


@dataclass
class InferenceResult:
    trajectory: np.ndarray        # (horizon, d_action), environment units
    steps_used: int
    final_energy: float
    final_grad_norm: float
    trace: ChainTrace
    error: str | None = None


def normalize_actions(actions: np.ndarray, stats) -> np.ndarray:
    """Map environment-unit actions into [-1, 1] dataset coordinates."""
    lo, hi = stats.lo, stats.hi
    return 2.0 * (actions - lo) / (hi - lo) - 1.0


def denormalize_actions(actions: np.ndarray, stats) -> np.ndarray:
    lo, hi = stats.lo, stats.hi
    return lo + (actions + 1.0) * (hi - lo) / 2.0


def _descend(
    model,
    window: np.ndarray,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    max_steps: int,
    tau: float | None,
) -> tuple[np.ndarray, ChainTrace, str | None]:
    """Shared descent loop; ``tau=None`` disables the cutoff."""
    with dc.no_grad():
        z = model.encode(window)
    z = z.detach()
    D = model.cfg.flat_action_dim
    eta = cfg.eta_b / cfg.c
    y = Tensor(rng.standard_normal((1, D)), requires_grad=True)
    velocity: Tensor | None = None
    trace = ChainTrace()
    err = None
    for i in range(max_steps):
        try:
            y_next, velocity, step = refine_step(
                model, z, y, i, max_steps, eta, velocity, cfg, rng, training=False
            )
        except dc.DiffcoreError as e:
            err = str(e)
            trace.terminated_by = "max_steps"
            break
        trace.steps.append(step)
        y = Tensor(y_next.data, requires_grad=True)
        velocity = Tensor(velocity.data)
        if tau is not None and step.grad_norm <= tau:
            trace.terminated_by = "grad_cutoff"
            break
    else:
        trace.terminated_by = "max_steps"
    return y.data[0], trace, err


def infer(
    window: np.ndarray,
    model,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    norm_stats=None,
) -> InferenceResult:
    """Adaptive-step inference: run until the gradient norm falls below tau."""
    flat, trace, err = _descend(model, window, cfg, rng, cfg.n_max_infer, cfg.tau)
    return _package(flat, trace, err, model, norm_stats)


def infer_fixed(
    window: np.ndarray,
    model,
    steps: int,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    norm_stats=None,
) -> InferenceResult:
    """Fixed-step inference: exactly ``steps`` refinements, no cutoff."""
    if not (1 <= steps <= cfg.n_max_infer):
        raise ValueError(f"steps must be in [1, {cfg.n_max_infer}], got {steps}")
    flat, trace, err = _descend(model, window, cfg, rng, steps, None)
    return _package(flat, trace, err, model, norm_stats)


def _package(flat, trace, err, model, norm_stats) -> InferenceResult:
    n, d_a = model.cfg.horizon, model.cfg.d_action
    traj = flat.reshape(n, d_a)
    if norm_stats is not None:
        traj = denormalize_actions(traj, norm_stats)
    last = trace.steps[-1] if trace.steps else None
    return InferenceResult(
        trajectory=traj,
        steps_used=len(trace.steps),
        final_energy=last.energy if last else float("nan"),
        final_grad_norm=last.grad_norm if last else float("nan"),
        trace=trace,
        error=err,
    )


def uncertainty_signal(result: InferenceResult, cfg: SamplerConfig) -> tuple[float, float]:
    """(final energy, fraction of the step budget used) for logging."""
    return result.final_energy, result.steps_used / cfg.n_max_infer
