"""Refinement chain: annealed Langevin noise, energy-scaled steps, Nesterov.

One ``refine_step`` implementation serves both training (noise on, momentum
on, gradients kept for backprop through the step) and inference (plain
energy descent). Step order per iteration: normalize, inject noise, take the
lookahead, differentiate the energy, apply the energy-scaled update.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class ChainAborted(RuntimeError):
    """Raised when a chain hits non-finite values; carries the partial trace."""

    def __init__(self, message: str, trace: "ChainTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class SamplerConfig:
    eta_b: float = 1000.0          # base step size
    c: float = 1.5                 # step-size scaling factor
    sigma_min: float = 0.002
    sigma_max: float = 0.2
    n_base: int = 6                # base train chain length
    n_rand: int = 3                # extra randomized train steps
    n_max_infer: int = 20
    tau: float = 0.05              # inference gradient-norm cutoff
    momentum: float = 0.9
    energy_clamp: float = 5.0      # bound on E inside exp()
    step_clamp: tuple[float, float] = (10.0, 2000.0)
    langevin_at_inference: bool = False
    nesterov_at_inference: bool = False
    rms_eps: float = 1e-6

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.eta_b <= 0:
            raise ValueError("eta_b must be positive")
        if self.c <= 1.0:
            raise ValueError("c must exceed 1")
        if self.n_base < 1:
            raise ValueError("n_base must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.step_clamp[0] <= 0:
            raise ValueError("step_clamp lower bound must be positive")


@dataclass
class TraceStep:
    candidate: np.ndarray | None
    energy: float
    grad_norm: float
    alpha: float
    sigma: float


@dataclass
class ChainTrace:
    steps: list[TraceStep] = field(default_factory=list)
    terminated_by: str = "max_steps"   # "max_steps" | "grad_cutoff"

    def __len__(self) -> int:
        return len(self.steps)

    def energies(self) -> np.ndarray:
        return np.array([s.energy for s in self.steps])

    def grad_norms(self) -> np.ndarray:
        return np.array([s.grad_norm for s in self.steps])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "energy", "grad_norm", "alpha", "sigma"])
            for i, s in enumerate(self.steps):
                w.writerow([i, repr(s.energy), repr(s.grad_norm), repr(s.alpha), repr(s.sigma)])


def anneal_sigma(t: int, T: int, cfg: SamplerConfig) -> float:
    """Cosine-annealed noise scale, sigma_max at t=0 down to sigma_min at t=T."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if t < 0 or t > T:
        raise ValueError(f"step index {t} outside [0, {T}]")
    return cfg.sigma_min + 0.5 * (cfg.sigma_max - cfg.sigma_min) * (1.0 + np.cos(np.pi * t / T))


def sample_step_size(cfg: SamplerConfig, rng: np.random.Generator) -> float:
    """Draw the chain's base step size: Normal(eta_b/c, var=eta_b*c), clamped."""
    eta = rng.normal(cfg.eta_b / cfg.c, np.sqrt(cfg.eta_b * cfg.c))
    return float(np.clip(eta, cfg.step_clamp[0], cfg.step_clamp[1]))


def energy_scaled_alpha(eta: float, energy, cfg: SamplerConfig):
    """Step size alpha = eta * exp(E), with E clamped; E enters as a constant."""
    e = np.clip(np.asarray(energy, dtype=np.float64), -cfg.energy_clamp, cfg.energy_clamp)
    return eta * np.exp(e)


def refine_step(
    model,
    z: Tensor,
    y: Tensor,
    i: int,
    T: int,
    eta: float,
    velocity: Tensor | None,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    training: bool,
    create_graph: bool = False,
) -> tuple[Tensor, Tensor, TraceStep]:
    """One refinement update on a (B, D) candidate batch.

    Returns the updated candidate, the new velocity, and a trace entry. The
    energy inside the step-size scaling is detached, so no parameter
    gradients flow through the scale itself.
    """
    nesterov = training or cfg.nesterov_at_inference
    m = cfg.momentum if nesterov else 0.0

    if not y.requires_grad:
        y = Tensor(y.data, requires_grad=True)
    y = dc.rms_normalize(y, eps=cfg.rms_eps, axis=-1)
    sigma = 0.0
    if training or cfg.langevin_at_inference:
        sigma = float(anneal_sigma(i, T, cfg))
        y = y + Tensor(rng.standard_normal(y.shape) * sigma)

    if m != 0.0 and velocity is not None:
        y_la = y + Tensor(m) * velocity
    else:
        y_la = y

    e = model.energy(z, y_la)
    g = dc.grad(dc.reduce_sum(e), [y_la], create_graph=create_graph)[0]

    alpha = energy_scaled_alpha(eta, e.data, cfg)           # (B,), detached
    alpha_col = Tensor(alpha.reshape(-1, 1))
    if velocity is None:
        velocity = Tensor(np.zeros(y.shape))
    vel_next = Tensor(m) * velocity - alpha_col * g
    y_next = y + vel_next

    grad_norm = float(np.mean(np.linalg.norm(g.data, axis=-1)))
    step = TraceStep(
        candidate=np.array(y_next.data, copy=True),
        energy=float(np.mean(e.data)),
        grad_norm=grad_norm,
        alpha=float(np.mean(alpha)),
        sigma=sigma,
    )
    return y_next, vel_next, step


def run_chain(
    model,
    z: Tensor,
    y0: np.ndarray,
    N: int,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    training: bool,
    eta: float | None = None,
) -> tuple[np.ndarray, ChainTrace]:
    """Run N refinement steps without keeping gradients (evaluation use)."""
    if N < 1:
        raise ValueError("chain length must be >= 1")
    if eta is None:
        eta = sample_step_size(cfg, rng)
    y0 = np.asarray(y0, dtype=np.float64)
    squeeze = y0.ndim == 1
    y = Tensor(y0.reshape(1, -1) if squeeze else y0, requires_grad=True)
    velocity: Tensor | None = None
    trace = ChainTrace()
    for i in range(N):
        try:
            y_next, velocity, step = refine_step(
                model, z, y, i, N, eta, velocity, cfg, rng, training
            )
        except dc.DiffcoreError as e:
            raise ChainAborted(f"chain step {i}: {e}", trace) from e
        trace.steps.append(step)
        y = Tensor(y_next.data, requires_grad=True)
        velocity = Tensor(velocity.data)
    out = y.data[0] if squeeze else y.data
    return np.array(out, copy=True), trace
