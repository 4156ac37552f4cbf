"""Energy-based implicit policies on desk-scale behavior-cloning tasks.

Trains a scalar energy model by differentiating through a randomized
Langevin refinement chain, deploys it with gradient-cutoff adaptive
inference, and pits it against a matched denoising-diffusion baseline on
toy 2D tasks.
"""

__version__ = "0.1.0"
