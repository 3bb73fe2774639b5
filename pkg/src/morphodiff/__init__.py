"""Point-set diffusion for soft robots, steered by a differentiable MPM simulator."""

__version__ = "0.1.0"

__all__ = ["shapes", "denoiser", "diffusion", "robotize", "mpm", "tasks", "codesign", "cli"]
