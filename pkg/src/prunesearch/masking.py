"""Progressive patch masking: a linearly growing ratio and uniform draws."""

from dataclasses import dataclass

import numpy as np


@dataclass
class MaskingSchedule:
    gamma_start: float = 0.01
    gamma_end: float = 0.25
    total_steps: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.gamma_start <= 1.0 and 0.0 <= self.gamma_end <= 1.0):
            raise ValueError("masking ratios must lie in [0, 1]")


def gamma(schedule, t):
    """Linear ramp from gamma_start to gamma_end over total_steps, then flat."""
    if t < 0:
        raise ValueError("t must be non-negative")
    frac = min(t / schedule.total_steps, 1.0) if schedule.total_steps > 0 else 1.0
    return schedule.gamma_start + (schedule.gamma_end - schedule.gamma_start) * frac


def masked_count(n_patches, g):
    """round(gamma * n), half away from zero."""
    return int(np.floor(g * n_patches + 0.5))


def sample_mask(n_patches, g, rng):
    """Boolean patch map with exactly round(g*n) positions masked."""
    if n_patches < 1:
        raise ValueError("need at least one patch")
    if not 0.0 <= g <= 1.0:
        raise ValueError(f"masking ratio {g} outside [0, 1]")
    k = masked_count(n_patches, g)
    mask = np.zeros(n_patches, dtype=bool)
    if k:
        mask[rng.choice(n_patches, size=k, replace=False)] = True
    return mask


def sample_batch_masks(batch, n_patches, g, rng):
    """One mask per sample, drawn sequentially for reproducibility."""
    return np.stack([sample_mask(n_patches, g, rng) for _ in range(batch)]) \
        if batch else np.zeros((0, n_patches), dtype=bool)
