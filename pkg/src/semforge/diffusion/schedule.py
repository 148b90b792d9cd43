from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRAIN_STEPS = 1000


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas and cumulative products for steps t = 0..T.

    ``alphas_bar[t] = prod_{i<=t} (1 - betas[i])``. Sampling runs over the
    T transitions t -> t-1 for t = 1..T.
    """

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 2:
            raise ValueError("need at least two betas (steps 0 and T)")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_bar", np.cumprod(1.0 - betas))

    @property
    def steps(self) -> int:
        return self.betas.size - 1

    @property
    def sigmas(self) -> np.ndarray:
        """Noise-to-signal ratios sqrt((1 - abar) / abar)."""
        return np.sqrt((1.0 - self.alphas_bar) / self.alphas_bar)

    @classmethod
    def from_alphas_bar(cls, alphas_bar) -> "NoiseSchedule":
        ab = np.asarray(alphas_bar, dtype=np.float64)
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alphas_bar must be strictly decreasing")
        betas = np.empty_like(ab)
        betas[0] = 1.0 - ab[0]
        betas[1:] = 1.0 - ab[1:] / ab[:-1]
        return cls(betas)

    @classmethod
    def scaled_linear(cls, steps: int, beta_start: float = 0.00085, beta_end: float = 0.012) -> "NoiseSchedule":
        """Stable-Diffusion style schedule, subsampled to ``steps`` DDIM steps."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        train_betas = np.linspace(beta_start**0.5, beta_end**0.5, TRAIN_STEPS) ** 2
        train_ab = np.cumprod(1.0 - train_betas)
        idx = np.round(np.linspace(0, TRAIN_STEPS - 1, steps + 1)).astype(int)
        return cls.from_alphas_bar(train_ab[idx])
