"""Linear patch autoencoders standing in for a latent diffusion VAE.

Every 4x4 pixel patch is mapped to ``C`` latent channels by a filter bank
with orthonormal rows, giving a latent of shape (C, 8, 8) for a 32x32
image. Filter banks are seeded perturbations of a low-frequency 2D DCT
basis, mimicking encoders trained on the same kind of imagery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import SeededRng

PATCH = 4
DEFAULT_SPREAD = 0.1


def dct_filter_bank(patch: int = PATCH) -> np.ndarray:
    """Orthonormal 2D DCT-II basis on ``patch x patch``, low frequencies first."""
    n = np.arange(patch)
    basis_1d = np.array([
        np.sqrt((1 if u == 0 else 2) / patch) * np.cos(np.pi * (2 * n + 1) * u / (2 * patch))
        for u in range(patch)
    ])
    order = sorted(
        ((u, v) for u in range(patch) for v in range(patch)),
        key=lambda uv: (max(uv), uv[0] + uv[1], uv[0]),
    )
    return np.stack([np.outer(basis_1d[u], basis_1d[v]).ravel() for u, v in order])


def _polar(a: np.ndarray) -> np.ndarray:
    # closest matrix with orthonormal rows
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    return u @ vt


@dataclass(frozen=True)
class ToyAutoEncoder:
    filters: np.ndarray          # (C, PATCH*PATCH), orthonormal rows
    image_size: int = 32
    seed: int = 0

    @classmethod
    def from_seed(cls, seed: int, channels: int, *, spread: float = DEFAULT_SPREAD,
                  mix_channels: bool = False, image_size: int = 32) -> "ToyAutoEncoder":
        """Seeded filter bank near the ``channels`` lowest DCT frequencies.

        With ``mix_channels`` every latent channel is a random orthogonal
        mixture of the filters, so no channel is tied to one frequency band.
        """
        rng = SeededRng(seed, (0xAE, channels))
        base = dct_filter_bank()[:channels]
        filters = _polar(base + spread * rng.normal(base.shape) / np.sqrt(base.shape[1]))
        if mix_channels:
            q, r = np.linalg.qr(rng.normal((channels, channels)))
            filters = (q * np.sign(np.diag(r))) @ filters
        return cls(filters=filters, image_size=image_size, seed=seed)

    @property
    def channels(self) -> int:
        return self.filters.shape[0]

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        side = self.image_size // PATCH
        return (self.channels, side, side)

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Map images (..., S, S) to latents (..., C, S/4, S/4)."""
        x = np.asarray(x, dtype=np.float64)
        s = self.image_size
        if x.shape[-2:] != (s, s):
            raise ValueError(f"expected images of shape ({s}, {s}), got {x.shape[-2:]}")
        side = s // PATCH
        lead = x.shape[:-2]
        patches = x.reshape(*lead, side, PATCH, side, PATCH)
        patches = np.moveaxis(patches, -3, -2).reshape(*lead, side, side, PATCH * PATCH)
        z = patches @ self.filters.T
        return np.moveaxis(z, -1, -3)

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Map latents (..., C, S/4, S/4) back to images; no clipping."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-3:] != self.latent_shape:
            raise ValueError(f"expected latents of shape {self.latent_shape}, got {z.shape[-3:]}")
        side = self.image_size // PATCH
        lead = z.shape[:-3]
        patches = np.moveaxis(z, -3, -1) @ self.filters
        patches = patches.reshape(*lead, side, side, PATCH, PATCH)
        return np.moveaxis(patches, -2, -3).reshape(*lead, self.image_size, self.image_size)

    def matrix(self) -> np.ndarray:
        """Dense encode matrix of shape (latent_dim, pixel_dim)."""
        eye = np.eye(self.image_size**2).reshape(-1, self.image_size, self.image_size)
        return self.encode(eye).reshape(eye.shape[0], -1).T
