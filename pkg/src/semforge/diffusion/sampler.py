"""Deterministic DDIM generation, DDIM inversion, and gradients through inversion.

Latents may carry leading batch dimensions: (..., C, H, W).
"""

from __future__ import annotations

import numpy as np

CHECKPOINT_SEGMENT = 10


def _check_latent(model, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-3:] != model.latent_shape:
        raise ValueError(f"latent shape {z.shape[-3:]} does not match model latent shape {model.latent_shape}")
    return z


def _flat(model, z):
    return z.reshape(-1, model.latent_dim)


def _step_coefficients(schedule, t_from, t_to):
    """z_to = a * z_from + b * eps for a DDIM move between any two steps."""
    ab = schedule.alphas_bar
    a = np.sqrt(ab[t_to] / ab[t_from])
    b = np.sqrt(1.0 - ab[t_to]) - np.sqrt(ab[t_to]) * np.sqrt(1.0 - ab[t_from]) / np.sqrt(ab[t_from])
    return a, b


def ddim_step(model, z_t, t: int, c=None):
    """One denoising step z_t -> z_{t-1}."""
    if not 1 <= t <= model.steps:
        raise ValueError(f"step {t} outside 1..{model.steps}")
    z_t = _check_latent(model, z_t)
    flat = _flat(model, z_t)
    eps = model.denoiser.predict(flat, t, c, model.schedule)
    a, b = _step_coefficients(model.schedule, t, t - 1)
    return (a * flat + b * eps).reshape(z_t.shape)


def generate(model, z_T, c=None, *, start: int | None = None):
    """Run the DDIM sampler from step ``start`` (default T) down to 0."""
    z = _check_latent(model, z_T)
    start = model.steps if start is None else start
    if not 0 <= start <= model.steps:
        raise ValueError(f"start step {start} outside 0..{model.steps}")
    for t in range(start, 0, -1):
        z = ddim_step(model, z, t, c)
    return z


def _inversion_step(model, flat, t, c):
    eps = model.denoiser.predict(flat, t, c, model.schedule)
    a, b = _step_coefficients(model.schedule, t, t + 1)
    return a * flat + b * eps


def invert(model, z_0, c=None):
    """Inverse DDIM z_0 -> z_T; unconditional unless ``c`` is given."""
    z_0 = _check_latent(model, z_0)
    flat = _flat(model, z_0)
    for t in range(model.steps):
        flat = _inversion_step(model, flat, t, c)
    return flat.reshape(z_0.shape)


def vjp_through_inversion(model, z_0, cotangent, c=None, *, segment: int = CHECKPOINT_SEGMENT):
    """Return (invert(z_0), d<invert(z_0), cotangent>/dz_0).

    Only every ``segment``-th state of the forward pass is kept; the states
    inside a segment are recomputed from its checkpoint during the backward
    sweep.
    """
    z_0 = _check_latent(model, z_0)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != z_0.shape:
        raise ValueError("cotangent shape must match z_0")
    steps = model.steps
    flat = _flat(model, z_0)
    checkpoints = {}
    for t in range(steps):
        if t % segment == 0:
            checkpoints[t] = flat
        flat = _inversion_step(model, flat, t, c)
    z_T = flat.reshape(z_0.shape)

    v = _flat(model, cotangent).copy()
    for seg_start in sorted(checkpoints, reverse=True):
        seg_end = min(seg_start + segment, steps)
        states = [checkpoints[seg_start]]
        for t in range(seg_start, seg_end - 1):
            states.append(_inversion_step(model, states[-1], t, c))
        for t in range(seg_end - 1, seg_start - 1, -1):
            a, b = _step_coefficients(model.schedule, t, t + 1)
            v = a * v + model.denoiser.vjp(states[t - seg_start], t, c, b * v, model.schedule)
    return z_T, v.reshape(z_0.shape)


def forward_noise(model, z_0, t: int, noise):
    """Sample q(z_t | z_0) with the given standard-normal ``noise``."""
    ab = model.schedule.alphas_bar[t]
    return np.sqrt(ab) * np.asarray(z_0) + np.sqrt(1.0 - ab) * np.asarray(noise)
