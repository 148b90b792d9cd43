"""Noise predictors for the toy models.

Each denoiser works on flattened latents of shape (batch, n) and exposes
``predict(z, t, c, schedule)`` and its vector-Jacobian product ``vjp``.
Conditioning ``c`` is a class index or ``None`` for unconditional.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import SeededRng
from .schedule import NoiseSchedule


def _token_index(c, num_classes: int) -> int:
    if c is None:
        return num_classes
    c = int(c)
    if not 0 <= c < num_classes:
        raise ValueError(f"class token {c} outside vocabulary of {num_classes}")
    return c


@dataclass(frozen=True)
class ZeroDenoiser:
    """Predicts zero noise; DDIM then reduces to rescaling by alpha ratios."""

    num_classes: int = 8
    kind = "zero"

    def predict(self, z, t, c, schedule):
        _token_index(c, self.num_classes)
        return np.zeros_like(z)

    def vjp(self, z, t, c, v, schedule):
        return np.zeros_like(v)


@dataclass(frozen=True)
class AnalyticLinearDenoiser:
    """Closed-form noise predictor for a Gaussian latent data model.

    With ``y = z / sqrt(abar_t)`` and ``sigma_t = sqrt((1 - abar_t)/abar_t)``
    the prediction is ``U diag(1 / (sigma_t + scales)) U^T (y - mean_c)``.
    The noise estimate is then constant along DDIM trajectories, so DDIM
    generation and DDIM inversion are exact inverses of one another.
    """

    basis: np.ndarray      # (n, n) orthogonal, columns are data eigenvectors
    scales: np.ndarray     # (n,) per-direction data standard deviations
    means: np.ndarray      # (num_classes + 1, n); last row is the unconditional mean
    kind = "analytic-linear"

    @property
    def num_classes(self) -> int:
        return self.means.shape[0] - 1

    def _gain(self, t, schedule):
        return 1.0 / (schedule.sigmas[t] + self.scales)

    def predict(self, z, t, c, schedule):
        mean = self.means[_token_index(c, self.num_classes)]
        y = z / np.sqrt(schedule.alphas_bar[t]) - mean
        return ((y @ self.basis) * self._gain(t, schedule)) @ self.basis.T

    def vjp(self, z, t, c, v, schedule):
        _token_index(c, self.num_classes)
        return ((v @ self.basis) * self._gain(t, schedule)) @ self.basis.T / np.sqrt(schedule.alphas_bar[t])

    def step_factors(self, t, schedule):
        """Per-eigendirection factor of the exact step y_t - mu -> y_{t-1} - mu."""
        s = schedule.sigmas
        return (s[t - 1] + self.scales) / (s[t] + self.scales)

    @classmethod
    def fit(cls, latents: np.ndarray, labels: np.ndarray, num_classes: int, floor: float) -> "AnalyticLinearDenoiser":
        """Fit the Gaussian data model to flattened latents of shape (N, n)."""
        mean = latents.mean(axis=0)
        centered = latents - mean
        cov = centered.T @ centered / max(len(latents) - 1, 1)
        cov += floor * np.eye(cov.shape[0])
        evals, evecs = np.linalg.eigh(cov)
        # fix eigenvector signs so the fit is reproducible across LAPACK builds
        signs = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(evecs.shape[1])])
        evecs = evecs * signs
        means = np.empty((num_classes + 1, latents.shape[1]))
        for k in range(num_classes):
            sel = labels == k
            means[k] = latents[sel].mean(axis=0) if np.any(sel) else mean
        means[num_classes] = mean
        return cls(basis=evecs, scales=np.sqrt(np.maximum(evals, floor)), means=means)


TIME_FREQS = 4


def time_features(steps: int, freqs: int = TIME_FREQS) -> np.ndarray:
    """Low-frequency Fourier features of t/T; smooth in t so adjacent steps predict alike."""
    u = np.arange(steps + 1)[:, None] / steps
    k = np.arange(freqs)[None, :]
    return np.concatenate([np.cos(np.pi * k * u), np.sin(np.pi * (k + 1) * u)], axis=1)


@dataclass(frozen=True)
class TinyMlpDenoiser:
    """One-hidden-layer noise predictor with a fixed linear skip.

    ``eps = sqrt(1 - abar_t) z + W2 tanh(W1 z + time[t] + cls[c] + b1) + b2``
    """

    w1: np.ndarray          # (h, n)
    b1: np.ndarray          # (h,)
    w2: np.ndarray          # (n, h)
    b2: np.ndarray          # (n,)
    time_emb: np.ndarray    # (T + 1, h)
    class_emb: np.ndarray   # (num_classes + 1, h)
    kind = "tiny-mlp"

    @property
    def num_classes(self) -> int:
        return self.class_emb.shape[0] - 1

    def _hidden(self, z, t, c):
        pre = z @ self.w1.T + self.b1 + self.time_emb[t] + self.class_emb[_token_index(c, self.num_classes)]
        return np.tanh(pre)

    def predict(self, z, t, c, schedule):
        h = self._hidden(z, t, c)
        return np.sqrt(1.0 - schedule.alphas_bar[t]) * z + h @ self.w2.T + self.b2

    def vjp(self, z, t, c, v, schedule):
        h = self._hidden(z, t, c)
        back = (v @ self.w2) * (1.0 - h * h)
        return np.sqrt(1.0 - schedule.alphas_bar[t]) * v + back @ self.w1

    @classmethod
    def train(cls, latents: np.ndarray, labels: np.ndarray, num_classes: int, schedule: NoiseSchedule,
              rng: SeededRng, *, hidden: int = 64, iters: int = 3000, batch: int = 256,
              lr: float = 2e-3, uncond_prob: float = 0.1, weight_decay: float = 5.0,
              log_every: int = 0) -> "TinyMlpDenoiser":
        """Fit with the standard noise-prediction objective (Adam, hand-written backprop)."""
        n = latents.shape[1]
        steps = schedule.steps
        params = {
            "w1": rng.normal((hidden, n)) / np.sqrt(n),
            "b1": np.zeros(hidden),
            "w2": np.zeros((n, hidden)),
            "b2": np.zeros(n),
            "time_proj": 0.1 * rng.normal((2 * TIME_FREQS, hidden)),
            "class_emb": 0.1 * rng.normal((num_classes + 1, hidden)),
        }
        m = {k: np.zeros_like(p) for k, p in params.items()}
        s = {k: np.zeros_like(p) for k, p in params.items()}
        beta1, beta2 = 0.9, 0.999
        ab = schedule.alphas_bar
        feats = time_features(steps)
        for it in range(1, iters + 1):
            idx = rng.integers(0, len(latents), size=batch)
            z0 = latents[idx]
            t = rng.integers(0, steps + 1, size=batch)
            tok = np.where(rng.uniform(batch) < uncond_prob, num_classes, labels[idx])
            noise = rng.normal(z0.shape)
            a = ab[t][:, None]
            zt = np.sqrt(a) * z0 + np.sqrt(1.0 - a) * noise

            pre = zt @ params["w1"].T + params["b1"] + feats[t] @ params["time_proj"] + params["class_emb"][tok]
            h = np.tanh(pre)
            pred = np.sqrt(1.0 - a) * zt + h @ params["w2"].T + params["b2"]
            err = pred - noise
            if log_every and it % log_every == 0:
                print(f"iter {it}: loss {np.mean(err**2):.5f}")

            g_out = 2.0 * err / err.size
            g_pre = (g_out @ params["w2"]) * (1.0 - h * h)
            grads = {
                "w2": g_out.T @ h,
                "b2": g_out.sum(axis=0),
                "w1": g_pre.T @ zt,
                "b1": g_pre.sum(axis=0),
                "time_proj": feats[t].T @ g_pre,
                "class_emb": np.zeros_like(params["class_emb"]),
            }
            np.add.at(grads["class_emb"], tok, g_pre)
            for k, g in grads.items():
                m[k] = beta1 * m[k] + (1 - beta1) * g
                s[k] = beta2 * s[k] + (1 - beta2) * g * g
                mhat = m[k] / (1 - beta1**it)
                shat = s[k] / (1 - beta2**it)
                params[k] -= lr * mhat / (np.sqrt(shat) + 1e-8)
                if k in ("w1", "w2"):
                    params[k] *= 1.0 - lr * weight_decay
        time_emb = feats @ params.pop("time_proj")
        return cls(time_emb=time_emb, **params)
