"""Black-box attacks on semantic watermarks through an attacker-owned proxy model.

Attacks see only the proxy model, the watermarked image(s), and a verifier
callback. A verifier is a closure over the target model, the watermark key
and the decision threshold; it maps a batch of images to a
:class:`Verdict`.

Imprinting attacks run on batches: every array argument may carry a
leading batch axis and each sample gets its own :class:`AttackTrace`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion.sampler import forward_noise, generate, invert, vjp_through_inversion
from .numerics import SeededRng
from .perturb_metrics import PIXEL_MAX, PIXEL_MIN, ms_ssim, psnr
from . import watermark_gs as gs
from . import watermark_tr as tr

DEFAULT_STEPS = 150
DEFAULT_LR = 0.01
DEFAULT_EVAL_EVERY = 10
STOP_RULES = ("fixed-steps", "detector-feedback")


@dataclass(frozen=True)
class Verdict:
    """Per-image verification outcome.

    ``metric`` is the scheme's raw detection metric (bit accuracy or
    p-value), ``score`` orders images by watermark strength (higher means
    more watermark-like), and ``detected`` is the threshold decision.
    """

    metric: np.ndarray
    score: np.ndarray
    detected: np.ndarray


Verifier = Callable[[np.ndarray], Verdict]


def gs_verifier(target, params: gs.GsParams, keys, tau: float, *, user_pool=None) -> Verifier:
    """Bit-accuracy verifier; ``keys`` is one GsKey or one per image.

    With a ``user_pool`` the message is attributed over the pool and an
    image counts as detected when any user clears ``tau``.
    """
    def verify(images):
        images = np.asarray(images, dtype=np.float64)
        batch = images.reshape(-1, *images.shape[-2:])
        z = invert(target, target.encode(batch))
        ks = [keys] * len(batch) if isinstance(keys, gs.GsKey) else list(keys)
        if len(ks) != len(batch):
            raise ValueError("need one key per image")
        acc = np.empty(len(batch))
        for i, (zi, k) in enumerate(zip(z, ks)):
            m_hat = gs.gs_extract(zi, params, k)
            if user_pool is None:
                acc[i] = gs.bit_accuracy(k.message, m_hat)
            else:
                acc[i] = gs.attribute(m_hat, user_pool, tau)[1]
        shape = images.shape[:-2]
        acc = acc.reshape(shape)
        return Verdict(metric=acc, score=acc, detected=acc > tau)
    return verify


def tr_verifier(target, key: tr.TrKey, threshold: float) -> Verifier:
    """Tree-Ring p-value verifier; detected when p <= threshold."""
    def verify(images):
        images = np.asarray(images, dtype=np.float64)
        batch = images.reshape(-1, *images.shape[-2:])
        z = invert(target, target.encode(batch))
        p = np.array([tr.tr_verify(zi, key, threshold).p_value for zi in z]).reshape(images.shape[:-2])
        return Verdict(metric=p, score=-p, detected=p <= threshold)
    return verify


@dataclass(frozen=True)
class ImprintConfig:
    steps: int = DEFAULT_STEPS
    lr: float = DEFAULT_LR
    eval_every: int = DEFAULT_EVAL_EVERY
    mask: np.ndarray | None = None
    stop_rule: str = "fixed-steps"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.stop_rule not in STOP_RULES:
            raise ValueError(f"stop_rule must be one of {STOP_RULES}")
        if self.mask is not None:
            m = np.asarray(self.mask)
            if m.ndim != 2 or not np.all((m == 0) | (m == 1)):
                raise ValueError("mask must be a binary (latent height, latent width) array")
            object.__setattr__(self, "mask", m.astype(np.float64))

    def latent_mask(self, latent_shape) -> np.ndarray | None:
        """Protected latent positions broadcast over channels (1 = keep cover)."""
        if self.mask is None:
            return None
        if self.mask.shape != tuple(latent_shape[-2:]):
            raise ValueError(f"mask shape {self.mask.shape} does not match latent {latent_shape}")
        return np.broadcast_to(self.mask, latent_shape)

    def pixel_mask(self, image_shape) -> np.ndarray | None:
        """Pixel mask matching :meth:`latent_mask` (each latent cell covers one patch)."""
        if self.mask is None:
            return None
        fh, fw = image_shape[-2] // self.mask.shape[0], image_shape[-1] // self.mask.shape[1]
        return np.kron(self.mask, np.ones((fh, fw))).astype(bool)


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    metric: float
    detected: bool
    psnr: float
    ms_ssim: float


@dataclass
class AttackTrace:
    records: list[StepRecord] = field(default_factory=list)
    image: np.ndarray | None = None
    stop_step: int = 0
    aborted: bool = False

    @property
    def final(self) -> StepRecord:
        return self.records[-1]

    def metric_at(self, step: int) -> float:
        """Detection metric at the last evaluation not after ``step``."""
        best = self.records[0]
        for r in self.records:
            if r.step <= step:
                best = r
        return best.metric


def _norm(x):
    return np.sqrt(np.sum(x.reshape(len(x), -1) ** 2, axis=1))


def _imprint(proxy, z_start, anchor, sign, reference, cover_pixels, cfg: ImprintConfig, verifier: Verifier,
             goal_detected: bool, c=None) -> list[AttackTrace]:
    """Gradient descent on ``|| invert(z_start + delta) - sign * anchor ||``."""
    n = len(z_start)
    lat_mask = cfg.latent_mask(proxy.latent_shape)
    pix_mask = cfg.pixel_mask(reference.shape[-2:])
    free = None if lat_mask is None else 1.0 - lat_mask
    target = sign * anchor
    delta = np.zeros_like(z_start)
    traces = [AttackTrace() for _ in range(n)]
    active = np.ones(n, dtype=bool)

    def render(idx):
        x = proxy.decode(z_start[idx] + delta[idx])
        if pix_mask is not None:
            x = np.where(pix_mask, cover_pixels[idx], x)
        return x

    def evaluate(step, loss, idx):
        if idx.size == 0:
            return np.zeros(0, dtype=bool)
        # verifiers hold one key per batch row, so always score the full batch
        x_all = render(np.arange(n))
        verdict = verifier(x_all)
        x = x_all[idx]
        metric, detected = np.atleast_1d(verdict.metric)[idx], np.atleast_1d(verdict.detected)[idx]
        q_psnr = np.atleast_1d(psnr(x, reference[idx]))
        q_ssim = np.atleast_1d(ms_ssim(x, reference[idx]))
        for j, i in enumerate(idx):
            traces[i].records.append(StepRecord(step, float(loss[i]), float(metric[j]),
                                                bool(detected[j]), float(q_psnr[j]), float(q_ssim[j])))
            traces[i].image = x[j]
            traces[i].stop_step = step
        return detected == goal_detected

    for step in range(cfg.steps + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        z_T = invert(proxy, z_start[idx] + delta[idx], c)
        resid = z_T - target[idx]
        loss = np.full(n, np.nan)
        loss[idx] = _norm(resid)
        bad = ~np.isfinite(loss[idx])
        if np.any(bad):
            for i in idx[bad]:
                traces[i].aborted = True
            active[idx[bad]] = False
            idx = idx[~bad]
            resid = resid[~bad]
        if step % cfg.eval_every == 0 or step == cfg.steps:
            reached = evaluate(step, loss, idx)
            if cfg.stop_rule == "detector-feedback":
                active[idx[reached]] = False
                keep = ~reached
                idx, resid = idx[keep], resid[keep]
        if step == cfg.steps or idx.size == 0:
            continue
        scale = np.where(loss[idx] > 0, 1.0 / np.where(loss[idx] > 0, loss[idx], 1.0), 0.0)
        _, grad = vjp_through_inversion(proxy, z_start[idx] + delta[idx], resid * scale[:, None, None, None], c)
        step_vec = cfg.lr * grad
        if free is not None:
            step_vec = step_vec * free
        delta[idx] -= step_vec
    for i, trace in enumerate(traces):
        if trace.image is None:
            # aborted before the first evaluation
            trace.image = render(np.array([i]))[0]
    return traces


def _batched(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == ndim else (x, False)


def imprint_forgery(proxy, x_w, x_cover, cfg: ImprintConfig, verifier: Verifier):
    """Imprint the watermark of ``x_w`` onto ``x_cover``.

    Minimizes ``|| invert(E(x_cover) + delta) - invert(E(x_w)) ||`` over the
    latent offset ``delta`` with plain gradient descent. Returns one trace,
    or a list of traces for a batch.
    """
    xw, single = _batched(x_w, 2)
    xc, _ = _batched(x_cover, 2)
    if xw.shape != xc.shape:
        raise ValueError("need one cover per watermarked image")
    anchor = invert(proxy, proxy.encode(xw))
    traces = _imprint(proxy, proxy.encode(xc), anchor, 1.0, xc, xc, cfg, verifier, goal_detected=True)
    return traces[0] if single else traces


def imprint_removal(proxy, x_w, cfg: ImprintConfig, verifier: Verifier):
    """Push the inversion of ``x_w`` towards the negation of its initial latent."""
    xw, single = _batched(x_w, 2)
    z0 = proxy.encode(xw)
    anchor = invert(proxy, z0)
    traces = _imprint(proxy, z0, anchor, -1.0, xw, xw, cfg, verifier, goal_detected=False)
    return traces[0] if single else traces


def reprompt(proxy, x_w, c_new) -> np.ndarray:
    """Invert ``x_w`` on the proxy and regenerate it under ``c_new``."""
    z_T = invert(proxy, proxy.encode(np.asarray(x_w, dtype=np.float64)))
    return proxy.decode(generate(proxy, z_T, c_new))


@dataclass
class RepromptResult:
    image: np.ndarray
    success: bool
    metrics: list[float]
    best_index: int
    candidates: list[tuple]


def reprompt_plus(proxy, x_w, prompts: Sequence, resamples: int, scheme: str, verifier: Verifier,
                  rng: SeededRng) -> RepromptResult:
    """Try every (prompt, resample) candidate for one watermarked image.

    Resample 0 regenerates from the inverted latent itself; further
    resamples redraw magnitudes with :func:`resample_bins` (Gaussian
    Shading only). Returns the first candidate the verifier accepts, else
    the one with the strongest watermark score.
    """
    if len(prompts) < 1:
        raise ValueError("need at least one prompt")
    if scheme not in ("gs", "tr"):
        raise ValueError("scheme must be 'gs' or 'tr'")
    if scheme == "gs" and resamples < 1:
        raise ValueError("resamples must be >= 1")
    n_res = resamples if scheme == "gs" else 1
    z_T = invert(proxy, proxy.encode(np.asarray(x_w, dtype=np.float64)))
    latents = [z_T] + [gs.resample_bins(z_T, rng.derive(j)) for j in range(1, n_res)]
    cands, images = [], []
    for pi, c in enumerate(prompts):
        for j, z in enumerate(latents):
            cands.append((pi, j))
            images.append(proxy.decode(generate(proxy, z, c)))
    images = np.stack(images)
    verdict = verifier(images)
    hits = np.flatnonzero(verdict.detected)
    best = int(hits[0]) if hits.size else int(np.argmax(verdict.score))
    return RepromptResult(images[best], bool(hits.size), [float(m) for m in verdict.metric], best, cands)


def averaging_attack(references, target, mode: str, strength: float = 1.0) -> np.ndarray:
    """Add (forge) or subtract (remove) the mean pattern of ``references``."""
    refs = np.asarray(references, dtype=np.float64)
    if refs.ndim != 3 or len(refs) == 0:
        raise ValueError("need a nonempty stack of reference images")
    if mode not in ("forge", "remove"):
        raise ValueError("mode must be 'forge' or 'remove'")
    mean = refs.mean(axis=0)
    pattern = mean - mean.mean()
    sign = 1.0 if mode == "forge" else -1.0
    return np.clip(np.asarray(target, dtype=np.float64) + sign * strength * pattern, PIXEL_MIN, PIXEL_MAX)


def regeneration_attack(proxy, x_w, noise_steps: int, rng: SeededRng) -> np.ndarray:
    """Noise the proxy latent of ``x_w`` to step ``noise_steps`` and denoise it back."""
    if not 0 <= noise_steps <= proxy.steps:
        raise ValueError(f"noise_steps must lie in 0..{proxy.steps}")
    z0 = proxy.encode(np.asarray(x_w, dtype=np.float64))
    if noise_steps == 0:
        return proxy.decode(z0)
    z_t = forward_noise(proxy, z0, noise_steps, rng.normal(z0.shape))
    return proxy.decode(generate(proxy, z_t, None, start=noise_steps))
