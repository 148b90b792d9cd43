"""Toy latent diffusion models and the model-family factory."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from ..numerics import SeededRng
from .autoencoder import ToyAutoEncoder
from .corpus import NUM_CLASSES, make_corpus
from .denoisers import AnalyticLinearDenoiser, TinyMlpDenoiser, ZeroDenoiser
from .schedule import NoiseSchedule

UNCONDITIONAL = None

FAMILY_CHANNELS = {"A": 4, "B": 4, "C": 16}
FAMILY_SPREAD = {"A": 0.1, "B": 0.6, "C": 0.1}
FAMILY_A_AE_SEED = 0x5EED_A
DEFAULT_STEPS = 50
DATA_FLOOR = 0.05
FIT_SAMPLES = 3000
GUIDANCE_SCALE = 1.0


@dataclass(frozen=True)
class ToyModel:
    autoencoder: ToyAutoEncoder
    denoiser: object
    schedule: NoiseSchedule
    family: str = "A"
    seed: int = 0
    guidance_scale: float = GUIDANCE_SCALE

    def __post_init__(self):
        if self.guidance_scale != 1.0:
            raise ValueError("classifier-free guidance is not modelled; guidance_scale must be 1.0")
        n = int(np.prod(self.autoencoder.latent_shape))
        probe = np.zeros((1, n))
        if self.denoiser.predict(probe, 0, None, self.schedule).shape != probe.shape:
            raise ValueError("denoiser output shape does not match the autoencoder latent")

    @property
    def steps(self) -> int:
        return self.schedule.steps

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.autoencoder.latent_shape

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.latent_shape))

    @property
    def num_classes(self) -> int:
        return self.denoiser.num_classes

    @property
    def name(self) -> str:
        return f"{self.family}{self.seed}:{self.denoiser.kind}"

    def encode(self, x):
        return self.autoencoder.encode(x)

    def decode(self, z):
        return self.autoencoder.decode(z)


def encode(model: ToyModel, x):
    return model.encode(x)


def decode(model: ToyModel, z):
    return model.decode(z)


def autoencoder_for(family: str, seed: int) -> ToyAutoEncoder:
    if family not in FAMILY_CHANNELS:
        raise ValueError(f"unknown model family {family!r}")
    ae_seed = FAMILY_A_AE_SEED if family == "A" else (seed * 7919 + ord(family)) % 2**63
    return ToyAutoEncoder.from_seed(ae_seed, FAMILY_CHANNELS[family], spread=FAMILY_SPREAD[family],
                                    mix_channels=family != "A")


@functools.lru_cache(maxsize=32)
def make_toy_model(family: str, seed: int, kind: str = "analytic-linear", steps: int = DEFAULT_STEPS) -> ToyModel:
    """Build a deterministic toy model.

    Family A models all share one autoencoder; family B draws its own
    autoencoder of the same shape; family C uses 16 latent channels.
    The denoiser is fitted to latents of a seeded shape corpus.
    """
    ae = autoencoder_for(family, seed)
    schedule = NoiseSchedule.scaled_linear(steps)
    if kind == "zero":
        return ToyModel(ae, ZeroDenoiser(NUM_CLASSES), schedule, family, seed)

    rng = SeededRng(seed, (0xD0, ord(family)))
    images, labels = make_corpus(rng.derive(1), FIT_SAMPLES)
    latents = ae.encode(images).reshape(len(images), -1)
    if kind == "analytic-linear":
        den = AnalyticLinearDenoiser.fit(latents, labels, NUM_CLASSES, DATA_FLOOR)
    elif kind == "tiny-mlp":
        den = TinyMlpDenoiser.train(latents, labels, NUM_CLASSES, schedule, rng.derive(2))
    else:
        raise ValueError(f"unknown denoiser kind {kind!r}")
    return ToyModel(ae, den, schedule, family, seed)


def image_from_latent(model: ToyModel, z_T, c=None) -> np.ndarray:
    """Generate from initial latent(s) and decode to pixels."""
    from .sampler import generate
    return model.decode(generate(model, z_T, c))


def latent_from_image(model: ToyModel, image, c=None) -> np.ndarray:
    """Encode image(s) and invert to the estimated initial latent(s)."""
    from .sampler import invert
    return invert(model, model.encode(image), c)
