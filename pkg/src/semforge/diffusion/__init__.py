from .autoencoder import ToyAutoEncoder
from .corpus import NUM_CLASSES, make_corpus, render_shape
from .denoisers import AnalyticLinearDenoiser, TinyMlpDenoiser, ZeroDenoiser
from .model import UNCONDITIONAL, ToyModel, decode, encode, image_from_latent, latent_from_image, make_toy_model
from .sampler import ddim_step, forward_noise, generate, invert, vjp_through_inversion
from .schedule import NoiseSchedule

__all__ = [
    "AnalyticLinearDenoiser", "NoiseSchedule", "NUM_CLASSES", "TinyMlpDenoiser", "ToyAutoEncoder",
    "ToyModel", "UNCONDITIONAL", "ZeroDenoiser", "ddim_step", "decode", "encode", "forward_noise",
    "generate", "image_from_latent", "invert", "latent_from_image", "make_corpus", "make_toy_model", "render_shape", "vjp_through_inversion",
]
from .fixture import FixtureFormatError, load_model, save_model  # noqa: E402

__all__ += ["FixtureFormatError", "load_model", "save_model"]
