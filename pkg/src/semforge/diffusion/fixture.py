"""Flat binary container for toy-model fixtures.

Layout (all integers little-endian)::

    magic    8 bytes  b"SFMODEL\\0"
    version  uint32   FORMAT_VERSION
    hlen     uint32   byte length of the header
    header   hlen     UTF-8 JSON: {"family", "seed", "kind", "image_size",
                      "ae_seed", "arrays": [[name, shape], ...]}
    payload           each array in header order, row-major float64 ("<f8")

The arrays are ``filters`` and ``betas`` followed by the denoiser fields
(none for the zero denoiser).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autoencoder import ToyAutoEncoder
from .denoisers import AnalyticLinearDenoiser, TinyMlpDenoiser, ZeroDenoiser
from .model import ToyModel
from .schedule import NoiseSchedule

MAGIC = b"SFMODEL\0"
FORMAT_VERSION = 1

_DENOISER_FIELDS = {
    "zero": (),
    "analytic-linear": ("basis", "scales", "means"),
    "tiny-mlp": ("w1", "b1", "w2", "b2", "time_emb", "class_emb"),
}


class FixtureFormatError(ValueError):
    """The file is not a readable model fixture."""


def save_model(model: ToyModel, path) -> None:
    kind = model.denoiser.kind
    arrays = [("filters", model.autoencoder.filters), ("betas", model.schedule.betas)]
    arrays += [(name, getattr(model.denoiser, name)) for name in _DENOISER_FIELDS[kind]]
    header = {
        "family": model.family,
        "seed": model.seed,
        "kind": kind,
        "num_classes": model.num_classes,
        "image_size": model.autoencoder.image_size,
        "ae_seed": model.autoencoder.seed,
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> ToyModel:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise FixtureFormatError("bad magic")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise FixtureFormatError(f"unsupported fixture version {version}")
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + hlen].decode())
    offset = start + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        if offset + 8 * count > len(raw):
            raise FixtureFormatError("truncated payload")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(raw):
        raise FixtureFormatError("trailing bytes after payload")

    ae = ToyAutoEncoder(arrays.pop("filters"), image_size=header["image_size"], seed=header["ae_seed"])
    schedule = NoiseSchedule(arrays.pop("betas"))
    kind = header["kind"]
    if kind == "zero":
        den = ZeroDenoiser(header["num_classes"])
    elif kind == "analytic-linear":
        den = AnalyticLinearDenoiser(**arrays)
    elif kind == "tiny-mlp":
        den = TinyMlpDenoiser(**arrays)
    else:
        raise FixtureFormatError(f"unknown denoiser kind {kind!r}")
    return ToyModel(ae, den, schedule, header["family"], header["seed"])
