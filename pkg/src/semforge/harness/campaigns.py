"""Per-experiment sample logic.

Every campaign is split into a shared context (models, keys, thresholds,
reference sets) built once from the master seed, and a chunk function that
turns a list of sample ids into records ``(sample, step, metric, value)``.
Each sample draws only from its own random stream, derived from
``hash(master_seed, sample_id)``.
"""

from __future__ import annotations

import functools
import hashlib
import re
from collections import defaultdict

import numpy as np

from .. import attacks as at
from .. import watermark_gs as gs
from .. import watermark_tr as trm
from ..diffusion import image_from_latent, make_corpus, make_toy_model
from ..numerics import SeededRng
from ..perturb_metrics import Perturbation, apply_perturbation, ms_ssim, psnr, similarity_matrix
from .config import ExperimentConfig, validate

BOOLEAN_METRICS = ("detected", "attributed", "success", "clean_detected")
VALUE_METRICS = ("bit_accuracy", "p_value", "loss", "psnr", "ms_ssim", "clean_bit_accuracy", "clean_p_value")
BASE_METRICS = BOOLEAN_METRICS + VALUE_METRICS
_VARIANT = re.compile(r"^[A-Za-z0-9:._>+\-]+$")
SIMILARITY_IMAGES = 100


def check_metric_name(name: str) -> str:
    """Metric names are a base metric, optionally prefixed by ``<variant>/``."""
    variant, _, base = name.rpartition("/")
    if base not in BASE_METRICS or (variant and not _VARIANT.match(variant)):
        raise ValueError(f"unknown metric name {name!r}")
    return name


def sample_seed(master_seed: int, sample_id: int) -> int:
    digest = hashlib.sha256(f"{master_seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def sample_rng(cfg: ExperimentConfig, sample_id: int) -> SeededRng:
    return SeededRng(sample_seed(cfg["master_seed"], sample_id))


def campaign_rng(cfg: ExperimentConfig) -> SeededRng:
    return SeededRng(cfg["master_seed"], (0xC0FFEE,))


def build_model(spec: dict):
    return make_toy_model(spec["family"], spec["seed"], spec["kind"], spec["steps"])


def metric_name(cfg) -> str:
    return "bit_accuracy" if cfg["scheme"] == "gs" else "p_value"


# --------------------------------------------------------------------------
# Watermark setups
# --------------------------------------------------------------------------


class Scheme:
    """Watermarking service of one target model: embedding and verification."""

    def __init__(self, cfg: ExperimentConfig, target, rng: SeededRng):
        self.cfg, self.target = cfg, target
        self.scheme = cfg["scheme"]
        if self.scheme == "gs":
            p = cfg["gs"]
            self.params = gs.GsParams.for_latent(target.latent_shape, p["k"])
            self.tau = gs.gs_threshold(p["k"], p["fpr"], p["users"])
            self.pool = None
            if p["pool_size"] > 1:
                self.pool = gs.make_user_pool(rng.derive(0xB0), p["pool_size"] - 1, p["k"])
        else:
            p = cfg["tr"]
            self.key = trm.tr_make_key(rng.derive(0xA1), p["rings"], p["max_radius"], p["channel"],
                                       size=target.latent_shape[-1], channels=target.latent_shape[0],
                                       strength=p["strength"])
            cal = trm.tr_calibrate_threshold(target, self.key, p["calibration_samples"], p["fpr"],
                                             rng.derive(0xCA), conditions=[cfg["condition"]])
            self.tau = cal.threshold

    def key_for(self, rng: SeededRng):
        """Fresh Gaussian Shading key per image; the shared ring key for Tree-Ring."""
        if self.scheme == "gs":
            return gs.GsKey.random(rng.derive(1), self.params.k)
        return self.key

    def initial_latent(self, key, rng: SeededRng, watermarked: bool = True):
        if not watermarked:
            return rng.derive(7).normal(self.target.latent_shape)
        if self.scheme == "gs":
            return gs.gs_embed(self.params, key, rng.derive(2))
        return trm.tr_embed(rng.derive(2).normal(self.target.latent_shape), self.key)

    def verifier(self, keys):
        if self.scheme == "gs":
            return at.gs_verifier(self.target, self.params, keys, self.tau)
        return at.tr_verifier(self.target, self.key, self.tau)

    def attributed(self, images, keys) -> np.ndarray:
        """Attribution to the sample's own user, who is user 0 of the pool."""
        from ..diffusion import latent_from_image
        z = latent_from_image(self.target, images)
        out = np.zeros(len(keys), dtype=bool)
        for i, (zi, key) in enumerate(zip(z, keys)):
            m_hat = gs.gs_extract(zi, self.params, key)
            pool = np.vstack([key.message[None, :], self.pool])
            user, _ = gs.attribute(m_hat, pool, self.tau)
            out[i] = user == 0
        return out


class Context:
    """Everything a campaign shares across samples."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        rng = campaign_rng(cfg)
        self.target = build_model(cfg["target"])
        self.proxy = None if cfg["proxy"] is None else build_model(cfg["proxy"])
        self.scheme = Scheme(cfg, self.target, rng)
        self.references = None
        self.reference_keys = None
        if cfg.experiment == "averaging":
            self._build_references(rng.derive(0xAF))
        if cfg.experiment == "transfer-matrix":
            self.models = [build_model(m) for m in cfg["models"]]
            self.schemes = [Scheme(cfg, m, rng) for m in self.models]
            images, _ = make_corpus(rng.derive(0x51), SIMILARITY_IMAGES)
            self.similarity = similarity_matrix(self.models, images)

    def _build_references(self, rng: SeededRng):
        n = self.cfg["attack"]["references"]
        s = self.scheme
        keys = [s.key_for(rng.derive(i)) for i in range(n)]
        z = np.stack([s.initial_latent(k, rng.derive(i)) for i, k in enumerate(keys)])
        self.references = image_from_latent(self.target, z, self.cfg["condition"])
        self.reference_keys = keys


@functools.lru_cache(maxsize=4)
def _context(config_json: str) -> Context:
    import json
    return Context(validate(json.loads(config_json)))


def get_context(cfg: ExperimentConfig) -> Context:
    from .config import canonical_json
    return _context(canonical_json(cfg.data))


# --------------------------------------------------------------------------
# Chunk functions
# --------------------------------------------------------------------------


def _watermarked(ctx: Context, scheme: Scheme, rngs, model=None):
    keys = [scheme.key_for(r) for r in rngs]
    z = np.stack([scheme.initial_latent(k, r) for k, r in zip(keys, rngs)])
    return keys, image_from_latent(model or scheme.target, z, ctx.cfg["condition"])


def _covers(rngs):
    return np.stack([make_corpus(r.derive(3), 1)[0][0] for r in rngs])


def _verdict_records(out, sids, verdict, name, step=0, prefix=""):
    for j, sid in enumerate(sids):
        out.append((sid, step, prefix + name, float(verdict.metric[j])))
        out.append((sid, step, prefix + "detected", bool(verdict.detected[j])))


def _quality_records(out, sids, images, refs, step=0, prefix=""):
    q_psnr = np.atleast_1d(psnr(images, refs))
    q_ssim = np.atleast_1d(ms_ssim(images, refs))
    for j, sid in enumerate(sids):
        out.append((sid, step, prefix + "psnr", float(q_psnr[j])))
        out.append((sid, step, prefix + "ms_ssim", float(q_ssim[j])))


def _attack_config(cfg) -> at.ImprintConfig:
    a = cfg["attack"]
    mask = None if a["mask"] is None else np.asarray(a["mask"])
    return at.ImprintConfig(steps=a["steps"], lr=a["lr"], eval_every=a["eval_every"], mask=mask,
                            stop_rule=a["stop_rule"])


def _trace_records(out, sids, traces, name):
    for sid, trace in zip(sids, traces):
        for r in trace.records:
            out.append((sid, r.step, "loss", r.loss))
            out.append((sid, r.step, name, r.metric))
            out.append((sid, r.step, "detected", r.detected))
            out.append((sid, r.step, "psnr", r.psnr))
            out.append((sid, r.step, "ms_ssim", r.ms_ssim))


def _attribution_records(out, ctx, sids, images, keys, step):
    if ctx.scheme.scheme == "gs" and ctx.scheme.pool is not None:
        for sid, a in zip(sids, ctx.scheme.attributed(images, keys)):
            out.append((sid, step, "attributed", bool(a)))


def run_roundtrip(ctx, sids, rngs):
    s, name, out = ctx.scheme, metric_name(ctx.cfg), []
    keys, images = _watermarked(ctx, s, rngs)
    _verdict_records(out, sids, s.verifier(keys)(images), name)
    _attribution_records(out, ctx, sids, images, keys, 0)
    z_clean = np.stack([s.initial_latent(None, r, watermarked=False) for r in rngs])
    clean = image_from_latent(s.target, z_clean, ctx.cfg["condition"])
    v = s.verifier(keys)(clean)
    for j, sid in enumerate(sids):
        out.append((sid, 0, "clean_" + name, float(v.metric[j])))
        out.append((sid, 0, "clean_detected", bool(v.detected[j])))
    return out


def run_forgery(ctx, sids, rngs):
    s, out = ctx.scheme, []
    keys, images = _watermarked(ctx, s, rngs)
    covers = _covers(rngs)
    traces = at.imprint_forgery(ctx.proxy, images, covers, _attack_config(ctx.cfg), s.verifier(keys))
    _trace_records(out, sids, traces, metric_name(ctx.cfg))
    final = np.stack([t.image for t in traces])
    _attribution_records(out, ctx, sids, final, keys, max(t.stop_step for t in traces))
    return out


def run_removal(ctx, sids, rngs):
    s, out = ctx.scheme, []
    keys, images = _watermarked(ctx, s, rngs)
    traces = at.imprint_removal(ctx.proxy, images, _attack_config(ctx.cfg), s.verifier(keys))
    _trace_records(out, sids, traces, metric_name(ctx.cfg))
    return out


def run_reprompt(ctx, sids, rngs):
    s, out = ctx.scheme, []
    keys, images = _watermarked(ctx, s, rngs)
    result = at.reprompt(ctx.proxy, images, ctx.cfg["attack"]["prompt"])
    _verdict_records(out, sids, s.verifier(keys)(result), metric_name(ctx.cfg))
    _attribution_records(out, ctx, sids, result, keys, 0)
    _quality_records(out, sids, result, images)
    return out


def run_reprompt_plus(ctx, sids, rngs):
    s, a, name, out = ctx.scheme, ctx.cfg["attack"], metric_name(ctx.cfg), []
    keys, images = _watermarked(ctx, s, rngs)
    basic = at.reprompt(ctx.proxy, images, a["prompts"][0])
    _verdict_records(out, sids, s.verifier(keys)(basic), name, prefix="basic/")
    for j, (sid, r) in enumerate(zip(sids, rngs)):
        res = at.reprompt_plus(ctx.proxy, images[j], a["prompts"], a["resamples"], s.scheme,
                               s.verifier(keys[j]), r.derive(4))
        out.append((sid, 0, "plus/" + name, res.metrics[res.best_index]))
        out.append((sid, 0, "plus/success", res.success))
    return out


def run_averaging(ctx, sids, rngs):
    s, a, name, out = ctx.scheme, ctx.cfg["attack"], metric_name(ctx.cfg), []
    refs, ref_keys = ctx.references, ctx.reference_keys
    if a["mode"] == "forge":
        base = _covers(rngs)
        keys = [ref_keys[sid % len(ref_keys)] for sid in sids]
    else:
        keys, base = _watermarked(ctx, s, rngs)
    result = np.stack([at.averaging_attack(refs, x, a["mode"], a["strength"]) for x in base])
    _verdict_records(out, sids, s.verifier(keys)(result), name)
    _quality_records(out, sids, result, base)
    return out


def run_regeneration(ctx, sids, rngs):
    s, a, out = ctx.scheme, ctx.cfg["attack"], []
    keys, images = _watermarked(ctx, s, rngs)
    result = np.stack([at.regeneration_attack(ctx.proxy, x, a["noise_steps"], r.derive(5))
                       for x, r in zip(images, rngs)])
    _verdict_records(out, sids, s.verifier(keys)(result), metric_name(ctx.cfg))
    _quality_records(out, sids, result, images)
    return out


def run_robustness(ctx, sids, rngs):
    s, cfg, name, out = ctx.scheme, ctx.cfg, metric_name(ctx.cfg), []
    keys, images = _watermarked(ctx, s, rngs)
    verify = s.verifier(keys)
    _verdict_records(out, sids, verify(images), name, prefix="identity/")
    for pi, spec in enumerate(cfg["perturbations"]):
        p = Perturbation(spec["kind"], spec["param"])
        pert = np.stack([apply_perturbation(x, p, r.derive(6, pi)) for x, r in zip(images, rngs)])
        _verdict_records(out, sids, verify(pert), name, prefix=p.label + "/")
    if ctx.proxy is not None:
        traces = at.imprint_forgery(ctx.proxy, images, _covers(rngs), _attack_config(cfg), verify)
        forged = np.stack([t.image for t in traces])
        _verdict_records(out, sids, verify(forged), name, prefix="forged/")
    return out


def run_transfer(ctx, sids, rngs):
    cfg, name, out = ctx.cfg, metric_name(ctx.cfg), []
    for j, (target, scheme) in enumerate(zip(ctx.models, ctx.schemes)):
        keys, images = _watermarked(ctx, scheme, rngs, target)
        verify = scheme.verifier(keys)
        for i, proxy in enumerate(ctx.models):
            v = verify(at.reprompt(proxy, images, cfg["attack"]["prompt"]))
            _verdict_records(out, sids, v, name, prefix=f"pair:{i}>{j}/")
    return out


def run_calibrate(ctx, sids, rngs):
    s, out = ctx.scheme, []
    keys, images = _watermarked(ctx, s, rngs)
    z_clean = np.stack([s.initial_latent(None, r, watermarked=False) for r in rngs])
    clean = image_from_latent(s.target, z_clean, ctx.cfg["condition"])
    verify = s.verifier(keys)
    wm, cl = verify(images), verify(clean)
    for j, sid in enumerate(sids):
        out.append((sid, 0, "p_value", float(wm.metric[j])))
        out.append((sid, 0, "clean_p_value", float(cl.metric[j])))
    return out


RUNNERS = {
    "roundtrip": run_roundtrip,
    "forgery": run_forgery,
    "removal": run_removal,
    "reprompt": run_reprompt,
    "reprompt-plus": run_reprompt_plus,
    "averaging": run_averaging,
    "regeneration": run_regeneration,
    "robustness": run_robustness,
    "transfer-matrix": run_transfer,
    "calibrate": run_calibrate,
}


def run_chunk(cfg: ExperimentConfig, sample_ids) -> list[tuple]:
    ctx = get_context(cfg)
    # compute batches are aligned to absolute sample ids, so floating-point
    # results do not depend on how samples are chunked
    groups = defaultdict(list)
    for sid in sample_ids:
        groups[sid // cfg["batch_size"]].append(sid)
    records = []
    for sids in groups.values():
        records += RUNNERS[cfg.experiment](ctx, sids, [sample_rng(cfg, sid) for sid in sids])
    for rec in records:
        check_metric_name(rec[2])
    # sample-major order keeps merged files independent of chunking
    return sorted(records, key=lambda rec: rec[0])


def context_summary(cfg: ExperimentConfig) -> dict:
    """Campaign-level facts for the summary footer."""
    ctx = get_context(cfg)
    out = {"threshold": ctx.scheme.tau, "metric": metric_name(cfg)}
    if cfg["scheme"] == "tr":
        out["tr_key"] = ctx.scheme.key.to_text()
    if cfg.experiment == "transfer-matrix":
        out["models"] = [f"{m['family']}{m['seed']}" for m in cfg["models"]]
        out["thresholds"] = [s.tau for s in ctx.schemes]
        out["similarity"] = ctx.similarity.tolist()
    return out
