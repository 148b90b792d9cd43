"""Command-line entry point (``semforge``).

Every failure exits nonzero and prints one JSON object
``{"error": <type>, "message": <text>}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import re
import sys

import numpy as np

from .. import watermark_gs as gs
from .. import watermark_tr as trm
from ..diffusion import image_from_latent
from .campaigns import Scheme, build_model, campaign_rng, sample_rng
from .config import DENOISERS, ConfigError, load_config, validate
from .runner import read_results, run_experiment

_MODEL = re.compile(r"^([ABC]):?(\d+)(?::([a-z-]+))?$")


def parse_model(text: str) -> dict:
    """``A1``, ``A:1`` or ``A:1:tiny-mlp`` to a model spec."""
    m = _MODEL.match(text)
    if not m or (m.group(3) and m.group(3) not in DENOISERS):
        raise ConfigError(f"bad model spec {text!r}; expected e.g. A1 or B:2:tiny-mlp")
    spec = {"family": m.group(1), "seed": int(m.group(2))}
    if m.group(3):
        spec["kind"] = m.group(3)
    return spec


def _common(p, proxy=True):
    p.add_argument("--config", help="experiment config JSON; flags below are ignored when given")
    p.add_argument("--target", default="A1", help="target model, e.g. A1 or C:1:tiny-mlp")
    if proxy:
        p.add_argument("--proxy", default="A2", help="attacker's proxy model")
    p.add_argument("--scheme", choices=("gs", "tr"), default="gs")
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--output", default=None)
    p.add_argument("--chunk-size", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=10, help="samples per compute batch; divides chunk size")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-resume", action="store_true")


def _config_from(args, experiment: str, **extra) -> dict:
    raw = {
        "experiment": experiment, "target": parse_model(args.target), "scheme": args.scheme,
        "samples": args.samples, "master_seed": args.seed, "chunk_size": args.chunk_size,
        "batch_size": args.batch_size, "workers": args.workers, "output": args.output or f"{experiment}.jsonl",
    }
    if getattr(args, "proxy", None):
        raw["proxy"] = parse_model(args.proxy)
    raw.update(extra)
    return raw


def _run(args, experiment: str, **extra):
    cfg = load_config(args.config) if args.config else validate(_config_from(args, experiment, **extra))
    result = run_experiment(cfg, resume=not args.no_resume)
    s = result.summary
    print(json.dumps({"output": str(result.path), "experiment": s["experiment"], "threshold": s["threshold"],
                      "metrics": s["metrics"]}, sort_keys=True, indent=2))
    return 0


def _attack_extra(args) -> dict:
    atk = {}
    for name in ("steps", "lr", "stop_rule", "prompt"):
        v = getattr(args, name, None)
        if v is not None:
            atk[name] = v
    return {"attack": atk} if atk else {}


def cmd_generate(args):
    cfg = validate({"experiment": "roundtrip", "target": parse_model(args.model), "scheme": args.scheme,
                    "master_seed": args.seed, "condition": args.condition,
                    "tr": {"calibration_samples": args.calibration_samples}})
    model = build_model(cfg["target"])
    scheme = Scheme(cfg, model, campaign_rng(cfg))
    rngs = [sample_rng(cfg, i) for i in range(args.count)]
    keys = [scheme.key_for(r) for r in rngs]
    z = np.stack([scheme.initial_latent(k, r) for k, r in zip(keys, rngs)])
    images = image_from_latent(model, z, cfg["condition"])
    np.save(args.out + ".npy", images)
    with open(args.out + ".keys.jsonl", "w") as fh:
        for i, k in enumerate(keys):
            text = k.to_hex() if args.scheme == "gs" else k.to_text()
            fh.write(json.dumps({"index": i, "scheme": args.scheme, "model": args.model, "key": text,
                                 "threshold": scheme.tau}, sort_keys=True) + "\n")
    print(json.dumps({"images": args.out + ".npy", "keys": args.out + ".keys.jsonl", "count": args.count}))
    return 0


def cmd_verify(args):
    images = np.load(args.image)
    images = images[None] if images.ndim == 2 else images
    if args.keys:
        with open(args.keys) as fh:
            entries = [json.loads(line) for line in fh if line.strip()]
    else:
        if not args.key:
            raise ConfigError("give --key or --keys")
        entries = [{"index": i, "key": args.key} for i in range(len(images))]
    if len(entries) != len(images):
        raise ConfigError(f"{len(entries)} keys for {len(images)} images")
    model = build_model(validate({"experiment": "roundtrip", "target": parse_model(args.model)})["target"])
    from ..diffusion import latent_from_image
    z = latent_from_image(model, images)
    out = []
    for zi, entry in zip(z, entries):
        if args.scheme == "gs":
            params = gs.GsParams.for_latent(model.latent_shape, args.k)
            tau = args.threshold if args.threshold is not None else entry.get(
                "threshold", gs.gs_threshold(args.k, gs.DEFAULT_FPR, gs.DEFAULT_USERS))
            det = gs.gs_detect(zi, params, gs.GsKey.from_hex(entry["key"], args.k), tau)
            out.append({"index": entry["index"], "bit_accuracy": det.bit_accuracy, "detected": bool(det.detected),
                        "threshold": tau})
        else:
            tau = args.threshold if args.threshold is not None else entry.get("threshold", trm.DEFAULT_FPR)
            det = trm.tr_verify(zi, trm.TrKey.from_text(entry["key"]), tau)
            out.append({"index": entry["index"], "p_value": det.p_value, "detected": bool(det.detected),
                        "statistic": det.statistic, "threshold": tau})
    for row in out:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_calibrate(args):
    if args.scheme == "gs":
        for f in args.fpr:
            tau = gs.gs_threshold(args.k, f, args.users)
            print(json.dumps({"fpr": f, "k": args.k, "users": args.users, "tau": tau}) if args.json
                  else f"{tau:.5f}")
        return 0
    raw = {"experiment": "calibrate", "scheme": "tr", "target": parse_model(args.target), "samples": args.samples,
           "master_seed": args.seed, "output": args.output or "calibrate.jsonl", "fpr_targets": args.fpr,
           "tr": {"calibration_samples": args.samples}}
    cfg = load_config(args.config) if args.config else validate(raw)
    result = run_experiment(cfg)
    for row in result.summary["calibration"]:
        print(json.dumps(row, sort_keys=True) if args.json else f"{row['threshold']:.6g}")
    return 0


def cmd_transfer(args):
    models = [parse_model(m) for m in args.models.split(",")]
    return _run(args, "transfer-matrix", models=models, target=models[0], **_attack_extra(args))


def cmd_robustness(args):
    from ..perturb_metrics import KINDS, Perturbation
    perts = [Perturbation.default(k).to_dict() for k in KINDS]
    if args.kinds:
        wanted = args.kinds.split(",")
        perts = [p for p in perts if p["kind"] in wanted]
    extra = {"perturbations": perts, **_attack_extra(args)}
    if not args.with_forged:
        args.proxy = None
    return _run(args, "robustness", **extra)


def cmd_report(args):
    records, s = read_results(args.results)
    print(f"experiment {s['experiment']} ({s['kind']}), {s['samples']} samples, {len(records)} records")
    print(f"config {s['config_hash'][:12]}  code {s['code_version']}  threshold {s['threshold']:.6g}")
    width = max(len(k) for k in s["metrics"])
    for name, st in s["metrics"].items():
        if "rate" in st:
            print(f"  {name:<{width}}  rate {st['rate']:.3f}")
        else:
            print(f"  {name:<{width}}  median {st['median']:.4f}  p10 {st['p10']:.4f}  p90 {st['p90']:.4f}")
    for key in ("matrix", "similarity"):
        if key in s:
            print(f"{key} (rows proxy, columns target): " + " ".join(s["models"]))
            for name, row in zip(s["models"], s[key]):
                print(f"  {name:>4} " + " ".join(f"{v:6.3f}" for v in row))
    for row in s.get("per_step", []):
        print(f"  step {row['step']:4d}  median {row['median_metric']:.4f}  detect {row['detection_rate']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semforge", description="Semantic watermark forgery and removal experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate watermarked images and their keys")
    p.add_argument("--model", default="A1")
    p.add_argument("--scheme", choices=("gs", "tr"), default="gs")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--condition", type=int, default=3)
    p.add_argument("--calibration-samples", type=int, default=1000)
    p.add_argument("--out", required=True, help="output prefix; writes <out>.npy and <out>.keys.jsonl")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("verify", help="verify images against keys")
    p.add_argument("--image", required=True, help=".npy file with one image or a stack")
    p.add_argument("--model", default="A1")
    p.add_argument("--scheme", choices=("gs", "tr"), default="gs")
    p.add_argument("--key", help="single key (GS hex or Tree-Ring JSON)")
    p.add_argument("--keys", help="keys.jsonl written by generate")
    p.add_argument("--k", type=int, default=gs.DEFAULT_K)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_verify)

    for name, exp, help_ in (("forge", "forgery", "imprinting forgery campaign"),
                             ("remove", "removal", "imprinting removal campaign")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--stop-rule", choices=("fixed-steps", "detector-feedback"))
        p.set_defaults(func=lambda a, e=exp: _run(a, e, **_attack_extra(a)))

    p = sub.add_parser("reprompt", help="reprompting campaign")
    _common(p)
    p.add_argument("--prompt", type=int)
    p.add_argument("--plus", action="store_true", help="reprompt+ over several prompts and resamples")
    p.set_defaults(func=lambda a: _run(a, "reprompt-plus" if a.plus else "reprompt", **_attack_extra(a)))

    p = sub.add_parser("run", help="run any experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--no-resume", action="store_true")
    p.set_defaults(func=lambda a: _run(a, None))

    p = sub.add_parser("calibrate", help="detection thresholds")
    p.add_argument("--scheme", choices=("gs", "tr"), default="gs")
    p.add_argument("--k", type=int, default=gs.DEFAULT_K)
    p.add_argument("--users", type=int, default=1)
    p.add_argument("--fpr", type=float, nargs="+", default=None)
    p.add_argument("--target", default="A1")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None)
    p.add_argument("--config")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("transfer-matrix", help="proxy x target reprompt success matrix")
    _common(p, proxy=False)
    p.add_argument("--models", default="A1,A2,B1,C1")
    p.add_argument("--prompt", type=int)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("robustness", help="detection under common perturbations")
    _common(p)
    p.add_argument("--kinds", help="comma-separated perturbation kinds (default all)")
    p.add_argument("--with-forged", action="store_true", help="also score imprint-forged images")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("report", help="render a results file")
    p.add_argument("--results", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "fpr", "unset") is None:
        args.fpr = [gs.DEFAULT_FPR] if args.scheme == "gs" else [trm.DEFAULT_FPR]
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a machine-readable error
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
