"""Chunked, resumable experiment runner.

Samples are split into fixed chunks of ``chunk_size`` ids. Each finished
chunk is written atomically to ``<output>.parts/chunk-NNNNN.jsonl``; a rerun
with the same config skips chunks that already exist. When every chunk is
present the parts are merged in sample order into the final JSONL file,
followed by one summary line. Records never depend on chunking, worker
count or resumption, so the merged records are byte-identical across runs.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import os
import shutil
import tempfile
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from . import campaigns
from .config import ConfigError, ExperimentConfig, validate

CODE_VERSION = __version__
PER_STEP_EXPERIMENTS = ("forgery", "removal")


@dataclass
class RunResult:
    path: Path
    summary: dict
    chunks_run: int
    chunks_skipped: int


def chunk_ids(cfg: ExperimentConfig) -> list[list[int]]:
    n, size = cfg["samples"], cfg["chunk_size"]
    return [list(range(s, min(s + size, n))) for s in range(0, n, size)]


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _record_line(cfg: ExperimentConfig, rec) -> str:
    sid, step, metric, value = rec
    return json.dumps({
        "type": "record", "experiment": cfg.experiment_id, "sample": int(sid), "step": int(step),
        "metric": metric, "value": value, "config_hash": cfg.config_hash, "code_version": CODE_VERSION,
    }, sort_keys=True)


def _chunk_job(config_data: dict, sids: list[int]) -> list[tuple]:
    return campaigns.run_chunk(validate(config_data), sids)


def parts_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.output_path()
    return out.with_name(out.name + ".parts")


def _prepare_parts(cfg: ExperimentConfig, resume: bool) -> Path:
    parts = parts_dir(cfg)
    stamp = parts / "config.json"
    mark = {"config_hash": cfg.config_hash, "chunk_size": cfg["chunk_size"]}
    if parts.exists():
        if resume and stamp.exists() and all(json.loads(stamp.read_text()).get(k) == v for k, v in mark.items()):
            return parts
        if resume and any(parts.glob("chunk-*.jsonl")):
            raise ConfigError(f"{parts} holds chunks of a different config or chunk size; rerun without resume")
        shutil.rmtree(parts)
    _atomic_write(stamp, json.dumps({**mark, "config": cfg.data}, sort_keys=True))
    return parts


def run_experiment(cfg: ExperimentConfig, *, resume: bool = True, keep_parts: bool = False,
                   max_chunks: int | None = None) -> RunResult | None:
    """Run (or resume) ``cfg`` and write the merged results file.

    ``max_chunks`` stops after that many new chunks without merging, which
    simulates an interrupted run; the function then returns None.
    """
    parts = _prepare_parts(cfg, resume)
    chunks = chunk_ids(cfg)
    files = [parts / f"chunk-{i:05d}.jsonl" for i in range(len(chunks))]
    pending = [i for i, f in enumerate(files) if not f.exists()]
    skipped = len(chunks) - len(pending)
    interrupted = max_chunks is not None and len(pending) > max_chunks
    todo = pending[:max_chunks] if interrupted else pending

    def write(i, records):
        _atomic_write(files[i], "".join(_record_line(cfg, r) + "\n" for r in records))

    if cfg["workers"] > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            futures = {i: pool.submit(_chunk_job, cfg.data, chunks[i]) for i in todo}
            for i in todo:
                write(i, futures[i].result())
    else:
        for i in todo:
            write(i, campaigns.run_chunk(cfg, chunks[i]))
    if interrupted:
        return None

    lines = []
    for f in files:
        lines.extend(f.read_text().splitlines())
    records = [json.loads(line) for line in lines]
    summary = summarize(cfg, records)
    out = cfg.output_path()
    _atomic_write(out, "".join(line + "\n" for line in lines) + json.dumps(summary, sort_keys=True) + "\n")
    export_csv(cfg, summary)
    if not keep_parts:
        shutil.rmtree(parts)
    return RunResult(out, summary, len(todo), skipped)


def read_results(path) -> tuple[list[dict], dict]:
    records, summary = [], None
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            if obj.get("type") == "summary":
                summary = obj
            else:
                records.append(obj)
    if summary is None:
        raise ValueError(f"{path} has no summary line")
    return records, summary


# --------------------------------------------------------------------------
# Summaries
# --------------------------------------------------------------------------


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    out = {"n": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)),
           "p10": float(np.percentile(v, 10)), "p90": float(np.percentile(v, 90)),
           "min": float(v.min()), "max": float(v.max())}
    return out


def final_values(records) -> dict[str, list]:
    """Metric values at each sample's last recorded step, ordered by sample."""
    last = {}
    for r in records:
        last[r["sample"]] = max(last.get(r["sample"], r["step"]), r["step"])
    out = defaultdict(dict)
    for r in records:
        if r["step"] == last[r["sample"]] or r["metric"] == "attributed":
            out[r["metric"]][r["sample"]] = r["value"]
    return {m: [vals[s] for s in sorted(vals)] for m, vals in out.items()}


def _per_step(records, metric) -> list[dict]:
    by_step = defaultdict(lambda: defaultdict(list))
    for r in records:
        if r["metric"] in (metric, "detected", "psnr"):
            by_step[r["step"]][r["metric"]].append(r["value"])
    rows = []
    for step in sorted(by_step):
        d = by_step[step]
        rows.append({"step": step, "n": len(d[metric]), "median_metric": float(np.median(d[metric])),
                     "detection_rate": float(np.mean(d["detected"])), "median_psnr": float(np.median(d["psnr"]))})
    return rows


def summarize(cfg: ExperimentConfig, records) -> dict:
    metrics = {}
    for name, values in sorted(final_values(records).items()):
        s = _stats(values)
        if name.rpartition("/")[2] in campaigns.BOOLEAN_METRICS:
            s = {"n": s["n"], "rate": s["mean"]}
        metrics[name] = s
    ctx = campaigns.context_summary(cfg)
    summary = {
        "type": "summary", "experiment": cfg.experiment_id, "kind": cfg.experiment,
        "config_hash": cfg.config_hash, "code_version": CODE_VERSION, "samples": cfg["samples"],
        "metrics": metrics, "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "quality_note": "psnr and ms_ssim are computed on pixels in [-1, 1] against the attacked source image",
    }
    summary.update(ctx)
    if cfg.experiment in PER_STEP_EXPERIMENTS:
        summary["per_step"] = _per_step(records, ctx["metric"])
    if cfg.experiment == "transfer-matrix":
        n = len(cfg["models"])
        mat = [[metrics[f"pair:{i}>{j}/{ctx['metric']}"]["median"] for j in range(n)] for i in range(n)]
        rate = [[metrics[f"pair:{i}>{j}/detected"]["rate"] for j in range(n)] for i in range(n)]
        summary["matrix"] = mat
        summary["success_matrix"] = rate
    if cfg.experiment == "calibrate":
        from ..perturb_metrics import tpr_at_fpr
        from ..watermark_tr import empirical_threshold
        fv = final_values(records)
        summary["calibration"] = [
            {"fpr": f, "threshold": empirical_threshold(fv["clean_p_value"], f),
             "tpr": tpr_at_fpr(fv["p_value"], fv["clean_p_value"], f, "lower-is-positive")}
            for f in cfg["fpr_targets"]]
    return summary


def export_csv(cfg: ExperimentConfig, summary: dict) -> list[Path]:
    """Companion CSV tables for matrix and robustness experiments."""
    out = cfg.output_path()
    written = []

    def table(suffix, header, rows):
        path = out.with_name(out.stem + suffix)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    if cfg.experiment == "transfer-matrix":
        names = summary["models"]
        for key, suffix in (("matrix", ".matrix.csv"), ("success_matrix", ".success.csv"),
                            ("similarity", ".similarity.csv")):
            table(suffix, ["proxy\\target"] + names,
                  [[names[i]] + [f"{v:.6g}" for v in row] for i, row in enumerate(summary[key])])
    if cfg.experiment == "robustness":
        m, metric = summary["metrics"], summary["metric"]
        labels = [k.rpartition("/")[0] for k in m if k.endswith("/" + metric)]
        table(".robustness.csv", ["condition", "median_" + metric, "p10_" + metric, "detection_rate"],
              [[lab, f"{m[lab + '/' + metric]['median']:.6g}", f"{m[lab + '/' + metric]['p10']:.6g}",
                f"{m[lab + '/detected']['rate']:.6g}"] for lab in labels])
    return written
