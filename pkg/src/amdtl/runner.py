"""Run directories, job scheduling and report emission.

Layout under the output directory::

    seed_<s>/dataset.csv                 generated data
    seed_<s>/meta_state.{npz,json}       after embeddings + meta-training
    seed_<s>/pretrained.{npz,json}       after adversarial alignment
    seed_<s>/adapted.{npz,json}          after target fine-tuning
    seed_<s>/train_log.csv               adversarial epoch log
    runs/<variant>/seed_<s>/result.json  deterministic per-run results
    runs/<variant>/seed_<s>/timing.json  wall-clock stage timings
    results.json, summary.csv, manifest.json
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, ToggleSection
from .pipeline import RunOutput, run_variant

SUMMARY_HEADER = ("variant", "seed", "accuracy", "f1", "auc_roc", "epochs", "wall_s")
AGGREGATED = ("accuracy", "precision", "recall", "f1", "auc_roc")


class NoRunsError(RuntimeError):
    pass


def write_atomic(path: Path, data: bytes | str) -> Path:
    """Write to a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def seed_dir(self, seed: int) -> Path:
        return self.root / f"seed_{seed}"

    def dataset(self, seed: int) -> Path:
        return self.seed_dir(seed) / "dataset.csv"

    def state(self, seed: int, name: str) -> Path:
        return self.seed_dir(seed) / name

    def run_dir(self, variant: str, seed: int) -> Path:
        return self.root / "runs" / variant / f"seed_{seed}"

    def rel(self, path: Path) -> str:
        return Path(path).relative_to(self.root).as_posix()


# ------------------------------------------------------------------ jobs


def _job(args) -> RunOutput:
    cfg_json, variant, toggles, seed = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    return run_variant(cfg, variant, ToggleSection(**toggles), seed)


def run_jobs(cfg: ExperimentConfig, variants: list[tuple[str, ToggleSection]], seeds, n_jobs: int = 1) -> list[RunOutput]:
    """Independent (variant, seed) jobs; results come back sorted by (variant, seed)."""
    cfg_json = cfg.model_dump_json()
    tasks = [(cfg_json, name, t.model_dump(), int(s)) for name, t in variants for s in seeds]
    if n_jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outs = list(pool.map(_job, tasks))
    else:
        outs = [_job(t) for t in tasks]
    return sorted(outs, key=lambda o: (o.variant, o.seed))


def save_run(layout: Layout, out: RunOutput) -> list[Path]:
    d = layout.run_dir(out.variant, out.seed)
    return [write_atomic(d / "result.json", dumps(out.result)),
            write_atomic(d / "timing.json", dumps({k: out.timings[k] for k in sorted(out.timings)})),
            write_atomic(d / "train_log.csv", out.train_log)]


def load_runs(layout: Layout) -> list[tuple[dict, dict]]:
    runs = []
    base = layout.root / "runs"
    if not base.is_dir():
        return runs
    for path in sorted(base.glob("*/seed_*/result.json")):
        result = json.loads(path.read_text())
        timing_path = path.with_name("timing.json")
        timing = json.loads(timing_path.read_text()) if timing_path.is_file() else {}
        runs.append((result, timing))
    runs.sort(key=lambda r: (r[0]["variant"], r[0]["seed"]))
    return runs


# ---------------------------------------------------------------- report


def _mean_std(values: list[float]) -> dict:
    n = len(values)
    mean = math.fsum(values) / n
    std = float(np.std(values, ddof=1)) if n > 1 else None
    return {"mean": mean, "std": std, "n": n}


def results_document(cfg: ExperimentConfig, runs: list[tuple[dict, dict]]) -> dict:
    variants: dict[str, dict] = {}
    for result, _ in runs:
        v = variants.setdefault(result["variant"], {"per_seed": {}})
        v["per_seed"][str(result["seed"])] = result
    for v in variants.values():
        seeds = sorted(v["per_seed"], key=int)
        v["seeds"] = [int(s) for s in seeds]
        v["aggregate"] = {m: _mean_std([v["per_seed"][s]["metrics"][m] for s in seeds]) for m in AGGREGATED}
    return {"version": __version__, "config_hash": cfg.digest(), "variants": variants}


def summary_csv(runs: list[tuple[dict, dict]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for result, timing in runs:
        m = result["metrics"]
        wall = math.fsum(timing.values())
        w.writerow([result["variant"], result["seed"], repr(m["accuracy"]), repr(m["f1"]), repr(m["auc_roc"]),
                    result["epochs"], f"{wall:.3f}"])
    return buf.getvalue()


def emit_report(layout: Layout, cfg: ExperimentConfig, runs: list[tuple[dict, dict]],
                emitted: list[Path] = ()) -> list[Path]:
    """results.json, summary.csv and manifest.json; nothing is written for zero runs."""
    if not runs:
        raise NoRunsError(f"no completed runs under {layout.root / 'runs'}")
    files = list(emitted)
    files.append(write_atomic(layout.root / "results.json", dumps(results_document(cfg, runs))))
    files.append(write_atomic(layout.root / "summary.csv", summary_csv(runs)))
    timings = {f"{r['variant']}/seed_{r['seed']}": t for r, t in runs}
    files.append(write_manifest(layout, cfg, sorted({r["seed"] for r, _ in runs}), files, timings))
    return files


def write_manifest(layout: Layout, cfg: ExperimentConfig, seeds, files: list[Path], timings: dict) -> Path:
    path = layout.root / "manifest.json"
    listed = sorted({layout.rel(p) for p in files} | {layout.rel(path)})
    doc = {"version": __version__, "config_hash": cfg.digest(), "seeds": list(seeds),
           "stage_timings": timings, "artifacts": listed}
    return write_atomic(path, dumps(doc))
