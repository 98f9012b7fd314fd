"""Metrics, the experiment matrix, and per-sample visual reports.

Metrics follow the training losses: si-RMSE after the closed-form scale fit
against mean-5 ground truth, and normal cosine similarity reported as
``1 - 2 L`` (higher is better). Both are averaged per sample first, then over
samples.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import depthnet as dn
from . import formats, losses, prompting, synthscene
from .gradcore import DTYPE
from .losses import normalize_mean5

__all__ = [
    "EvalConfig", "EvalReport", "normalize_mean5", "score_predictions", "evaluate_prompt", "evaluate_run",
    "run_matrix", "write_matrix", "read_matrix_csv", "render_visual_report", "worker_count",
]

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "split", "si_rmse", "cos_sim", "n_samples", "status")
CHUNK = 16


def worker_count() -> int:
    """Thread cap from ``PROMPTDEPTH_THREADS`` (0 or 1 means serial)."""
    raw = os.environ.get("PROMPTDEPTH_THREADS")
    if raw is None:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"PROMPTDEPTH_THREADS must be an integer, got {raw!r}") from exc
    return max(n, 1)


@dataclass
class EvalConfig:
    """One evaluation run: a frozen (or finetuned) net, a prompt or baseline, and a split.

    ``prompt`` is a baseline kind (white, random_noise, textured, original) or
    a path to a prompt file.
    """

    split: str
    net: str
    prompt: str = "white"
    method: str = ""
    split_name: str = ""
    additive: bool = False
    seed: int = 0
    limit: int | None = None

    def __post_init__(self):
        if self.limit is not None and self.limit < 1:
            raise ValueError("sample limit must be >= 1")
        if not self.method:
            self.method = self.prompt if self.prompt in prompting.BASELINE_KINDS else Path(self.prompt).stem
        if not self.split_name:
            self.split_name = Path(self.split).name

    def check_artifacts(self) -> None:
        missing = [p for p in (self.net, Path(self.split) / "manifest.json") if not Path(p).is_file()]
        if self.prompt not in prompting.BASELINE_KINDS and not Path(self.prompt).is_file():
            missing.append(self.prompt)
        if missing:
            raise FileNotFoundError(f"missing artifact: {missing[0]}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EvalReport:
    records: list  # {"sample", "si_rmse", "cos_sim", "scale"}
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def si_rmse(self) -> float:
        return float(np.mean([r["si_rmse"] for r in self.records]))

    @property
    def cos_sim(self) -> float:
        return float(np.mean([r["cos_sim"] for r in self.records]))

    @property
    def aggregates(self) -> dict:
        return {"si_rmse": self.si_rmse, "cos_sim": self.cos_sim, "n_samples": len(self.records)}

    def to_dict(self) -> dict:
        return {"records": self.records, "aggregates": self.aggregates, "config": self.config,
                "wall_clock": self.wall_clock}


def score_predictions(pred, gt, mask, rays, sample_ids=None) -> list:
    """Per-sample metric records for predicted depth maps [N,H,W].

    ``gt`` is raw depth; it is mean-5 normalized over ``mask`` here. Only
    foreground pixels are read from either map.
    """
    m = np.asarray(mask, dtype=bool)
    p = np.asarray(pred, dtype=DTYPE)
    if p.ndim == 2:
        p, m = p[None], m[None]
        gt = np.asarray(gt)[None]
    g = np.where(m, normalize_mean5(np.where(m, gt, 0), m), 0).astype(DTYPE)
    si = losses.si_rmse(p, g, m).data
    scale = losses.optimal_scale(p, g, m)
    r = np.asarray(rays, dtype=DTYPE)
    n_pred, valid_pred = losses.normals_from_depth(p, r, m)
    n_gt, valid_gt = losses.normals_from_depth(np.where(m, g, 1).astype(DTYPE), r, m)
    cos = 1.0 - 2.0 * losses.cos_sim_loss(n_pred, n_gt.data, valid_pred & valid_gt).data
    ids = sample_ids if sample_ids is not None else range(len(p))
    return [{"sample": sid, "si_rmse": float(a), "cos_sim": float(c), "scale": float(s)}
            for sid, a, c, s in zip(ids, si, cos, scale)]


def evaluate_prompt(net: dn.DepthNetWeights, prompt, samples, additive: bool = False, seed: int = 0,
                    sample_ids=None) -> EvalReport:
    """Score ``prompt`` (object or baseline kind) behind every sample with a frozen net."""
    if len(samples) == 0:
        raise ValueError("empty split")
    start = time.perf_counter()
    ids = list(sample_ids) if sample_ids is not None else list(range(len(samples)))
    batch = samples if isinstance(samples, dn.Batch) else dn.make_batch(samples)

    def run(i):
        b = batch.take(slice(i, i + CHUNK))
        pred = prompting.predict_batch(net, prompt, b, additive, seed + i)
        # gt in the batch is already mean-5; renormalizing is the identity
        return score_predictions(pred, b.gt, b.mask, b.rays, ids[i:i + CHUNK])

    starts = range(0, len(batch), CHUNK)
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(i) for i in starts]
    records = [r for part in parts for r in part]
    return EvalReport(records, wall_clock=time.perf_counter() - start)


def _sample_ids(root, limit) -> list:
    manifest = formats.read_json(Path(root) / "manifest.json")
    entries = manifest["samples"][:limit] if limit else manifest["samples"]
    return [e["path"] for e in entries]


def evaluate_run(config: EvalConfig) -> EvalReport:
    config.check_artifacts()
    samples = synthscene.load_dataset(config.split, config.limit)
    if not samples:
        raise ValueError(f"empty split {config.split}")
    net = dn.load_weights(config.net)
    prompt = prompting.load_prompt_or_baseline(config.prompt)
    report = evaluate_prompt(net, prompt, samples, config.additive, config.seed,
                             _sample_ids(config.split, config.limit))
    report.config = config.to_dict()
    log.info("%s on %s: si-RMSE %.4f cos %.4f (%d samples)", config.method, config.split_name,
             report.si_rmse, report.cos_sim, len(report.records))
    return report


# ---------------------------------------------------------------- matrix

def run_matrix(configs: list) -> list:
    """One row per config; failures become ``status="error"`` rows with empty metrics."""
    if not configs:
        raise ValueError("run_matrix needs at least one config")
    rows = []
    for cfg in configs:
        row = {"method": cfg.method, "split": cfg.split_name, "config": cfg.to_dict()}
        try:
            report = evaluate_run(cfg)
        except Exception as exc:  # recorded per row; the matrix keeps going
            log.warning("matrix row %s/%s failed: %s", cfg.method, cfg.split_name, exc)
            row.update({"si_rmse": None, "cos_sim": None, "n_samples": 0, "status": "error", "error": str(exc)})
        else:
            row.update({**report.aggregates, "status": "ok", "wall_clock": report.wall_clock})
        rows.append(row)
    return rows


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def matrix_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def _portable_config(config: dict, out: Path) -> dict:
    """Input paths rewritten relative to ``out``; baseline prompt names are left alone."""
    cfg = dict(config)
    for key in ("split", "net", "prompt"):
        value = cfg.get(key)
        if isinstance(value, str) and not (key == "prompt" and value in prompting.BASELINE_KINDS):
            cfg[key] = Path(os.path.relpath(Path(value).resolve(), out.resolve())).as_posix()
    return cfg


def write_matrix(rows: list, out_dir) -> tuple[Path, Path]:
    """Write ``matrix.csv`` and its JSON mirror ``matrix.json``.

    The JSON drops wall clock and stores input paths relative to ``out_dir``, so
    the same experiment laid out under two different roots gives identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "matrix.csv", out / "matrix.json"
    csv_path.write_text(matrix_csv(rows), encoding="utf-8")
    mirror = []
    for r in rows:
        rec = {k: v for k, v in r.items() if k != "wall_clock"}
        if isinstance(rec.get("config"), dict):
            rec["config"] = _portable_config(rec["config"], out)
        mirror.append(rec)
    formats.write_json(json_path, mirror)
    return csv_path, json_path


def read_matrix_csv(path) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            for key in ("si_rmse", "cos_sim"):
                rec[key] = float(rec[key]) if rec[key] else None
            rec["n_samples"] = int(rec["n_samples"])
            rows.append(rec)
    return rows


# ---------------------------------------------------------------- visuals

# coarse samples of the inferno colormap; intermediate values are interpolated
_INFERNO = np.array([
    [0, 0, 4], [22, 11, 57], [66, 10, 104], [106, 23, 110], [147, 38, 103],
    [188, 55, 84], [221, 81, 58], [243, 120, 25], [252, 165, 10], [246, 215, 70], [252, 255, 164],
], dtype=np.float64)


def colorize_depth(depth, mask) -> np.ndarray:
    """8-bit inferno-style image; near is bright, range is the foreground min/max."""
    d = np.asarray(depth, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    lo, hi = d[m].min(), d[m].max()
    t = np.zeros_like(d) if hi <= lo else np.clip((hi - d) / (hi - lo), 0.0, 1.0)
    pos = np.linspace(0.0, 1.0, len(_INFERNO))
    rgb = np.stack([np.interp(t, pos, _INFERNO[:, c]) for c in range(3)], axis=-1)
    rgb[~m] = 0.0
    return np.round(rgb).astype(np.uint8)


def colorize_normals(normals, valid) -> np.ndarray:
    n = np.asarray(normals, dtype=np.float64)
    rgb = np.round((n + 1.0) * 0.5 * 255.0)
    rgb[~np.asarray(valid, dtype=bool)] = 0.0
    return np.clip(rgb, 0, 255).astype(np.uint8)


def render_visual_report(sample, prediction: dict, out_dir, stem: str = "sample") -> list:
    """Write depth, normal and composite PNGs for one prediction from ``infer_object_depth``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mask = prediction.get("object_mask", sample.mask)
    paths = [out / f"{stem}_depth.png", out / f"{stem}_normals.png", out / f"{stem}_composite.png"]
    Image.fromarray(colorize_depth(prediction["depth"], mask), mode="RGB").save(paths[0], format="PNG")
    Image.fromarray(colorize_normals(prediction["normals"], prediction["normals_valid"]), mode="RGB").save(
        paths[1], format="PNG")
    formats.write_rgb_png(paths[2], prediction.get("composite", sample.rgb))
    return paths
