"""Multi-stage orchestration: data, transformer, diffusion, distillation, evaluation, report.

Stages communicate only through files under one output directory::

    out/data/                       synthetic dataset
    out/checkpoints/srt.{json,npz}
    out/checkpoints/diffusion[-<cond>].{json,npz}
    out/fields[-<cond>]/scene_<id>_<n>v.{json,npz} and turntables
    out/eval/metrics[-<cond>].csv, grid[-<cond>].png
    out/report/summary.{csv,md}

Every stage writes ``out/<stage>/config.resolved.yaml``; feeding that file
back through ``--config`` reruns the stage with identical settings.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import yaml
from PIL import Image

from .exceptions import BadConfig, EmptyInput, MissingDependency
from .layers import configure_determinism, deterministic_mode

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-srt", "train-diffusion", "distill", "render", "eval", "report")
VIEW_COUNTS = (1, 3, 6)
METHODS = ("white", "srt", "2d", "3d")

DEFAULTS = {
    "seed": 7,
    "out": "runs/default",
    "cond": "df+slt",
    "device": "auto",
    "paths": {"data": None, "srt": None, "diffusion": None, "fields": None, "eval": None},
    "data": {"n_scenes": 64, "views_per_scene": 8, "image_size": 64},
    "srt": {"patch_size": 8, "dim": 256, "heads": 8, "enc_depth": 8, "dec_depth": 4, "mlp_ratio": 4,
            "n_freqs": 6, "lr": 1e-4, "n_steps": 50_000, "batch_size": 8, "rays_per_view": 1024,
            "max_context": 3, "warmup_steps": 1000, "grad_clip": 1.0, "log_every": 500},
    "diffusion": {"feature_size": 32, "channels": 64, "channel_mult": [1, 2, 2], "T": 1000, "lr": 1e-4,
                  "n_steps": 50_000, "batch_size": 8, "max_context": 3, "p_drop": 0.05, "steps": 30,
                  "guidance_weight": 9.0, "grad_clip": 1.0, "log_every": 500},
    "distill": {"total_iters": 3000, "warmup_iters": 300, "ddim_steps": 30, "guidance_weight": 9.0,
                "views_per_iter": 1, "lambda_entropy": 1e-3, "lambda_sparsity": 1e-3, "lr": 1e-2,
                "render_size": 64, "samples_per_ray": 64, "n_levels": 12, "n_features": 2, "log2_table": 17,
                "base_res": 16, "level_scale": 1.5, "width": 64, "blob_density": 5.0,
                "max_scenes": 5, "context_views": [3], "turntable_frames": 24},
    "eval": {"context_views": [1, 3, 6], "query_views": 2, "scenes_per_bucket": 5, "max_scenes": None,
             "methods": ["white", "srt", "2d", "3d"], "align_iters": 500, "align_starts": 5,
             "sample_steps": 30, "guidance_weight": 9.0},
}


# ------------------------------------------------------------------ config


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        key = f"{prefix}{k}"
        if k not in base:
            raise BadConfig(key, "unknown setting")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise BadConfig(key, "expected a mapping")
            out[k] = _merge(base[k], v, prefix=f"{key}.")
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    stage: str
    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, stage: str, path=None, *, seed=None, out=None, cond=None) -> "RunConfig":
        if stage not in STAGES:
            raise BadConfig("stage", f"unknown stage {stage!r}")
        user = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise BadConfig("config", f"file not found: {p}")
            user = yaml.safe_load(p.read_text()) or {}
            if not isinstance(user, dict):
                raise BadConfig("config", "top level must be a mapping")
            user.pop("stage", None)
        values = _merge(DEFAULTS, user)
        if seed is not None:
            values["seed"] = int(seed)
        if out is not None:
            values["out"] = str(out)
        if cond is not None:
            values["cond"] = cond
        cfg = cls(stage, values)
        cfg.validate()
        return cfg

    def validate(self):
        from .diffusion import COND_MODES

        v = self.values
        if v["cond"] not in COND_MODES:
            raise BadConfig("cond", f"expected one of {COND_MODES}, got {v['cond']!r}")
        if not isinstance(v["seed"], int) or v["seed"] < 0:
            raise BadConfig("seed", "must be a non-negative integer")
        for m in v["eval"]["methods"]:
            if m not in METHODS:
                raise BadConfig("eval.methods", f"unknown method {m!r}")
        need = max(v["eval"]["context_views"]) + v["eval"]["query_views"]
        if v["data"]["views_per_scene"] < need:
            raise BadConfig("data.views_per_scene",
                            f"{need} views needed for {max(v['eval']['context_views'])} context + "
                            f"{v['eval']['query_views']} query views")
        d = v["distill"]
        if not 0 <= d["warmup_iters"] < d["total_iters"]:
            raise BadConfig("distill.warmup_iters", "must lie in [0, total_iters)")
        if v["diffusion"]["steps"] > v["diffusion"]["T"]:
            raise BadConfig("diffusion.steps", "more DDIM steps than diffusion timesteps")

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out(self) -> Path:
        return Path(self.values["out"])

    @property
    def cond_suffix(self) -> str:
        c = self.values["cond"]
        return "" if c == "df+slt" else "-" + c.replace("+", "_")

    def path(self, name: str) -> Path:
        given = self.values["paths"].get(name)
        if given:
            return Path(given)
        defaults = {
            "data": self.out / "data",
            "srt": self.out / "checkpoints" / "srt",
            "diffusion": self.out / "checkpoints" / f"diffusion{self.cond_suffix}",
            "fields": self.out / f"fields{self.cond_suffix}",
            "eval": self.out / "eval",
        }
        return defaults[name]

    def stage_dir(self) -> Path:
        suffix = self.cond_suffix if self.stage in ("train-diffusion", "distill", "render", "eval") else ""
        return self.out / f"{self.stage}{suffix}"

    def snapshot(self) -> Path:
        """Write the resolved configuration next to the stage outputs."""
        d = self.stage_dir()
        d.mkdir(parents=True, exist_ok=True)
        snap = copy.deepcopy(self.values)
        snap["paths"] = {k: str(self.path(k)) for k in snap["paths"]}
        p = d / "config.resolved.yaml"
        p.write_text(yaml.safe_dump({"stage": self.stage, **snap}, sort_keys=True))
        return p


# ----------------------------------------------------------------- helpers


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _checkpoint_exists(path: Path) -> bool:
    return path.with_suffix(".json").exists() and path.with_suffix(".npz").exists()


def _require(cfg: RunConfig, name: str) -> Path:
    p = cfg.path(name)
    ok = (p / "index.json").exists() if name == "data" else _checkpoint_exists(p)
    if not ok:
        raise MissingDependency(name, p)
    return p


def _dataset(cfg: RunConfig):
    from .data import read_dataset

    return read_dataset(_require(cfg, "data"))


def _load_srt(cfg: RunConfig):
    from .checkpoint import load_estimator

    return load_estimator(_require(cfg, "srt"), device=cfg["device"])


def _load_diffusion(cfg: RunConfig, srt):
    from .checkpoint import load_estimator

    return load_estimator(_require(cfg, "diffusion"), srt=srt, device=cfg["device"])


class FrozenAudit:
    """Content hashes of checkpoints that a stage must not modify."""

    def __init__(self, paths: dict[str, Path]):
        self.paths = {k: Path(p).with_suffix(".npz") for k, p in paths.items()}
        self.before = {k: file_digest(p) for k, p in self.paths.items()}

    def finish(self, extra_modules: dict | None = None) -> dict:
        from .checkpoint import module_hash, read_manifest

        report = {}
        for k, p in self.paths.items():
            after = file_digest(p)
            entry = {"before": self.before[k], "after": after, "unchanged": after == self.before[k]}
            if extra_modules and k in extra_modules:
                entry["in_memory_matches_manifest"] = (
                    module_hash(extra_modules[k]) == read_manifest(p)["sha256"])
            report[k] = entry
        return report


def eval_scenes(dataset, scenes_per_bucket: int, max_scenes: int | None = None) -> list[int]:
    """Held-out scenes: the first ``scenes_per_bucket`` of each primitive bucket."""
    by_bucket: dict[str, list[int]] = {}
    for s in dataset.split("val"):
        by_bucket.setdefault(dataset.spec(s).bucket, []).append(s)
    picked = []
    for bucket in sorted(by_bucket):
        picked.extend(by_bucket[bucket][:scenes_per_bucket])
    picked.sort()
    return picked[:max_scenes] if max_scenes else picked


def _sample_seed(seed: int, scene: int, n: int) -> int:
    return (seed * 1_000_003 + scene * 1009 + n * 17) % 2**31


def _write_loss_csv(path: Path, history: Iterable[float]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(history, 1):
            w.writerow([i, f"{v:.6f}"])


# ------------------------------------------------------------------ stages


def stage_gen_data(cfg: RunConfig) -> dict:
    from .data import generate_dataset

    d = cfg["data"]
    ds = generate_dataset(cfg.path("data"), cfg.seed, d["n_scenes"], d["views_per_scene"], d["image_size"])
    return {"dataset": str(ds.root), "n_scenes": len(ds), "train": len(ds.split("train")),
            "val": len(ds.split("val"))}


def stage_train_srt(cfg: RunConfig) -> dict:
    from .checkpoint import save_estimator
    from .srt import SceneBank, SceneTransformer

    ds = _dataset(cfg)
    bank = SceneBank.from_dataset(ds)
    est = SceneTransformer(image_size=cfg["data"]["image_size"], random_state=cfg.seed, device=cfg["device"],
                           **cfg["srt"])
    t0 = time.time()
    est.fit(bank)
    path = save_estimator(est, cfg.path("srt"))
    _write_loss_csv(cfg.stage_dir() / "loss.csv", est.history_)
    return {"checkpoint": str(path), "steps": est.n_steps_done_, "seconds": time.time() - t0,
            "final_loss": float(np.mean(est.history_[-100:])) if est.history_ else None}


def stage_train_diffusion(cfg: RunConfig) -> dict:
    from .checkpoint import save_estimator
    from .diffusion import ViewDiffusion
    from .srt import SceneBank

    ds = _dataset(cfg)
    srt = _load_srt(cfg)
    audit = FrozenAudit({"srt": cfg.path("srt")})
    params = dict(cfg["diffusion"])
    params["channel_mult"] = tuple(params["channel_mult"])
    est = ViewDiffusion(srt=srt, image_size=cfg["data"]["image_size"], cond=cfg["cond"], random_state=cfg.seed,
                        device=cfg["device"], **params)
    t0 = time.time()
    est.fit(SceneBank.from_dataset(ds))
    path = save_estimator(est, cfg.path("diffusion"))
    _write_loss_csv(cfg.stage_dir() / "loss.csv", est.history_)
    frozen = audit.finish({"srt": srt.model_})
    (cfg.stage_dir() / "audit.json").write_text(json.dumps({"frozen": frozen}, indent=2))
    return {"checkpoint": str(path), "steps": est.n_steps_done_, "seconds": time.time() - t0, "frozen": frozen}


def _field_name(scene: int, n: int) -> str:
    return f"scene_{scene}_{n}v"


def stage_distill(cfg: RunConfig) -> dict:
    from .checkpoint import save_estimator
    from .distill import FieldDistiller
    from .srt import ImageSet

    ds = _dataset(cfg)
    srt = _load_srt(cfg)
    diffusion = _load_diffusion(cfg, srt)
    audit = FrozenAudit({"srt": cfg.path("srt"), "diffusion": cfg.path("diffusion")})
    params = {k: v for k, v in cfg["distill"].items() if k not in ("max_scenes", "context_views", "turntable_frames")}
    fields_dir = cfg.path("fields")
    fields_dir.mkdir(parents=True, exist_ok=True)
    scenes = eval_scenes(ds, cfg["eval"]["scenes_per_bucket"], cfg["distill"]["max_scenes"])
    log_path = cfg.stage_dir() / "audit_log.jsonl"
    done = []
    with open(log_path, "w") as audit_log:
        for s in scenes:
            records = ds.load_scene(s)
            for n in cfg["distill"]["context_views"]:
                ctx = ImageSet.from_records(records[:n])
                est = FieldDistiller(diffusion=diffusion, random_state=_sample_seed(cfg.seed, s, n), **params)
                name = _field_name(s, n)

                def log_rec(rec, name=name):
                    audit_log.write(json.dumps({"field": name, **rec}) + "\n")

                est.fit(ctx, callback=log_rec)
                save_estimator(est, fields_dir / name)
                index = est.turntable(fields_dir / f"{name}_turntable", cfg["distill"]["turntable_frames"])
                done.append({"field": name, "final_loss": float(np.mean(est.loss_curve()[-100:])),
                             "opacity_fraction": float(np.mean([f["opacity_fraction"] for f in index["frames"]]))})
    frozen = audit.finish({"srt": srt.model_, "diffusion": diffusion.model_})
    (cfg.stage_dir() / "audit.json").write_text(json.dumps({"frozen": frozen, "fields": done}, indent=2))
    return {"fields": done, "frozen": frozen, "audit_log": str(log_path)}


def stage_render(cfg: RunConfig) -> dict:
    from .checkpoint import load_estimator

    fields_dir = cfg.path("fields")
    manifests = sorted(fields_dir.glob("scene_*v.json"))
    if not manifests:
        raise MissingDependency("fields", fields_dir)
    out = []
    for m in manifests:
        est = load_estimator(m)
        est.turntable(fields_dir / f"{m.stem}_turntable", cfg["distill"]["turntable_frames"])
        out.append(m.stem)
    return {"rendered": out}


def stage_eval(cfg: RunConfig) -> dict:
    from .checkpoint import load_estimator
    from .evaluation import aligned_metrics, report_row, write_metrics_csv
    from .srt import ImageSet, anchored_poses

    e = cfg["eval"]
    methods = list(e["methods"])
    ds = _dataset(cfg)
    srt = _load_srt(cfg) if {"srt", "2d"} & set(methods) else None
    diffusion = _load_diffusion(cfg, srt) if "2d" in methods else None
    fields_dir = cfg.path("fields")
    size = cfg["data"]["image_size"]
    scenes = eval_scenes(ds, e["scenes_per_bucket"], e["max_scenes"])
    distilled = set(eval_scenes(ds, e["scenes_per_bucket"], cfg["distill"]["max_scenes"]))
    if not scenes:
        raise EmptyInput("no held-out scenes to evaluate")
    rows, grid_rows = [], []
    for s in scenes:
        records = ds.load_scene(s)
        bucket = ds.spec(s).bucket
        poses = anchored_poses([r.pose for r in records], 0)
        queries = list(range(len(records) - e["query_views"], len(records)))
        grid = [records[0].image_float(), records[queries[0]].image_float()]
        for n in e["context_views"]:
            ctx = ImageSet.from_records(records[:n])
            qposes = [poses[q] for q in queries]
            preds = {}
            if "white" in methods:
                preds["white"] = np.ones((len(queries), size, size, 3), np.float32)
            if "srt" in methods:
                preds["srt"] = srt.predict(ctx, qposes)
            if "2d" in methods:
                preds["2d"] = diffusion.predict(ctx, qposes, steps=e["sample_steps"], w=e["guidance_weight"],
                                                seed=_sample_seed(cfg.seed, s, n))
            if "3d" in methods and s in distilled and n in cfg["distill"]["context_views"]:
                ck = fields_dir / _field_name(s, n)
                if not _checkpoint_exists(ck):
                    raise MissingDependency("fields", ck)
                field_est = load_estimator(ck)
                preds["3d"] = field_est.predict([p.resized(size, size) for p in qposes])
            grid.append(np.clip(preds.get("2d", preds.get("srt", preds.get("white")))[0], 0, 1))
            for method, imgs in preds.items():
                for q, pred in zip(queries, imgs):
                    gt = records[q].image_float()
                    rep = aligned_metrics(np.clip(pred, 0, 1).astype(np.float64), gt.astype(np.float64),
                                          n_iter=e["align_iters"], n_starts=e["align_starts"], seed=0)
                    rows.append(report_row(f"scene_{s}", bucket, method + cfg.cond_suffix, n, q, rep))
        grid_rows.append(np.concatenate(grid, axis=1))
    out_dir = cfg.path("eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"metrics{cfg.cond_suffix}.csv"
    write_metrics_csv(rows, csv_path)
    grid_path = out_dir / f"grid{cfg.cond_suffix}.png"
    Image.fromarray((np.concatenate(grid_rows, 0) * 255).round().astype(np.uint8)).save(grid_path)
    return {"metrics": str(csv_path), "grid": str(grid_path), "rows": len(rows), "scenes": scenes}


# ------------------------------------------------------------------ report


@dataclass
class ReportTable:
    columns: list
    rows: dict  # method -> list of values in ``columns`` order
    flags: dict  # method -> trend flag over 1V/3V/6V PSNR-A

    def to_markdown(self) -> str:
        head = "| method | " + " | ".join(self.columns) + " | trend |"
        sep = "|" + "---|" * (len(self.columns) + 2)
        lines = [head, sep]
        for m, vals in self.rows.items():
            cells = ["-" if v is None or math.isnan(v) else f"{v:.3f}" for v in vals]
            lines.append(f"| {m} | " + " | ".join(cells) + f" | {self.flags[m]} |")
        return "\n".join(lines) + "\n"


def report_columns() -> list[str]:
    return [f"{n}V {metric}" for n in VIEW_COUNTS for metric in ("PSNR-A", "SSIM-A")]


def trend_flag(values, tol: float = 1e-9) -> str:
    v = list(values)
    if any(x is None or math.isnan(x) for x in v):
        return "incomplete"
    if max(v) - min(v) <= tol:
        return "flat"
    if all(b > a for a, b in zip(v, v[1:])):
        return "monotone-up"
    if all(b < a for a, b in zip(v, v[1:])):
        return "monotone-down"
    return "mixed"


def render_report(rows_or_path) -> ReportTable:
    """Per-method means of PSNR-A/SSIM-A at 1, 3 and 6 context views."""
    from .evaluation import read_metrics_csv

    if isinstance(rows_or_path, (str, Path)):
        rows = read_metrics_csv(rows_or_path)
    else:
        rows = list(rows_or_path)
    rows = [r for r in rows if r.get("instance") != "mean"]
    if not rows:
        raise EmptyInput("metrics table has no per-view rows")
    cols = report_columns()
    table, flags = {}, {}
    for method in sorted({r["method"] for r in rows}):
        vals, psnrs = [], []
        for n in VIEW_COUNTS:
            sel = [r for r in rows if r["method"] == method and int(r["n_views"]) == n]
            p = float(np.mean([float(r["psnr_a"]) for r in sel])) if sel else float("nan")
            s = float(np.mean([float(r["ssim_a"]) for r in sel])) if sel else float("nan")
            vals += [p, s]
            psnrs.append(p)
        table[method] = vals
        flags[method] = trend_flag(psnrs)
    return ReportTable(cols, table, flags)


def stage_report(cfg: RunConfig) -> dict:
    from .evaluation import read_metrics_csv

    eval_dir = cfg.path("eval")
    csvs = sorted(eval_dir.glob("metrics*.csv"))
    if not csvs:
        raise MissingDependency("metrics", eval_dir)
    rows = [r for p in csvs for r in read_metrics_csv(p)]
    table = render_report(rows)
    out = cfg.stage_dir()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method"] + table.columns + ["trend"])
        for m, vals in table.rows.items():
            w.writerow([m] + [f"{v:.6f}" for v in vals] + [table.flags[m]])
    (out / "summary.md").write_text(table.to_markdown())
    return {"summary": str(out / "summary.csv"), "flags": table.flags, "table": table.rows}


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "train-srt": stage_train_srt,
    "train-diffusion": stage_train_diffusion,
    "distill": stage_distill,
    "render": stage_render,
    "eval": stage_eval,
    "report": stage_report,
}


def run(cfg: RunConfig) -> dict:
    """Execute one stage; returns a JSON-able summary also written as ``result.json``."""
    configure_determinism(cfg.seed)
    cfg.snapshot()
    log.info("stage %s -> %s (deterministic=%s)", cfg.stage, cfg.stage_dir(), deterministic_mode())
    result = STAGE_FUNCS[cfg.stage](cfg)
    (cfg.stage_dir() / "result.json").write_text(json.dumps(result, indent=2, default=str))
    return result
