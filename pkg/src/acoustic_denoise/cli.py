"""Command-line entry point: ``acoustic-denoise <command> [options]``.

Every command accepts ``--seed``, ``--config`` (TOML), ``--out``,
``--run-id`` and ``--force``. Outputs go to ``<out>/<run-id>/`` and an
existing file is never replaced unless ``--force`` is given. On success a
single JSON line summarising the run is printed to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .baselines import BaselineSpec, apply_baseline, parse_baseline
from .denoiser import (
    ArchSpec, TrainConfig, build_model, denoise, load_checkpoint, save_checkpoint, train, write_train_log,
)
from .errors import DataError, NumericError
from .guided import GuidedParams, refine_maps
from .image import ImageF, NoiseSpec, add_synthetic_noise, load_image, psd_map, save_image, write_profile_csv
from .matching import (
    MatchSummary, SiftParams, draw_matches, describe, detect, evaluate_pair, gen_translated_pair,
    match, write_match_csv,
)
from .metrics import (
    BlindModel, fit_blind_model, format_value, load_blind_model, metric_report, save_blind_model,
    write_report_csv,
)
from .selection import (
    METRICS, GAConfig, WeightVector, correlation_matrix, ga_tune_weights, read_score_table,
    read_weights_csv, score, select_best_model, write_correlation_csv, write_ga_log,
    write_heatmap_png, write_score_table, write_weights_csv,
)
from .synthetic import particle_scene
from .workflow import StudyConfig, blind_corpus, run_study, split_dataset, two_stage

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("acoustic_denoise")

IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------ configuration


@dataclass
class MatchConfig:
    max_shift: int = 10
    tol: float = 3.0
    ratio: float = 0.75


@dataclass
class RunConfig:
    """Everything a run depends on; each field maps to a TOML key.

    Top-level keys: ``seed``, ``split``. Tables: ``[paths]`` (train_dir,
    test_dir, output_dir), ``[arch]``, ``[train]``, ``[guided]``,
    ``[matching]``, ``[ga]`` and ``[baselines] specs = ["median:k=3", ...]``.
    """

    train_dir: Path | None = None
    test_dir: Path | None = None
    output_dir: Path = Path("runs")
    split: float = 0.8
    arch: ArchSpec = field(default_factory=ArchSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    guided: GuidedParams = field(default_factory=GuidedParams)
    baselines: list[BaselineSpec] = field(default_factory=list)
    matching: MatchConfig = field(default_factory=MatchConfig)
    ga: GAConfig = field(default_factory=GAConfig)
    seed: int = 0

    def validate(self) -> None:
        if not 0.5 <= self.split <= 1.0:
            raise DataError(f"split must lie in [0.5, 1], got {self.split}")
        for p in (self.train_dir, self.test_dir):
            if p is not None and not p.is_dir():
                raise DataError(f"directory not found: {p}")


def _section(cls, table: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise UsageError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**table)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"bad config {path}: {exc}") from exc
    cfg = RunConfig()
    paths = doc.pop("paths", {})
    for key in ("train_dir", "test_dir", "output_dir"):
        if key in paths:
            setattr(cfg, key, Path(paths.pop(key)))
    if paths:
        raise UsageError(f"unknown keys in [paths]: {sorted(paths)}")
    for key, cls in (("arch", ArchSpec), ("train", TrainConfig), ("guided", GuidedParams),
                     ("matching", MatchConfig), ("ga", GAConfig)):
        if key in doc:
            setattr(cfg, key, _section(cls, doc.pop(key), key))
    if "baselines" in doc:
        cfg.baselines = [parse_baseline(s) for s in doc.pop("baselines").get("specs", [])]
    cfg.seed = int(doc.pop("seed", cfg.seed))
    cfg.split = float(doc.pop("split", cfg.split))
    if doc:
        raise UsageError(f"unknown config keys: {sorted(doc)}")
    return cfg


# ------------------------------------------------------------ outputs


class Outputs:
    """Run directory that refuses to overwrite files without ``force``."""

    def __init__(self, root: Path, force: bool):
        self.root = root
        self.force = force
        self.written: list[str] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        if p.exists() and not self.force:
            raise UsageError(f"{p} exists; pass --force to overwrite")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(str(p))
        return p


def list_images(paths: list[str]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES and not q.name.endswith(".mask.png"))
        elif p.exists():
            out.append(p)
        else:
            raise DataError(f"input not found: {p}")
    if not out:
        raise DataError("no input images")
    return out


def synthetic_set(count: int, size: int, sigma: float, seed: int) -> tuple[list[ImageF], list[ImageF]]:
    clean = [particle_scene(size, size, seed * 100003 + i) for i in range(count)]
    noisy = [add_synthetic_noise(c, NoiseSpec(gaussian=sigma), seed * 100003 + i + 7) for i, c in enumerate(clean)]
    return clean, noisy


def read_pairs_csv(path: Path) -> list[tuple[ImageF, ImageF, int, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path} lists no pairs")
    base = path.parent
    return [(load_image(base / r["image_a"]), load_image(base / r["image_b"]), int(r["tx"]), int(r["ty"]))
            for r in rows]


# ------------------------------------------------------------ commands


def cmd_train(args, cfg: RunConfig, out: Outputs) -> dict:
    if args.synthetic:
        _, images = synthetic_set(args.synthetic, args.size, args.noise_sigma, cfg.seed)
        names = [f"synthetic{i:03d}" for i in range(len(images))]
    else:
        paths = list_images(args.inputs or [str(cfg.train_dir or "")])
        images = [load_image(p) for p in paths]
        names = [p.name for p in paths]
    idx = list(range(len(images)))
    if len(images) >= 2:
        train_idx, test_idx = split_dataset(idx, cfg.split, cfg.seed)
    else:
        train_idx, test_idx = idx, []
    model = build_model(cfg.arch, seed=cfg.seed, gamma=cfg.train.gamma, lr=cfg.train.lr)
    ckpt_path = out.path("model.ckpt")
    _, history = train(model, [images[i] for i in train_idx], replace(cfg.train, seed=cfg.seed))
    save_checkpoint(model, ckpt_path)
    write_train_log(history, out.path("train_log.csv"))
    with open(out.path("split.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "set"])
        for i in idx:
            w.writerow([names[i], "train" if i in train_idx else "test"])
    last = history[-1].total if history else None
    return {"checkpoint": str(ckpt_path), "train": len(train_idx), "test": len(test_idx),
            "steps": model.step, "final_loss": last}


def cmd_denoise(args, cfg: RunConfig, out: Outputs) -> dict:
    model = load_checkpoint(args.model)
    paths = list_images(args.inputs)
    for p in paths:
        save_image(denoise(model, load_image(p)), out.path(f"{p.stem}.stage1.png"), bits=args.bits)
    return {"images": len(paths)}


def cmd_refine(args, cfg: RunConfig, out: Outputs) -> dict:
    params = GuidedParams(
        radius_detail=args.radius_detail if args.radius_detail is not None else cfg.guided.radius_detail,
        eps_detail=args.eps_detail if args.eps_detail is not None else cfg.guided.eps_detail,
        radius_mask=args.radius_mask if args.radius_mask is not None else cfg.guided.radius_mask,
        eps_mask=args.eps_mask if args.eps_mask is not None else cfg.guided.eps_mask,
    )
    paths = list_images(args.inputs)
    model = load_checkpoint(args.model) if args.model else None
    for p in paths:
        raw = load_image(p)
        if model is not None:
            # reload so the result matches running `denoise` then `refine`
            stage1_path = out.path(f"{p.stem}.stage1.png")
            save_image(denoise(model, raw), stage1_path, bits=args.bits)
            stage1 = load_image(stage1_path)
        else:
            src = Path(args.stage1_dir or p.parent) / f"{p.stem}.stage1.png"
            if not src.exists():
                raise DataError(f"first-stage image not found: {src}")
            stage1 = load_image(src)
        maps = refine_maps(raw, stage1, params)
        save_image(maps.output, out.path(f"{p.stem}.final.png"), bits=args.bits)
        if args.dump_maps:
            save_image(maps.alpha.with_data(maps.alpha.data), out.path(f"{p.stem}.alpha.png"), write_mask=False)
            save_image(raw.with_data(maps.saliency.astype(float)), out.path(f"{p.stem}.saliency.png"),
                       write_mask=False)
    return {"images": len(paths)}


def cmd_baseline(args, cfg: RunConfig, out: Outputs) -> dict:
    specs = [parse_baseline(s) for s in args.baseline] or cfg.baselines
    if not specs:
        raise UsageError("give at least one --baseline KIND[:k=v,...]")
    paths = list_images(args.inputs)
    for p in paths:
        img = load_image(p)
        for spec in specs:
            save_image(apply_baseline(img, spec), out.path(f"{p.stem}.{spec.kind}.png"), bits=args.bits)
    return {"images": len(paths), "baselines": [s.label for s in specs]}


def _blind(args, out: Outputs) -> BlindModel | None:
    if args.blind_model:
        return load_blind_model(args.blind_model)
    if args.fit_blind:
        model = fit_blind_model(blind_corpus([load_image(p) for p in list_images([args.fit_blind])]))
        save_blind_model(model, out.path("blind_model.bin"))
        return model
    return None


def cmd_metrics(args, cfg: RunConfig, out: Outputs) -> dict:
    blind = _blind(args, out)
    reports = []
    for p in list_images(args.inputs):
        test = load_image(p)
        ref = None
        if args.ref_dir:
            stem = p.name.split(".")[0]
            cands = sorted(q for q in Path(args.ref_dir).iterdir() if q.stem == stem)
            if not cands:
                raise DataError(f"no reference for {p.name} in {args.ref_dir}")
            ref = load_image(cands[0])
        reports.append(metric_report(test, ref, blind, method=args.method, reference=args.reference, image=p.name))
    path = out.path("metrics.csv")
    write_report_csv(reports, path)
    return {"rows": len(reports), "csv": str(path)}


def cmd_psd(args, cfg: RunConfig, out: Outputs) -> dict:
    paths = list_images(args.inputs)
    for p in paths:
        spec = psd_map(load_image(p), nbins=args.bins)
        save_image(spec.display, out.path(f"{p.stem}.psd.png"), write_mask=False)
        write_profile_csv(spec.profile, out.path(f"{p.stem}.psd.csv"))
    return {"images": len(paths)}


def cmd_gen_pairs(args, cfg: RunConfig, out: Outputs) -> dict:
    max_shift = args.max_shift if args.max_shift is not None else cfg.matching.max_shift
    if args.synthetic:
        sources = [particle_scene(args.size, args.size, cfg.seed * 1009 + i) for i in range(args.count)]
    else:
        loaded = [load_image(p) for p in list_images(args.inputs)]
        sources = [loaded[i % len(loaded)] for i in range(args.count)]
    csv_path = out.path("pairs.csv")
    rows = []
    for i, img in enumerate(sources):
        s = cfg.seed * 1009 + i
        a, b, tx, ty = gen_translated_pair(img, max_shift, s)
        if args.noise_sigma > 0:
            a = add_synthetic_noise(a, NoiseSpec(gaussian=args.noise_sigma), s * 2 + 1)
            b = add_synthetic_noise(b, NoiseSpec(gaussian=args.noise_sigma), s * 2 + 2)
        na, nb = f"pair{i:03d}_a.png", f"pair{i:03d}_b.png"
        save_image(a, out.path(na), bits=16)
        save_image(b, out.path(nb), bits=16)
        rows.append([i, na, nb, tx, ty])
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "image_a", "image_b", "tx", "ty"])
        w.writerows(rows)
    return {"pairs": len(rows), "csv": str(csv_path)}


def cmd_match_eval(args, cfg: RunConfig, out: Outputs) -> dict:
    pairs = read_pairs_csv(Path(args.pairs))
    params = SiftParams(ratio=cfg.matching.ratio, tol=cfg.matching.tol)
    model = load_checkpoint(args.model) if args.model else None
    spec = parse_baseline(args.baseline) if args.baseline else None

    def prep(img: ImageF) -> ImageF:
        if model is not None:
            stage1, final = two_stage(model, img, cfg.guided)
            return stage1 if args.no_refine else final
        if spec is not None:
            return apply_baseline(img, spec)
        return img

    rows = []
    for i, (a, b, tx, ty) in enumerate(pairs):
        a, b = prep(a), prep(b)
        rows.append(evaluate_pair(a, b, tx, ty, params=params))
        if args.viz:
            k1, k2 = detect(a, params), detect(b, params)
            d1, k1, _ = describe(a, k1, params)
            d2, k2, _ = describe(b, k2, params)
            draw_matches(a, b, k1, k2, match(d1, d2, params.ratio), tx, ty, params.tol,
                         out.path(f"pair{i:03d}.matches.png"))
    summary = MatchSummary(rows, float(np.mean([r.recall for r in rows])),
                           float(np.mean([r.precision for r in rows])),
                           float(np.mean([r.time_ms for r in rows])))
    path = out.path("matches.csv")
    write_match_csv(summary, path, timing=not args.no_timing)
    return {"pairs": len(rows), "mean_recall": summary.mean_recall,
            "mean_precision": summary.mean_precision, "csv": str(path)}


def cmd_study(args, cfg: RunConfig, out: Outputs) -> dict:
    sigma = args.noise_sigma
    if cfg.train_dir is None and not args.inputs:
        clean, images = synthetic_set(args.synthetic, args.size, sigma, cfg.seed)
        noise = NoiseSpec(gaussian=sigma)
        pair_src = [particle_scene(args.size, args.size, cfg.seed * 1009 + 500 + i) for i in range(args.pairs)]
        pairs = []
        for i, img in enumerate(pair_src):
            s = cfg.seed * 1009 + i
            a, b, tx, ty = gen_translated_pair(img, cfg.matching.max_shift, s)
            pairs.append((add_synthetic_noise(a, noise, 2 * s + 1), add_synthetic_noise(b, noise, 2 * s + 2), tx, ty))
    else:
        clean = None
        images = [load_image(p) for p in list_images(args.inputs or [str(cfg.train_dir)])]
        pairs = []
        for i in range(args.pairs):
            img = images[i % len(images)]
            pairs.append(gen_translated_pair(img, cfg.matching.max_shift, cfg.seed * 1009 + i))
    idx = list(range(len(images)))
    train_idx, test_idx = split_dataset(idx, cfg.split, cfg.seed)
    if not test_idx:
        test_idx = train_idx
    refs = None
    if clean is not None and args.reference == "clean":
        refs = [clean[i] for i in test_idx]
    study = StudyConfig(
        models=args.models, arch=cfg.arch, steps_per_epoch=args.steps_per_epoch,
        guided=cfg.guided, sift=SiftParams(ratio=cfg.matching.ratio, tol=cfg.matching.tol), seed=cfg.seed,
    )
    match_path = out.path("study_matches.csv")
    table_path = out.path("score_table.csv")

    def keep(res, model):
        if args.save_models:
            save_checkpoint(model, out.path(f"models/model{res.model_id}.ckpt"))

    table, results = run_study([images[i] for i in train_idx], [images[i] for i in test_idx], pairs,
                               study, references=refs, on_model=keep)
    write_score_table(table, table_path)
    with open(match_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "pair", "kps1", "kps2", "putative", "correct", "recall", "precision"])
        for r in results:
            for j, e in enumerate(r.matches):
                w.writerow([r.model_id, j, e.keypoints1, e.keypoints2, e.putative, e.correct,
                            f"{e.recall:.10g}", f"{e.precision:.10g}"])
    return {"models": len(results), "score_table": str(table_path), "matches": str(match_path)}


def cmd_tune_weights(args, cfg: RunConfig, out: Outputs) -> dict:
    table = read_score_table(Path(args.table))
    ga = replace(cfg.ga, seed=cfg.seed, target=args.target or cfg.ga.target)
    if args.generations is not None:
        ga = replace(ga, generations=args.generations)
    result = ga_tune_weights(table, ga)
    write_weights_csv(result.weights, out.path("weights.csv"))
    write_ga_log(result, out.path("ga_log.csv"))
    return {"fitness": result.fitness, "weights": result.weights.as_dict()}


def cmd_select(args, cfg: RunConfig, out: Outputs) -> dict:
    table = read_score_table(Path(args.table))
    weights = read_weights_csv(Path(args.weights)) if args.weights else WeightVector.uniform()
    best = select_best_model(table, weights)
    write_score_table(table, out.path("selection.csv"), weights)
    return {"best_model": best, "best_score": float(np.max(score(table, weights)))}


def _bar_png(groups: list[list[float]], path: Path, bar: int = 8, height: int = 120) -> None:
    """Grouped bar chart raster: one group per row of ``groups``, values in [0, 1]."""
    import cv2

    k = max(len(g) for g in groups)
    width = len(groups) * (k * bar + bar) + bar
    canvas = np.full((height + 2, width), 255, dtype=np.uint8)
    shades = np.linspace(40, 170, k).astype(np.uint8)
    for gi, g in enumerate(groups):
        x0 = bar + gi * (k * bar + bar)
        for j, v in enumerate(g):
            h = int(round(np.clip(v, 0, 1) * height))
            canvas[height - h:height, x0 + j * bar:x0 + (j + 1) * bar] = shades[j]
    canvas[height:, :] = 0
    cv2.imwrite(str(path), canvas)


def cmd_report(args, cfg: RunConfig, out: Outputs) -> dict:
    summary: dict[str, Any] = {}
    if args.metrics:
        by_method: dict[str, list[dict]] = {}
        for path in args.metrics:
            with open(path, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    by_method.setdefault(row["method"], []).append(row)
        p = out.path("quality_table.csv")
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", *METRICS, "images"])
            for method, rows in by_method.items():
                cells = []
                for m in METRICS:
                    vals = [float(r[m]) for r in rows if r.get(m, "") != ""]
                    cells.append(format_value(float(np.mean(vals))) if vals else "")
                w.writerow([method, *cells, len(rows)])
        summary["quality_table"] = str(p)
    if args.table:
        table = read_score_table(Path(args.table))
        if table.mean_recall is None:
            raise DataError(f"{args.table} carries no matching columns")
        p = out.path("bars.csv")
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "mean_recall", "mean_precision"])
            for mid, r, q in zip(table.model_ids, table.mean_recall, table.mean_precision):
                w.writerow([mid, format_value(r), format_value(q)])
        _bar_png([[r, q] for r, q in zip(table.mean_recall, table.mean_precision)], out.path("bars.png"))
        cols = {m: table.values[:, i] for i, m in enumerate(METRICS)}
        cols["precision"] = table.mean_precision
        cols["recall"] = table.mean_recall
        flat = [n for n, v in cols.items() if np.ptp(v) == 0]
        if flat:
            log.warning("left out of the correlation matrix (constant): %s", ", ".join(flat))
            cols = {n: v for n, v in cols.items() if n not in flat}
        if "precision" not in cols:
            raise DataError("precision is constant across models; correlations undefined")
        names, mat = correlation_matrix(cols)
        write_correlation_csv(names, mat, out.path("correlation.csv"))
        write_heatmap_png(mat, out.path("correlation.png"))
        summary["correlation"] = {n: float(v) for n, v in zip(names, mat[names.index("precision")])}
    if not summary:
        raise UsageError("report needs --metrics and/or --table")
    return summary


# ------------------------------------------------------------ parser


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="output root (default: [paths] output_dir or ./runs)")
    common.add_argument("--run-id", help="subdirectory for this run (default: <command>-seed<seed>)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--jobs", type=int, default=1, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = Parser(prog="acoustic-denoise", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("train", cmd_train, "train a denoiser")
    p.add_argument("inputs", nargs="*", help="images or directories (default: [paths] train_dir)")
    p.add_argument("--synthetic", type=int, default=0, help="train on N generated noisy scenes instead")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--noise-sigma", type=float, default=25 / 255)
    p.add_argument("--split", type=float, help="training ratio M in [0.5, 1]")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--channels", type=int)

    p = add("denoise", cmd_denoise, "first-stage denoising with a trained model")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--model", required=True)
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)

    p = add("refine", cmd_refine, "guided second stage")
    p.add_argument("inputs", nargs="+", help="raw noisy images")
    p.add_argument("--model", help="run the first stage too")
    p.add_argument("--stage1-dir", help="where <stem>.stage1.png files live (default: next to input)")
    p.add_argument("--radius-detail", type=int)
    p.add_argument("--eps-detail", type=float)
    p.add_argument("--radius-mask", type=int)
    p.add_argument("--eps-mask", type=float)
    p.add_argument("--dump-maps", action="store_true", help="also write alpha and saliency maps")
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)

    p = add("baseline", cmd_baseline, "classical filters")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--baseline", action="append", default=[], help="KIND[:k=v,...], repeatable")
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)

    p = add("metrics", cmd_metrics, "image quality metrics")
    p.add_argument("inputs", nargs="+", help="processed images")
    p.add_argument("--ref-dir", help="references matched by file stem")
    p.add_argument("--reference", default="raw", help="label for the reference kind")
    p.add_argument("--method", default="unknown")
    p.add_argument("--blind-model")
    p.add_argument("--fit-blind", help="directory of images to fit a blind-quality model on")

    p = add("psd", cmd_psd, "power spectral density maps")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--bins", type=int)

    p = add("gen-pairs", cmd_gen_pairs, "translated image pairs with ground truth")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--max-shift", type=int)
    p.add_argument("--synthetic", action="store_true", help="draw pairs from generated scenes")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--noise-sigma", type=float, default=0.0)

    p = add("match-eval", cmd_match_eval, "keypoint matching recall/precision")
    p.add_argument("--pairs", required=True, help="pairs.csv written by gen-pairs")
    p.add_argument("--model", help="denoise both images first")
    p.add_argument("--no-refine", action="store_true", help="skip the guided stage")
    p.add_argument("--baseline", help="filter both images with a baseline instead")
    p.add_argument("--viz", action="store_true")
    p.add_argument("--no-timing", action="store_true", help="write 0 for time_ms")

    p = add("study", cmd_study, "train and score a model population")
    p.add_argument("inputs", nargs="*", help="noisy images (default: generated scenes)")
    p.add_argument("--models", type=int, default=100)
    p.add_argument("--pairs", type=int, default=5)
    p.add_argument("--synthetic", type=int, default=24)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--noise-sigma", type=float, default=25 / 255)
    p.add_argument("--steps-per-epoch", type=int, default=25)
    p.add_argument("--reference", choices=("raw", "clean"), default="raw")
    p.add_argument("--save-models", action="store_true")
    p.add_argument("--split", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--channels", type=int)

    p = add("tune-weights", cmd_tune_weights, "genetic search for metric weights")
    p.add_argument("--table", required=True)
    p.add_argument("--target", choices=("recall", "precision", "mean"))
    p.add_argument("--generations", type=int)

    p = add("select", cmd_select, "pick the best model under a weight vector")
    p.add_argument("--table", required=True)
    p.add_argument("--weights")

    p = add("report", cmd_report, "summary tables and figures")
    p.add_argument("--metrics", nargs="*", help="metrics.csv files")
    p.add_argument("--table", help="score_table.csv with matching columns")
    return parser


def _apply_overrides(args, cfg: RunConfig) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.output_dir = Path(args.out)
    if getattr(args, "split", None) is not None:
        cfg.split = args.split
    arch = {k: getattr(args, k) for k in ("levels", "channels") if getattr(args, k, None) is not None}
    if arch:
        cfg.arch = replace(cfg.arch, **arch)
    tr = {k: getattr(args, k) for k in ("epochs", "steps_per_epoch", "lr", "gamma", "patch_size", "batch_size")
          if getattr(args, k, None) is not None and args.command == "train"}
    if tr:
        cfg.train = replace(cfg.train, **tr)
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        import torch

        torch.set_num_threads(max(1, args.jobs))
        cfg = _apply_overrides(args, load_run_config(args.config))
        root = cfg.output_dir / (args.run_id or f"{args.command}-seed{cfg.seed}")
        out = Outputs(root, args.force)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            summary = args.func(args, cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (DataError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "seed": cfg.seed, "run_dir": str(root), **summary},
                     default=float, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
