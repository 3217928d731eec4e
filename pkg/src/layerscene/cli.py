"""Command line: ``layerscene {gen-data,train,sample,decompose,eval,interpolate}``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 numerical failure (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import scenegen
from .metrics import PredictedScene, evaluate_scene, write_report
from .model import (INTERPOLATION_MODES, Checkpoint, CheckpointError, ConfigError, ModelConfig,
                    NumericalError, TrainConfig, decompose, generate, init_params, interpolate,
                    load_checkpoint, save_checkpoint, train_stage1, train_stage2)
from .model.core import ElboBreakdown, Stage2Breakdown
from .validation import check_images

log = logging.getLogger("layerscene")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
ALPHA_VISIBLE = 0.5
RUN_CONFIG_KEYS = ("model", "train")
SLOT_COLORS = np.array([[0, 0, 0], [230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48],
                        [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60]], np.uint8)


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------ helpers
def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in header])


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as f:
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


def checkerboard(size: int, cell: int = 4) -> np.ndarray:
    idx = (np.arange(size)[:, None] // cell + np.arange(size)[None, :] // cell) % 2
    return np.where(idx, 0.8, 0.6)[None].repeat(3, axis=0)


def over_checkerboard(pixels: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Alpha-blend a ``[3, M, M]`` canvas over a grey checkerboard."""
    return alpha[None] * pixels + (1 - alpha[None]) * checkerboard(alpha.shape[-1])


def _save_labels(path: Path, labels: np.ndarray) -> None:
    Image.fromarray(SLOT_COLORS[np.asarray(labels) % len(SLOT_COLORS)], "RGB").save(path)


def _read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise scenegen.DatasetIOError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def _load_ckpt(path) -> Checkpoint:
    if path is None:
        raise UsageError("--ckpt is required")
    return load_checkpoint(path)


def _mkdir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise scenegen.DatasetIOError(f"cannot create {p}: {exc}") from exc
    return p


def load_run_config(path, data_size: int | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Read a JSON run config ``{"model": {...}, "train": {...}}``; unknown keys are errors.

    Without an explicit image size the dataset's is used, with canvas size ``N // 2``.
    """
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise scenegen.DatasetIOError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(RUN_CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}")
    model = dict(doc.get("model", {}))
    if data_size is not None and "N" not in model:
        model["N"] = data_size
        model.setdefault("M", data_size // 2)
    try:
        mc = ModelConfig.from_dict(model)
        tc = TrainConfig.from_dict(dict(doc.get("train", {})))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if data_size is not None and mc.N != data_size:
        raise ConfigError(f"model N={mc.N} does not match the {data_size}px dataset")
    return mc, tc


# ----------------------------------------------------------------- commands
def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    kwargs = {}
    if args.size is not None:
        kwargs["size"] = args.size
    out = _mkdir(args.out)
    try:
        scenegen.generate_dataset(args.kind, args.count, args.seed, out, **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    print(out / "manifest.json")
    return EXIT_OK


LOSS1_HEADER = ["step", "epoch", "temperature", "sigma", *ElboBreakdown.FIELDS]
LOSS2_HEADER = ["step", "epoch", *Stage2Breakdown.FIELDS]


def cmd_train(args) -> int:
    manifest = json.loads(_read_text(Path(args.data) / "manifest.json"))
    mc, tc = load_run_config(args.config, manifest.get("size"))
    out = _mkdir(args.out)
    train_x = np.stack([s.image for s in scenegen.load_scenes(args.data, "train")]).astype(np.float32)
    eval_scenes = scenegen.load_scenes(args.data, "eval")
    val_x = (np.stack([s.image for s in eval_scenes]).astype(np.float32) if eval_scenes else train_x)
    check_images(train_x, mc.N)

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.config != mc:
            raise ConfigError("checkpoint model config differs from the run config")
        ckpt.train_config = tc
    elif args.stage == "2":
        raise UsageError("--stage 2 needs --resume with a stage-1 checkpoint")
    else:
        ckpt = Checkpoint(init_params(mc, tc.seed), mc, tc)
    _write_json(out / "resolved_config.json",
                {"model": mc.to_dict(), "train": tc.to_dict(), "stage": args.stage,
                 "resume": args.resume})
    ckdir = _mkdir(out / "checkpoints")

    def on_step(stage, step, result):
        ckpt.progress[f"stage{stage}_step"] = step
        ckpt.optimizers[f"stage{stage}"] = result.optimizer
        if step % tc.checkpoint_every == 0:
            save_checkpoint(ckdir / f"stage{stage}_step{step:06d}.json", ckpt)

    loss1, loss2 = out / "loss_stage1.csv", out / "loss_stage2.csv"
    val_path = out / "val_loss.csv"
    try:
        if args.stage in ("1", "both"):
            start = ckpt.progress.get("stage1_step", 0)
            prior_rows = [r for r in _read_csv(loss1) if r["step"] <= start]
            prior_val = [r for r in _read_csv(val_path) if r["step"] <= start]
            r1 = train_stage1(train_x, mc, tc, ckpt.params, ckpt.optimizers.get("stage1"),
                              start=start, val_images=val_x, callback=on_step)
            _write_csv(loss1, LOSS1_HEADER, prior_rows + r1.rows)
            _write_csv(val_path, ["step", "val_loss"], prior_val + r1.val_rows)
        if args.stage in ("2", "both") and mc.hyperprior:
            start = ckpt.progress.get("stage2_step", 0)
            prior_rows = [r for r in _read_csv(loss2) if r["step"] <= start]
            r2 = train_stage2(train_x, mc, tc, ckpt.params, ckpt.optimizers.get("stage2"),
                              start=start, callback=on_step)
            _write_csv(loss2, LOSS2_HEADER, prior_rows + r2.rows)
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        save_checkpoint(out / "failed.json", ckpt)
        return EXIT_NUMERIC
    final = save_checkpoint(out / "model.json", ckpt)
    print(final)
    return EXIT_OK


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise scenegen.DatasetIOError(f"cannot read {path}: {exc}") from exc


def _write_layers(d: Path, rendering, b: int, image_name: str) -> list[dict]:
    """Write one scene's images; returns per-object metadata."""
    scenegen.save_png(d / image_name, rendering.image[b])
    scenegen.save_png(d / "background.png", rendering.background[b])
    _save_labels(d / "segmentation.png", rendering.segmentation()[b])
    objects = []
    for j in range(rendering.canvas_alpha.shape[1]):
        alpha = rendering.canvas_alpha[b, j]
        scenegen.save_png(d / f"object_{j}.png", over_checkerboard(rendering.canvas_pixels[b, j], alpha))
        scenegen.save_png(d / f"object_{j}_alpha.png", alpha)
        objects.append({"slot": j, "depth": float(rendering.depths[b, j]),
                        "alpha_max": float(alpha.max()),
                        "omitted": bool(alpha.max() < ALPHA_VISIBLE)})
    return objects


def cmd_sample(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    ckpt = _load_ckpt(args.ckpt)
    overrides = {}
    if args.fix_positions:
        doc = json.loads(_read_text(Path(args.fix_positions)))
        pos = np.asarray(doc["positions"] if isinstance(doc, dict) else doc, dtype=np.int64)
        if pos.shape != (ckpt.config.J, 2):
            raise UsageError(f"--fix-positions needs {ckpt.config.J} (row, col) pairs")
        overrides["positions"] = pos
    out = _mkdir(args.out)
    hyper = False if args.no_hyperprior else None
    records = []
    for i in range(args.count):
        g = generate(ckpt.params, ckpt.config, [args.seed, i], overrides or None, hyperprior=hyper)
        d = _mkdir(out / f"sample_{i:04d}")
        objects = _write_layers(d, g.rendering, 0, "image.png")
        pos_map = g.latents.theta[0].sum(axis=0)
        scenegen.save_png(d / "positions.png", pos_map / max(pos_map.max(), 1e-12))
        for o, p in zip(objects, g.latents.positions[0].tolist()):
            o["position"] = p
        records.append({"sample": i, "objects": objects})
    _write_json(out / "samples.json", {"seed": args.seed, "count": args.count,
                                       "hyperprior": not args.no_hyperprior and ckpt.config.hyperprior,
                                       "alpha_visible_threshold": ALPHA_VISIBLE,
                                       "samples": records})
    return EXIT_OK


def _inputs(data, split: str) -> tuple[np.ndarray, list]:
    p = Path(data)
    if p.is_file():
        return _read_image(p)[None], [p.stem]
    if not p.exists():
        raise scenegen.DatasetIOError(f"no such dataset or image: {p}")
    scenes = scenegen.load_scenes(p, split)
    if not scenes:
        raise scenegen.DatasetIOError(f"no {split} scenes under {p}")
    return np.stack([s.image for s in scenes]), [s.meta["index"] for s in scenes]


def cmd_decompose(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    x, ids = _inputs(args.data, args.split)
    x = check_images(x, ckpt.config.N)
    out = _mkdir(args.out)
    records = []
    for start in range(0, len(x), 64):
        dec = decompose(ckpt.params, ckpt.config, x[start:start + 64])
        for b in range(dec.reconstruction.shape[0]):
            sid = ids[start + b]
            d = _mkdir(out / (f"{sid:06d}" if isinstance(sid, int) else str(sid)))
            objects = _write_layers(d, dec.rendering, b, "reconstruction.png")
            for o, p in zip(objects, dec.latents.positions[b].tolist()):
                o["position"] = p
            records.append({"id": sid, "objects": objects})
    _write_json(out / "decomposition.json", {"items": records})
    return EXIT_OK


def cmd_eval(args) -> int:
    data = Path(args.data)
    if not (data / "manifest.json").exists():
        raise scenegen.DatasetIOError(f"no dataset at {data}")
    scenes = scenegen.load_scenes(data, args.split)
    if not scenes:
        raise scenegen.DatasetIOError(f"no {args.split} scenes under {data}")
    if args.oracle:
        preds = [PredictedScene.from_ground_truth(s) for s in scenes]
        source = "ground-truth"
    else:
        ckpt = _load_ckpt(args.ckpt)
        x = check_images(np.stack([s.image for s in scenes]), ckpt.config.N)
        preds = []
        for start in range(0, len(x), 64):
            r = decompose(ckpt.params, ckpt.config, x[start:start + 64]).rendering
            preds += [PredictedScene.from_alphas(r.placed_alpha[b], r.depths[b], r.image[b])
                      for b in range(r.image.shape[0])]
        source = "model"
    reports = [evaluate_scene(s, p, args.min_overlap) for s, p in zip(scenes, preds)]
    report = Path(args.report)
    _mkdir(report.parent)
    doc = write_report(reports, report, report.with_suffix(".csv"),
                       scene_ids=[s.meta["index"] for s in scenes],
                       extra={"prediction_source": source, "split": args.split},
                       min_overlap=args.min_overlap)
    print(json.dumps(doc["summary"], sort_keys=True))
    return EXIT_OK


def cmd_interpolate(args) -> int:
    if args.steps < 2:
        raise UsageError("--steps must be >= 2")
    ckpt = _load_ckpt(args.ckpt)
    xa = check_images(_read_image(args.image_a), ckpt.config.N, allow_single=True)
    xb = check_images(_read_image(args.image_b), ckpt.config.N, allow_single=True)
    frames = interpolate(ckpt.params, ckpt.config, xa, xb, args.steps, args.mode)
    out = _mkdir(args.out)
    for k, f in enumerate(frames):
        scenegen.save_png(out / f"frame_{k:03d}.png", f.image[0])
        scenegen.save_png(out / f"background_{k:03d}.png", f.background[0])
    return EXIT_OK


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerscene", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--kind", choices=scenegen.KINDS, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=None, help="image side (default per kind)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--resume", default=None, help="checkpoint manifest to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate scenes from a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-hyperprior", action="store_true",
                   help="uniform positions and standard-normal appearance/depth")
    p.add_argument("--fix-positions", default=None, help="JSON list of (row, col) per slot")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("decompose", help="split images into layers")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory or a PNG image")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("eval", help="segmentation and depth-order metrics")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="JSON report path; CSVs are written beside it")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--min-overlap", type=int, default=30)
    p.add_argument("--oracle", action="store_true", help="score ground truth as the prediction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interpolate", help="render a latent interpolation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--mode", choices=INTERPOLATION_MODES, default="joint")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
