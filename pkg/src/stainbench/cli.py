"""``stainbench`` command line: gen-data, train, infer, tile-infer, eval, bench.

Configuration is a JSON object with flat dotted keys (``"train.lr0": 0.01``).
Command-line flags override file values, and the effective configuration is
written to ``<out>/config.json``. Progress goes to stderr; results go to files.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import CheckpointError, load_checkpoint, load_model, save_checkpoint
from .metrics import (DEFAULT_EXTRACTOR, MetricReport, cycle_consistency, frechet_distance,
                      paired_reports, scalar_report, seam_terms, write_reports)
from .models import ModelSpec, build_model, infer
from .optim import TrainConfig
from .train import NumericError, fit

log = logging.getLogger("stainbench")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "data.corpus": "corpus",
    "data.n_train": 500,
    "data.n_eval": 100,
    "data.tile": 64,
    "data.teacher_seed": None,
    "model.kind": "unet",
    "model.base_channels": 64,
    "model.widths": [3, 32, 32, 3],
    "train.lr0": 0.01,
    "train.epochs": 300,
    "train.momentum": 0.9,
    "train.batch_size": 4,
    "train.weight_decay": 0.0,
    "train.direction": "ab",
    "train.n_val": 50,
    "train.keep_all": False,
    "infer.input": None,
    "tile.size": 512,
    "tile.overlap": 0,
    "tile.blend": "center-crop",
    "tile.reference_max_pixels": 1 << 20,
    "eval.input": None,
    "eval.generated": None,
    "eval.reference": None,
    "eval.max_val": 1.0,
    "bench.tile": 256,
    "bench.count": 8,
    "bench.warmup": 1,
    "bench.models": ["pixelmapper", "unet"],
}

COMMANDS = ("gen-data", "train", "infer", "tile-infer", "eval", "bench")


class ConfigError(ValueError):
    pass


def load_config(path, overrides: dict) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = sorted(set(user) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        cfg.update(user)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _overrides(args) -> dict:
    tile_key = {"gen-data": "data.tile", "bench": "bench.tile"}.get(args.command, "tile.size")
    return {"seed": args.seed, tile_key: args.tile_size, "tile.overlap": args.overlap,
            "model.kind": args.model}


def _model_spec(cfg) -> ModelSpec:
    return ModelSpec(kind=cfg["model.kind"], base_channels=int(cfg["model.base_channels"]),
                     widths=list(cfg["model.widths"])).validate()


def _require(cfg, key):
    if cfg.get(key) is None:
        raise ConfigError(f"config key {key!r} is required for this command")
    return cfg[key]


def _inputs(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = D.list_pngs(p)
        if not files:
            raise FileNotFoundError(f"no PNG files in {p}")
        return files
    if not p.exists():
        raise FileNotFoundError(f"input {p} does not exist")
    return [p]


def _run_padded(model, img: np.ndarray) -> np.ndarray:
    """Whole-image inference, reflect-padding to the model's size multiple."""
    mult = getattr(model, "multiple", 1)
    padded, (h, w) = D.pad_to_multiple(img, mult)
    return infer(model, padded[None])[0, :, :h, :w]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg, args, out: Path) -> int:
    ts = cfg["data.teacher_seed"]
    teacher = D.TeacherParams.from_seed(int(ts)) if ts is not None else D.TeacherParams.default()
    manifest = D.gen_synthetic_corpus(out, n_train=int(cfg["data.n_train"]), n_eval=int(cfg["data.n_eval"]),
                                      tile=int(cfg["data.tile"]), teacher=teacher, seed=int(cfg["seed"]))
    log.info("wrote %d files to %s (separation %.4f)", len(manifest["files"]), out, manifest["separation"])
    return EXIT_OK


def cmd_train(cfg, args, out: Path) -> int:
    corpus = Path(cfg["data.corpus"])
    manifest = D.read_manifest(corpus)
    teacher = D.Teacher(D.TeacherParams.from_dict(manifest["params"]))
    a = D.load_corpus_split(corpus, "a", "train")
    b = D.load_corpus_split(corpus, "b", "train")
    pairs = D.assemble_pairs(a, b, teacher, seed=int(cfg["seed"]), n_val=int(cfg["train.n_val"]))
    direction = cfg["train.direction"]
    if direction not in ("ab", "ba"):
        raise ConfigError(f"train.direction must be 'ab' or 'ba', got {direction!r}")
    if direction == "ba":
        pairs = pairs.swapped()
    tcfg = TrainConfig(lr0=float(cfg["train.lr0"]), epochs=int(cfg["train.epochs"]),
                       momentum=float(cfg["train.momentum"]), batch_size=int(cfg["train.batch_size"]),
                       weight_decay=float(cfg["train.weight_decay"]), seed=int(cfg["seed"]))
    start, velocity = 0, {}
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        model, start, velocity = ck.model(), ck.epoch, ck.velocity
        if ck.train_config is not None:
            tcfg = ck.train_config
        log.info("resuming from %s at epoch %d", args.checkpoint, start)
    else:
        model = build_model(_model_spec(cfg), seed=int(cfg["seed"]))
    log.info("training %s (%d params) on %d pairs", model.spec.kind, model.num_params(), len(pairs))
    fit(model, pairs, tcfg, out_dir=out, start_epoch=start, velocity=velocity,
        extra={"direction": direction}, keep_all=bool(cfg["train.keep_all"]))
    if start >= tcfg.epochs:
        save_checkpoint(out / "checkpoint.ckpt", model, tcfg, start, velocity, {"direction": direction})
    return EXIT_OK


def _load_ckpt_model(path):
    if not path:
        raise ConfigError("--checkpoint is required for this command")
    return load_model(path)


def cmd_infer(cfg, args, out: Path) -> int:
    model = _load_ckpt_model(args.checkpoint)
    files = _inputs(_require(cfg, "infer.input"))
    for f in files:
        D.save_image(_run_padded(model, D.load_image(f)), out / f.name)
    log.info("wrote %d images to %s", len(files), out)
    return EXIT_OK


def cmd_tile_infer(cfg, args, out: Path) -> int:
    model = _load_ckpt_model(args.checkpoint)
    t, o, blend = int(cfg["tile.size"]), int(cfg["tile.overlap"]), cfg["tile.blend"]
    reports = []
    for f in _inputs(_require(cfg, "infer.input")):
        img = D.load_image(f)
        tiles, grid = D.tile_image(img, t, o)
        outs = np.stack([_run_padded(model, tile) for tile in tiles])
        stitched = D.stitch(outs, grid, blend)
        D.save_image(stitched, out / f.name)
        h, w = img.shape[1:]
        if h * w <= int(cfg["tile.reference_max_pixels"]):
            full = _run_padded(model, img)
            terms = seam_terms(full, stitched, grid)
            reports.append({"image": f.name, "tile": t, "overlap": o, "blend": blend,
                            "n_tiles": len(grid.origins), "boundary": terms["boundary"],
                            "global": terms["global"], "score": terms["boundary"] + terms["global"]})
        else:
            log.info("%s: too large for a whole-image reference; seam report skipped", f.name)
    if reports:
        with open(out / "seams.json", "w") as fh:
            json.dump(reports, fh, indent=2, sort_keys=True)
    return EXIT_OK


def cmd_eval(cfg, args, out: Path) -> int:
    ref_imgs, ref_paths = D.load_dir(_require(cfg, "eval.reference"))
    max_val = float(cfg["eval.max_val"])
    model_ab = load_model(args.checkpoint) if args.checkpoint else None
    inp = cfg["eval.input"]
    in_imgs = D.load_dir(inp)[0] if inp else None
    if cfg["eval.generated"]:
        gen_imgs, gen_paths = D.load_dir(cfg["eval.generated"])
        gen_src = str(cfg["eval.generated"])
    elif model_ab is not None and in_imgs is not None:
        gen_imgs = np.stack([_run_padded(model_ab, x) for x in in_imgs])
        gen_paths, gen_src = None, f"{args.checkpoint} on {inp}"
    else:
        raise ConfigError("eval needs eval.generated, or --checkpoint with eval.input")
    ext = DEFAULT_EXTRACTOR
    prov = {"extractor": ext.name, "generated": gen_src, "reference": str(cfg["eval.reference"]),
            "n_generated": len(gen_imgs), "n_reference": len(ref_imgs)}
    reports: list[MetricReport] = [
        scalar_report("fid", frechet_distance(ext(gen_imgs), ext(ref_imgs)), **prov)]
    if in_imgs is not None:
        reports.append(scalar_report("fid_input_vs_reference", frechet_distance(ext(in_imgs), ext(ref_imgs)),
                                     extractor=ext.name, input=str(inp), reference=str(cfg["eval.reference"])))
    same_names = gen_paths is not None and [p.name for p in gen_paths] == [p.name for p in ref_paths]
    if same_names and gen_imgs.shape == ref_imgs.shape:
        reports += paired_reports(gen_imgs, ref_imgs, max_val, **prov)
    if args.checkpoint_ba:
        if model_ab is None or in_imgs is None:
            raise ConfigError("cycle consistency needs --checkpoint, --checkpoint-ba and eval.input")
        reports += cycle_consistency(model_ab, load_model(args.checkpoint_ba), in_imgs, max_val,
                                     ab=str(args.checkpoint), ba=str(args.checkpoint_ba), input=str(inp))
    write_reports(reports, out / "metrics.json", out / "metrics.csv")
    for r in reports:
        log.info("%s: mean %.6g std %.6g (n=%d)", r.metric, r.mean, r.std, r.count)
    return EXIT_OK


def bench_model(model, tile: int, count: int, warmup: int, seed: int = 0) -> dict:
    """Time single-image inference; warmup runs are excluded."""
    rng = np.random.default_rng(seed)
    x = rng.random((count + warmup, 1, 3, tile, tile), dtype=np.float32)
    for i in range(warmup):
        infer(model, x[i])
    start = time.perf_counter()
    for i in range(warmup, warmup + count):
        infer(model, x[i])
    wall = time.perf_counter() - start
    return {"model": model.spec.kind, "tile": tile, "count": count, "warmup": warmup,
            "wall_time_s": wall, "images_per_s": count / wall if wall > 0 else float("inf"),
            "params": model.num_params()}


def cmd_bench(cfg, args, out: Path) -> int:
    tile, count, warmup = int(cfg["bench.tile"]), int(cfg["bench.count"]), int(cfg["bench.warmup"])
    if count < 1 or warmup < 0:
        raise ConfigError("bench.count must be >= 1 and bench.warmup >= 0")
    rows = []
    for kind in cfg["bench.models"]:
        spec = ModelSpec(kind=kind, base_channels=int(cfg["model.base_channels"]),
                         widths=list(cfg["model.widths"])).validate()
        model = build_model(spec, seed=int(cfg["seed"]))
        rows.append(bench_model(model, tile, count, warmup, seed=int(cfg["seed"])))
        log.info("%s: %.3f images/s at %dx%d", kind, rows[-1]["images_per_s"], tile, tile)
    with open(out / "bench.json", "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer,
            "tile-infer": cmd_tile_infer, "eval": cmd_eval, "bench": cmd_bench}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stainbench", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config with flat dotted keys")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--tile-size", type=int)
    ap.add_argument("--overlap", type=int)
    ap.add_argument("--model", choices=("unet", "pixelmapper"))
    ap.add_argument("--checkpoint")
    ap.add_argument("--checkpoint-ba")
    return ap


class _Lock:
    def __init__(self, directory: Path):
        self.path = directory / ".stainbench.lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OSError(f"{self.path} exists: another stainbench run is using this directory") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with _Lock(out):
            with open(out / "config.json", "w") as fh:
                json.dump({"command": args.command, **cfg}, fh, indent=2, sort_keys=True)
                fh.write("\n")
            return HANDLERS[args.command](cfg, args, out)
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
