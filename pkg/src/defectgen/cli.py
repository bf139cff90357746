"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 usage error, 3 refused overwrite, 4 protocol violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.stats import spearmanr

from . import __version__, config
from .conditioning import GOOD, NULL
from .data import CorpusSpec, DefectSample, build_corpus, load_dataset, save_pair, to_uint8_image
from .evaluation import FeatureStats, extract_features, frechet_distance, pairwise_diversity, run_downstream
from .guidance import GuidanceConfig, sample
from .maskgen import binarize
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("defectgen")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_OVERWRITE, EXIT_PROTOCOL = 0, 1, 2, 3, 4
# binarization floor (0-255 scale) applied to generated masks
MASK_FLOOR = 64.0
METRICS_SCHEMA = 1


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def git_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(path: Path, command: str, args: argparse.Namespace, outputs: list, code: int,
                       error: str | None, started: float, snapshot: dict | None = None):
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "config_snapshot": snapshot or {},
        "seed": getattr(args, "seed", None),
        "outputs": [str(p) for p in outputs],
        "version": git_version(),
        "wall_time_s": round(time.time() - started, 3),
        "exit_code": code,
        "error": error,
    }
    path.write_text(json.dumps(record, indent=2, default=str) + "\n")


def _nonempty(d: Path) -> bool:
    return d.exists() and any(p.name != "run_manifest.json" for p in d.iterdir())


def _fmt(w: float) -> str:
    return format(float(w), "g")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, ctx):
    try:
        spec = config.load(CorpusSpec, args.spec_file, seed=args.seed) if args.seed is not None else \
            config.load(CorpusSpec, args.spec_file)
    except FileNotFoundError:
        raise CLIError(EXIT_USAGE, f"spec file {args.spec_file} not found")
    except config.ConfigError as e:
        raise CLIError(EXIT_USAGE, f"bad spec key {e.key!r}: {e}")
    spec.exclude = [tuple(x.split(":")) for x in spec.exclude]
    if any(len(x) != 2 for x in spec.exclude):
        raise CLIError(EXIT_USAGE, "bad spec key 'exclude': entries must be product:defect")
    try:
        spec.validate()
    except ValueError as e:
        raise CLIError(EXIT_USAGE, str(e))
    out = Path(args.out_dir)
    if _nonempty(out) and not args.force:
        raise CLIError(EXIT_OVERWRITE, f"{out} is not empty; pass --force to overwrite")
    ctx["snapshot"] = asdict(spec)
    manifest = build_corpus(spec, out)
    ctx["outputs"] += [out / "manifest.tsv"]
    print(f"wrote {len(manifest)} samples to {out}")


def cmd_train(args, ctx):
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    for ab in args.ablate or []:
        if ab == "no_fusion":
            overrides["no_fusion"] = True
        elif ab == "fixed_r":
            overrides["fixed_R"] = 3.0
        elif ab == "fused_prompt":
            overrides["fused_prompt_only"] = True
    try:
        cfg = config.load(TrainConfig, args.config_file, **overrides) if args.config_file else TrainConfig(**overrides)
    except FileNotFoundError:
        raise CLIError(EXIT_USAGE, f"config file {args.config_file} not found")
    except config.ConfigError as e:
        raise CLIError(EXIT_USAGE, f"bad config key {e.key!r}: {e}")
    except ValueError as e:
        raise CLIError(EXIT_USAGE, str(e))
    if not Path(args.data_root).is_dir():
        raise CLIError(EXIT_USAGE, f"data root {args.data_root} does not exist")
    dataset = load_dataset(args.data_root)
    if not dataset:
        raise CLIError(EXIT_USAGE, f"no samples under {args.data_root}")
    out = Path(args.out_dir)
    ckpt_path = out / "checkpoint.ckpt"
    if ckpt_path.exists() and not args.force and not args.resume:
        raise CLIError(EXIT_OVERWRITE, f"{ckpt_path} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(args.resume) if args.resume else None
    (out / "train_config.txt").write_text(config.dump(cfg))
    ctx["snapshot"] = asdict(cfg)
    log_path = out / "loss_log.jsonl"
    if not args.resume and log_path.exists():
        log_path.unlink()
    state = fit(dataset, cfg, out_dir=out, state=state, log_path=log_path, progress=True)
    save_checkpoint(state, ckpt_path)
    ctx["outputs"] += [ckpt_path, log_path]
    print(f"trained {state.step} steps; checkpoint {ckpt_path}")


def _load_for_sampling(path):
    try:
        state = load_checkpoint(path)
    except FileNotFoundError:
        raise CLIError(EXIT_USAGE, f"checkpoint {path} not found")
    products = sorted({p for p, _ in state.trained_combos})
    defects = sorted({d for _, d in state.trained_combos if d != GOOD})
    return state, products, defects


def _check_labels(product, defect, products, defects, allow_good=True):
    if product not in products:
        raise CLIError(EXIT_USAGE, f"unknown product {product!r}; known: {products}")
    if defect == GOOD and allow_good:
        return
    if defect not in defects:
        raise CLIError(EXIT_USAGE, f"unknown defect {defect!r}; known: {defects}")


def _generate(state, product, defect, w_p, w_d, seeds, steps, jobs):
    if jobs:
        torch.set_num_threads(jobs)
    g = GuidanceConfig(w_p=w_p, w_d=w_d, steps=steps)
    res = sample(state.model, defect, product, g, state.sched, seeds=list(seeds))
    masks = np.stack([binarize(gm, MASK_FLOOR) for gm in res.gray_masks])
    return res.images.numpy(), masks


def _write_samples(out: Path, product, defect, w_d, seeds, images, masks) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for seed, img, mask in zip(seeds, images, masks):
        stem = f"{product}_{defect}_{_fmt(w_d)}_{seed}"
        s = DefectSample(img, (mask > 0).astype(np.uint8), product, defect)
        save_pair(s, out / f"{stem}.png", out / f"{stem}_mask.png")
        written.append(out / f"{stem}.png")
    return written


def cmd_sample(args, ctx):
    state, products, defects = _load_for_sampling(args.checkpoint)
    _check_labels(args.product, args.defect, products, defects)
    seeds = [args.seed + i for i in range(args.count)]
    images, masks = _generate(state, args.product, args.defect, args.wp, args.wd, seeds, args.steps, args.jobs)
    ctx["outputs"] += _write_samples(Path(args.out_dir), args.product, args.defect, args.wd, seeds, images, masks)
    print(f"wrote {len(seeds)} samples to {args.out_dir}")


def _grid(cells: list[list[np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate(row, axis=1) for row in cells], axis=0)


def cmd_sweep(args, ctx):
    try:
        wds = [float(x) for x in args.wd_list.split(",") if x.strip()]
    except ValueError:
        raise CLIError(EXIT_USAGE, f"bad --wd-list {args.wd_list!r}")
    if not wds:
        raise CLIError(EXIT_USAGE, "--wd-list is empty")
    state, products, defects = _load_for_sampling(args.checkpoint)
    _check_labels(args.product, args.defect, products, defects, allow_good=False)
    seeds = [args.seed + i for i in range(args.count)]
    out = Path(args.out_dir)
    cols_img, cols_mask, areas = [], [], []
    for wd in wds:
        images, masks = _generate(state, args.product, args.defect, args.wp, wd, seeds, args.steps, args.jobs)
        ctx["outputs"] += _write_samples(out / "cells", args.product, args.defect, wd, seeds, images, masks)
        cols_img.append([to_uint8_image(im) for im in images])
        cols_mask.append([np.repeat(m[..., None], 3, axis=2) for m in masks])
        areas.append(float(np.mean([(m > 0).mean() for m in masks])))
    rows = [[cols_img[c][r] for c in range(len(wds))] for r in range(len(seeds))]
    mrows = [[cols_mask[c][r] for c in range(len(wds))] for r in range(len(seeds))]
    grid_path = out / f"grid_{args.defect}.png"
    Image.fromarray(_grid(rows)).save(grid_path)
    Image.fromarray(_grid(mrows)).save(out / f"grid_{args.defect}_mask.png")
    rho = float(spearmanr(wds, areas)[0]) if len(wds) > 1 and len(set(areas)) > 1 else float("nan")
    summary = {"product": args.product, "defect": args.defect, "wd": wds, "mean_mask_area": areas, "spearman": rho}
    (out / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    ctx["outputs"] += [grid_path, out / "sweep.json"]
    print(json.dumps(summary))


def cmd_zero_shot(args, ctx):
    state, products, defects = _load_for_sampling(args.checkpoint)
    if args.source_defect == GOOD:
        raise CLIError(EXIT_USAGE, "'good' is not a transferable defect")
    _check_labels(args.target_product, args.source_defect, products, defects, allow_good=False)
    if [args.target_product, args.source_defect] in state.trained_combos and not args.allow_seen:
        raise CLIError(EXIT_PROTOCOL, f"({args.target_product}, {args.source_defect}) was in the training data; "
                                      "pass --allow-seen to sample anyway")
    seeds = [args.seed + i for i in range(args.count)]
    images, masks = _generate(state, args.target_product, args.source_defect, args.wp, args.wd, seeds,
                              args.steps, args.jobs)
    ctx["outputs"] += _write_samples(Path(args.out_dir), args.target_product, args.source_defect, args.wd, seeds,
                                     images, masks)
    nonzero = float(np.mean([(m > 0).any() for m in masks]))
    summary = {"target_product": args.target_product, "source_defect": args.source_defect,
               "nonzero_mask_fraction": nonzero}
    (Path(args.out_dir) / "zero_shot.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


_GEN_NAME = re.compile(r"^(?P<product>[^_]+)_(?P<defect>[^_]+)_(?P<wd>[^_]+)_(?P<seed>\d+)$")


def load_generated(root) -> tuple[list[DefectSample], bool]:
    """Load a corpus tree or a flat directory of ``{product}_{defect}_{wd}_{seed}.png`` files.

    Returns the samples and whether every sample had a mask (missing masks become all-zero).
    """
    root = Path(root)
    if any(root.glob("*/*/img_*")):
        return load_dataset(root), True
    samples, complete = [], True
    for path in sorted(root.rglob("*.png")):
        m = _GEN_NAME.match(path.stem)
        if not m or path.stem.endswith("_mask"):
            continue
        image = (np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0).transpose(2, 0, 1)
        mask_path = path.with_name(f"{path.stem}_mask.png")
        if mask_path.exists():
            mask = (np.asarray(Image.open(mask_path).convert("L")) >= 128).astype(np.uint8)
        else:
            complete = False
            mask = np.zeros(image.shape[1:], np.uint8)
        samples.append(DefectSample(image, mask, m["product"], m["defect"], str(path.relative_to(root))))
    return samples, complete


def evaluate(real: list, generated: list, with_downstream: bool, seg_steps: int, seed: int) -> dict:
    categories = {}
    for product in sorted({s.product for s in real} & {s.product for s in generated}):
        r = [s for s in real if s.product == product]
        g = [s for s in generated if s.product == product]
        entry = {}
        if len(r) >= 2 and len(g) >= 2:
            fr = extract_features(np.stack([s.image for s in r]), seed)
            fg = extract_features(np.stack([s.image for s in g]), seed)
            entry["fid_proxy"] = frechet_distance(FeatureStats.from_features(fr), FeatureStats.from_features(fg))
            entry["diversity_proxy"] = pairwise_diversity(np.stack([s.image for s in g]), seed)
        if with_downstream and len(r) >= 2:
            ordered = sorted(r, key=lambda s: s.path)
            train_real, test = ordered[0::2], ordered[1::2]
            base, aug = run_downstream(train_real, g, test, steps=seg_steps, seed=seed)
            entry["baseline"], entry["augmented"] = base.as_dict(), aug.as_dict()
        categories[product] = entry
    return {"schema": METRICS_SCHEMA, "proxy": True, "categories": categories}


def cmd_eval(args, ctx):
    for root in (args.real_root, args.generated_root):
        if not Path(root).is_dir():
            raise CLIError(EXIT_USAGE, f"{root} does not exist")
    real = load_dataset(args.real_root)
    generated, complete = load_generated(args.generated_root)
    if not real or not generated:
        raise CLIError(EXIT_USAGE, "no images found")
    if not complete:
        log.warning("generated set lacks masks; downstream segmentation section omitted")
    metrics = evaluate(real, generated, complete and not args.skip_downstream, args.seg_steps, args.seed)
    out = Path(args.out_json)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(metrics, indent=2) + "\n")
    ctx["outputs"].append(out)
    print(f"wrote {out}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="defectgen", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural corpus")
    p.add_argument("spec_file")
    p.add_argument("out_dir")
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a checkpoint")
    p.add_argument("config_file", nargs="?", help="key = value training config (defaults if omitted)")
    p.add_argument("data_root")
    p.add_argument("out_dir")
    p.add_argument("--ablate", action="append", choices=["no_fusion", "fixed_r", "fused_prompt"])
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    def sampling_args(p, count=8):
        p.add_argument("--wp", type=float, default=1.0)
        p.add_argument("--count", type=int, default=count)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--steps", type=int, help="reverse steps (default: schedule length)")
        p.add_argument("--jobs", type=int, default=0, help="torch threads (0 = library default)")

    p = sub.add_parser("sample", help="generate image/mask pairs")
    p.add_argument("checkpoint")
    p.add_argument("--product", required=True)
    p.add_argument("--defect", required=True)
    p.add_argument("--wd", type=float, default=1.0)
    p.add_argument("out_dir")
    sampling_args(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sweep", help="defect-strength grid over w_d")
    p.add_argument("checkpoint")
    p.add_argument("--product", required=True)
    p.add_argument("--defect", required=True)
    p.add_argument("--wd-list", default="0.5,1,2,3")
    p.add_argument("out_dir")
    sampling_args(p, count=4)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("zero-shot", help="transfer a defect to a product never seen with it")
    p.add_argument("checkpoint")
    p.add_argument("target_product")
    p.add_argument("source_defect")
    p.add_argument("out_dir")
    p.add_argument("--wd", type=float, default=1.0)
    p.add_argument("--allow-seen", action="store_true")
    sampling_args(p, count=16)
    p.set_defaults(func=cmd_zero_shot)

    p = sub.add_parser("eval", help="proxy metrics JSON")
    p.add_argument("real_root")
    p.add_argument("generated_root")
    p.add_argument("out_json")
    p.add_argument("--seg-steps", type=int, default=2000)
    p.add_argument("--skip-downstream", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return ap


def _manifest_path(args) -> Path:
    if args.command == "eval":
        return Path(args.out_json).with_name("run_manifest.json")
    return Path(args.out_dir) / "run_manifest.json"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    ctx = {"outputs": [], "snapshot": None}
    code, error = EXIT_OK, None
    try:
        args.func(args, ctx)
    except CLIError as e:
        code, error = e.code, str(e)
    except Exception as e:  # noqa: BLE001 - every failure still gets a manifest
        log.exception("internal error")
        code, error = EXIT_INTERNAL, f"{type(e).__name__}: {e}"
    if error:
        print(f"error: {error}", file=sys.stderr)
    manifest = _manifest_path(args)
    if code == EXIT_OVERWRITE:
        manifest = manifest.with_name("run_manifest.refused.json")
    write_run_manifest(manifest, args.command, args, ctx["outputs"], code, error, started, ctx["snapshot"])
    return code


if __name__ == "__main__":
    sys.exit(main())
