"""Procedural multi-product defect corpus and image/mask directory loading."""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, ImageDraw

from .conditioning import GOOD

log = logging.getLogger(__name__)

PRODUCTS = ("striped", "checker", "disc")
DEFECTS = ("scratch", "spot", "crack")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class DefectSample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    product: str
    defect: str
    path: str = ""

    @property
    def is_good(self) -> bool:
        return self.defect == GOOD


@dataclass
class CorpusSpec:
    products: list = field(default_factory=lambda: list(PRODUCTS))
    defects: list = field(default_factory=lambda: list(DEFECTS))
    per_defect: int = 10
    per_good: int = 10
    image_size: int = 32
    seed: int = 0
    exclude: list = field(default_factory=list)  # (product, defect) pairs left out

    def validate(self):
        if len(self.products) < 2 or len(self.defects) < 2:
            raise ValueError("corpus needs at least 2 products and 2 defects")
        for p in self.products:
            if p not in PRODUCTS:
                raise ValueError(f"unknown product {p!r}; known: {PRODUCTS}")
        for d in self.defects:
            if d not in DEFECTS:
                raise ValueError(f"unknown defect {d!r}; known: {DEFECTS}")
        if self.per_defect < 0 or self.per_good < 0 or self.per_defect + self.per_good == 0:
            raise ValueError("empty corpus: per_defect and per_good are both zero")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")

    def combos(self) -> Iterable[tuple[str, str, int]]:
        excluded = {tuple(e) for e in self.exclude}
        for p in self.products:
            for d in self.defects:
                if (p, d) not in excluded:
                    yield p, d, self.per_defect
            yield p, GOOD, self.per_good


def sample_rng(seed: int, product: str, defect: str, index: int) -> np.random.Generator:
    """Order-independent per-sample generator."""
    return np.random.default_rng([seed, zlib.crc32(product.encode()), zlib.crc32(defect.encode()), index])


# ---------------------------------------------------------------- backgrounds

_BASE_COLOR = {
    "striped": (0.55, 0.60, 0.70),
    "checker": (0.65, 0.55, 0.45),
    "disc": (0.50, 0.65, 0.50),
}


def _pattern(product: str, size: int, phase: float = 0.0, shift=(0.0, 0.0)) -> np.ndarray:
    """Luminance pattern in [-1, 1] of shape (size, size)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) * (32.0 / size)
    if product == "striped":
        u = xx * np.cos(0.4) + yy * np.sin(0.4)
        return np.sin(2 * np.pi * u / 8.0 + phase)
    if product == "checker":
        return np.sign(np.sin(np.pi * (xx + 0.5 * shift[0] + 0.5) / 8.0) * np.sin(np.pi * (yy + 0.5 * shift[1] + 0.5) / 8.0))
    if product == "disc":
        r = np.hypot(xx - 15.5 - shift[0], yy - 15.5 - shift[1])
        return np.clip((10.0 - r) / 1.5, -1.0, 1.0)
    raise KeyError(f"unknown product {product!r}")


def product_template(product: str, size: int = 32) -> np.ndarray:
    """Jitter-free luminance pattern of a product."""
    return _pattern(product, size)


def generate_background(product: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Product texture with per-sample jitter in phase, position and color. Returns (3, H, W) in [0, 1]."""
    if product not in _BASE_COLOR:
        raise KeyError(f"unknown product {product!r}")
    phase = rng.uniform(-0.6, 0.6)
    shift = rng.uniform(-1.5, 1.5, size=2)
    tint = np.asarray(_BASE_COLOR[product]) + rng.uniform(-0.06, 0.06, size=3)
    contrast = rng.uniform(0.22, 0.3)
    pat = _pattern(product, size, phase, shift)
    grain = rng.normal(0.0, 0.015, size=(size, size))
    img = tint[:, None, None] + contrast * pat[None] + grain[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- defects

_DEFECT_COLOR = {"scratch": (0.95, 0.95, 0.9), "spot": (0.35, 0.2, 0.1), "crack": (0.05, 0.05, 0.05)}


def _polyline(rng, start, n_seg, seg_len):
    pts = [np.asarray(start, dtype=np.float64)]
    angle = rng.uniform(0, 2 * np.pi)
    for _ in range(n_seg):
        angle += rng.uniform(-0.6, 0.6)
        pts.append(pts[-1] + seg_len * np.array([np.cos(angle), np.sin(angle)]))
    return [tuple(p) for p in pts]


def draw_defect_mask(defect: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Binary (H, W) mask of one defect; shape statistics do not depend on the product."""
    s = size / 32.0
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    cx, cy = rng.uniform(9 * s, size - 9 * s, size=2)
    if defect == "scratch":
        pts = _polyline(rng, (cx, cy), 2, rng.uniform(5, 7) * s)
        draw.line(pts, fill=255, width=max(2, round(2 * s)))
    elif defect == "spot":
        rx, ry = rng.uniform(2.5, 4.0, size=2) * s
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    elif defect == "crack":
        trunk = _polyline(rng, (cx, cy), 3, rng.uniform(3.5, 4.5) * s)
        draw.line(trunk, fill=255, width=max(2, round(2 * s)))
        branch = _polyline(rng, trunk[len(trunk) // 2], 2, 3.0 * s)
        draw.line(branch, fill=255, width=max(1, round(1 * s)))
    else:
        raise KeyError(f"unknown defect {defect!r}")
    return (np.asarray(canvas) > 0).astype(np.uint8)


def apply_defect(image: np.ndarray, defect: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Paint one defect onto ``image``. Pixels change exactly on the returned mask."""
    if defect == GOOD:
        raise ValueError("normal samples carry no defect; do not call apply_defect with 'good'")
    if defect not in _DEFECT_COLOR:
        raise KeyError(f"unknown defect {defect!r}")
    mask = draw_defect_mask(defect, rng, image.shape[-1])
    color = np.asarray(_DEFECT_COLOR[defect], dtype=np.float32)[:, None, None]
    blend = np.float32(rng.uniform(0.75, 0.9))
    painted = (1 - blend) * image + blend * color
    # guarantee a visible change on every masked pixel
    same = np.all(np.abs(painted - image) < 1e-3, axis=0)
    painted[:, same] = np.where(image[:, same] > 0.5, image[:, same] - 0.2, image[:, same] + 0.2)
    out = np.where(mask[None].astype(bool), painted, image).astype(np.float32)
    return out, mask


def make_sample(product: str, defect: str, rng: np.random.Generator, size: int = 32) -> DefectSample:
    img = generate_background(product, rng, size)
    if defect == GOOD:
        return DefectSample(img, np.zeros((size, size), np.uint8), product, defect)
    img, mask = apply_defect(img, defect, rng)
    return DefectSample(img, mask, product, defect)


def generate_samples(spec: CorpusSpec) -> list[DefectSample]:
    spec.validate()
    out = []
    for product, defect, count in spec.combos():
        for i in range(count):
            s = make_sample(product, defect, sample_rng(spec.seed, product, defect, i), spec.image_size)
            s.path = f"{product}/{defect}/img_{i:04d}.png"
            out.append(s)
    return out


# ---------------------------------------------------------------- file io

def to_uint8_image(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_pair(sample: DefectSample, img_path: Path, mask_path: Path):
    img_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8_image(sample.image)).save(img_path)
    Image.fromarray((sample.mask > 0).astype(np.uint8) * 255, mode="L").save(mask_path)


def build_corpus(spec: CorpusSpec, out_dir) -> list[tuple[str, str, str]]:
    """Write root/{product}/{defect}/img_####.png + mask_####.png and manifest.tsv."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for s in generate_samples(spec):
        img_path = root / s.path
        save_pair(s, img_path, img_path.with_name(img_path.name.replace("img_", "mask_")))
        manifest.append((s.path, s.product, s.defect))
    write_manifest(root / "manifest.tsv", manifest)
    return manifest


def write_manifest(path, records):
    lines = ["path\tproduct\tdefect"] + ["\t".join(r) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[str, str, str]]:
    lines = Path(path).read_text().splitlines()[1:]
    return [tuple(ln.split("\t")) for ln in lines if ln.strip()]


def _read_image(path: Path, size: int | None) -> np.ndarray:
    im = Image.open(path).convert("RGB")
    if size is not None and im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    return (np.asarray(im, dtype=np.float32) / 255.0).transpose(2, 0, 1)


def _read_mask(path: Path, size: int | None) -> np.ndarray:
    im = Image.open(path).convert("L")
    if size is not None and im.size != (size, size):
        im = im.resize((size, size), Image.NEAREST)
    arr = np.asarray(im)
    if np.any((arr != 0) & (arr != 255)):
        log.warning("mask %s has gray values; binarizing at 128", path)
    return (arr >= 128).astype(np.uint8)


def _check_invariant(sample: DefectSample):
    empty = not sample.mask.any()
    if sample.is_good and not empty:
        raise ValueError(f"{sample.path}: 'good' sample has a nonzero mask")
    if not sample.is_good and empty:
        raise ValueError(f"{sample.path}: defect sample has an empty mask")


def _is_mvtec(root: Path) -> bool:
    return any((d / "test").is_dir() and (d / "ground_truth").is_dir() for d in root.iterdir() if d.is_dir())


def load_dataset(root, image_size: int | None = None) -> list[DefectSample]:
    """Load a corpus tree (or an MVTec-style tree) into samples. Images in [0, 1], masks in {0, 1}."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    samples = _load_mvtec(root, image_size) if _is_mvtec(root) else _load_tree(root, image_size)
    for s in samples:
        _check_invariant(s)
    products = sorted({s.product for s in samples})
    for p in products:
        if not any(s.is_good and s.product == p for s in samples):
            log.warning("no 'good' samples for product %s", p)
    return samples


def _load_tree(root: Path, size) -> list[DefectSample]:
    out = []
    for img_path in sorted(root.glob("*/*/img_*")):
        if img_path.suffix.lower() not in IMAGE_EXTS:
            continue
        product, defect = img_path.parent.parent.name, img_path.parent.name
        mask_path = img_path.with_name(img_path.name.replace("img_", "mask_", 1))
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask file {mask_path}")
        out.append(DefectSample(_read_image(img_path, size), _read_mask(mask_path, size), product, defect,
                                str(img_path.relative_to(root))))
    return out


def _load_mvtec(root: Path, size) -> list[DefectSample]:
    out = []
    for product_dir in sorted(d for d in root.iterdir() if d.is_dir()):
        for split in ("train", "test"):
            for img_path in sorted((product_dir / split).glob("*/*")):
                if img_path.suffix.lower() not in IMAGE_EXTS:
                    continue
                defect = img_path.parent.name
                image = _read_image(img_path, size)
                if defect == GOOD:
                    mask = np.zeros(image.shape[1:], np.uint8)
                else:
                    mask_path = product_dir / "ground_truth" / defect / f"{img_path.stem}_mask.png"
                    if not mask_path.exists():
                        raise FileNotFoundError(f"missing mask file {mask_path}")
                    mask = _read_mask(mask_path, size)
                out.append(DefectSample(image, mask, product_dir.name, defect, str(img_path.relative_to(root))))
    return out
