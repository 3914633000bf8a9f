"""Image I/O, tiling and stitching, the optical-density teacher and paired datasets.

Images are handled as float arrays in [0, 1]. Single images are (3, h, w);
batches are (n, 3, h, w). PNG files are 8-bit RGB.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

MANIFEST_VERSION = 1


class ImageFormatError(OSError):
    pass


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG as a (3, h, w) float32 array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageFormatError(f"{path}: expected PNG, got {im.format}")
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise ImageFormatError(f"{path}: cannot read image ({exc})") from exc
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def to_uint8(image) -> np.ndarray:
    """(3, h, w) float image in [0, 1] to an (h, w, 3) uint8 array."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) image, got shape {img.shape}")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def quantize(image) -> np.ndarray:
    """Round-trip through 8 bits, as saving and reloading would."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0


def save_image(image, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(image)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(arr, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def list_pngs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def load_dir(directory) -> tuple[np.ndarray, list[Path]]:
    paths = list_pngs(directory)
    if not paths:
        raise FileNotFoundError(f"no PNG files in {directory}")
    return np.stack([load_image(p) for p in paths]), paths


def pad_to_multiple(image, multiple: int):
    """Reflect-pad the trailing spatial dims up to a multiple; returns (padded, (h, w))."""
    img = np.asarray(image)
    h, w = img.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return img, (h, w)
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode="reflect"), (h, w)


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------


def _axis_origins(size: int, t: int, o: int) -> list[int]:
    step = t - o
    origins = list(range(0, size - t + 1, step))
    if origins[-1] + t < size:
        origins.append(size - t)  # "shift" edge policy: last tile moves inward
    return origins


def _axis_owners(origins: list[int], t: int, size: int) -> list[tuple[int, int]]:
    """Pixel span each tile contributes under centre-crop stitching.

    Neighbouring tiles split their overlap at its midpoint.
    """
    spans = []
    for i, a in enumerate(origins):
        lo = 0 if i == 0 else (a + origins[i - 1] + t) // 2
        hi = size if i == len(origins) - 1 else (origins[i + 1] + a + t) // 2
        spans.append((lo, hi))
    return spans


@dataclass
class TileGrid:
    height: int
    width: int
    tile: int
    overlap: int
    origins: list[tuple[int, int]] = field(default_factory=list)
    edge_policy: str = "shift"

    @classmethod
    def build(cls, height: int, width: int, tile: int, overlap: int = 0) -> "TileGrid":
        if not tile > overlap >= 0:
            raise ValueError(f"need tile > overlap >= 0, got tile={tile}, overlap={overlap}")
        if tile > height or tile > width:
            raise ValueError(f"tile size {tile} exceeds image dims {height}x{width}")
        rows = _axis_origins(height, tile, overlap)
        cols = _axis_origins(width, tile, overlap)
        return cls(height, width, tile, overlap, [(r, c) for r in rows for c in cols])

    @property
    def row_origins(self) -> list[int]:
        return sorted({r for r, _ in self.origins})

    @property
    def col_origins(self) -> list[int]:
        return sorted({c for _, c in self.origins})

    def seams(self) -> tuple[list[int], list[int]]:
        """Interior boundary positions (rows, cols) where tile ownership switches.

        A boundary at position b separates pixel b-1 from pixel b.
        """
        rows = [lo for lo, _ in _axis_owners(self.row_origins, self.tile, self.height)[1:]]
        cols = [lo for lo, _ in _axis_owners(self.col_origins, self.tile, self.width)[1:]]
        return rows, cols

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width, "tile": self.tile,
                "overlap": self.overlap, "edge_policy": self.edge_policy,
                "origins": [list(o) for o in self.origins]}


def tile_image(image, t: int, o: int = 0):
    """Cut a (c, h, w) image into row-major t x t tiles; returns (tiles, grid)."""
    img = np.asarray(image)
    grid = TileGrid.build(img.shape[-2], img.shape[-1], t, o)
    tiles = np.stack([img[:, r:r + t, c:c + t] for r, c in grid.origins])
    return tiles, grid


def stitch(tiles, grid: TileGrid, blend: str = "center-crop") -> np.ndarray:
    """Reassemble tiles into a (c, H, W) image.

    ``center-crop`` takes every pixel from the tile whose owned span contains
    it; ``average`` takes the mean over all tiles covering the pixel.
    """
    tiles = np.asarray(tiles)
    t = grid.tile
    if tiles.ndim != 4 or tiles.shape[0] != len(grid.origins) or tiles.shape[2:] != (t, t):
        raise ValueError(f"tiles of shape {tiles.shape} do not match a grid of "
                         f"{len(grid.origins)} tiles of size {t}")
    c = tiles.shape[1]
    if blend == "center-crop":
        out = np.empty((c, grid.height, grid.width), dtype=tiles.dtype)
        row_span = dict(zip(grid.row_origins, _axis_owners(grid.row_origins, t, grid.height)))
        col_span = dict(zip(grid.col_origins, _axis_owners(grid.col_origins, t, grid.width)))
        for tile, (r, cc) in zip(tiles, grid.origins):
            (r0, r1), (c0, c1) = row_span[r], col_span[cc]
            out[:, r0:r1, c0:c1] = tile[:, r0 - r:r1 - r, c0 - cc:c1 - cc]
        return out
    if blend == "average":
        acc = np.zeros((c, grid.height, grid.width), dtype=np.float64)
        cnt = np.zeros((grid.height, grid.width), dtype=np.int64)
        for tile, (r, cc) in zip(tiles, grid.origins):
            acc[:, r:r + t, cc:cc + t] += tile
            cnt[r:r + t, cc:cc + t] += 1
        return (acc / cnt).astype(tiles.dtype)
    raise ValueError(f"unknown blend {blend!r}; use 'center-crop' or 'average'")


# ---------------------------------------------------------------------------
# Optical-density teacher
# ---------------------------------------------------------------------------


def rgb_to_od(image):
    return -np.log((np.asarray(image, dtype=np.float64) * 255.0 + 1.0) / 256.0)


def od_to_rgb(od):
    return (256.0 * np.exp(-od) - 1.0) / 255.0


@dataclass
class TeacherParams:
    """Stain-style colour transform: OD' = gain * (matrix @ OD)."""

    matrix: np.ndarray
    gain: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.gain = np.asarray(self.gain, dtype=np.float64)
        if self.matrix.shape != (3, 3) or self.gain.shape != (3,):
            raise ValueError("teacher needs a 3x3 matrix and a 3-vector gain")
        if not np.all(self.gain > 0):
            raise ValueError(f"teacher gains must be positive, got {self.gain}")
        cond = np.linalg.cond(self.matrix)
        if not np.isfinite(cond) or cond >= 100:
            raise ValueError(f"teacher matrix is singular or ill-conditioned (cond={cond:.3g})")
        self._inv = np.linalg.inv(self.matrix)

    @classmethod
    def default(cls) -> "TeacherParams":
        # over-staining: stronger absorbance, mild cross-talk between channels
        return cls(matrix=[[1.00, 0.12, 0.04],
                           [0.08, 1.00, 0.10],
                           [0.03, 0.15, 1.00]],
                   gain=[1.75, 1.5, 1.3])

    @classmethod
    def from_seed(cls, seed: int) -> "TeacherParams":
        rng = np.random.default_rng(seed)
        matrix = np.eye(3) + rng.uniform(0.0, 0.15, size=(3, 3)) * (1 - np.eye(3))
        gain = rng.uniform(1.1, 1.6, size=3)
        return cls(matrix, gain, seed)

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "gain": self.gain.tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherParams":
        return cls(d["matrix"], d["gain"], d.get("seed"))


def teacher_transform(image, p: TeacherParams, direction: str = "forward") -> np.ndarray:
    """Apply the teacher (or its exact inverse) to images with channel axis -3."""
    img = np.asarray(image)
    od = np.moveaxis(rgb_to_od(img), -3, -1)
    if direction == "forward":
        od = (od @ p.matrix.T) * p.gain
    elif direction == "inverse":
        od = (od / p.gain) @ p._inv.T
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    out = np.clip(od_to_rgb(np.moveaxis(od, -1, -3)), 0.0, 1.0)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)


class Teacher:
    """Callable wrapper with forward/inverse directions."""

    def __init__(self, params: TeacherParams):
        self.params = params

    def forward(self, image):
        return teacher_transform(image, self.params, "forward")

    def inverse(self, image):
        return teacher_transform(image, self.params, "inverse")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

# Ruifrok & Johnston optical-density stain vectors (rows: haematoxylin, eosin)
STAIN_OD = np.array([[0.650, 0.704, 0.286],
                     [0.072, 0.990, 0.105]])


def _smooth_noise(rng, shape, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (field_ - field_.mean()) / (field_.std() + 1e-12)


def synth_tile(rng: np.random.Generator, t: int, scale: int | None = None) -> np.ndarray:
    """Procedural H&E-like tile: eosin stroma texture, haematoxylin nuclei, white gaps.

    ``scale`` is the tile size the texture statistics are tuned for (default ``t``);
    pass the training tile size to synthesize larger images at the same tissue scale.
    """
    s = t if scale is None else scale
    area = (t / s) ** 2
    yy, xx = np.mgrid[0:t, 0:t]
    tissue = _smooth_noise(rng, (t, t), sigma=s / 10) > rng.uniform(-1.2, 0.2)
    eosin = (0.35 + 0.25 * _smooth_noise(rng, (t, t), sigma=s / 24)).clip(0.05, None)
    eosin *= rng.uniform(0.6, 1.4)
    hema = np.zeros((t, t))
    for _ in range(rng.integers(int(area * (s // 8)), int(area * (s // 3)))):
        cy, cx = rng.uniform(0, t, size=2)
        ry, rx = rng.uniform(1.5, 4.5, size=2) * s / 64
        ang = rng.uniform(0, np.pi)
        r = int(np.ceil(max(ry, rx))) + 1  # rasterize inside the bounding box only
        box = (slice(max(int(cy) - r, 0), min(int(cy) + r + 1, t)), slice(max(int(cx) - r, 0), min(int(cx) + r + 1, t)))
        dy, dx = yy[box] - cy, xx[box] - cx
        u = (dy * np.cos(ang) + dx * np.sin(ang)) / ry
        v = (-dy * np.sin(ang) + dx * np.cos(ang)) / rx
        hema[box] = np.maximum(hema[box], rng.uniform(0.6, 1.2) * (u * u + v * v < 1.0))
    hema = ndimage.gaussian_filter(hema, 0.8) + 0.08 * _smooth_noise(rng, (t, t), sigma=1.0).clip(0, None)
    conc = np.stack([hema, eosin]) * tissue
    od = np.einsum("shw,sc->chw", conc, STAIN_OD) + 0.02 * np.abs(rng.standard_normal((3, t, t)))
    return np.clip(od_to_rgb(od), 0.0, 1.0)


def _separation(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a.reshape(3, -1).mean(axis=1) - b.reshape(3, -1).mean(axis=1)))


def gen_synthetic_corpus(out_dir, n_train: int = 500, n_eval: int = 100, tile: int = 64,
                         teacher: TeacherParams | None = None, seed: int = 0,
                         min_separation: float = 0.05, max_retries: int = 20) -> dict:
    """Write ``corpus/{a,b}/{train,eval}/NNNN.png`` plus ``manifest.json``.

    Domain A tiles are procedural H&E tiles. Domain B tiles are teacher
    outputs of an independent set of procedural tiles, so the two domains
    are unpaired, like real stain-variation data. Tiles whose A/B mean-colour
    separation under the teacher falls below ``min_separation`` are redrawn.
    """
    if n_train < 1 or n_eval < 0:
        raise ValueError("need n_train >= 1 and n_eval >= 0")
    teacher = teacher or TeacherParams.default()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    files = []
    sums = {"a": np.zeros(3), "b": np.zeros(3)}
    for d_idx, domain in enumerate(("a", "b")):
        for s_idx, (split, count) in enumerate((("train", n_train), ("eval", n_eval))):
            for i in range(count):
                rng = np.random.default_rng([seed, d_idx, s_idx, i])
                for _ in range(max_retries):
                    base = synth_tile(rng, tile)
                    fake = teacher_transform(base, teacher, "forward")
                    if _separation(quantize(base), quantize(fake)) >= min_separation:
                        break
                else:
                    raise RuntimeError(f"could not draw a tile with separation >= {min_separation}")
                img = quantize(base if domain == "a" else fake)
                rel = Path(domain) / split / f"{i:04d}.png"
                save_image(img, out_dir / rel)
                sums[domain] += img.reshape(3, -1).mean(axis=1)
                files.append({"path": rel.as_posix(), "domain": domain, "split": split})
    n = n_train + n_eval
    sep = float(np.linalg.norm(sums["a"] / n - sums["b"] / n))
    if sep < min_separation:
        raise RuntimeError(f"corpus mean-colour separation {sep:.4f} < {min_separation}")
    manifest = {"version": MANIFEST_VERSION, "seed": seed, "tile": tile,
                "n_train": n_train, "n_eval": n_eval,
                "params": teacher.to_dict(), "separation": sep, "files": files}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_manifest(corpus_dir) -> dict:
    with open(Path(corpus_dir) / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    return manifest


# ---------------------------------------------------------------------------
# Paired datasets
# ---------------------------------------------------------------------------


@dataclass
class PairedDataset:
    inputs: np.ndarray
    targets: np.ndarray
    splits: list[str]
    provenance: list[str]

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise ValueError("inputs and targets must have the same shape")
        if not len(self.splits) == len(self.provenance) == len(self.inputs):
            raise ValueError("split/provenance tags must cover every pair")

    def __len__(self):
        return len(self.inputs)

    def subset(self, split: str) -> "PairedDataset":
        idx = [i for i, s in enumerate(self.splits) if s == split]
        return PairedDataset(self.inputs[idx], self.targets[idx],
                             [self.splits[i] for i in idx], [self.provenance[i] for i in idx])

    def swapped(self) -> "PairedDataset":
        """The same pairs with input and target exchanged (for the B -> A model)."""
        return PairedDataset(self.targets, self.inputs, list(self.splits), list(self.provenance))


def assemble_pairs(real_a, real_b, teacher: Teacher, seed: int = 0, n_val: int = 0) -> PairedDataset:
    """Pair real A tiles with teacher outputs and teacher-inverted tiles with real B.

    Inputs are real and fake A images; targets are fake and real B images.
    Pairs are shuffled by ``seed``; the first ``n_val`` become the val split.
    """
    real_a, real_b = np.asarray(real_a, np.float32), np.asarray(real_b, np.float32)
    if not len(real_a) or not len(real_b):
        raise ValueError("both domains need at least one image")
    inputs = np.concatenate([real_a, teacher.inverse(real_b)])
    targets = np.concatenate([teacher.forward(real_a), real_b])
    prov = ["real_a+fake_b"] * len(real_a) + ["fake_a+real_b"] * len(real_b)
    order = np.random.default_rng(seed).permutation(len(inputs))
    if n_val >= len(order):
        raise ValueError(f"n_val={n_val} leaves no training pairs")
    splits = ["val" if k < n_val else "train" for k in range(len(order))]
    return PairedDataset(inputs[order].astype(np.float32), targets[order].astype(np.float32),
                         splits, [prov[i] for i in order])


def load_corpus_split(corpus_dir, domain: str, split: str) -> np.ndarray:
    return load_dir(Path(corpus_dir) / domain / split)[0]
