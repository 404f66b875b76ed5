"""Seeded two-part glyph dataset and the class-distinct pair sampler.

Every class is a combination of one horizontal-stroke glyph stamped in the
upper-left quadrant and one vertical-stroke glyph stamped in the lower-right
quadrant. Glyph inventories are shared between classes on a grid, so any
single part is ambiguous and only the pair identifies the class. The other two quadrants carry a shared
background texture whose crop offset jitters per image.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import NotEnoughClasses, NotEnoughImagesInClass, SpecInvalid

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class SynthSpec:
    K: int = 8
    images_per_class: int = 30
    size: int = 16
    part_size: int = 5
    noise_std: float = 0.35
    jitter: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.K < 2:
            raise SpecInvalid("K must be >= 2")
        if self.images_per_class < 2:
            raise SpecInvalid("images_per_class must be >= 2")
        if self.size < 4 or self.size % 2:
            raise SpecInvalid("size must be an even number >= 4")
        if not 1 <= self.part_size < self.size / 2:
            raise SpecInvalid("part_size must satisfy 1 <= part_size < size / 2")
        if self.noise_std < 0:
            raise SpecInvalid("noise_std must be >= 0")
        if self.jitter < 0:
            raise SpecInvalid("jitter must be >= 0")
        class_parts(self)  # raises when the glyph inventory is too small


@dataclass
class Dataset:
    images: np.ndarray   # (n, size, size, 1), values in [0, 1]
    labels: np.ndarray   # (n,)
    spec: SynthSpec

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def checksum(self) -> int:
        return fnv1a64(np.ascontiguousarray(self.images, dtype="<f8").tobytes())

    @property
    def manifest(self) -> dict:
        return {"spec": asdict(self.spec), "seed": self.spec.seed,
                "count": len(self), "checksum": f"{self.checksum:016x}"}

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.images[idx], self.labels[idx], self.spec)


def _stroke_glyphs(rng: np.random.Generator, count: int, size: int) -> np.ndarray:
    """``count`` distinct ``size``x``size`` patterns of full-width horizontal strokes."""
    seen, out = set(), []
    while len(out) < count:
        rows = rng.integers(0, 2, size=size).astype(np.float64)
        if rows.all() or not rows.any() or rows.tobytes() in seen:
            continue
        seen.add(rows.tobytes())
        out.append(np.repeat(rows[:, None], size, axis=1))
    return np.stack(out)


def class_parts(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Glyph inventories for both parts and each class's (upper-left, lower-right) glyph pair.

    Upper-left glyphs are horizontal strokes and lower-right glyphs are
    vertical strokes, so the two parts excite different local detectors.
    """
    n_glyph = math.ceil(math.sqrt(spec.K))
    if 2 ** spec.part_size - 2 < n_glyph:
        raise SpecInvalid(f"part_size={spec.part_size} cannot hold {n_glyph} distinct glyphs")
    rng = np.random.default_rng([spec.seed, 1])
    upper = _stroke_glyphs(rng, n_glyph, spec.part_size)
    lower = _stroke_glyphs(rng, n_glyph, spec.part_size).transpose(0, 2, 1)
    grid = [(a, b) for a in range(n_glyph) for b in range(n_glyph)]
    order = rng.permutation(len(grid))[: spec.K]
    return upper, lower, [grid[k] for k in sorted(order)]


def glyph_origins(spec: SynthSpec) -> tuple[tuple[int, int], tuple[int, int]]:
    """Top-left pixel of the upper-left and lower-right glyph slots."""
    half = spec.size // 2
    off = (half - spec.part_size) // 2
    return (off, off), (half + off, half + off)


def gen_dataset(spec: SynthSpec) -> Dataset:
    spec.validate()
    upper, lower, pairs = class_parts(spec)
    rng = np.random.default_rng([spec.seed, 2])
    pad = spec.jitter
    texture = rng.uniform(0.0, 0.5, size=(spec.size + 2 * pad, spec.size + 2 * pad))
    (r0, c0), (r1, c1) = glyph_origins(spec)
    ps = spec.part_size

    images, labels = [], []
    for k, (a, b) in enumerate(pairs):
        for _ in range(spec.images_per_class):
            dy, dx = rng.integers(0, 2 * pad + 1, size=2)
            img = texture[dy: dy + spec.size, dx: dx + spec.size].copy()
            img[r0: r0 + ps, c0: c0 + ps] = upper[a]
            img[r1: r1 + ps, c1: c1 + ps] = lower[b]
            if spec.noise_std > 0:
                img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(k)
    return Dataset(np.stack(images)[..., None], np.array(labels, dtype=np.int64), spec)


def split_per_class(ds: Dataset, n_first: int) -> tuple[Dataset, Dataset]:
    """First ``n_first`` images of every class, then the rest."""
    head, tail = [], []
    for k in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == k)
        head.extend(idx[:n_first])
        tail.extend(idx[n_first:])
    return ds.subset(sorted(head)), ds.subset(sorted(tail))


def from_manifest(manifest: dict) -> Dataset:
    """Regenerate a dataset and check it against the manifest's checksum."""
    spec = SynthSpec(**manifest["spec"])
    ds = gen_dataset(spec)
    if f"{ds.checksum:016x}" != manifest["checksum"]:
        raise SpecInvalid("regenerated dataset does not match manifest checksum")
    return ds


def write_manifest(path, ds: Dataset) -> None:
    Path(path).write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def save_dataset(directory, ds: Dataset) -> None:
    """Raw little-endian f64 arrays plus an index JSON."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(ds.images, dtype="<f8").tofile(d / "images.f64")
    np.ascontiguousarray(ds.labels, dtype="<f8").tofile(d / "labels.f64")
    index = dict(ds.manifest, images_file="images.f64", labels_file="labels.f64",
                 images_shape=list(ds.images.shape))
    (d / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    images = np.fromfile(d / index["images_file"], dtype="<f8").reshape(index["images_shape"])
    labels = np.fromfile(d / index["labels_file"], dtype="<f8").astype(np.int64)
    return Dataset(images, labels, SynthSpec(**index["spec"]))


@dataclass
class PairBatch:
    images: np.ndarray   # (2N, H, W, C), laid out x_1, x_1+, x_2, x_2+, ...
    labels: np.ndarray   # (2N,)
    indices: np.ndarray  # (2N,) positions in the source dataset

    @property
    def N(self) -> int:
        return len(self.labels) // 2


def sample_batch(ds: Dataset, N: int, rng: np.random.Generator) -> PairBatch:
    """``N`` distinct classes without replacement, two distinct images from each."""
    classes = np.unique(ds.labels)
    if N < 1 or N > len(classes):
        raise NotEnoughClasses(f"asked for {N} classes, dataset has {len(classes)}")
    chosen = rng.choice(classes, size=N, replace=False)
    idx = []
    for k in chosen:
        members = np.flatnonzero(ds.labels == k)
        if len(members) < 2:
            raise NotEnoughImagesInClass(f"class {k} has {len(members)} image(s)")
        idx.extend(rng.choice(members, size=2, replace=False))
    idx = np.asarray(idx, dtype=np.int64)
    return PairBatch(ds.images[idx], ds.labels[idx], idx)
