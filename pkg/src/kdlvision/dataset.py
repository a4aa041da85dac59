"""Manifests, specimen-level splits, batching and the synthetic texture set."""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    ImageLoadError,
    NonContiguousClasses,
    ParseError,
    SpecimenSplitLeak,
    TooFewSpecimens,
)
from .imageproc import Image, preprocess_image, read_netpbm, read_olt, write_netpbm

MANIFEST_HEADER = ["path", "class_id", "class_name", "specimen_id", "view", "split"]
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRecord:
    relative_path: str
    class_id: int
    class_name: str
    specimen_id: str
    view: int
    split: str = ""


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    paths: list


def load_manifest(path):
    """Parse and validate a manifest CSV. An empty ``split`` column means unsplit."""
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ParseError(1, f"expected header {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ParseError(lineno, f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            rel, cid, cname, spec, view, split = row
            try:
                cid, view = int(cid), int(view)
            except ValueError:
                raise ParseError(lineno, "class_id and view must be integers") from None
            if cid < 0:
                raise ParseError(lineno, "class_id must be >= 0")
            if view not in (0, 1):
                raise ParseError(lineno, f"view must be 0 or 1, got {view}")
            if split not in SPLITS + ("",):
                raise ParseError(lineno, f"unknown split {split!r}")
            if not rel or not spec:
                raise ParseError(lineno, "path and specimen_id must be non-empty")
            records.append(ManifestRecord(rel, cid, cname, spec, view, split))
    validate_records(records)
    return records


def validate_records(records):
    seen = set()
    for r in records:
        if r.relative_path in seen:
            raise ParseError(0, f"duplicate path {r.relative_path!r}")
        seen.add(r.relative_path)
    ids = sorted({r.class_id for r in records})
    if ids != list(range(len(ids))):
        raise NonContiguousClasses(f"class ids {ids} are not 0..{len(ids) - 1}")
    specimen_class, specimen_split = {}, {}
    for r in records:
        if specimen_class.setdefault(r.specimen_id, r.class_id) != r.class_id:
            raise ParseError(0, f"specimen {r.specimen_id!r} has two class ids")
        if specimen_split.setdefault(r.specimen_id, r.split) != r.split:
            raise SpecimenSplitLeak(
                f"specimen {r.specimen_id!r} appears in {specimen_split[r.specimen_id]!r} and {r.split!r}"
            )


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.relative_path, r.class_id, r.class_name, r.specimen_id, r.view, r.split])


def num_classes(records):
    return max(r.class_id for r in records) + 1


def class_names(records):
    names = {}
    for r in records:
        names.setdefault(r.class_id, r.class_name)
    return [names.get(i, str(i)) for i in range(num_classes(records))]


def select_split(records, split):
    return [r for r in records if r.split == split]


def split_by_specimen(records, fractions=(0.8, 0.1, 0.1), seed=0):
    """Assign train/val/test per class by shuffling specimens, never images."""
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    by_class = {}
    for r in records:
        by_class.setdefault(r.class_id, set()).add(r.specimen_id)
    assignment = {}
    for cid in sorted(by_class):
        specimens = sorted(by_class[cid])
        n = len(specimens)
        if n < 3:
            raise TooFewSpecimens(f"class {cid} has {n} specimens; need at least 3")
        order = rng.permutation(n)
        cut1 = min(max(round(n * fractions[0]), 1), n - 2)
        cut2 = min(max(round(n * (fractions[0] + fractions[1])), cut1 + 1), n - 1)
        for rank, i in enumerate(order):
            assignment[specimens[i]] = "train" if rank < cut1 else ("val" if rank < cut2 else "test")
    return [replace(r, split=assignment[r.specimen_id]) for r in records]


class Preprocessor:
    """Loads records through the preprocessing pipeline, memoising results.

    When ``cache_dir`` holds an ``.olt`` file for a record it is used instead
    of decoding the image.
    """

    def __init__(self, root, size=64, cache_dir=None, threads=None):
        self.root = Path(root)
        self.size = size
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.threads = threads
        self._memo = {}

    def cache_path(self, record):
        return self.cache_dir / Path(record.relative_path).with_suffix(".olt")

    def compute(self, record):
        path = self.root / record.relative_path
        try:
            img = read_netpbm(path)
        except Exception as exc:
            raise ImageLoadError(path, exc) from exc
        return preprocess_image(img, self.size)

    def __call__(self, record):
        key = record.relative_path
        hit = self._memo.get(key)
        if hit is None:
            cached = self.cache_dir and self.cache_path(record)
            if cached and cached.exists():
                hit = read_olt(cached)
            else:
                hit = self.compute(record)
            self._memo[key] = hit
        return hit

    def load_many(self, records):
        missing = [r for r in records if r.relative_path not in self._memo]
        if missing and (self.threads or 1) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                list(pool.map(self, missing))
        return np.stack([self(r) for r in records])


def epoch_order(n, shuffle_seed, epoch):
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def make_batches(records, batch_size, shuffle_seed=None, epoch=0, preprocess=None):
    """Yield ceil(N/B) batches covering every record once, in a per-epoch order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if preprocess is None:
        raise ValueError("make_batches needs a preprocess callable")
    order = epoch_order(len(records), shuffle_seed, epoch)
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        inputs = np.stack([preprocess(r) for r in chunk])
        labels = np.array([r.class_id for r in chunk], dtype=np.int64)
        yield Batch(inputs, labels, [r.relative_path for r in chunk])


# ------------------------------------------------------------------ synthetic set

@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    images_per_class: int = 150
    image_size: int = 64
    seed: int = 7
    noise_sigma: float = 12.0
    blob_area: float = 0.25
    background_contrast: float = 6.0
    blob_contrast: float = 70.0
    orientation_jitter: float = 8.0
    frequency_jitter: float = 0.1
    # shifts every class orientation by this fraction of the class spacing; a
    # pretext set with 0.5 shares the texture family but none of the classes
    orientation_offset: float = 0.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.images_per_class < 2:
            raise ValueError("images_per_class must be >= 2")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")


def class_texture(k, num_classes, offset=0.0):
    """Orientation (radians) and spatial frequency (cycles/pixel) of class ``k``."""
    theta = math.pi * (k + offset) / num_classes
    freq = (0.09, 0.15, 0.22)[k % 3]
    return theta, freq


def render_specimen(spec, class_id, specimen, rng):
    """Return (image array, blob centre (cx, cy), blob radius)."""
    s = spec.image_size
    theta, freq = class_texture(class_id, spec.num_classes, spec.orientation_offset)
    theta += math.radians(rng.normal(0.0, spec.orientation_jitter))
    freq *= 1.0 + rng.normal(0.0, spec.frequency_jitter)
    phase = rng.uniform(0.0, 2 * math.pi)
    radius = s * math.sqrt(spec.blob_area / math.pi)
    cx, cy = rng.uniform(radius, s - 1 - radius, size=2)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    grating = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    amp = np.where(mask, spec.blob_contrast, spec.background_contrast)
    img = 128.0 + amp * grating + rng.normal(0.0, spec.noise_sigma, size=(s, s))
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), (float(cx), float(cy)), radius


def generate_synthetic(spec, out_dir, fractions=(0.8, 0.1, 0.1)):
    """Write PGM images, ``manifest.csv`` and ``blobs.csv``; returns the manifest path.

    Each specimen gets two views: the rendered image and its 180 degree
    rotation. Output depends only on ``spec``.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records, blobs = [], []
    s = spec.image_size
    for k in range(spec.num_classes):
        for i in range(spec.images_per_class):
            rng = np.random.default_rng([spec.seed, k, i])
            img, (cx, cy), radius = render_specimen(spec, k, i, rng)
            specimen = f"c{k:03d}s{i:05d}"
            for view, (px, centre) in enumerate(((img, (cx, cy)), (np.rot90(img, 2), (s - 1 - cx, s - 1 - cy)))):
                rel = f"images/{specimen}_v{view}.pgm"
                write_netpbm(out / rel, Image(np.ascontiguousarray(px)))
                records.append(ManifestRecord(rel, k, f"texture_{k:03d}", specimen, view, ""))
                blobs.append((rel, centre[0], centre[1], radius))
    records = split_by_specimen(records, fractions, seed=spec.seed)
    manifest = out / "manifest.csv"
    write_manifest(manifest, records)
    with open(out / "blobs.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "cx", "cy", "radius"])
        for rel, cx, cy, r in blobs:
            w.writerow([rel, repr(cx), repr(cy), repr(r)])
    return manifest


def load_blobs(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return {row["path"]: (float(row["cx"]), float(row["cy"]), float(row["radius"])) for row in csv.DictReader(fh)}


def blob_mask(centre, radius, size):
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx - centre[0]) ** 2 + (yy - centre[1]) ** 2 <= radius**2
