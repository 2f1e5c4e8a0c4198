"""Weakly labeled localization datasets.

Synthetic images contain a noisy background and a random number of
distractor shapes; positive images additionally contain exactly one target
(a ring, bar, or blob).  Distractor count, size and intensity are drawn
from the same distributions for both classes, so the target is the only
class-discriminative signal.  Ground-truth boxes are written to the manifest
for evaluation and stripped when a dataset is loaded for training.

Manifest format (tab separated, one record per line)::

    #stl-manifest v1 canvas=HxW classes=K seed=S
    #gen {"n_samples": ..., ...}
    id <TAB> relative_path <TAB> label <TAB> x0,y0,x1,y1[;x0,y0,x1,y1...] | -

Boxes use pixel-edge coordinates: a target covering columns 3..7 has
``x0 = 3`` and ``x1 = 8``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, LoadError
from .pgm import from_unit, read_pgm, to_unit, write_pgm
from .rng import Rng

log = logging.getLogger(__name__)

SHAPES = ("ring", "bar", "blob")
HEADER_RE = re.compile(r"#stl-manifest v1 canvas=(\d+)x(\d+) classes=(\d+) seed=(\d+)")


@dataclass
class GenSpec:
    canvas: tuple = (64, 64)
    n_samples: int = 1000
    positive_fraction: float = 0.5
    target_shape: str = "ring"
    target_size: tuple = (10, 15)
    distractor_count: tuple = (2, 5)
    distractor_size: tuple = (4, 10)
    noise_std: float = 0.08
    background: tuple = (0.1, 0.3)
    target_intensity: tuple = (0.45, 0.9)
    distractor_intensity: tuple = (0.45, 0.9)
    seed: int = 0

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)
        for name in ("target_size", "distractor_count", "distractor_size", "background",
                     "target_intensity", "distractor_intensity"):
            setattr(self, name, tuple(getattr(self, name)))

    def validate(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ConfigError(f"positive_fraction must lie in (0, 1), got {self.positive_fraction}")
        if self.target_shape not in SHAPES:
            raise ConfigError(f"target_shape must be one of {SHAPES}")
        lo, hi = self.target_size
        if lo < 3 or hi < lo:
            raise ConfigError(f"bad target_size range {self.target_size}")
        if hi > min(self.canvas):
            raise ConfigError(f"target size {hi} exceeds canvas {self.canvas}")
        if self.distractor_size[1] > min(self.canvas):
            raise ConfigError("distractor size exceeds canvas")
        if self.distractor_count[0] < 0 or self.distractor_count[1] < self.distractor_count[0]:
            raise ConfigError(f"bad distractor_count range {self.distractor_count}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        return self

    @property
    def n_positive(self) -> int:
        return int(round(self.positive_fraction * self.n_samples))


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: int
    boxes: list | None = None


@dataclass
class Record:
    id: str
    path: str
    label: int
    boxes: list = field(default_factory=list)


@dataclass
class Manifest:
    canvas: tuple
    num_classes: int
    seed: int
    records: list
    root: Path = Path(".")
    gen: dict | None = None

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def has_boxes(self) -> bool:
        return any(r.boxes for r in self.records)


# ---------------------------------------------------------------------------
# rendering

def _disc(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def shape_mask(shape: str, size: int, rng: Rng, canvas) -> np.ndarray:
    """Boolean mask of one shape whose bounding box has side ~``size``."""
    h, w = canvas
    top = int(rng.integers(0, h - size + 1, 1)[0])
    left = int(rng.integers(0, w - size + 1, 1)[0])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c = (size - 1) / 2.0
    cy, cx = top + c, left + c
    r = size / 2.0
    if shape == "ring":
        thickness = max(1.5, size / 6.0)
        mask = _disc(yy, xx, cy, cx, r) & ~_disc(yy, xx, cy, cx, r - thickness)
    elif shape == "bar":
        horizontal = rng.uniform(1)[0] < 0.5
        half = max(1.0, size / 8.0)
        if horizontal:
            mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= r)
        else:
            mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= r)
    elif shape == "blob":
        mask = _disc(yy, xx, cy, cx, r)
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return mask


def mask_box(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def render_sample(spec: GenSpec, index: int, label: int):
    """Returns (image in [0, 1], boxes, target mask or None, distractor stats)."""
    rng = Rng(spec.seed).spawn("data").spawn(f"sample-{index}")
    h, w = spec.canvas
    bg = rng.uniform_range(*spec.background, 1)[0]
    img = np.full((h, w), bg)
    n_distract = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1, 1)[0])
    intensities = []
    for _ in range(n_distract):
        size = int(rng.integers(spec.distractor_size[0], spec.distractor_size[1] + 1, 1)[0])
        value = rng.uniform_range(*spec.distractor_intensity, 1)[0]
        img[shape_mask("blob", size, rng, spec.canvas)] = value
        intensities.append(value)
    boxes, mask = [], None
    # the target is drawn from a separate stream so both classes consume
    # identical randomness for background and distractors
    trng = rng.spawn("target")
    if label == 1:
        size = int(trng.integers(spec.target_size[0], spec.target_size[1] + 1, 1)[0])
        value = trng.uniform_range(*spec.target_intensity, 1)[0]
        mask = shape_mask(spec.target_shape, size, trng, spec.canvas)
        img[mask] = value
        boxes.append(mask_box(mask))
    img = img + rng.normal((h, w), spec.noise_std)
    return np.clip(img, 0.0, 1.0), boxes, mask, (n_distract, intensities)


def assign_labels(spec: GenSpec) -> np.ndarray:
    labels = np.zeros(spec.n_samples, dtype=np.int64)
    order = Rng(spec.seed).spawn("labels").permutation(spec.n_samples)
    labels[order[:spec.n_positive]] = 1
    return labels


def generate(spec: GenSpec, out_dir) -> Manifest:
    """Render ``spec.n_samples`` images as 8-bit PGM and write ``manifest.tsv``."""
    spec.validate()
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    labels = assign_labels(spec)
    width = len(str(spec.n_samples - 1))
    records = []
    for i, label in enumerate(labels):
        img, boxes, _, _ = render_sample(spec, i, int(label))
        sid = f"s{i:0{width}d}"
        rel = f"images/{sid}.pgm"
        write_pgm(out_dir / rel, from_unit(img))
        records.append(Record(sid, rel, int(label), boxes))
    gen = asdict(spec)
    manifest = Manifest(spec.canvas, 2, spec.seed, records, out_dir, gen)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# manifest I/O

def _fmt(v) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def format_boxes(boxes) -> str:
    if not boxes:
        return "-"
    return ";".join(",".join(_fmt(v) for v in box) for box in boxes)


def write_manifest(manifest: Manifest, path):
    h, w = manifest.canvas
    lines = [f"#stl-manifest v1 canvas={h}x{w} classes={manifest.num_classes} "
             f"seed={manifest.seed}"]
    if manifest.gen is not None:
        lines.append("#gen " + json.dumps(manifest.gen, sort_keys=True))
    for r in manifest.records:
        lines.append(f"{r.id}\t{r.path}\t{r.label}\t{format_boxes(r.boxes)}")
    tmp = Path(str(path) + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _parse_boxes(field_text, canvas, path, lineno):
    if field_text == "-":
        return []
    boxes = []
    h, w = canvas
    for chunk in field_text.split(";"):
        try:
            x0, y0, x1, y1 = (float(v) for v in chunk.split(","))
        except ValueError:
            raise LoadError(f"malformed box {chunk!r}", path, lineno) from None
        if not (x0 < x1 and y0 < y1):
            raise LoadError(f"degenerate box {chunk!r} (need x0<x1 and y0<y1)", path, lineno)
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            raise LoadError(f"box {chunk!r} outside the {h}x{w} canvas", path, lineno)
        boxes.append(tuple(int(v) if v.is_integer() else v for v in (x0, y0, x1, y1)))
    return boxes


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot read manifest: {exc.strerror}", path) from None
    lines = text.splitlines()
    if not lines:
        raise LoadError("empty manifest", path, 1)
    m = HEADER_RE.fullmatch(lines[0].strip())
    if not m:
        raise LoadError("missing '#stl-manifest v1' header", path, 1)
    canvas = (int(m.group(1)), int(m.group(2)))
    k, seed = int(m.group(3)), int(m.group(4))
    gen, records, seen = None, [], set()
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        if line.startswith("#gen "):
            try:
                gen = json.loads(line[5:])
            except json.JSONDecodeError:
                raise LoadError("malformed #gen line", path, lineno) from None
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise LoadError(f"expected 4 tab-separated fields, got {len(parts)}", path, lineno)
        sid, rel, label_text, box_text = parts
        try:
            label = int(label_text)
        except ValueError:
            raise LoadError(f"label {label_text!r} is not an integer", path, lineno) from None
        if not 0 <= label < k:
            raise LoadError(f"label {label} outside 0..{k - 1}", path, lineno)
        if sid in seen:
            raise LoadError(f"duplicate id {sid!r}", path, lineno)
        seen.add(sid)
        records.append(Record(sid, rel, label, _parse_boxes(box_text, canvas, path, lineno)))
    return Manifest(canvas, k, seed, records, path.parent, gen)


def _load_image(manifest: Manifest, record: Record, lineno, mpath):
    ipath = manifest.root / record.path
    if not ipath.exists():
        raise LoadError(f"image {record.path!r} not found", mpath, lineno)
    img, maxval = read_pgm(ipath)
    if img.shape != tuple(manifest.canvas):
        raise LoadError(f"image {record.path!r} is {img.shape[0]}x{img.shape[1]}, "
                        f"manifest canvas is {manifest.canvas[0]}x{manifest.canvas[1]}",
                        mpath, lineno)
    return to_unit(img, maxval)


def _record_lines(path):
    """Map record index to its line number in the manifest file."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip() and not line.startswith("#"):
                out.append(lineno)
    return out


def iter_samples(manifest_path, mode: str = "train"):
    """Yield :class:`Sample` objects; ``mode="train"`` strips every box."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    manifest = read_manifest(manifest_path)
    linenos = _record_lines(manifest_path)
    for rec, lineno in zip(manifest.records, linenos):
        img = _load_image(manifest, rec, lineno, manifest_path)
        boxes = list(rec.boxes) if mode == "eval" else None
        yield Sample(rec.id, img, rec.label, boxes)


@dataclass
class Dataset:
    images: np.ndarray          # (n, 1, h, w) float32
    labels: np.ndarray          # (n,) int64
    ids: list
    boxes: list | None = None   # per-sample box lists, eval mode only
    num_classes: int = 2

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        boxes = None if self.boxes is None else [self.boxes[i] for i in idx]
        return Dataset(self.images[idx], self.labels[idx], [self.ids[i] for i in idx],
                       boxes, self.num_classes)


def load(manifest_path, mode: str = "train") -> Dataset:
    manifest = read_manifest(manifest_path)
    samples = list(iter_samples(manifest_path, mode))
    h, w = manifest.canvas
    images = np.empty((len(samples), 1, h, w), dtype=np.float32)
    for i, s in enumerate(samples):
        images[i, 0] = s.image
    boxes = [s.boxes for s in samples] if mode == "eval" else None
    return Dataset(images, np.array([s.label for s in samples], dtype=np.int64),
                   [s.id for s in samples], boxes, manifest.num_classes)


# ---------------------------------------------------------------------------
# external images

def resize_bilinear(img: np.ndarray, size) -> np.ndarray:
    """Resample with pixel-center alignment (scale factors act on pixel edges)."""
    h, w = img.shape
    oh, ow = size

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    img = img.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


@dataclass
class ImportReport:
    imported: list = field(default_factory=list)
    skipped: list = field(default_factory=list)   # (filename, reason)


def _read_labels(path):
    labels = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() in ("filename", "file", "image"):
                continue
            if len(row) < 2:
                raise LoadError("expected 'filename,label'", path, lineno)
            try:
                labels[row[0].strip()] = int(row[1])
            except ValueError:
                raise LoadError(f"label {row[1]!r} is not an integer", path, lineno) from None
    return labels


def _read_box_csv(path):
    boxes = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() in ("filename", "file", "image"):
                continue
            try:
                box = tuple(float(v) for v in row[1:5])
            except ValueError:
                raise LoadError("expected 'filename,x0,y0,x1,y1'", path, lineno) from None
            if len(box) != 4:
                raise LoadError("expected 'filename,x0,y0,x1,y1'", path, lineno)
            boxes.setdefault(row[0].strip(), []).append(box)
    return boxes


def import_directory(src_dir, labels_csv, out_dir, canvas=(500, 500), boxes_csv=None,
                     num_classes: int = 2, seed: int = 0):
    """Rescale binary PGMs to ``canvas`` and write them with a manifest.

    Undecodable images are skipped and listed in the returned report.
    Returns (manifest, report).
    """
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    labels = _read_labels(labels_csv)
    box_map = _read_box_csv(boxes_csv) if boxes_csv else {}
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    ch, cw = canvas
    report = ImportReport()
    records = []
    for name in sorted(labels):
        try:
            raw, maxval = read_pgm(src_dir / name)
        except (LoadError, OSError) as exc:
            log.warning("skipping %s: %s", name, exc)
            report.skipped.append((name, str(exc)))
            continue
        h, w = raw.shape
        img = resize_bilinear(to_unit(raw, maxval), canvas)
        out_max = 65535 if maxval > 255 else 255
        sid = Path(name).stem
        rel = f"images/{sid}.pgm"
        write_pgm(out_dir / rel, from_unit(img, out_max), out_max)
        sx, sy = cw / w, ch / h
        boxes = [(x0 * sx, y0 * sy, x1 * sx, y1 * sy) for x0, y0, x1, y1 in box_map.get(name, [])]
        records.append(Record(sid, rel, labels[name], boxes))
        report.imported.append(name)
    manifest = Manifest(tuple(canvas), num_classes, seed, records, out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    with open(out_dir / "import_report.csv", "w", encoding="utf-8") as fh:
        fh.write("filename,status,reason\n")
        for name in report.imported:
            fh.write(f"{name},imported,\n")
        for name, reason in report.skipped:
            fh.write(f"{name},skipped,{reason.replace(',', ';')}\n")
    return manifest, report
