"""Procedural class-conditional phantom images and dataset plumbing.

Each of the 14 findings maps to one visually distinct, localized motif
drawn on top of a smooth low-frequency background.  The motif table
(positions and sizes are fractions of the image side; intensities are
relative motif gains applied on top of ``PhantomConfig.motif_gain``):

==========================  ====================================================
Finding                     Motif
==========================  ====================================================
No Finding                  background only, no motif
Enlarged Cardiomediastinum  wide bright vertical band through the center
Cardiomegaly                large bright central ellipse
Lung Opacity                mid-frequency bright texture patch, right lung field
Lung Lesion                 small bright disc in the left lung field
Edema                       broad soft radial glow around the center
Consolidation               soft-edged bright rectangle, lower left
Pneumonia                   cluster of three small bright blobs, left lung
Atelectasis                 thin bright horizontal band, mid right
Pneumothorax                dark crescent along the left edge (subtractive)
Pleural Effusion            bright wedge at the bottom + thin line near the
                            lower boundary
Pleural Other               thin bright line near the upper boundary
Fracture                    short bright diagonal segment, upper right
Support Devices             thin bright vertical curve spanning the image
==========================  ====================================================

Intensity contract: the background stays in
``[bg_level - bg_amplitude, bg_level + bg_amplitude]`` and bright motif
cores reach ``bg + motif_gain * relative gain``, so with the default
configuration any pixel above ``MOTIF_THRESHOLD`` belongs to a motif.

All generators are pure functions of their arguments (including the
seed) and safe to call concurrently.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .findings import BENCH_CLASSES, FINDINGS, NO_FINDING, label_vector, validate_labels
from .rng import derive_seed, generator

logger = logging.getLogger(__name__)

SUPPORTED_SIZES = (32, 64, 128)

# Any pixel above this value is motif, not background, under DEFAULT_CONFIG.
MOTIF_THRESHOLD = 0.60


@dataclass(frozen=True)
class PhantomConfig:
    """Intensity and geometry parameters of the phantom generator.

    ``shifted`` below perturbs these to emulate acquisition from a second
    site (the domain-shift test distribution of the benchmark).
    """

    bg_level: float = 0.32
    bg_amplitude: float = 0.08
    motif_gain: float = 0.40
    motif_scale: float = 1.0
    jitter: float = 1.0  # scales random offsets of motif positions


DEFAULT_CONFIG = PhantomConfig()

# Domain-shifted acquisition: brighter background, weaker/smaller motifs,
# more positional wobble.
SHIFTED_CONFIG = PhantomConfig(
    bg_level=0.40,
    bg_amplitude=0.10,
    motif_gain=0.30,
    motif_scale=0.85,
    jitter=1.6,
)


@dataclass(frozen=True)
class LabeledImage:
    """A square grayscale image in [0, 1] with a binary 14-label vector."""

    pixels: np.ndarray
    labels: np.ndarray
    id: str

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ValueError(f"image must be square, got shape {px.shape}")
        n = px.shape[0]
        if n < 2 or n & (n - 1):
            raise ValueError(f"image side must be a power of two, got {n}")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "labels", validate_labels(self.labels))

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/validation/test id lists covering a dataset."""

    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    fractions: tuple[float, float, float]

    def subsets(
        self, images: list[LabeledImage]
    ) -> tuple[list[LabeledImage], list[LabeledImage], list[LabeledImage]]:
        by_id = {im.id: im for im in images}
        return (
            [by_id[i] for i in self.train],
            [by_id[i] for i in self.validation],
            [by_id[i] for i in self.test],
        )


def _smooth_background(size: int, cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Separable-linear upsampling of a coarse random grid: smooth, low frequency."""
    grid = rng.uniform(-1.0, 1.0, size=(5, 5))
    src = np.linspace(0.0, 4.0, size)
    i0 = np.clip(np.floor(src).astype(int), 0, 3)
    frac = src - i0
    rows = grid[i0] * (1 - frac)[:, None] + grid[i0 + 1] * frac[:, None]
    out = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return cfg.bg_level + cfg.bg_amplitude * out


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    # (y, x) in [0, 1), pixel centers
    ax = (np.arange(size) + 0.5) / size
    return ax[:, None], ax[None, :]


def _soft_ellipse(size: int, cy: float, cx: float, ry: float, rx: float, edge: float = 0.25) -> np.ndarray:
    """Filled ellipse with a smooth rim, values in [0, 1]."""
    y, x = _coords(size)
    rho = np.sqrt(((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2)
    return np.clip((1.0 - rho) / edge, 0.0, 1.0)


def _soft_band(size: int, center: float, width: float, axis: int) -> np.ndarray:
    """Gaussian-profile band across the image along one axis."""
    y, x = _coords(size)
    pos = y if axis == 0 else x
    return np.exp(-0.5 * ((pos - center) / (width / 2.0)) ** 2)


def _segment(size: int, p0: tuple[float, float], p1: tuple[float, float], width: float) -> np.ndarray:
    """Soft line segment between two fractional points."""
    y, x = _coords(size)
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx
    t = np.clip(((y - y0) * dy + (x - x0) * dx) / length2, 0.0, 1.0)
    dist = np.sqrt((y - (y0 + t * dy)) ** 2 + (x - (x0 + t * dx)) ** 2)
    return np.exp(-0.5 * (dist / (width / 2.0)) ** 2)


def _texture_patch(size: int, cy: float, cx: float, r: float, rng: np.random.Generator) -> np.ndarray:
    """Mid-frequency sinusoidal texture inside a soft disc window."""
    y, x = _coords(size)
    tex = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(3.0, 7.0, size=2)
        phase = rng.uniform(0.0, 2 * np.pi, size=2)
        tex += np.sin(2 * np.pi * fy * y + phase[0]) * np.sin(2 * np.pi * fx * x + phase[1])
    tex = (tex / 3.0 + 1.0) / 2.0  # -> [0, 1]
    window = _soft_ellipse(size, cy, cx, r, r, edge=0.5)
    return tex * window


def _jitter(rng: np.random.Generator, cfg: PhantomConfig, scale: float = 0.03) -> float:
    return float(rng.uniform(-scale, scale)) * cfg.jitter


def motif_field(
    index: int, size: int, rng: np.random.Generator, cfg: PhantomConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Additive (bright, dark) fields in [0, 1] for one finding index.

    The rng position jitters are drawn in a fixed order, so the field is a
    pure function of (index, size, rng state, cfg).
    """
    s = cfg.motif_scale
    bright = np.zeros((size, size))
    dark = np.zeros((size, size))
    name = FINDINGS[index]
    if name == "No Finding":
        pass
    elif name == "Enlarged Cardiomediastinum":
        bright = 0.9 * _soft_band(size, 0.5 + _jitter(rng, cfg), 0.30 * s, axis=1)
    elif name == "Cardiomegaly":
        bright = _soft_ellipse(
            size, 0.55 + _jitter(rng, cfg), 0.5 + _jitter(rng, cfg), 0.20 * s, 0.26 * s
        )
    elif name == "Lung Opacity":
        bright = 0.8 * _texture_patch(size, 0.42 + _jitter(rng, cfg), 0.72 + _jitter(rng, cfg), 0.22 * s, rng)
    elif name == "Lung Lesion":
        cy = 0.38 + 2.0 * _jitter(rng, cfg)
        cx = 0.26 + 2.0 * _jitter(rng, cfg)
        bright = _soft_ellipse(size, cy, cx, 0.07 * s, 0.07 * s, edge=0.4)
    elif name == "Edema":
        bright = 0.55 * _soft_ellipse(size, 0.5 + _jitter(rng, cfg), 0.5 + _jitter(rng, cfg), 0.42 * s, 0.42 * s, edge=1.0)
    elif name == "Consolidation":
        cy = 0.68 + _jitter(rng, cfg)
        cx = 0.28 + _jitter(rng, cfg)
        by = _soft_band(size, cy, 0.22 * s, axis=0)
        bx = _soft_band(size, cx, 0.24 * s, axis=1)
        bright = 0.9 * by * bx
    elif name == "Pneumonia":
        for k in range(3):
            cy = 0.35 + 0.12 * k + _jitter(rng, cfg)
            cx = 0.25 + 0.06 * (k % 2) + _jitter(rng, cfg)
            bright = np.maximum(bright, 0.85 * _soft_ellipse(size, cy, cx, 0.055 * s, 0.055 * s, edge=0.5))
    elif name == "Atelectasis":
        band = _soft_band(size, 0.5 + _jitter(rng, cfg), 0.05 * s, axis=0)
        side = _soft_band(size, 0.72, 0.45, axis=1)
        bright = 0.9 * band * side
    elif name == "Pneumothorax":
        rim = _soft_ellipse(size, 0.45, 0.12 + _jitter(rng, cfg), 0.38 * s, 0.16 * s, edge=0.6)
        dark = 0.75 * rim
    elif name == "Pleural Effusion":
        wedge = _soft_band(size, 0.92 + _jitter(rng, cfg, 0.015), 0.14 * s, axis=0)
        line = _soft_band(size, 0.82 + _jitter(rng, cfg, 0.015), 0.025 * s, axis=0)
        bright = np.maximum(0.8 * wedge, line)
    elif name == "Pleural Other":
        bright = _soft_band(size, 0.08 + _jitter(rng, cfg, 0.015), 0.025 * s, axis=0)
    elif name == "Fracture":
        y0 = 0.18 + _jitter(rng, cfg)
        x0 = 0.68 + _jitter(rng, cfg)
        bright = _segment(size, (y0, x0), (y0 + 0.14 * s, x0 + 0.12 * s), 0.03 * s)
    elif name == "Support Devices":
        y, x = _coords(size)
        cx = 0.56 + _jitter(rng, cfg)
        curve = cx + 0.06 * s * np.sin(2 * np.pi * 1.5 * y)
        bright = np.exp(-0.5 * ((x - curve) / (0.015 * s)) ** 2)
    else:  # pragma: no cover - vocabulary is closed
        raise ValueError(f"no motif for finding {name!r}")
    return bright, dark


def motif_support_mask(
    index: int, size: int, seed: int, config: PhantomConfig = DEFAULT_CONFIG, level: float = 0.5
) -> np.ndarray:
    """Boolean support of one finding's motif, as rendered by generate_phantom.

    Uses the same per-image rng stream as :func:`generate_phantom`, so the
    mask lines up with the image generated from the same (labels, size,
    seed) when the finding is active.  ``level`` thresholds the unit-gain
    motif field.
    """
    rng = generator(seed, "phantom", size, index)
    bright, dark = motif_field(index, size, rng, config)
    return (bright + dark) >= level


def generate_phantom(
    labels: np.ndarray,
    size: int,
    seed: int,
    config: PhantomConfig = DEFAULT_CONFIG,
    image_id: str | None = None,
) -> LabeledImage:
    """Render one phantom image for a label vector.

    Deterministic in (labels, size, seed, config).  Each active finding
    contributes its motif from the table above; motifs combine by maximum
    so overlapping findings stay individually visible.
    """
    labels = validate_labels(labels)
    if size not in SUPPORTED_SIZES:
        raise ValueError(f"size must be one of {SUPPORTED_SIZES}, got {size}")
    bg_rng = generator(seed, "phantom-bg", size, _label_code(labels))
    img = _smooth_background(size, config, bg_rng)
    bright_all = np.zeros((size, size))
    dark_all = np.zeros((size, size))
    for index in np.flatnonzero(labels):
        rng = generator(seed, "phantom", size, int(index))
        bright, dark = motif_field(int(index), size, rng, config)
        bright_all = np.maximum(bright_all, bright)
        dark_all = np.maximum(dark_all, dark)
    img = img + config.motif_gain * bright_all - config.motif_gain * dark_all
    img = np.clip(img, 0.0, 1.0)
    if image_id is None:
        image_id = f"ph{size}-s{seed}-{_label_code(labels)}"
    return LabeledImage(pixels=img, labels=labels, id=image_id)


def _label_code(labels: np.ndarray) -> str:
    return format(int("".join(str(int(b)) for b in labels), 2), "04x")


def make_dataset(
    n_per_class: int,
    size: int,
    class_set: tuple[str, ...] = BENCH_CLASSES,
    seed: int = 0,
    combo_fraction: float = 0.2,
    config: PhantomConfig = DEFAULT_CONFIG,
) -> list[LabeledImage]:
    """Generate ``n_per_class`` phantoms per class, with multi-label combos.

    The label assignment is a pure function of (n_per_class, class_set,
    combo_fraction): within each class, every ``round(1/combo_fraction)``-th
    image (when the fraction is positive) also carries the next class in
    ``class_set`` order as a second finding.  "No Finding" never takes part
    in combinations.  The per-image rendering seed varies with ``seed``, so
    different seeds give different images but identical label histograms.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if not class_set:
        raise ValueError("class_set must not be empty")
    if not 0.0 <= combo_fraction < 1.0:
        raise ValueError("combo_fraction must be in [0, 1)")
    for name in class_set:
        if name not in FINDINGS:
            raise ValueError(f"unknown finding: {name!r}")
    period = round(1.0 / combo_fraction) if combo_fraction > 0 else 0
    combinable = [c for c in class_set if c != "No Finding"]
    images = []
    index = 0
    for ci, cls in enumerate(class_set):
        for j in range(n_per_class):
            names = [cls]
            if (
                period
                and cls != "No Finding"
                and len(combinable) > 1
                and j % period == period - 1
            ):
                pos = combinable.index(cls)
                offset = 1 + (j // period) % (len(combinable) - 1)
                names.append(combinable[(pos + offset) % len(combinable)])
            labels = label_vector(*names)
            img_seed = derive_seed(seed, "dataset-image", index)
            images.append(
                generate_phantom(
                    labels, size, img_seed, config, image_id=f"ph{size}-{index:05d}-{_label_code(labels)}"
                )
            )
            index += 1
    return images


def split_dataset(
    images: list[LabeledImage],
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> DatasetSplit:
    """Stratified, deterministic train/validation/test partition.

    Images are grouped by exact label vector; each group is shuffled and its
    members spread at evenly spaced fractional positions, then the global
    ordering is cut at largest-remainder targets.  Global split sizes are
    exact; per-group proportions are within one item of proportional.
    """
    if len(images) < 3:
        raise ValueError("need at least 3 images to split")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if any(f <= 0 for f in fractions):
        raise ValueError("each fraction must be > 0")

    groups: dict[tuple[int, ...], list[str]] = {}
    for im in images:
        groups.setdefault(tuple(int(b) for b in im.labels), []).append(im.id)

    positioned: list[tuple[float, tuple[int, ...], int, str]] = []
    for key in sorted(groups):
        ids = sorted(groups[key])
        rng = generator(seed, "split", key)
        rng.shuffle(ids)
        n = len(ids)
        for i, image_id in enumerate(ids):
            positioned.append(((i + 0.5) / n, key, i, image_id))
    positioned.sort(key=lambda item: (item[0], item[1], item[2]))
    ordered = [item[3] for item in positioned]

    n = len(ordered)
    counts = _largest_remainder(n, fractions)
    train = tuple(ordered[: counts[0]])
    validation = tuple(ordered[counts[0] : counts[0] + counts[1]])
    test = tuple(ordered[counts[0] + counts[1] :])
    return DatasetSplit(train=train, validation=validation, test=test, fractions=tuple(fractions))


def _largest_remainder(n: int, fractions: tuple[float, float, float]) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainder = n - sum(counts)
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def load_image_folder(path: str | Path, label_file: str | Path) -> list[LabeledImage]:
    """Load grayscale PNGs described by a label CSV.

    The CSV must have an ``id`` column plus one binary column per finding
    name.  Rows whose ``<id>.png`` is missing under ``path`` are skipped
    with a warning.  8-bit and 16-bit grayscale PNGs are rescaled to [0, 1].
    """
    path = Path(path)
    label_file = Path(label_file)
    with open(label_file, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ("id", *FINDINGS) if c not in header]
        if missing:
            raise ValueError(f"label CSV is missing columns: {missing}")
        rows = list(reader)

    images = []
    for row in rows:
        image_id = row["id"]
        cells = []
        for name in FINDINGS:
            cell = (row[name] or "").strip()
            if cell not in ("0", "1"):
                raise ValueError(f"malformed CSV cell for id={image_id!r}, column={name!r}: {cell!r}")
            cells.append(int(cell))
        file = path / f"{image_id}.png"
        if not file.exists():
            logger.warning("skipping row %r: no image file %s", image_id, file)
            continue
        pixels = _read_grayscale_png(file)
        images.append(LabeledImage(pixels=pixels, labels=np.array(cells, dtype=np.int8), id=image_id))
    return images


def _read_grayscale_png(file: Path) -> np.ndarray:
    with Image.open(file) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.float64) / 255.0
        elif im.mode in ("I", "I;16"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            raise ValueError(f"{file}: unsupported PNG mode {im.mode!r}, expected 8/16-bit grayscale")
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{file}: image must be square, got shape {arr.shape}")
    return arr


def write_png(file: str | Path, pixels: np.ndarray) -> None:
    """Write an image in [0, 1] as 8-bit grayscale PNG with pinned encoder settings."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(file, format="PNG", optimize=False, compress_level=6)


def write_manifest(directory: str | Path, images: list[LabeledImage]) -> Path:
    """Write images as PNGs plus a JSON manifest of {id, labels, path} rows."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for im in sorted(images, key=lambda i: i.id):
        rel = f"{im.id}.png"
        write_png(directory / rel, im.pixels)
        rows.append({"id": im.id, "labels": [int(b) for b in im.labels], "path": rel})
    manifest = directory / "manifest.json"
    with open(manifest, "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(directory: str | Path) -> list[LabeledImage]:
    """Load a dataset previously written by :func:`write_manifest`."""
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        rows = json.load(fh)
    images = []
    for row in rows:
        pixels = _read_grayscale_png(directory / row["path"])
        images.append(LabeledImage(pixels=pixels, labels=np.array(row["labels"], dtype=np.int8), id=row["id"]))
    return images
