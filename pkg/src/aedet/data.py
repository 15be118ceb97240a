"""Deterministic synthetic detection data: hard-edged shapes on textured backgrounds.

Every scene is a pure function of ``(spec.seed, index)``. Labels are the tight
pixel bounding boxes of each shape's own mask, in normalized ``(cx, cy, w, h)``
form. Overlap is capped by ``max_iou``; the default of 0 keeps boxes disjoint, so
no label covers pixels painted over by a later shape. Images are quantized to 8
bits at generation time so that a PPM round trip is lossless.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, CorruptDatasetError, DatasetError, GenerationError
from .excitation import BoxLabel

logger = logging.getLogger(__name__)

SHAPES = ("rectangle", "disk", "triangle")
MAX_ATTEMPTS = 1000


@dataclass
class SceneSpec:
    seed: int = 0
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    classes: list = field(default_factory=lambda: list(SHAPES))
    small_scale: tuple = (0.07, 0.2)
    large_scale: tuple = (0.3, 0.6)
    small_fraction: float = 0.6
    aspect_range: tuple = (0.75, 1.33)
    noise: float = 0.03
    texture: float = 0.1
    max_iou: float = 0.0

    def __post_init__(self):
        self.classes = list(self.classes)
        self.small_scale = tuple(float(v) for v in self.small_scale)
        self.large_scale = tuple(float(v) for v in self.large_scale)
        self.aspect_range = tuple(float(v) for v in self.aspect_range)
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8 pixels")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"bad object range ({self.min_objects}, {self.max_objects})")
        unknown = set(self.classes) - set(SHAPES)
        if not self.classes or unknown:
            raise ConfigError(f"classes must be a non-empty subset of {SHAPES}, got {self.classes}")
        for lo, hi in (self.small_scale, self.large_scale):
            if not 0 < lo <= hi <= 1:
                raise ConfigError(f"scale range ({lo}, {hi}) must lie in (0, 1]")
        if not 0 <= self.small_fraction <= 1:
            raise ConfigError("small_fraction must be in [0, 1]")
        if not 0 <= self.max_iou <= 0.5:
            raise ConfigError(f"max_iou must be in [0, 0.5], got {self.max_iou}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("small_scale", "large_scale", "aspect_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)


def _pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size) + 0.5
    return c[None, :], c[:, None]


def render_shape(kind: str, x0: int, y0: int, x1: int, y1: int, size: int) -> np.ndarray:
    """Boolean mask of a shape inscribed in the pixel rectangle [x0, x1) x [y0, y1)."""
    px, py = _pixel_centers(size)
    if kind == "rectangle":
        return (px > x0) & (px < x1) & (py > y0) & (py < y1)
    if kind == "disk":
        # center on a pixel corner and integer radius give an exact 2r tight box
        r = (x1 - x0) // 2
        cx, cy = x0 + r, y0 + r
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == "triangle":
        # apex at top middle, base along the bottom edge
        ax, ay = (x0 + x1) / 2, y0
        t = (py - ay) / (y1 - ay)
        half = t * (x1 - x0) / 2
        return (py >= ay) & (py <= y1) & (px >= ax - half) & (px <= ax + half)
    raise ConfigError(f"unknown shape {kind!r}")


def tight_box(mask: np.ndarray) -> Optional[tuple[int, int, int, int]]:
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _background(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    s = spec.image_size
    base = rng.uniform(0.25, 0.75, size=(3, 1, 1))
    coarse = rng.uniform(-1.0, 1.0, size=(3, 5, 5))
    # bilinear upsampling of a coarse grid gives a smooth texture
    pos = np.linspace(0, 4, s)
    i0 = np.minimum(pos.astype(int), 3)
    f = pos - i0
    rows = coarse[:, i0] * (1 - f)[None, :, None] + coarse[:, i0 + 1] * f[None, :, None]
    tex = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]
    noise = rng.uniform(-1.0, 1.0, size=(3, s, s))
    return base + spec.texture * tex + spec.noise * noise


def _shape_color(rng: np.random.Generator, bg: np.ndarray) -> np.ndarray:
    mean = bg.reshape(3, -1).mean(axis=1)
    for _ in range(100):
        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - mean).max() >= 0.35:
            return color
    return np.where(mean > 0.5, 0.0, 1.0)


def generate_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[BoxLabel]]:
    """Image (3, S, S) float32 in [0, 1] on the 8-bit lattice, plus its labels."""
    rng = np.random.default_rng([spec.seed, index])
    s = spec.image_size
    img = _background(rng, spec)
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[tuple[int, int, int, int]] = []
    labels: list[BoxLabel] = []
    attempts = 0
    while len(labels) < n:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise GenerationError(f"could not place {n} objects in scene {index} after {MAX_ATTEMPTS} attempts")
        cls_id = int(rng.integers(len(spec.classes)))
        kind = spec.classes[cls_id]
        lo, hi = spec.small_scale if rng.random() < spec.small_fraction else spec.large_scale
        scale = rng.uniform(lo, hi)
        aspect = rng.uniform(*spec.aspect_range)
        bw = max(3, int(round(scale * np.sqrt(aspect) * s)))
        bh = max(3, int(round(scale / np.sqrt(aspect) * s)))
        if kind == "disk":
            bw = bh = max(2, 2 * int(round(scale * s / 2)))
        bw, bh = min(bw, s), min(bh, s)
        x0 = int(rng.integers(0, s - bw + 1))
        y0 = int(rng.integers(0, s - bh + 1))
        mask = render_shape(kind, x0, y0, x0 + bw, y0 + bh, s)
        box = tight_box(mask)
        if box is None:
            continue
        if any(_box_iou(box, other) > spec.max_iou for other in placed):
            continue
        img[:, mask] = _shape_color(rng, img)[:, None]
        placed.append(box)
        bx0, by0, bx1, by1 = box
        labels.append(BoxLabel(cls_id, (bx0 + bx1) / 2 / s, (by0 + by1) / 2 / s, (bx1 - bx0) / s, (by1 - by0) / s))
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img.astype(np.float32), labels


# ---------------------------------------------------------------------------
# on-disk format


def write_ppm(path: Path, img: np.ndarray) -> None:
    c, h, w = img.shape
    pixels = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    buf = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(buf) and not buf[end : end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6" or fields[3] != b"255":
        raise DatasetError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(fields[1]), int(fields[2])
    raw = np.frombuffer(buf[pos : pos + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return (raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _combined_checksum(file_hashes: Sequence[str]) -> str:
    return hashlib.sha256("".join(file_hashes).encode("ascii")).hexdigest()


def write_dataset(spec: SceneSpec, count: int, directory) -> dict:
    """Write ``count`` scenes as ``%06d.ppm`` plus ``labels.json`` and ``manifest.json``.

    The checksum is the SHA-256 of the concatenated hex digests of every image (in
    index order) followed by ``labels.json``.
    """
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        names, hashes, labels = [], [], []
        for i in range(count):
            img, boxes = generate_scene(spec, i)
            name = f"{i:06d}.ppm"
            write_ppm(out / name, img)
            names.append(name)
            hashes.append(_sha256(out / name))
            labels.append([b.to_dict() for b in boxes])
        (out / "labels.json").write_text(json.dumps(labels))
        names.append("labels.json")
        hashes.append(_sha256(out / "labels.json"))
        manifest = {
            "spec": spec.to_dict(),
            "count": count,
            "checksum": _combined_checksum(hashes),
            "files": dict(zip(names, hashes)),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        raise DatasetError(f"writing dataset to {out}: {exc}") from exc
    logger.info("wrote %d scenes to %s", count, out)
    return manifest


class Dataset:
    """In-memory images (N, 3, S, S) float32 plus one label list per image."""

    def __init__(self, images: np.ndarray, labels: list[list[BoxLabel]], spec: Optional[SceneSpec] = None):
        if len(images) != len(labels):
            raise DatasetError(f"{len(images)} images but {len(labels)} label lists")
        self.images = images
        self.labels = labels
        self.spec = spec

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[np.ndarray, list[BoxLabel]]]:
        return zip(self.images, self.labels)

    def __getitem__(self, i):
        return self.images[i], self.labels[i]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = list(indices)
        return Dataset(self.images[idx], [self.labels[i] for i in idx], self.spec)

    @classmethod
    def generate(cls, spec: SceneSpec, count: int) -> "Dataset":
        size = spec.image_size
        images = np.zeros((count, 3, size, size), dtype=np.float32)
        labels = []
        for i in range(count):
            images[i], boxes = generate_scene(spec, i)
            labels.append(boxes)
        return cls(images, labels, spec)


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"missing manifest: {root / 'manifest.json'}") from exc
    count = int(manifest["count"])
    names = [f"{i:06d}.ppm" for i in range(count)] + ["labels.json"]
    recorded = manifest.get("files", {})
    hashes = []
    for name in names:
        path = root / name
        if not path.exists():
            raise DatasetError(f"missing dataset file: {path}")
        digest = _sha256(path)
        if name in recorded and recorded[name] != digest:
            raise CorruptDatasetError(f"checksum mismatch for {path}")
        hashes.append(digest)
    if _combined_checksum(hashes) != manifest["checksum"]:
        raise CorruptDatasetError(f"dataset checksum mismatch in {root}")

    raw_labels = json.loads((root / "labels.json").read_text())
    if len(raw_labels) != count:
        raise CorruptDatasetError(f"labels.json has {len(raw_labels)} entries, manifest says {count}")
    labels = [[BoxLabel.from_dict(d) for d in per_image] for per_image in raw_labels]
    spec = SceneSpec.from_dict(manifest["spec"]) if "spec" in manifest else None
    if count == 0:
        size = spec.image_size if spec else 0
        return Dataset(np.zeros((0, 3, size, size), np.float32), [], spec)
    images = np.stack([read_ppm(root / f"{i:06d}.ppm") for i in range(count)])
    return Dataset(images, labels, spec)


def size_bucket(area: float) -> str:
    """Bucket by fraction of image area: small < 1%, medium 1-9%, large > 9%."""
    if area < 0.01:
        return "small"
    if area <= 0.09:
        return "medium"
    return "large"
