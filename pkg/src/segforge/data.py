"""Synthetic shapes dataset and PPM/PGM sample I/O.

Each image is a noisy textured background (class 0) with a few non-overlapping
shapes.  Every foreground class is bound to one shape kind and a base colour
(jittered per instance), so per-class scores stay comparable across runs.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

SPLITS = ("train", "val", "test")

SHAPE_KINDS = [
    "circle", "rectangle", "triangle", "ring", "bar", "diamond", "cross", "ellipse",
    "hexagon", "star", "semicircle", "frame", "l_shape", "pentagon", "chevron",
]

# Base colours per foreground class; instances jitter around these.
_PALETTE = np.array([
    [0.90, 0.20, 0.20], [0.20, 0.35, 0.90], [0.95, 0.85, 0.15], [0.85, 0.30, 0.85],
    [0.15, 0.85, 0.85], [0.95, 0.55, 0.10], [0.55, 0.95, 0.25], [0.55, 0.25, 0.10],
    [0.95, 0.95, 0.95], [0.05, 0.05, 0.05], [0.40, 0.10, 0.60], [0.10, 0.50, 0.30],
    [0.95, 0.60, 0.70], [0.30, 0.30, 0.55], [0.70, 0.70, 0.35],
])


class DatasetError(ValueError):
    pass


class MalformedHeaderError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


class MaskValueError(DatasetError):
    pass


class ManifestError(DatasetError):
    pass


class SpecError(DatasetError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ImageSample:
    image: np.ndarray  # (H, W, 3) float
    mask: np.ndarray  # (H, W) integer class indices
    id: str = ""
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"sample {self.id!r}: image must be (H, W, 3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DatasetError(f"sample {self.id!r}: mask {self.mask.shape} does not match image {self.image.shape[:2]}")


@dataclass
class SyntheticSpec:
    num_train: int = 200
    num_val: int = 40
    num_test: int = 0
    side: int = 64
    num_foreground_classes: int = 3
    shapes_per_image: List[int] = field(default_factory=lambda: [1, 4])
    noise_level: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_train", "num_val", "num_test"):
            if getattr(self, name) < 0:
                raise SpecError(name, "must be >= 0")
        if self.side < 16 or self.side % 16:
            raise SpecError("side", f"must be a positive multiple of 16, got {self.side}")
        if not 1 <= self.num_foreground_classes <= len(SHAPE_KINDS):
            raise SpecError("num_foreground_classes", f"must be in [1, {len(SHAPE_KINDS)}]")
        lo_hi = list(self.shapes_per_image)
        if len(lo_hi) != 2 or lo_hi[0] < 0 or lo_hi[0] > lo_hi[1]:
            raise SpecError("shapes_per_image", "must be [min, max] with 0 <= min <= max")
        if self.noise_level < 0:
            raise SpecError("noise_level", "must be >= 0")

    @property
    def num_classes(self) -> int:
        return self.num_foreground_classes + 1


@dataclass
class ManifestEntry:
    id: str
    image: str
    mask: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    num_classes: int
    class_names: List[str]
    entries: List[ManifestEntry]

    def split(self, name: str) -> List[ManifestEntry]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return sorted((e for e in self.entries if e.split == name), key=lambda e: e.id)

    def entry(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == sample_id:
                return e
        raise ManifestError(f"no sample with id {sample_id!r}")


# ---------------------------------------------------------------------------
# shape rasterisation
# ---------------------------------------------------------------------------

def _regular_polygon(n: int, r: float, phase: float = -math.pi / 2) -> np.ndarray:
    t = phase + 2 * math.pi * np.arange(n) / n
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def _star(r: float) -> np.ndarray:
    t = -math.pi / 2 + math.pi * np.arange(10) / 5
    rad = np.where(np.arange(10) % 2 == 0, r, 0.45 * r)
    return np.stack([rad * np.cos(t), rad * np.sin(t)], axis=1)


def _inside_polygon(u: np.ndarray, v: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule; ``poly`` holds (x, y) vertices."""
    inside = np.zeros(u.shape, dtype=bool)
    xs, ys = poly[:, 0], poly[:, 1]
    for i in range(len(poly)):
        x0, y0, x1, y1 = xs[i - 1], ys[i - 1], xs[i], ys[i]
        crosses = (y0 > v) != (y1 > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x0 + (v - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (u < x_at)
    return inside


def shape_mask(kind: str, side: int, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    au, av = np.abs(u), np.abs(v)
    rho2 = u * u + v * v
    if kind == "circle":
        return rho2 <= r * r
    if kind == "rectangle":
        return (au <= r) & (av <= 0.6 * r)
    if kind == "triangle":
        return _inside_polygon(u, v, _regular_polygon(3, r * 1.15))
    if kind == "ring":
        return (rho2 <= r * r) & (rho2 >= (0.55 * r) ** 2)
    if kind == "bar":
        return (au <= r * 1.2) & (av <= 0.25 * r)
    if kind == "diamond":
        return au / r + av / (0.7 * r) <= 1.0
    if kind == "cross":
        return ((au <= r) & (av <= 0.28 * r)) | ((av <= r) & (au <= 0.28 * r))
    if kind == "ellipse":
        return (u / r) ** 2 + (v / (0.5 * r)) ** 2 <= 1.0
    if kind == "hexagon":
        return _inside_polygon(u, v, _regular_polygon(6, r))
    if kind == "star":
        return _inside_polygon(u, v, _star(r * 1.2))
    if kind == "semicircle":
        return (rho2 <= r * r) & (v >= 0)
    if kind == "frame":
        return (au <= r) & (av <= r) & ~((au <= 0.6 * r) & (av <= 0.6 * r))
    if kind == "l_shape":
        return ((u >= -r) & (u <= r) & (v >= 0.5 * r) & (v <= r)) | ((u >= -r) & (u <= -0.5 * r) & (v >= -r) & (v <= r))
    if kind == "pentagon":
        return _inside_polygon(u, v, _regular_polygon(5, r))
    if kind == "chevron":
        poly = np.array([[-r, -r], [0, -0.2 * r], [r, -r], [r, -0.3 * r], [0, 0.6 * r], [-r, -0.3 * r]])
        return _inside_polygon(u, v, poly)
    raise ValueError(f"unknown shape kind {kind!r}")


def _background(rng: np.random.Generator, side: int, noise: float) -> np.ndarray:
    base = rng.uniform(0.3, 0.6, size=3)
    coarse = rng.normal(0.0, 0.08, size=(side // 8 + 1, side // 8 + 1, 3))
    idx = np.arange(side) / 8.0
    i0 = np.floor(idx).astype(int)
    f = (idx - i0)[:, None]
    rows = coarse[i0] * (1 - f[..., None]) + coarse[i0 + 1] * f[..., None]
    fx = f.T[..., None]
    tex = rows[:, i0] * (1 - fx) + rows[:, i0 + 1] * fx
    img = base + tex + rng.normal(0.0, noise, size=(side, side, 3))
    return img


def render_image(rng: np.random.Generator, spec: SyntheticSpec,
                 first_class: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    side = spec.side
    img = _background(rng, side, spec.noise_level)
    mask = np.zeros((side, side), dtype=np.uint8)
    lo, hi = spec.shapes_per_image
    k = int(rng.integers(lo, hi + 1))
    for n in range(k):
        cls = first_class if (n == 0 and first_class is not None) else int(rng.integers(1, spec.num_classes))
        kind = SHAPE_KINDS[cls - 1]
        for _ in range(40):
            r = rng.uniform(0.09, 0.2) * side
            cy, cx = rng.uniform(r, side - r, size=2)
            m = shape_mask(kind, side, cy, cx, r, rng.uniform(0, 2 * math.pi))
            # keep a one-pixel gap to earlier shapes
            grown = m.copy()
            grown[1:] |= m[:-1]
            grown[:-1] |= m[1:]
            grown[:, 1:] |= m[:, :-1]
            grown[:, :-1] |= m[:, 1:]
            if m.sum() >= 12 and not np.any(grown & (mask > 0)):
                break
        else:
            continue
        colour = np.clip(_PALETTE[cls - 1] + rng.normal(0.0, 0.06, size=3), 0.0, 1.0)
        shade = 1.0 + rng.normal(0.0, spec.noise_level, size=(side, side, 1))
        img = np.where(m[..., None], colour * shade, img)
        mask[m] = cls
    return np.clip(img, 0.0, 1.0), mask


def _image_rng(seed: int, split: str, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), index, attempt])


def generate_samples(spec: SyntheticSpec, split: str, count: Optional[int] = None) -> List[ImageSample]:
    """In-memory generation of one split (deterministic in ``spec.seed``)."""
    spec.validate()
    count = {"train": spec.num_train, "val": spec.num_val, "test": spec.num_test}[split] if count is None else count
    fg = spec.num_foreground_classes
    for attempt in range(20):
        samples = []
        for i in range(count):
            rng = _image_rng(spec.seed, split, i, attempt)
            img, mask = render_image(rng, spec, first_class=(i % fg) + 1)
            samples.append(ImageSample(img, mask, f"{split}_{i:05d}"))
        if split != "train" or spec.shapes_per_image[1] == 0 or count < fg:
            return samples
        present = set()
        for s in samples:
            present.update(np.unique(s.mask).tolist())
        if present.issuperset(range(1, fg + 1)):
            return samples
    raise DatasetError("could not place every foreground class in the training split")


def generate(spec: SyntheticSpec, root) -> DatasetManifest:
    """Write ``root/<split>/<id>.ppm|_mask.pgm`` plus ``root/manifest.json``."""
    spec.validate()
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset root {root}: {exc}") from exc
    entries = []
    for split in SPLITS:
        count = {"train": spec.num_train, "val": spec.num_val, "test": spec.num_test}[split]
        if count == 0 and split == "test":
            continue
        (root / split).mkdir(exist_ok=True)
        for s in generate_samples(spec, split):
            image_rel, mask_rel = f"{split}/{s.id}.ppm", f"{split}/{s.id}_mask.pgm"
            save_sample(s, root / image_rel, root / mask_rel)
            entries.append(ManifestEntry(s.id, image_rel, mask_rel, split))
    names = ["background"] + [SHAPE_KINDS[i] for i in range(spec.num_foreground_classes)]
    manifest = DatasetManifest(root, spec.num_classes, names, entries)
    write_manifest(manifest, root / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def _encode_pnm(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def _decode_pnm(data: bytes, magic: bytes, channels: int, path: str) -> np.ndarray:
    if data[:2] != magic:
        raise MalformedHeaderError(f"{path}: expected magic {magic.decode()}, got {data[:2]!r}")
    pos, fields = 2, []
    while len(fields) < 3:
        if pos >= len(data):
            raise MalformedHeaderError(f"{path}: header ends early")
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            m = re.match(rb"\d+", data[pos:])
            if not m:
                raise MalformedHeaderError(f"{path}: non-numeric header field at byte {pos}")
            fields.append(int(m.group()))
            pos += len(m.group())
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MalformedHeaderError(f"{path}: missing whitespace after maxval")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise MalformedHeaderError(f"{path}: maxval must be 255, got {maxval}")
    if w < 1 or h < 1:
        raise MalformedHeaderError(f"{path}: empty image {w}x{h}")
    need = w * h * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def encode_ppm(image: np.ndarray) -> bytes:
    q = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return _encode_pnm(b"P6", q)


def encode_pgm(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise MaskValueError("mask values must fit in 8 bits")
    return _encode_pnm(b"P5", mask.astype(np.uint8))


def decode_ppm(data: bytes, path: str = "<bytes>") -> np.ndarray:
    return _decode_pnm(data, b"P6", 3, path).astype(np.float64) / 255.0


def decode_pgm(data: bytes, path: str = "<bytes>", num_classes: Optional[int] = None) -> np.ndarray:
    mask = _decode_pnm(data, b"P5", 1, path).copy()
    if num_classes is not None and mask.size and mask.max() >= num_classes:
        bad = np.argwhere(mask >= num_classes)[0]
        raise MaskValueError(
            f"{path}: class {int(mask[tuple(bad)])} at (row {bad[0]}, col {bad[1]}) >= num_classes {num_classes}")
    return mask


def save_sample(sample: ImageSample, image_path, mask_path) -> None:
    Path(image_path).write_bytes(encode_ppm(sample.image))
    Path(mask_path).write_bytes(encode_pgm(sample.mask))


def load_sample(image_path, mask_path, num_classes: Optional[int] = None, sample_id: str = "") -> ImageSample:
    image = decode_ppm(Path(image_path).read_bytes(), str(image_path))
    mask = decode_pgm(Path(mask_path).read_bytes(), str(mask_path), num_classes)
    return ImageSample(image, mask, sample_id or Path(image_path).stem)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def manifest_to_json(manifest: DatasetManifest) -> str:
    doc = {
        "num_classes": manifest.num_classes,
        "class_names": manifest.class_names,
        "entries": [{"id": e.id, "image": e.image, "mask": e.mask, "split": e.split} for e in manifest.entries],
    }
    return json.dumps(doc, indent=2) + "\n"


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest_to_json(manifest), encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    root = path.parent
    try:
        num_classes = int(doc["num_classes"])
        names = list(doc["class_names"])
        raw = doc["entries"]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: missing field {exc}") from exc
    seen = set()
    entries = []
    for item in raw:
        e = ManifestEntry(str(item["id"]), str(item["image"]), str(item["mask"]), str(item["split"]))
        if e.id in seen:
            raise ManifestError(f"{path}: duplicate sample id {e.id!r}")
        if e.split not in SPLITS:
            raise ManifestError(f"{path}: entry {e.id!r} has unknown split {e.split!r}")
        for f in (e.image, e.mask):
            if not (root / f).is_file():
                raise ManifestError(f"{path}: entry {e.id!r} references missing file {f}")
        seen.add(e.id)
        entries.append(e)
    return DatasetManifest(root, num_classes, names, entries)


def iterate_split(manifest: DatasetManifest, split: str) -> Iterator[ImageSample]:
    """Samples of ``split`` in id order."""
    for e in manifest.split(split):
        yield load_sample(manifest.root / e.image, manifest.root / e.mask, manifest.num_classes, e.id)


def load_split(manifest: DatasetManifest, split: str) -> List[ImageSample]:
    return list(iterate_split(manifest, split))
