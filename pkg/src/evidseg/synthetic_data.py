"""Deterministic "shapes-world" segmentation data with a held-out OOD shape.

Class 0 is background; shape kind ``k`` in ``shape_classes`` gets class
``k + 1``. OOD pixels in eval images keep the background label and are flagged
only in ``ood_mask``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"EDSD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHHHBI")

SHAPE_KINDS = ("square", "circle", "triangle", "cross")

# fixed hue per shape kind; brightness is jittered per instance
SHAPE_COLORS = {
    "square": (0.90, 0.25, 0.20),
    "circle": (0.20, 0.80, 0.25),
    "triangle": (0.25, 0.35, 0.95),
    "cross": (0.95, 0.85, 0.15),
}
BACKGROUND_COLOR = (0.35, 0.35, 0.35)
BRIGHTNESS_JITTER = 0.10
OOD_COLOR_REUSE_PROB = 0.5
MAX_PLACEMENT_ATTEMPTS = 1000

_MASK64 = (1 << 64) - 1


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


def mix_seed(seed: int, index: int) -> int:
    """splitmix64 finalizer applied to ``seed XOR index``."""
    z = ((seed ^ index) + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class DatasetConfig:
    image_size: tuple[int, int] = (64, 64)
    num_train: int = 200
    num_eval: int = 50
    shape_classes: tuple[str, ...] = ("square", "circle", "triangle")
    ood_shape: str = "cross"
    noise_std: float = 0.05
    min_radius: int = 4
    max_radius: int = 9
    shapes_per_image: tuple[int, int] = (1, 3)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "shape_classes", tuple(self.shape_classes))
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        for kind in self.shape_classes + (self.ood_shape,):
            if kind not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")
        if self.ood_shape in self.shape_classes:
            raise ValueError(f"ood_shape {self.ood_shape!r} must not be an in-distribution class")
        if len(set(self.shape_classes)) != len(self.shape_classes) or not self.shape_classes:
            raise ValueError("shape_classes must be a nonempty list of distinct kinds")
        if len(self.image_size) != 2 or min(self.image_size) < 1 or max(self.image_size) > 65535:
            raise ValueError(f"invalid image_size {self.image_size}")
        if not (1 <= self.min_radius <= self.max_radius):
            raise ValueError("need 1 <= min_radius <= max_radius")
        lo, hi = self.shapes_per_image
        if not (0 <= lo <= hi):
            raise ValueError("shapes_per_image must be a range lo <= hi with lo >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.num_train < 0 or self.num_eval < 0:
            raise ValueError("sample counts must be >= 0")

    @property
    def num_classes(self) -> int:
        return 1 + len(self.shape_classes)

    def class_of(self, kind: str) -> int:
        return 1 + self.shape_classes.index(kind)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["shape_classes"] = list(self.shape_classes)
        d["shapes_per_image"] = list(self.shapes_per_image)
        return d

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class PlacedShape:
    kind: str
    center: tuple[int, int]  # (row, col)
    radius: int
    color: tuple[float, float, float]


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1], 8-bit quantized
    labels: np.ndarray  # (H, W) uint8
    ood_mask: np.ndarray  # (H, W) bool

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.ood_mask, other.ood_mask)
        )


@dataclass
class Splits:
    train: list[Sample]
    eval: list[Sample]
    num_classes: int
    config: DatasetConfig | None = None
    manifest: dict = field(default_factory=dict)


def shape_mask(kind: str, center: tuple[int, int], radius: int, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    rows, cols = np.mgrid[0:h, 0:w]
    dy = rows - center[0]
    dx = cols - center[1]
    r = radius
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "triangle":
        # apex up; half-width grows linearly from 0 at the apex to r at the base
        inside_rows = (dy >= -r) & (dy <= r)
        return inside_rows & (2 * np.abs(dx) <= (dy + r))
    if kind == "cross":
        arm = max(1, r // 3)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape kind {kind!r}")


def render(
    shapes: list[PlacedShape],
    config: DatasetConfig,
    rng: np.random.Generator | None = None,
    background: tuple[float, float, float] = BACKGROUND_COLOR,
) -> Sample:
    """Rasterize ``shapes``; noise is drawn from ``rng`` when ``noise_std > 0``."""
    size = config.image_size
    img = np.empty((3,) + size, dtype=np.float64)
    img[:] = np.asarray(background, dtype=np.float64)[:, None, None]
    labels = np.zeros(size, dtype=np.uint8)
    ood = np.zeros(size, dtype=bool)
    for s in shapes:
        m = shape_mask(s.kind, s.center, s.radius, size)
        img[:, m] = np.asarray(s.color, dtype=np.float64)[:, None]
        if s.kind == config.ood_shape:
            ood |= m
            labels[m] = 0
        else:
            labels[m] = config.class_of(s.kind)
    if config.noise_std > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        img = img + rng.normal(0.0, config.noise_std, size=img.shape)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Sample(q.astype(np.float32) / 255.0, labels, ood)


def _jitter(color, rng) -> tuple[float, float, float]:
    f = 1.0 + rng.uniform(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER)
    return tuple(float(min(1.0, c * f)) for c in color)


def _layout(config: DatasetConfig, rng: np.random.Generator, with_ood: bool, index: int) -> list[PlacedShape]:
    h, w = config.image_size
    lo, hi = config.shapes_per_image
    kinds = [config.shape_classes[int(rng.integers(len(config.shape_classes)))] for _ in range(int(rng.integers(lo, hi + 1)))]
    if with_ood:
        kinds.insert(0, config.ood_shape)
    placed: list[PlacedShape] = []
    for kind in kinds:
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            r = int(rng.integers(config.min_radius, config.max_radius + 1))
            if 2 * r + 1 > min(h, w):
                continue
            cy = int(rng.integers(r, h - r))
            cx = int(rng.integers(r, w - r))
            # keep a one-pixel gap so shapes never touch
            if all(max(abs(cy - p.center[0]), abs(cx - p.center[1])) > r + p.radius + 1 for p in placed):
                break
        else:
            raise GenerationError(
                f"sample {index}: could not place {kind!r} after {MAX_PLACEMENT_ATTEMPTS} attempts "
                f"(image {h}x{w} too small)"
            )
        base = SHAPE_COLORS[kind]
        if kind == config.ood_shape and rng.random() < OOD_COLOR_REUSE_PROB:
            base = SHAPE_COLORS[config.shape_classes[int(rng.integers(len(config.shape_classes)))]]
        placed.append(PlacedShape(kind, (cy, cx), r, _jitter(base, rng)))
    return placed


def generate_sample(config: DatasetConfig, split: str, index: int) -> Sample:
    split_id = {"train": 0, "eval": 1}[split]
    rng = np.random.default_rng([mix_seed(config.seed, index), split_id])
    shapes = _layout(config, rng, with_ood=split == "eval", index=index)
    background = _jitter(BACKGROUND_COLOR, rng)
    return render(shapes, config, rng, background)


def generate_dataset(config: DatasetConfig, out_dir=None, workers: int = 1) -> Splits:
    """Generate both splits; writes ``train.edsd``, ``eval.edsd`` and ``manifest.json`` when ``out_dir`` is given."""

    def make(split, n):
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                return list(pool.map(lambda i: generate_sample(config, split, i), range(n)))
        return [generate_sample(config, split, i) for i in range(n)]

    splits = Splits(make("train", config.num_train), make("eval", config.num_eval), config.num_classes, config)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, samples in (("train", splits.train), ("eval", splits.eval)):
            payload = encode_split(samples, config.image_size, config.num_classes)
            (out / f"{name}.edsd").write_bytes(payload)
            files[f"{name}.edsd"] = hashlib.sha256(payload).hexdigest()
        manifest = {
            "format_version": DATASET_VERSION,
            "seed": config.seed,
            "config_hash": config.config_hash(),
            "config": config.to_dict(),
            "files": files,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        splits.manifest = manifest
    return splits


# ---------------------------------------------------------------------------
# container format


def encode_split(samples: list[Sample], size: tuple[int, int], num_classes: int) -> bytes:
    h, w = size
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, h, w, num_classes, len(samples))]
    for s in samples:
        if s.image.shape != (3, h, w):
            raise ValueError(f"sample image shape {s.image.shape} != (3, {h}, {w})")
        parts.append(np.round(s.image * 255.0).astype(np.uint8).tobytes())
        parts.append(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())
        parts.append(np.packbits(s.ood_mask.astype(bool).ravel()).tobytes())
    return b"".join(parts)


def decode_split(data: bytes) -> tuple[list[Sample], int, tuple[int, int]]:
    if len(data) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: {len(data)} bytes, need {_HEADER.size} (byte offset 0)")
    magic, version, h, w, c, count = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError("corrupt header: bad magic at byte offset 0")
    if version != DATASET_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset format version {version} at byte offset 4 (this build reads {DATASET_VERSION})"
        )
    if h == 0 or w == 0 or c < 2:
        raise DatasetFormatError(f"corrupt header: H={h} W={w} C={c} (byte offset 6)")
    n_img, n_lab, n_mask = 3 * h * w, h * w, (h * w + 7) // 8
    per = n_img + n_lab + n_mask
    expected = _HEADER.size + count * per
    if len(data) != expected:
        bad = _HEADER.size + (len(data) - _HEADER.size) // per * per
        kind = "truncated payload" if len(data) < expected else "trailing bytes"
        raise DatasetFormatError(
            f"{kind}: expected {expected} bytes for {count} samples, got {len(data)} (byte offset {bad})"
        )
    samples = []
    pos = _HEADER.size
    for _ in range(count):
        img = np.frombuffer(data, np.uint8, n_img, pos).reshape(3, h, w)
        lab = np.frombuffer(data, np.uint8, n_lab, pos + n_img).reshape(h, w).copy()
        if lab.max(initial=0) >= c:
            raise DatasetFormatError(f"label {int(lab.max())} >= C={c} at byte offset {pos + n_img}")
        bits = np.frombuffer(data, np.uint8, n_mask, pos + n_img + n_lab)
        mask = np.unpackbits(bits)[: h * w].reshape(h, w).astype(bool)
        samples.append(Sample(img.astype(np.float32) / 255.0, lab, mask))
        pos += per
    return samples, c, (h, w)


def load_split(path) -> tuple[list[Sample], int]:
    samples, c, _ = decode_split(Path(path).read_bytes())
    return samples, c


def load_dataset(path) -> Splits:
    """Load ``train.edsd`` and ``eval.edsd`` (either may be absent) from a directory."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    found = {}
    num_classes = None
    for name in ("train", "eval"):
        f = root / f"{name}.edsd"
        if f.exists():
            samples, c = load_split(f)
            if num_classes is not None and c != num_classes:
                raise DatasetFormatError(f"{f}: class count {c} disagrees with {num_classes}")
            num_classes = c
            found[name] = samples
    if num_classes is None:
        raise FileNotFoundError(f"no .edsd split files in {root}")
    manifest = {}
    if (root / "manifest.json").exists():
        manifest = json.loads((root / "manifest.json").read_text())
    return Splits(found.get("train", []), found.get("eval", []), num_classes, None, manifest)


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(images, labels, ood_masks) arrays for a list of samples."""
    if not samples:
        raise ValueError("no samples")
    return (
        np.stack([s.image for s in samples]),
        np.stack([s.labels for s in samples]).astype(np.int64),
        np.stack([s.ood_mask for s in samples]),
    )
