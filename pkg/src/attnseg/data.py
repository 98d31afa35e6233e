"""Image/mask loading, dataset manifests and a synthetic blob generator.

Only binary 8-bit PGM (P5, grayscale) and PPM (P6, RGB) files are read.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError

# ------------------------------------------------------------------ netpbm


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def read_netpbm(path) -> np.ndarray:
    """Return H×W (PGM) or H×W×3 (PPM) uint8 pixels."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported image format, magic bytes {magic!r}")
    pos = 2
    width, pos = _read_token(buf, pos)
    height, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    try:
        w, h, mv = int(width), int(height), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: malformed netpbm header") from None
    if mv != 255:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {mv})")
    pos += 1  # single whitespace byte after maxval
    ch = 3 if magic == b"P6" else 1
    count = w * h * ch
    raw = np.frombuffer(buf, dtype=np.uint8, count=count, offset=pos) if len(buf) - pos >= count else None
    if raw is None:
        raise FormatError(f"{path}: truncated pixel data")
    return raw.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


def write_netpbm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("pixel values must lie in 0..255")
        arr = arr.astype(np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as PGM/PPM")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(arr).tobytes())


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 H×W or H×W×3 to float C×H×W in [0, 1]."""
    arr = pixels.astype(np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def normalize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return (image - m) / s


def denormalize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return image * s + m


def load_image(path, mean: Sequence[float] | None = None, std: Sequence[float] | None = None) -> np.ndarray:
    """Read an image as C×H×W floats scaled to [0, 1], then standardised if
    ``mean``/``std`` are given."""
    img = to_unit(read_netpbm(path))
    if mean is not None and std is not None:
        if len(mean) != img.shape[0] or len(std) != img.shape[0]:
            raise ConfigError(f"{path}: {img.shape[0]} channels but {len(mean)} normalisation entries")
        img = normalize(img, mean, std)
    return img


def load_mask(path, value_to_label: dict) -> np.ndarray:
    pixels = read_netpbm(path)
    if pixels.ndim != 2:
        raise FormatError(f"{path}: masks must be single-channel PGM")
    table = {int(k): int(v) for k, v in value_to_label.items()}
    present = np.unique(pixels)
    unknown = [int(v) for v in present if int(v) not in table]
    if unknown:
        raise FormatError(f"{path}: gray values {unknown} have no label in the manifest")
    lut = np.zeros(256, dtype=np.int64)
    for k, v in table.items():
        lut[k] = v
    return lut[pixels]


# ---------------------------------------------------------------- datasets


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    id: str


@dataclass
class Dataset:
    images: np.ndarray  # N×C×H×W, normalised
    masks: np.ndarray  # N×H×W int
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.masks[i], self.ids[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.masks[idx], [self.ids[i] for i in idx])


@dataclass
class DatasetManifest:
    classes: int
    channels: int
    mean: list[float]
    std: list[float]
    value_to_label: dict[str, int]
    splits: dict[str, list[dict]] = field(default_factory=dict)
    root: Path = Path(".")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        raw = json.loads(path.read_text())
        try:
            m = cls(
                classes=int(raw["classes"]),
                channels=int(raw["channels"]),
                mean=[float(v) for v in raw["mean"]],
                std=[float(v) for v in raw["std"]],
                value_to_label={str(k): int(v) for k, v in raw["value_to_label"].items()},
                splits={k: list(v) for k, v in raw.get("splits", {}).items()},
                root=path.parent,
            )
        except KeyError as e:
            raise ConfigError(f"{path}: manifest is missing key {e}") from None
        m.check_disjoint()
        return m

    def check_disjoint(self) -> None:
        seen: dict[str, str] = {}
        for split, entries in self.splits.items():
            for e in entries:
                if e["id"] in seen and seen[e["id"]] != split:
                    raise ConfigError(f"id {e['id']!r} appears in both {seen[e['id']]!r} and {split!r} splits")
                seen[e["id"]] = split

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "channels": self.channels,
            "mean": self.mean,
            "std": self.std,
            "value_to_label": self.value_to_label,
            "splits": self.splits,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def load_split(self, split: str) -> Dataset:
        entries = self.splits.get(split, [])
        images, masks, ids = [], [], []
        for e in entries:
            img = load_image(self.root / e["image"], self.mean, self.std)
            if img.shape[0] != self.channels:
                raise ConfigError(f"{e['image']}: {img.shape[0]} channels, manifest says {self.channels}")
            mask = load_mask(self.root / e["mask"], self.value_to_label)
            if mask.max() >= self.classes:
                raise ConfigError(f"{e['mask']}: label {mask.max()} >= class count {self.classes}")
            images.append(img)
            masks.append(mask)
            ids.append(str(e["id"]))
        if not entries:
            return Dataset(np.zeros((0, self.channels, 1, 1)), np.zeros((0, 1, 1), dtype=np.int64), [])
        return Dataset(np.stack(images), np.stack(masks), ids)


# --------------------------------------------------------------- synthetic


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = rng.normal(0.0, 1.0, (size, size))
    smooth = ndimage.gaussian_filter(noise, sigma=2.0, mode="wrap")
    smooth /= smooth.std() + 1e-12
    return 0.08 * smooth + 0.03 * rng.normal(0.0, 1.0, (size, size))


def _blob(size: int, cy: float, cx: float, ry: float, rx: float, theta: float) -> np.ndarray:
    """Normalised elliptical radius (1 on the boundary) at each pixel centre."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.sqrt((u / rx) ** 2 + (v / ry) ** 2)


def blob_image(size: int, radius: float, rng: np.random.Generator, center=None,
               background: float = 0.3, contrast: float = 0.4, aspect: float = 1.0,
               theta: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """One soft-edged ellipse on textured noise; returns (uint8 image, bool mask).

    Defaults match the intensity model of :func:`synth_blobs`, so single
    probe images of a chosen size come from the training distribution.
    """
    if center is None:
        lo, hi = radius, size - 1 - radius
        center = (rng.uniform(lo, hi), rng.uniform(lo, hi)) if hi > lo else (size / 2, size / 2)
    rho = _blob(size, center[0], center[1], radius * aspect, radius, theta)
    mask = rho <= 1.0
    soft = 1.0 / (1.0 + np.exp((rho - 1.0) * max(radius, 1.0) * 1.5))
    img = background + _texture(rng, size) + contrast * soft
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8), mask


@dataclass
class SyntheticSet:
    pixels: np.ndarray  # N×H×W uint8
    masks: np.ndarray  # N×H×W int
    ids: list[str]
    areas: np.ndarray  # per-image foreground area
    classes: int

    def dataset(self, mean=None, std=None) -> Dataset:
        imgs = self.pixels.astype(np.float64)[:, None] / 255.0
        if mean is None:
            mean, std = [float(imgs.mean())], [float(imgs.std())]
        return Dataset(np.stack([normalize(im, mean, std) for im in imgs]), self.masks.copy(), list(self.ids))


def synth_blobs(n: int, size: int, scale_range: tuple[float, float] = (0.05, 0.4), seed: int = 0,
                classes: int = 2, out_dir=None, splits: dict[str, int] | None = None) -> SyntheticSet:
    """Generate ``n`` grayscale images with one or two elliptical blobs.

    Blob radii are drawn uniformly from ``scale_range * size``. With
    ``classes=3`` each blob is labelled 1 or 2 and drawn at a distinct
    contrast. When ``out_dir`` is given, PGM images/masks and a
    ``manifest.json`` are written there; ``splits`` maps split names to
    sample counts taken in order (default: everything in ``train``).
    """
    if size % 16:
        raise ConfigError(f"synthetic image size must be divisible by 16, got {size}")
    if classes not in (2, 3):
        raise ConfigError("synthetic data supports 2 or 3 classes")
    rng = np.random.default_rng(seed)
    lo, hi = scale_range
    pixels = np.zeros((n, size, size), dtype=np.uint8)
    masks = np.zeros((n, size, size), dtype=np.int64)
    for i in range(n):
        nblobs = 1 + int(rng.random() < 0.35)
        img = 0.3 + _texture(rng, size)
        lab = np.zeros((size, size), dtype=np.int64)
        for _ in range(nblobs):
            r = rng.uniform(lo, hi) * size
            aspect = rng.uniform(0.6, 1.0)
            theta = rng.uniform(0, np.pi)
            margin = min(r, size / 2 - 1)
            cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
            rho = _blob(size, cy, cx, r * aspect, r, theta)
            label = 1 if classes == 2 else int(rng.integers(1, 3))
            contrast = 0.4 if label == 1 else -0.25
            img += contrast * (1.0 / (1.0 + np.exp((rho - 1.0) * max(r, 1.0) * 1.5)))
            lab[rho <= 1.0] = label
        if not lab.any():  # blob smaller than a pixel centre: force its centre pixel
            lab[int(round(cy)), int(round(cx))] = 1
        pixels[i] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
        masks[i] = lab
    ids = [f"blob{seed}_{i:04d}" for i in range(n)]
    areas = (masks > 0).reshape(n, -1).sum(axis=1)
    out = SyntheticSet(pixels, masks, ids, areas, classes)
    if out_dir is not None:
        write_synthetic(out, Path(out_dir), splits or {"train": n})
    return out


def mask_gray_values(classes: int) -> list[int]:
    return [round(255 * k / (classes - 1)) for k in range(classes)]


def write_synthetic(data: SyntheticSet, out_dir: Path, splits: dict[str, int]) -> DatasetManifest:
    if sum(splits.values()) > len(data.ids):
        raise ConfigError(f"split sizes {splits} exceed {len(data.ids)} samples")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    grays = mask_gray_values(data.classes)
    entries: dict[str, list[dict]] = {}
    start = 0
    for split, count in splits.items():
        entries[split] = []
        for i in range(start, start + count):
            ident = data.ids[i]
            write_netpbm(out_dir / "images" / f"{ident}.pgm", data.pixels[i])
            write_netpbm(out_dir / "masks" / f"{ident}.pgm", np.asarray(grays, dtype=np.uint8)[data.masks[i]])
            entries[split].append({"id": ident, "image": f"images/{ident}.pgm", "mask": f"masks/{ident}.pgm"})
        start += count
    train_n = splits.get("train", len(data.ids))
    ref = data.pixels[:train_n].astype(np.float64) / 255.0
    manifest = DatasetManifest(
        classes=data.classes,
        channels=1,
        mean=[float(ref.mean())],
        std=[float(ref.std())],
        value_to_label={str(g): k for k, g in enumerate(grays)},
        splits=entries,
        root=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def manifest_path(path) -> Path:
    p = Path(os.fspath(path))
    return p / "manifest.json" if p.is_dir() else p
