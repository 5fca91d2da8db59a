"""Dataset ingestion and generation.

Supports directory trees in the Market-1501 layout (bounding_box_train/,
query/, bounding_box_test/ with {pid}_c{cam}... filenames), a deterministic
synthetic identity generator so the whole pipeline runs with zero external
data, and a binary PPM (P6) codec as the single image format.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "ImageFormatError",
    "load_image",
    "save_image",
    "ManifestItem",
    "DatasetManifest",
    "SynthSpec",
    "generate_synthetic",
    "scan_market_dir",
    "load_manifest",
    "TrainData",
]

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "SAGMANIFEST 1"
_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)")


class ImageFormatError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Read a binary 8-bit PPM (P6) into a float32 [3 x H x W] array in [0,1]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P6":
            raise ImageFormatError(f"{path}: expected P6 PPM, got magic {magic!r}")
        fields = []
        while len(fields) < 3:
            line = fh.readline()
            if not line:
                raise ImageFormatError(f"{path}: truncated PPM header")
            line = line.split(b"#", 1)[0]
            fields.extend(line.split())
        width, height, maxval = (int(v) for v in fields[:3])
        if maxval != 255:
            raise ImageFormatError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
        raw = fh.read(width * height * 3)
        if len(raw) != width * height * 3:
            raise ImageFormatError(f"{path}: truncated PPM payload")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def save_image(image: np.ndarray, path) -> None:
    """Write a [3 x H x W] array with values in [0,1] as binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ImageFormatError(f"save_image expects [3 x H x W], got {image.shape}")
    quantized = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = image.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.transpose(1, 2, 0).tobytes())


@dataclass
class ManifestItem:
    path: str  # relative to the dataset root
    raw_pid: int
    pid: int  # remapped to 0..K-1 for train items; raw pid otherwise
    camid: int
    split: str  # train | query | gallery


@dataclass
class DatasetManifest:
    root: str
    items: list = field(default_factory=list)
    mean_rgb: tuple = (0.0, 0.0, 0.0)

    def split(self, name: str) -> list[ManifestItem]:
        return [it for it in self.items if it.split == name]

    @property
    def num_train_ids(self) -> int:
        return len({it.pid for it in self.items if it.split == "train"})

    def save(self, path=None) -> str:
        path = path or os.path.join(self.root, MANIFEST_NAME)
        lines = [MANIFEST_HEADER]
        for it in self.items:
            lines.append(f"{it.path}\t{it.raw_pid}\t{it.pid}\t{it.camid}\t{it.split}")
        for name, value in zip(("mean_r", "mean_g", "mean_b"), self.mean_rgb):
            lines.append(f"{name}\t{value:.9f}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if not lines or lines[0] != MANIFEST_HEADER:
            raise ValueError(f"{path}: not a dataset manifest")
        items = []
        mean = {}
        for ln in lines[1:]:
            parts = ln.split("\t")
            if parts[0] in ("mean_r", "mean_g", "mean_b"):
                mean[parts[0]] = float(parts[1])
                continue
            rel, raw_pid, pid, camid, split = parts
            items.append(ManifestItem(rel, int(raw_pid), int(pid), int(camid), split))
        return cls(
            root=os.path.dirname(os.path.abspath(path)),
            items=items,
            mean_rgb=(mean.get("mean_r", 0.0), mean.get("mean_g", 0.0), mean.get("mean_b", 0.0)),
        )


def _pixel_mean(root: str, items) -> tuple:
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for it in items:
        img = load_image(os.path.join(root, it.path))
        total += img.reshape(3, -1).mean(axis=1)
        count += 1
    if count == 0:
        return (0.0, 0.0, 0.0)
    return tuple((total / count).tolist())


def scan_market_dir(root) -> DatasetManifest:
    """Build a manifest from a Market-layout directory tree.

    Filenames must start with {pid}_c{cam}; negative pids mark gallery
    distractors. Malformed names are skipped (counted, not fatal). Train pids
    are remapped to a contiguous 0..K-1 range.
    """
    root = os.path.abspath(root)
    subdirs = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
    for sub in subdirs.values():
        if not os.path.isdir(os.path.join(root, sub)):
            raise FileNotFoundError(f"{root}: missing {sub}/ directory")

    skipped = 0
    raw_items: list[tuple[str, int, int, str]] = []
    for split, sub in subdirs.items():
        for name in sorted(os.listdir(os.path.join(root, sub))):
            m = _NAME_RE.match(name)
            if m is None:
                skipped += 1
                continue
            raw_pid, camid = int(m.group(1)), int(m.group(2))
            if raw_pid < 0 and split != "gallery":
                skipped += 1
                continue
            raw_items.append((os.path.join(sub, name), raw_pid, camid, split))

    train_pids = sorted({pid for _, pid, _, split in raw_items if split == "train"})
    if not train_pids:
        raise ValueError(f"{root}: empty train split")
    remap = {pid: i for i, pid in enumerate(train_pids)}

    items = [
        ManifestItem(rel, raw_pid, remap[raw_pid] if split == "train" else raw_pid, camid, split)
        for rel, raw_pid, camid, split in raw_items
    ]
    manifest = DatasetManifest(root=root, items=items)
    manifest.mean_rgb = _pixel_mean(root, manifest.split("train"))
    manifest.skipped = skipped
    return manifest


@dataclass
class SynthSpec:
    """Procedural identity dataset: colored band "persons" over noisy backgrounds.

    Identity fixes the band hues and proportions; each camera applies its own
    brightness/tint shift (strength `cam_strength`) plus additive noise; each
    image gets a random horizontal jitter and `clutter` randomly colored
    background rectangles. Identities split 50/50 into train and test; test
    images provide one query per camera, the rest gallery.
    """

    num_ids: int = 8
    cams: int = 2
    per_cam: int = 10
    height: int = 160
    width: int = 64
    noise: float = 0.05
    cam_strength: float = 0.1
    jitter: int = 3
    clutter: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_ids < 2:
            raise ValueError("need at least 2 identities for retrieval to be meaningful")
        if self.cams < 2:
            raise ValueError("need at least 2 cameras for cross-camera retrieval")
        if self.per_cam < 1 or self.height < 8 or self.width < 8:
            raise ValueError("invalid synthetic dataset geometry")


def _identity_palette(spec: SynthSpec, pid: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 1, pid)))
    # head / torso / legs colors, kept saturated and distinct per identity
    colors = rng.uniform(0.15, 0.95, size=(3, 3))
    fractions = np.array([0.2, 0.45, 0.35]) * rng.uniform(0.8, 1.2, size=3)
    fractions = fractions / fractions.sum()
    return colors, fractions


def _camera_transform(spec: SynthSpec, cam: int) -> tuple[float, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 2, cam)))
    brightness = 1.0 + spec.cam_strength * rng.uniform(-1.0, 1.0)
    tint = spec.cam_strength * rng.uniform(-0.5, 0.5, size=3)
    return brightness, tint


def _render_person(spec: SynthSpec, pid: int, cam: int, k: int) -> np.ndarray:
    h, w = spec.height, spec.width
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 3, pid, cam, k)))
    img = np.full((3, h, w), 0.5, dtype=np.float64)
    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, size=(3, h, w))
    for _ in range(spec.clutter):
        # background distractor: a random colored patch per image
        ch = int(rng.integers(h // 10, h // 3))
        cw = int(rng.integers(w // 8, w // 2))
        top = int(rng.integers(0, h - ch))
        left = int(rng.integers(0, w - cw))
        img[:, top : top + ch, left : left + cw] = rng.uniform(0.0, 1.0, size=3)[:, None, None]

    colors, fractions = _identity_palette(spec, pid)
    body_top, body_bottom = int(0.08 * h), int(0.95 * h)
    body_h = body_bottom - body_top
    x0 = w // 4 + int(rng.integers(-spec.jitter, spec.jitter + 1))
    x1 = x0 + w // 2
    x0, x1 = max(x0, 0), min(x1, w)
    row = body_top
    for color, frac in zip(colors, fractions):
        rows = int(round(frac * body_h))
        img[:, row : min(row + rows, body_bottom), x0:x1] = color[:, None, None]
        row += rows

    brightness, tint = _camera_transform(spec, cam)
    img = img * brightness + tint[:, None, None]
    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, size=(3, h, w))
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write a synthetic Market-layout dataset and its manifest; deterministic per spec."""
    out_dir = os.path.abspath(out_dir)
    subdirs = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
    for sub in subdirs.values():
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    num_train = spec.num_ids // 2
    items: list[ManifestItem] = []
    for pid in range(spec.num_ids):
        is_train = pid < num_train
        for cam in range(1, spec.cams + 1):
            for k in range(spec.per_cam):
                if is_train:
                    split = "train"
                else:
                    split = "query" if k == 0 else "gallery"
                name = f"{pid:04d}_c{cam}s1_{k:06d}_00.ppm"
                rel = os.path.join(subdirs[split], name)
                save_image(_render_person(spec, pid, cam, k), os.path.join(out_dir, rel))
                # train pids already span 0..K-1, so the remap is the identity
                items.append(ManifestItem(rel, pid, pid, cam, split))

    manifest = DatasetManifest(root=out_dir, items=items)
    manifest.mean_rgb = _pixel_mean(out_dir, manifest.split("train"))
    manifest.save()
    return manifest


def load_manifest(root_or_path) -> DatasetManifest:
    """Load manifest.txt from a dataset root, scanning the tree if absent."""
    if os.path.isfile(root_or_path):
        return DatasetManifest.load(root_or_path)
    path = os.path.join(root_or_path, MANIFEST_NAME)
    if os.path.isfile(path):
        return DatasetManifest.load(path)
    manifest = scan_market_dir(root_or_path)
    return manifest


class TrainData:
    """Train-split adapter handed to the training loop."""

    def __init__(self, manifest: DatasetManifest):
        self.items = manifest.split("train")
        self.root = manifest.root
        self.mean_rgb = manifest.mean_rgb

    def load(self, index: int) -> np.ndarray:
        return load_image(os.path.join(self.root, self.items[index].path))
