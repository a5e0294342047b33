"""Dataset preparation: stratified splits, bicubic degradation, paired patch sampling."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
MANIFEST_FORMAT = "segsr-manifest/1"
CUBIC_A = -0.5


# ---------------------------------------------------------------- bicubic kernel

def cubic_kernel(x, a=CUBIC_A):
    """Keys cubic convolution kernel; ``a=-0.5`` is the Catmull-Rom member."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


@lru_cache(maxsize=64)
def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``n_out x n_in`` interpolation matrix for one axis (float64, rows sum to 1).

    Output sample ``i`` sits at input coordinate ``(i + 0.5) * n_in / n_out - 0.5``.
    When downscaling, the kernel is stretched by the scale factor (antialiasing).
    Taps outside the image are clamped to the border pixel.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize sizes must be positive, got {n_in} -> {n_out}")
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    weights = np.zeros((n_out, n_in))
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    radius = 2.0 * stretch
    for i, c in enumerate(centers):
        taps = np.arange(math.floor(c - radius), math.ceil(c + radius) + 1)
        w = cubic_kernel((taps - c) / stretch)
        w = w / w.sum()
        np.add.at(weights[i], np.clip(taps, 0, n_in - 1), w)
    weights.setflags(write=False)
    return weights


def bicubic_resize(image, out):
    """Resize a ``C x H x W`` (or ``H x W``) array to ``out = (H', W')``.

    Computed in float64 and returned in the input's floating dtype; values
    are not clamped. Torch tensors are accepted and returned as numpy.
    """
    if hasattr(image, "detach"):
        image = image.detach().cpu().numpy()
    image = np.asarray(image)
    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float32
    h2, w2 = out
    if h2 < 1 or w2 < 1:
        raise ValueError(f"output size must be positive, got {out}")
    h, w = image.shape[-2:]
    wy = resize_weights(h, h2)
    wx = resize_weights(w, w2)
    res = np.einsum("ih,...hw,jw->...ij", wy, image.astype(np.float64), wx, optimize=True)
    return res.astype(dtype)


# ---------------------------------------------------------------- image I/O

@lru_cache(maxsize=512)
def _load_cached(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    arr = np.ascontiguousarray(arr.transpose(2, 0, 1))
    arr.setflags(write=False)
    return arr


def load_image(path) -> np.ndarray:
    """8-bit RGB file -> float32 ``3 x H x W`` array in [0, 1] (read-only, cached)."""
    return _load_cached(str(path))


def to_uint8(image) -> np.ndarray:
    if hasattr(image, "detach"):
        image = image.detach().cpu().numpy()
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def save_image(path, image) -> None:
    """Save a ``3 x H x W`` or ``H x W`` float image, clamped to [0, 1], as PNG."""
    arr = to_uint8(image)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", compress_level=6, optimize=False)


# ---------------------------------------------------------------- manifest

@dataclass
class DatasetManifest:
    root: str
    ratio: tuple
    seed: int
    classes: dict  # name -> {"train": [...], "test": [...]} (paths relative to root)
    scale: int | None = None

    def paths(self, split, classes=None):
        """``(absolute path, class name)`` pairs of a split, optionally filtered by class."""
        if split not in ("train", "test"):
            raise ValueError(f"unknown split {split!r}")
        if classes:
            unknown = sorted(set(classes) - set(self.classes))
            if unknown:
                raise ValueError(
                    f"unknown classes {unknown}; valid classes: {', '.join(sorted(self.classes))}"
                )
        names = sorted(classes) if classes else sorted(self.classes)
        root = Path(self.root)
        return [(root / rel, name) for name in names for rel in self.classes[name][split]]

    def counts(self):
        return {name: (len(v["train"]), len(v["test"])) for name, v in sorted(self.classes.items())}

    def to_json(self) -> str:
        doc = {
            "format": MANIFEST_FORMAT,
            "root": self.root,
            "ratio": list(self.ratio),
            "seed": self.seed,
            "scale": self.scale,
            "classes": {k: self.classes[k] for k in sorted(self.classes)},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path} is not a {MANIFEST_FORMAT} manifest")
        return cls(root=doc["root"], ratio=tuple(doc["ratio"]), seed=doc["seed"],
                   classes=doc["classes"], scale=doc.get("scale"))


def list_classes(root) -> dict:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    classes = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(
            p.relative_to(root).as_posix()
            for p in d.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not files:
            raise ValueError(f"class {d.name!r} contains no images")
        classes[d.name] = files
    if not classes:
        raise ValueError(f"no class subdirectories under {root}")
    return classes


def split_dataset(root, ratio=(3, 1), seed=0, scale=None) -> DatasetManifest:
    """Per-class seeded shuffle, then ``floor(n * train / (train + test))`` go to train."""
    n_train_part, n_test_part = ratio
    if n_train_part <= 0 or n_test_part < 0:
        raise ValueError(f"invalid split ratio {ratio}")
    rng = np.random.default_rng(seed)
    split = {}
    for name, files in list_classes(root).items():
        order = rng.permutation(len(files))
        n_train = (len(files) * n_train_part) // (n_train_part + n_test_part)
        shuffled = [files[i] for i in order]
        split[name] = {"train": sorted(shuffled[:n_train]), "test": sorted(shuffled[n_train:])}
    return DatasetManifest(root=str(Path(root).resolve()), ratio=tuple(ratio), seed=seed,
                           classes=split, scale=scale)


# ---------------------------------------------------------------- pairs and sampling

@dataclass
class PairedSample:
    hr: np.ndarray
    lr: np.ndarray
    class_name: str = ""
    path: str = ""
    transform: int = field(default=0)


def apply_dihedral(arr, t):
    """Dihedral transform ``t`` in 0..7: ``t % 4`` quarter turns, then a horizontal flip if ``t >= 4``."""
    out = np.rot90(arr, t % 4, axes=(-2, -1))
    if t >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(pair: PairedSample, rng, rotations=True) -> PairedSample:
    """Apply one uniformly drawn dihedral transform to both patches."""
    if rotations:
        for arr in (pair.hr, pair.lr):
            if arr.shape[-1] != arr.shape[-2]:
                raise ValueError(f"90-degree rotation needs square patches, got {arr.shape}")
        t = int(rng.integers(8))
    else:
        t = 4 * int(rng.integers(2))
    return PairedSample(apply_dihedral(pair.hr, t), apply_dihedral(pair.lr, t),
                        pair.class_name, pair.path, t)


def make_pair(hr, scale, class_name="", path="") -> PairedSample:
    h, w = hr.shape[-2:]
    if h % scale or w % scale:
        raise ValueError(f"HR size {h}x{w} not divisible by scale {scale}")
    return PairedSample(hr, bicubic_resize(hr, (h // scale, w // scale)), class_name, str(path))


def random_crop(image, size, rng):
    h, w = image.shape[-2:]
    top = int(rng.integers(h - size + 1))
    left = int(rng.integers(w - size + 1))
    return np.ascontiguousarray(image[..., top:top + size, left:left + size])


def sample_batch(manifest: DatasetManifest, patch_lr: int, batch: int, rng, scale: int,
                 split="train", do_augment=True, max_attempts=1000) -> list[PairedSample]:
    """Crop HR patches of ``patch_lr * scale`` at random, then bicubic-downscale each crop."""
    items = manifest.paths(split)
    if not items:
        raise ValueError(f"split {split!r} is empty")
    hr_size = patch_lr * scale
    out = []
    attempts = 0
    while len(out) < batch:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError(f"no image in split {split!r} is at least {hr_size}x{hr_size}")
        path, name = items[int(rng.integers(len(items)))]
        img = load_image(path)
        if min(img.shape[-2:]) < hr_size:
            log.warning("skipping %s: smaller than the %d px HR patch", path, hr_size)
            continue
        pair = make_pair(random_crop(img, hr_size, rng), scale, name, path)
        out.append(augment(pair, rng) if do_augment else pair)
    return out


def stack_pairs(pairs):
    """``(lr, hr)`` float32 batches ``B x 3 x H x W``."""
    lr = np.stack([p.lr for p in pairs]).astype(np.float32)
    hr = np.stack([p.hr for p in pairs]).astype(np.float32)
    return lr, hr


def mod_crop(image, multiple):
    h, w = image.shape[-2:]
    return image[..., : h - h % multiple, : w - w % multiple]


def degrade_tree(root, out, scale) -> int:
    """Write a bicubic LR mirror of every image under ``root``; returns the file count."""
    root, out = Path(root), Path(out)
    n = 0
    for name, files in list_classes(root).items():
        for rel in files:
            hr = mod_crop(load_image(root / rel), scale)
            h, w = hr.shape[-2:]
            save_image((out / rel).with_suffix(".png"), bicubic_resize(hr, (h // scale, w // scale)))
            n += 1
    return n
