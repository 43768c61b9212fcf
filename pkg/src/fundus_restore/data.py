"""Paired LQ/HQ datasets, patch sampling, augmentation and synthetic fixtures.

Dataset layout on disk::

    root/
      train/lq/<id>.png   train/hq/<id>.png
      test/lq/<id>.png    test/hq/<id>.png
      manifest.jsonl      (optional; one JSON record per pair)

Images are 8- or 16-bit PNG and are normalised to float32 in [0, 1].
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import (ConfigError, DataError, DimensionMismatchError,
                     MissingCounterpartError, UnreadableFileError)

SPLITS = ("train", "test")
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


# -- image io -----------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Read a PNG as an (H, W, 3) float32 RGB array in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise UnreadableFileError(f"cannot decode image {path}")
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.shape[2] == 4:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2BGR)
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return (rgb.astype(np.float64) / scale).astype(np.float32)


def write_image(path, image: np.ndarray, bits: int = 8):
    """Write an (H, W, 3) array in [0, 1] as an 8- or 16-bit PNG."""
    peak, dtype = (65535.0, np.uint16) if bits == 16 else (255.0, np.uint8)
    q = np.round(np.clip(image, 0.0, 1.0) * peak).astype(dtype)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(q, cv2.COLOR_RGB2BGR)):
        raise DataError(f"failed to write {path}")


def png_size(path) -> tuple[int, int]:
    """(height, width) from the PNG header, without decoding pixels."""
    with open(path, "rb") as f:
        head = f.read(24)
    if len(head) < 24 or head[:8] != PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise UnreadableFileError(f"not a PNG file: {path}")
    width, height = struct.unpack(">II", head[16:24])
    return height, width


def image_bits(path) -> int:
    """Bit depth per channel of an image file: 16 for 16-bit PNGs, otherwise 8."""
    with open(path, "rb") as f:
        head = f.read(25)
    if len(head) == 25 and head[:8] == PNG_SIGNATURE and head[24] == 16:
        return 16
    return 8


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- dataset ------------------------------------------------------------------


@dataclass
class ImagePair:
    id: str
    lq_path: Path
    hq_path: Path
    split: str
    height: int
    width: int

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        lq, hq = read_image(self.lq_path), read_image(self.hq_path)
        if lq.shape != hq.shape:
            raise DimensionMismatchError(f"{self.id}: LQ {lq.shape} vs HQ {hq.shape}")
        return lq, hq


@dataclass
class PairedDataset:
    root: Path
    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.pairs]

    def split(self, name: str) -> "PairedDataset":
        return PairedDataset(self.root, [p for p in self.pairs if p.split == name])

    def subset(self, ids) -> "PairedDataset":
        wanted = set(ids)
        return PairedDataset(self.root, [p for p in self.pairs if p.id in wanted])


def load_dataset(root) -> PairedDataset:
    """Scan and validate a dataset tree. Every anomaly raises an error naming the pair."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    pairs = []
    seen = {}
    for split in SPLITS:
        lq_dir, hq_dir = root / split / "lq", root / split / "hq"
        for d in (lq_dir, hq_dir):
            if not d.is_dir():
                raise DataError(f"missing directory {d}")
        lq = {p.stem: p for p in lq_dir.iterdir() if p.is_file()}
        hq = {p.stem: p for p in hq_dir.iterdir() if p.is_file()}
        orphans = sorted(lq.keys() - hq.keys())
        if orphans:
            raise MissingCounterpartError(f"{lq[orphans[0]]} has no HQ counterpart in {hq_dir}")
        orphans = sorted(hq.keys() - lq.keys())
        if orphans:
            raise MissingCounterpartError(f"{hq[orphans[0]]} has no LQ counterpart in {lq_dir}")
        for pid in sorted(lq):
            if pid in seen:
                raise DataError(f"id {pid!r} appears in both {seen[pid]} and {split}")
            seen[pid] = split
            lq_size, hq_size = png_size(lq[pid]), png_size(hq[pid])
            if lq_size != hq_size:
                raise DimensionMismatchError(
                    f"{pid}: LQ is {lq_size[0]}x{lq_size[1]} but HQ is {hq_size[0]}x{hq_size[1]}"
                )
            pairs.append(ImagePair(pid, lq[pid], hq[pid], split, *lq_size))
    return PairedDataset(root, pairs)


def write_manifest(dataset: PairedDataset, path=None) -> Path:
    """One JSON line per pair: id, split, relative paths, dims and file checksums."""
    path = Path(path or dataset.root / "manifest.jsonl")
    with open(path, "w") as f:
        for p in sorted(dataset.pairs, key=lambda p: (p.split, p.id)):
            rec = {
                "id": p.id,
                "split": p.split,
                "lq": str(p.lq_path.relative_to(dataset.root)),
                "hq": str(p.hq_path.relative_to(dataset.root)),
                "height": p.height,
                "width": p.width,
                "lq_sha256": sha256_file(p.lq_path),
                "hq_sha256": sha256_file(p.hq_path),
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# -- sampling -----------------------------------------------------------------


def item_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, item) so results never depend on iteration order."""
    return np.random.default_rng([seed, epoch, index])


def crop_coords(height: int, width: int, size: int, rng: np.random.Generator):
    if size > height or size > width:
        raise DataError(f"patch size {size} is larger than the {height}x{width} image")
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return top, left


def crop_patch_pair(lq: np.ndarray, hq: np.ndarray, size: int, rng: np.random.Generator):
    """Same random ``size`` x ``size`` window from both images."""
    if lq.shape != hq.shape:
        raise DimensionMismatchError(f"LQ {lq.shape} vs HQ {hq.shape}")
    top, left = crop_coords(lq.shape[0], lq.shape[1], size, rng)
    window = (slice(top, top + size), slice(left, left + size))
    return lq[window], hq[window]


FLIPS = ("none", "h", "v")


def apply_transform(image: np.ndarray, flip: str, rot: int) -> np.ndarray:
    """Flip (none / horizontal / vertical) then rotate by ``rot`` x 90 degrees."""
    if flip == "h":
        image = image[:, ::-1]
    elif flip == "v":
        image = image[::-1]
    return np.ascontiguousarray(np.rot90(image, rot, axes=(0, 1)))


def draw_transform(rng: np.random.Generator):
    return FLIPS[int(rng.integers(3))], int(rng.integers(4))


def augment_pair(lq: np.ndarray, hq: np.ndarray, rng: np.random.Generator):
    flip, rot = draw_transform(rng)
    return apply_transform(lq, flip, rot), apply_transform(hq, flip, rot)


def kfold_split(ids, k: int, seed: int = 0):
    """Shuffle ``ids`` and cut into ``k`` folds whose sizes differ by at most one.

    Returns a list of (train_ids, valid_ids).
    """
    ids = list(ids)
    if not 2 <= k <= len(ids):
        raise ConfigError(f"k must be in [2, {len(ids)}], got {k}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(order, k)
    out = []
    for i, fold in enumerate(folds):
        valid = [ids[j] for j in fold]
        train = [ids[j] for f in folds[:i] + folds[i + 1:] for j in f]
        out.append((train, valid))
    return out


# -- synthetic degradation ----------------------------------------------------


@dataclass(frozen=True)
class DegradationSpec:
    """Blur + illumination + noise. Strength is sigma (gaussian), length (motion) or radius (defocus)."""

    blur: str = "gaussian"
    strength: float = 0.0
    angle: float = 0.0
    gain: float = 1.0
    bias: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self):
        if self.blur not in ("gaussian", "motion", "defocus"):
            raise ConfigError(f"unknown blur kind {self.blur!r}")
        if not 0.0 <= self.strength <= 64.0:
            raise ConfigError(f"blur strength {self.strength} outside [0, 64]")
        if not 0.0 < self.gain <= 4.0:
            raise ConfigError(f"gain {self.gain} outside (0, 4]")
        if not -1.0 <= self.bias <= 1.0:
            raise ConfigError(f"bias {self.bias} outside [-1, 1]")
        if not 0.0 <= self.noise_sigma <= 1.0:
            raise ConfigError(f"noise sigma {self.noise_sigma} outside [0, 1]")


def blur_kernel(kind: str, strength: float, angle: float = 0.0) -> np.ndarray:
    if kind == "defocus":
        r = int(np.ceil(strength))
        y, x = np.mgrid[-r: r + 1, -r: r + 1]
        k = (x * x + y * y <= strength * strength).astype(np.float64)
    elif kind == "motion":
        # Line segment of ``strength`` pixels, splatted bilinearly so short lengths still blur.
        half = max(strength - 1.0, 0.0) / 2
        r = int(np.ceil(half)) + 1
        k = np.zeros((2 * r + 1, 2 * r + 1))
        t = np.linspace(-half, half, max(2, int(np.ceil(8 * strength))))
        a = np.deg2rad(angle)
        xs, ys = r + t * np.cos(a), r - t * np.sin(a)
        x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
        fx, fy = xs - x0, ys - y0
        np.add.at(k, (y0, x0), (1 - fy) * (1 - fx))
        np.add.at(k, (y0, x0 + 1), (1 - fy) * fx)
        np.add.at(k, (y0 + 1, x0), fy * (1 - fx))
        np.add.at(k, (y0 + 1, x0 + 1), fy * fx)
    else:
        raise ConfigError(f"no explicit kernel for {kind!r}")
    return k / k.sum()


def synth_degrade(image: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Degrade an HQ image (H, W, 3) in [0, 1]; a pure function of (image, spec).

    Fixture use only: synthetic degradations are known to differ from real
    clinical ones, so these never stand in for real evaluation data.
    """
    spec.validate()
    dtype = image.dtype if np.issubdtype(np.asarray(image).dtype, np.floating) else np.float32
    out = np.asarray(image, dtype=np.float64)
    if spec.strength > 0:
        if spec.blur == "gaussian":
            out = ndimage.gaussian_filter(out, sigma=(spec.strength, spec.strength, 0), mode="reflect")
        else:
            k = blur_kernel(spec.blur, spec.strength, spec.angle)
            out = np.stack([ndimage.convolve(out[..., c], k, mode="reflect")
                            for c in range(out.shape[2])], axis=-1)
    if spec.gain != 1.0 or spec.bias != 0.0:
        out = out * spec.gain + spec.bias
    if spec.noise_sigma > 0:
        out = out + np.random.default_rng(spec.seed).normal(0.0, spec.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0).astype(dtype)


# -- procedural fixtures ------------------------------------------------------


def retina_image(size: int = 128, seed: int = 0) -> np.ndarray:
    """Retina-like test image: shaded disc, bright optic disc and branching dark vessels."""
    rng = np.random.default_rng(seed)
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size - 0.5
    rr = np.hypot(yy, xx)
    disc = rr < 0.46
    shade = np.clip(1.0 - 1.6 * rr**2, 0, 1)
    base = np.stack([0.78 * shade, 0.33 * shade, 0.12 * shade], axis=-1)

    texture = ndimage.gaussian_filter(rng.normal(size=(size, size)), size / 40)
    texture /= np.abs(texture).max() + 1e-12
    base *= (1.0 + 0.08 * texture)[..., None]

    side = rng.choice([-1.0, 1.0])
    oy, ox = rng.uniform(-0.05, 0.05), side * rng.uniform(0.18, 0.24)
    od = np.exp(-(((yy - oy) ** 2 + (xx - ox) ** 2) / (2 * 0.045**2)))
    base += od[..., None] * np.array([0.25, 0.35, 0.25])

    vessels = np.zeros((size, size))
    for _ in range(rng.integers(6, 10)):
        y, x = oy, ox
        theta = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(1.0, 2.2) * size / 256
        for _ in range(int(size * 1.2)):
            theta += rng.normal(0, 0.08)
            y += np.sin(theta) / size * 1.0
            x += np.cos(theta) / size * 1.0
            if np.hypot(y, x) > 0.46:
                break
            r, c = int((y + 0.5) * size), int((x + 0.5) * size)
            if 0 <= r < size and 0 <= c < size:
                vessels[r, c] = max(vessels[r, c], width)
    strength = ndimage.grey_dilation(vessels, size=3)
    strength = ndimage.gaussian_filter(strength, max(0.6, size / 256))
    strength = np.clip(strength / (strength.max() + 1e-12) * 1.4, 0, 1)
    base *= (1.0 - 0.55 * strength)[..., None]

    base *= disc[..., None]
    return np.clip(base, 0.0, 1.0).astype(np.float32)


def fixture_degradation(seed: int) -> DegradationSpec:
    rng = np.random.default_rng([seed, 1])
    return DegradationSpec(
        blur=str(rng.choice(["gaussian", "gaussian", "defocus", "motion"])),
        strength=float(rng.uniform(1.5, 2.5)),
        angle=float(rng.uniform(0, 180)),
        gain=float(rng.uniform(0.8, 0.95)),
        bias=float(rng.uniform(0.0, 0.03)),
        noise_sigma=float(rng.uniform(0.005, 0.015)),
        seed=seed,
    )


def make_fixture_pair(size: int = 128, seed: int = 0):
    """(lq, hq) quantised to 8 bits, exactly as they round-trip through PNG."""
    hq = retina_image(size, seed)
    lq = synth_degrade(hq, fixture_degradation(seed))
    q = lambda a: (np.round(a * 255.0) / 255.0).astype(np.float32)
    return q(lq), q(hq)


def write_fixture_tree(out_dir, n: int = 6, seed: int = 0, size: int = 128) -> PairedDataset:
    """Write ``n`` synthetic pairs in the dataset layout with a 3:1 train/test split."""
    out_dir = Path(out_dir)
    n_test = max(1, round(n / 4)) if n > 1 else 0
    for split in SPLITS:
        for kind in ("lq", "hq"):
            (out_dir / split / kind).mkdir(parents=True, exist_ok=True)
    for i in range(n):
        split = "train" if i < n - n_test else "test"
        lq, hq = make_fixture_pair(size, seed * 1000 + i)
        name = f"fx{i:03d}.png"
        write_image(out_dir / split / "lq" / name, lq)
        write_image(out_dir / split / "hq" / name, hq)
    ds = load_dataset(out_dir)
    write_manifest(ds)
    return ds


def write_quality_fixture(out_dir, per_grade: int = 8, seed: int = 0, size: int = 64) -> Path:
    """Three quality grades separated by blur: 0 sharp, 1 mild blur, 2 strong blur."""
    out_dir = Path(out_dir)
    sigmas = (0.0, 1.5, 3.5)
    for grade, sigma in enumerate(sigmas):
        for i in range(per_grade):
            img = retina_image(size, seed * 1000 + i)
            img = synth_degrade(img, DegradationSpec(strength=sigma, seed=i))
            write_image(out_dir / str(grade) / f"q{i:03d}.png", img)
    return out_dir
