"""PSNR/SSIM metrics, tiled whole-image inference and metric reports."""
from __future__ import annotations

import csv
import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import DataError, PlanCoverageError, ShapeError
from .generator import to_image, to_tensor


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all pixels and channels; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM, averaged over all full windows and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window:
        raise ShapeError(f"image {a.shape[:2]} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    r = window // 2

    def local_mean(x):
        x = ndimage.correlate1d(x, g, axis=0, mode="reflect")
        x = ndimage.correlate1d(x, g, axis=1, mode="reflect")
        # keep only positions where the window fits entirely inside the image
        return x[r:-r, r:-r]

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a**2
    var_b = local_mean(b * b) - mu_b**2
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# -- tiling -------------------------------------------------------------------


@dataclass(frozen=True)
class TilePlan:
    tile: int = 256
    overlap: int = 32
    blend: str = "crop-center"

    def __post_init__(self):
        if self.tile < 1:
            raise PlanCoverageError(f"tile size must be positive, got {self.tile}")
        if not 0 <= self.overlap < self.tile:
            raise PlanCoverageError(f"overlap {self.overlap} must be in [0, tile={self.tile})")
        if self.blend not in ("crop-center", "feathered"):
            raise PlanCoverageError(f"unknown blend mode {self.blend!r}")


def tile_starts(length: int, tile: int, overlap: int) -> list[int]:
    if tile >= length:
        return [0]
    stride = tile - overlap
    starts = list(range(0, length - tile, stride))
    starts.append(length - tile)
    return starts


def tile_cores(length: int, tile: int, overlap: int):
    """Partition [0, length) into one core interval per tile, cutting overlaps at their middle."""
    starts = tile_starts(length, tile, overlap)
    size = min(tile, length)
    cuts = [0]
    for s0, s1 in zip(starts, starts[1:]):
        cuts.append((s1 + s0 + size) // 2)
    cuts.append(length)
    return [(s, cuts[i], cuts[i + 1]) for i, s in enumerate(starts)]


def coverage_count(height: int, width: int, plan: TilePlan) -> np.ndarray:
    """How many tile cores claim each pixel; a valid crop-center plan gives all ones."""
    count = np.zeros((height, width), dtype=np.int64)
    for _, r0, r1 in tile_cores(height, plan.tile, plan.overlap):
        for _, c0, c1 in tile_cores(width, plan.tile, plan.overlap):
            count[r0:r1, c0:c1] += 1
    return count


def _feather(length: int, start: int, size: int, total: int, overlap: int) -> np.ndarray:
    w = np.ones(size)
    ramp = np.arange(1, overlap + 1) / (overlap + 1)
    if overlap:
        if start > 0:
            w[:overlap] = ramp
        if start + size < total:
            w[-overlap:] = ramp[::-1]
    return w


@contextmanager
def size_independent_kernels(enabled: bool = True):
    """Turn off oneDNN convolutions, whose float rounding depends on the input width.

    The native kernels compute every output pixel with the same sequence of
    operations whatever the size of the image, which is what makes tiled and
    untiled inference agree bit for bit.
    """
    previous = torch.backends.mkldnn.enabled
    if enabled:
        torch.backends.mkldnn.enabled = False
    try:
        yield
    finally:
        torch.backends.mkldnn.enabled = previous


@torch.no_grad()
def direct_restore(image: np.ndarray, model, exact: bool = True) -> np.ndarray:
    """Untiled inference on an (H, W, 3) image."""
    with size_independent_kernels(exact):
        return to_image(model(to_tensor(image)))


@torch.no_grad()
def tiled_restore(image: np.ndarray, model, plan: TilePlan = TilePlan(), exact: bool = True) -> np.ndarray:
    """Run ``model`` tile by tile over an (H, W, 3) image and stitch the results.

    With ``crop-center`` blending each output pixel comes from the one tile in
    which it sits at least ``overlap / 2`` pixels from an internal tile edge, so a
    model whose receptive field radius is at most ``overlap / 2`` reproduces
    :func:`direct_restore` exactly.
    """
    with size_independent_kernels(exact):
        return _tiled(image, model, plan)


def _tiled(image, model, plan):
    H, W = image.shape[:2]
    out = np.zeros(image.shape, dtype=np.float32)
    rows = tile_cores(H, plan.tile, plan.overlap)
    cols = tile_cores(W, plan.tile, plan.overlap)
    th, tw = min(plan.tile, H), min(plan.tile, W)
    if plan.blend == "crop-center":
        claimed = np.zeros((H, W), dtype=np.int64)
        for rs, r0, r1 in rows:
            for cs, c0, c1 in cols:
                y = to_image(model(to_tensor(image[rs: rs + th, cs: cs + tw])))
                out[r0:r1, c0:c1] = y[r0 - rs: r1 - rs, c0 - cs: c1 - cs]
                claimed[r0:r1, c0:c1] += 1
        if not (claimed == 1).all():
            raise PlanCoverageError("tile plan does not cover the image exactly once")
        return out
    acc = np.zeros(image.shape, dtype=np.float64)
    weight = np.zeros((H, W, 1))
    for rs, _, _ in rows:
        for cs, _, _ in cols:
            y = to_image(model(to_tensor(image[rs: rs + th, cs: cs + tw])))
            w = np.outer(_feather(H, rs, th, H, plan.overlap), _feather(W, cs, tw, W, plan.overlap))
            acc[rs: rs + th, cs: cs + tw] += y * w[..., None]
            weight[rs: rs + th, cs: cs + tw] += w[..., None]
    if (weight == 0).any():
        raise PlanCoverageError("tile plan leaves pixels uncovered")
    return (acc / weight).astype(np.float32)


# -- reports ------------------------------------------------------------------


def _json_psnr(value: float) -> dict:
    if math.isinf(value):
        return {"psnr": None, "psnr_infinite": True}
    return {"psnr": value, "psnr_infinite": False}


@dataclass
class MetricsReport:
    rows: list  # dicts: id, psnr, ssim
    metadata: dict = field(default_factory=dict)
    baseline: list | None = None  # raw-LQ rows, same shape

    @staticmethod
    def _means(rows):
        if not rows:
            return math.nan, math.nan
        return (float(np.mean([r["psnr"] for r in rows])),
                float(np.mean([r["ssim"] for r in rows])))

    @property
    def mean_psnr(self) -> float:
        return self._means(self.rows)[0]

    @property
    def mean_ssim(self) -> float:
        return self._means(self.rows)[1]

    def to_dict(self) -> dict:
        def rows_json(rows):
            return [{"id": r["id"], **_json_psnr(r["psnr"]), "ssim": r["ssim"]} for r in rows]

        d = {
            "metadata": self.metadata,
            "images": rows_json(self.rows),
            "aggregate": {**_json_psnr(self.mean_psnr), "ssim": self.mean_ssim, "count": len(self.rows)},
        }
        if self.baseline is not None:
            bp, bs = self._means(self.baseline)
            d["identity_baseline"] = {
                "images": rows_json(self.baseline),
                "aggregate": {**_json_psnr(bp), "ssim": bs, "count": len(self.baseline)},
            }
        return d

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        """Writes ``<stem>.json`` and ``<stem>.csv``; returns both paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
        jpath.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(cpath, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model", "id", "psnr", "ssim"])
            groups = [("restored", self.rows)]
            if self.baseline is not None:
                groups.append(("identity", self.baseline))
            for name, rows in groups:
                for r in rows:
                    w.writerow([name, r["id"], repr(r["psnr"]), repr(r["ssim"])])
                mp, ms = self._means(rows)
                w.writerow([name, "MEAN", repr(mp), repr(ms)])
        return jpath, cpath


def evaluate(pairs, model, plan: TilePlan | None = None, against_identity: bool = False,
             metadata: dict | None = None) -> MetricsReport:
    """Restore every LQ image of ``pairs`` and score it against its HQ reference.

    ``pairs`` is a PairedDataset (or any iterable of ImagePair); rows are sorted
    by id. ``model`` maps a (1, 3, h, w) tensor to the restored tensor. Without
    a ``plan`` each image goes through the model in one piece.
    """
    pairs = sorted(pairs, key=lambda p: p.id)
    if not pairs:
        raise DataError("cannot evaluate an empty split")
    rows, baseline = [], []
    for p in pairs:
        lq, hq = p.load()
        restored = tiled_restore(lq, model, plan) if plan else direct_restore(lq, model)
        restored = np.clip(restored, 0.0, 1.0)
        rows.append({"id": p.id, "psnr": psnr(restored, hq), "ssim": ssim(restored, hq)})
        if against_identity:
            baseline.append({"id": p.id, "psnr": psnr(lq, hq), "ssim": ssim(lq, hq)})
    tiling = {"tile": plan.tile, "overlap": plan.overlap, "blend": plan.blend} if plan else {"tile": None}
    meta = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"), **tiling, **(metadata or {})}
    return MetricsReport(rows, meta, baseline if against_identity else None)


def plot_report(report: MetricsReport, path):
    """Per-image PSNR bar chart."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(report.rows)), 3))
    ids = [r["id"] for r in report.rows]
    vals = [min(r["psnr"], 100.0) for r in report.rows]
    ax.bar(ids, vals, label="restored")
    if report.baseline:
        ax.plot(ids, [min(r["psnr"], 100.0) for r in report.baseline], "k_", ms=14, label="LQ input")
        ax.legend()
    ax.set_ylabel("PSNR (dB)")
    ax.tick_params(axis="x", rotation=90)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_history(history: list, path, key: str = "loss_g"):
    """Training curve of one logged scalar."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot([h["step"] for h in history], [h[key] for h in history])
    ax.set_xlabel("step")
    ax.set_ylabel(key)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
