"""Deterministic synthetic generator of elongated/branched cells in two opposed
rendering domains (phase-contrast-like vs fluorescence-like)."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .datamodel import Dataset, Image, InstanceMask, read_pgm, relabel, write_pgm
from .errors import ConfigError, FormatError

PHASE_BG, PHASE_CELL, PHASE_HALO = 0.8, 0.25, 0.95
FLUOR_BG, FLUOR_CELL = 0.1, 0.85
MAX_PLACE_RETRIES = 50


@dataclass
class SynthConfig:
    seed: int = 0
    n_images: int = 16
    h: int = 64
    w: int = 64
    cells_per_image: tuple = (2, 4)
    radius: tuple = (2.0, 3.0)
    skeleton_length: tuple = (8, 18)
    curvature: float = 0.25  # max heading jitter per unit step, radians
    branch_prob: float = 0.2
    domain: str = "phase"
    noise_sigma: float = 0.03
    blur_sigma: float = 0.8

    def __post_init__(self):
        for name in ("cells_per_image", "radius", "skeleton_length"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range ({lo}, {hi}) is degenerate")
        if self.radius[0] < 1:
            raise ConfigError("radius must be >= 1 px")
        if self.domain not in ("phase", "fluor", "worm"):
            raise ConfigError(f"unknown domain {self.domain!r}")
        if self.n_images < 1 or self.h < 8 or self.w < 8:
            raise ConfigError("need n_images >= 1 and sides >= 8")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "n_images": self.n_images, "h": self.h, "w": self.w,
            "cells_per_image": list(self.cells_per_image), "radius": list(self.radius),
            "skeleton_length": list(self.skeleton_length), "curvature": self.curvature,
            "branch_prob": self.branch_prob, "domain": self.domain,
            "noise_sigma": self.noise_sigma, "blur_sigma": self.blur_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        kw = dict(d)
        for name in ("cells_per_image", "radius", "skeleton_length"):
            if name in kw:
                kw[name] = tuple(kw[name])
        return cls(**kw)


def _walk(rng, start, heading, length, curvature, lo, hi):
    """Unit-step random walk with bounded heading jitter, bouncing off the box [lo, hi]."""
    pts = [np.array(start, dtype=np.float64)]
    headings = [heading]
    p = pts[0].copy()
    for _ in range(length):
        heading += rng.uniform(-curvature, curvature)
        step = np.array([np.cos(heading), np.sin(heading)])
        nxt = p + step
        if not (lo <= nxt[0] <= hi[0]):
            heading = np.pi - heading
            nxt = p + np.array([np.cos(heading), np.sin(heading)])
        if not (lo <= nxt[1] <= hi[1]):
            heading = -heading
            nxt = p + np.array([np.cos(heading), np.sin(heading)])
        p = np.clip(nxt, lo, [hi[0], hi[1]])
        pts.append(p.copy())
        headings.append(heading)
    return np.array(pts), headings


def _sample_skeleton(rng, cfg: SynthConfig):
    """One cell's centerline as a list of polylines (main walk plus optional branch)."""
    r = rng.uniform(cfg.radius[0], cfg.radius[1])
    length = int(rng.integers(cfg.skeleton_length[0], cfg.skeleton_length[1] + 1))
    margin = r + 1.0
    lo = margin
    hi = (cfg.h - 1 - margin, cfg.w - 1 - margin)
    if hi[0] <= lo or hi[1] <= lo:
        raise ConfigError(f"radius {r:.1f} leaves no room in a {cfg.h}x{cfg.w} image")
    start = (rng.uniform(lo, hi[0]), rng.uniform(lo, hi[1]))
    heading = rng.uniform(0, 2 * np.pi)
    main, headings = _walk(rng, start, heading, length, cfg.curvature, lo, hi)
    polylines = [main]
    if rng.random() < cfg.branch_prob and length >= 4:
        at = int(rng.integers(length // 4, 3 * length // 4 + 1))
        side = 1.0 if rng.random() < 0.5 else -1.0
        b_heading = headings[at] + side * rng.uniform(np.pi / 6, np.pi / 2)
        b_len = max(2, length // 2)
        branch, _ = _walk(rng, main[at], b_heading, b_len, cfg.curvature, lo, hi)
        polylines.append(branch)
    return polylines, r


def _rasterize(polylines, radius, h, w) -> np.ndarray:
    """Pixels whose centers lie within `radius` of any centerline segment."""
    all_pts = np.vstack(polylines)
    r0 = max(int(np.floor(all_pts[:, 0].min() - radius - 1)), 0)
    r1 = min(int(np.ceil(all_pts[:, 0].max() + radius + 1)), h - 1)
    c0 = max(int(np.floor(all_pts[:, 1].min() - radius - 1)), 0)
    c1 = min(int(np.ceil(all_pts[:, 1].max() + radius + 1)), w - 1)
    ys, xs = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    px = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    best = np.full(px.shape[0], np.inf)
    for poly in polylines:
        if len(poly) == 1:
            seg_d = np.linalg.norm(px - poly[0], axis=1)
            best = np.minimum(best, seg_d)
            continue
        a, b = poly[:-1], poly[1:]
        ab = b - a
        denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
        # point-to-segment distance, vectorized over pixels x segments
        diff = px[:, None, :] - a[None, :, :]
        t = np.clip((diff * ab[None, :, :]).sum(axis=2) / denom[None, :], 0.0, 1.0)
        proj = a[None, :, :] + t[:, :, None] * ab[None, :, :]
        seg_d = np.linalg.norm(px[:, None, :] - proj, axis=2).min(axis=1)
        best = np.minimum(best, seg_d)
    grid = np.zeros((h, w), dtype=bool)
    grid[ys.ravel(), xs.ravel()] = best <= radius
    return grid


def _render(labels: np.ndarray, cfg: SynthConfig, rng) -> np.ndarray:
    cell = labels > 0
    if cfg.domain in ("phase", "worm"):
        img = np.full(labels.shape, PHASE_BG, dtype=np.float64)
        img[cell] = PHASE_CELL
        halo = ndimage.binary_dilation(cell, structure=np.ones((3, 3), bool)) & ~cell
        img[halo] = PHASE_HALO
    else:
        img = np.full(labels.shape, FLUOR_BG, dtype=np.float64)
        img[cell] = FLUOR_CELL
    if cfg.blur_sigma > 0:
        radius = int(np.ceil(3 * cfg.blur_sigma))
        k = np.arange(-radius, radius + 1, dtype=np.float64)
        kernel = np.exp(-(k**2) / (2 * cfg.blur_sigma**2))
        kernel /= kernel.sum()
        img = ndimage.convolve1d(img, kernel, axis=0, mode="nearest")
        img = ndimage.convolve1d(img, kernel, axis=1, mode="nearest")
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_image(cfg: SynthConfig, index: int):
    """One (Image, InstanceMask) pair; the RNG stream is seed ^ index so
    generation order is schedule-independent."""
    if cfg.radius[1] >= min(cfg.h, cfg.w) / 2:
        raise ConfigError("max radius must be below half the image side")
    rng = np.random.default_rng(int(cfg.seed) ^ int(index))
    labels = np.zeros((cfg.h, cfg.w), dtype=np.uint32)
    n_cells = int(rng.integers(cfg.cells_per_image[0], cfg.cells_per_image[1] + 1))
    next_label = 1
    for _ in range(n_cells):
        for _attempt in range(MAX_PLACE_RETRIES):
            polylines, r = _sample_skeleton(rng, cfg)
            raster = _rasterize(polylines, r, cfg.h, cfg.w)
            if not raster.any():
                continue
            if not (labels[raster] > 0).any():
                labels[raster] = next_label
                next_label += 1
                break
    img = _render(labels, cfg, rng)
    return Image(img), InstanceMask(labels)


def gen_dataset(cfg: SynthConfig, split: str = "train") -> Dataset:
    items = [gen_image(cfg, i) for i in range(cfg.n_images)]
    return Dataset(items=items, name=cfg.domain, split=split)


def write_dataset(ds: Dataset, out_dir, cfg: SynthConfig = None) -> None:
    """Emit img_####.pgm / msk_####.pgm pairs plus a manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i, (img, msk) in enumerate(ds.items):
        img_name, msk_name = f"img_{i:04d}.pgm", f"msk_{i:04d}.pgm"
        write_pgm(img, os.path.join(out_dir, img_name))
        write_pgm(msk, os.path.join(out_dir, msk_name))
        files.append({"image": img_name, "mask": msk_name})
    manifest = {"name": ds.name, "split": ds.split, "files": files}
    if cfg is not None:
        manifest["config"] = cfg.to_dict()
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_dataset(path) -> Dataset:
    """Read a dataset directory (manifest.json if present, else img_/msk_ pairs)."""
    manifest_path = os.path.join(path, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path) as f:
            manifest = json.load(f)
        name, split = manifest.get("name", "dataset"), manifest.get("split", "train")
        pairs = [(e["image"], e["mask"]) for e in manifest["files"]]
    else:
        name, split = os.path.basename(os.path.normpath(path)), "train"
        imgs = sorted(f for f in os.listdir(path) if f.startswith("img_") and f.endswith(".pgm"))
        pairs = [(f, f.replace("img_", "msk_", 1)) for f in imgs]
    items = []
    for img_name, msk_name in pairs:
        img = read_pgm(os.path.join(path, img_name))
        msk = read_pgm(os.path.join(path, msk_name))
        if not isinstance(img, Image) or not isinstance(msk, InstanceMask):
            raise FormatError(f"{img_name}/{msk_name}: expected an image/mask PGM pair")
        items.append((img, msk))
    return Dataset(items=items, name=name, split=split)


def crop_patches(ds: Dataset, size: int, seed: int) -> Dataset:
    """Uniform random square crops; clipped cells are kept and masks relabeled."""
    rng = np.random.default_rng(seed)
    items = []
    for img, msk in ds.items:
        if size > min(img.h, img.w):
            raise ConfigError(f"crop size {size} exceeds image {img.h}x{img.w}")
        r0 = int(rng.integers(0, img.h - size + 1))
        c0 = int(rng.integers(0, img.w - size + 1))
        sub_img = Image(img.data[r0 : r0 + size, c0 : c0 + size])
        sub_msk = InstanceMask(relabel(msk.labels[r0 : r0 + size, c0 : c0 + size]))
        items.append((sub_img, sub_msk))
    return Dataset(items=items, name=ds.name, split=ds.split)
