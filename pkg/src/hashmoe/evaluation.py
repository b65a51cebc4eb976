"""Held-out evaluation, image rendering and decomposition export."""

from __future__ import annotations

import resource
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hashmoe.experts import MixtureField
from hashmoe.metrics import psnr, ssim
from hashmoe.pipeline import render_image_rays, sample_along
from hashmoe.render import Camera, RayBatch, SamplingConfig, deltas, fg_to_unit


@dataclass
class MetricsReport:
    names: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    seconds: float = 0.0
    peak_memory_mb: float = 0.0
    max_conservation_error: float = 0.0

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_dict(self) -> dict:
        return {
            "images": [{"name": n, "psnr": p, "ssim": s} for n, p, s in zip(self.names, self.psnr, self.ssim)],
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "seconds": self.seconds,
            "peak_memory_mb": self.peak_memory_mb,
            "max_conservation_error": self.max_conservation_error,
        }


def render_camera(model: MixtureField, cam: Camera, bound, scfg: SamplingConfig, ae_row: int = 0, *,
                  chunk: int = 2048, strategy: str = "full"):
    """Render a full image; returns (rgb (H, W, 3), depth (H, W), conservation (H*W,))."""
    o, d = cam.rays(cam.pixel_grid())
    rays = RayBatch(bound.normalize(o), d, np.full(len(o), ae_row, np.int64))
    color, depth, _, cons = render_image_rays(model, rays, scfg, chunk=chunk, strategy=strategy)
    return color.reshape(cam.height, cam.width, 3), depth.reshape(cam.height, cam.width), cons


def evaluate(model: MixtureField, dataset, split: str = "val", scfg: SamplingConfig | None = None, *,
             chunk: int = 2048, ae_mode: str = "nearest", limit: int | None = None) -> MetricsReport:
    """Render every image of ``split`` with full dispatch and score it against ground truth."""
    scfg = scfg or SamplingConfig()
    ids = dataset.val_ids if split == "val" else dataset.train_ids
    if limit is not None:
        ids = ids[:limit]
    report = MetricsReport()
    t0 = time.perf_counter()
    for i in ids:
        img, _, cons = render_camera(model, dataset.cameras[i], dataset.scene_bound, scfg,
                                     dataset.ae_row(i, ae_mode), chunk=chunk)
        gt = dataset.images[i]
        report.names.append(dataset.names[i])
        report.psnr.append(psnr(img, gt))
        report.ssim.append(ssim(img, gt))
        report.max_conservation_error = max(report.max_conservation_error, float(np.max(np.abs(cons - 1.0))))
    report.seconds = time.perf_counter() - t0
    report.peak_memory_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    return report


PLY_PROPS = [
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("alpha", "<f4"), ("expert", "<i4"), ("gate", "<f4"), ("density", "<f4"),
]
_PLY_TYPES = {"<f4": "float", "u1": "uchar", "<i4": "int"}


def decomposition_points(model: MixtureField, rays: RayBatch, bound, scfg: SamplingConfig, *,
                         min_alpha: float = 0.01, chunk: int = 1024) -> np.ndarray:
    """Foreground samples with alpha = 1 - exp(-sigma * delta) above ``min_alpha``, tagged by top-1 expert."""
    dtype = np.dtype(PLY_PROPS)
    parts = []
    for s in range(0, len(rays), chunk):
        sub = rays.subset(slice(s, s + chunk))
        t_fg, _ = sample_along(model, sub, scfg, None, strategy="full")
        pts = sub.origins[:, None, :] + t_fg[:, :, None] * sub.dirs[:, None, :]
        R, S = t_fg.shape
        flat = pts.reshape(-1, 3)
        dirs = np.repeat(sub.dirs, S, axis=0)
        imgs = np.repeat(sub.image_ids, S)
        out = model.forward(fg_to_unit(flat), np.zeros((0, 3)), dirs, np.zeros((0, 3)), imgs,
                            np.zeros(0, np.int64), strategy="full", training=False)
        sigma = out.sigma.reshape(R, S).astype(np.float64)
        alpha = -np.expm1(-sigma * deltas(t_fg, sub.fg_far))
        keep = alpha.reshape(-1) > min_alpha
        rec = np.zeros(int(keep.sum()), dtype)
        world = bound.denormalize(flat[keep])
        rec["x"], rec["y"], rec["z"] = world[:, 0], world[:, 1], world[:, 2]
        rgb = np.clip(np.round(out.rgb[keep] * 255), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
        rec["alpha"] = alpha.reshape(-1)[keep]
        rec["expert"] = out.decision.top1[keep]
        rec["gate"] = out.decision.values[keep, 0]
        rec["density"] = out.sigma[keep]
        parts.append(rec)
    return np.concatenate(parts) if parts else np.zeros(0, dtype)


def write_ply(path, points: np.ndarray) -> None:
    """Binary little-endian PLY with one vertex element."""
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}"]
    header += [f"property {_PLY_TYPES[t]} {n}" for n, t in PLY_PROPS]
    header.append("end_header")
    with open(Path(path), "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(points, np.dtype(PLY_PROPS)).tobytes())


def export_decomposition(model: MixtureField, rays: RayBatch, path, bound, scfg: SamplingConfig | None = None,
                         min_alpha: float = 0.01) -> int:
    pts = decomposition_points(model, rays, bound, scfg or SamplingConfig(), min_alpha=min_alpha)
    write_ply(path, pts)
    return len(pts)
