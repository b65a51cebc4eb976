"""Rays, scene contraction, coarse-to-fine sampling, compositing and losses.

Everything downstream of the camera works in the *normalized* frame: world
positions minus the scene centre, divided by the scene radius. The
foreground is the unit ball; a ray's foreground segment ends where it leaves
the ball and its background segment runs from there to ``bg_far``, sampled
uniformly in inverse distance. Foreground points map to the unit cube as
``x / 2 + 1/2``; background points are contracted into the radius-2 ball
first and then mapped as ``c / 4 + 1/2``.

Compositing always runs in float64 (cheap at (rays, samples) size) so
``sum(weights) + T_final == 1`` holds far below the 1e-6 budget.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from hashmoe.errors import DataError

RAW_MAGIC = b"HMRAW001"


@dataclass
class Camera:
    """Pinhole camera. ``convention`` is "opengl" (x right, y up, looks down -z)
    or "drb" (camera axes down, right, back; the pinned Mega-NeRF variant)."""

    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray  # (3, 4) or (4, 4)
    width: int
    height: int
    convention: str = "opengl"

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, np.float64)[:3, :4]
        if self.fx <= 0 or self.fy <= 0:
            raise DataError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        rot = self.c2w[:, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise DataError("camera rotation is not orthonormal")
        if self.convention not in ("opengl", "drb"):
            raise DataError(f"unknown camera convention {self.convention!r}")

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:, 3].copy()

    def pixel_grid(self) -> np.ndarray:
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel(), v.ravel()], axis=1)

    def rays(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space origins and unit directions through pixel centres (u, v)."""
        pixels = np.asarray(pixels)
        u = pixels[:, 0].astype(np.float64)
        v = pixels[:, 1].astype(np.float64)
        if pixels.size and (u.min() < 0 or v.min() < 0 or u.max() >= self.width or v.max() >= self.height):
            raise DataError("pixel coordinates outside the image")
        a = (u + 0.5 - self.cx) / self.fx
        b = (v + 0.5 - self.cy) / self.fy
        if self.convention == "opengl":
            d_cam = np.stack([a, -b, -np.ones_like(a)], axis=1)
        else:
            d_cam = np.stack([b, a, -np.ones_like(a)], axis=1)
        d = d_cam @ self.c2w[:, :3].T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.c2w[:, 3], d.shape).copy()
        return o, d


def sample_rays(camera: Camera, pixels: np.ndarray):
    return camera.rays(pixels)


@dataclass(frozen=True)
class SceneBound:
    center: tuple[float, float, float]
    radius: float

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, np.float64) - np.asarray(self.center)) / self.radius

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.radius + np.asarray(self.center)


def contract(x: np.ndarray, scene_bound: SceneBound | None = None) -> np.ndarray:
    """Identity inside the unit ball, ``(2 - 1/|x|) x/|x|`` outside."""
    x = np.asarray(x, np.float64)
    if scene_bound is not None:
        x = scene_bound.normalize(x)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(norm, 1.0)
    scale = np.where(norm > 1.0, (2.0 - 1.0 / safe) / safe, 1.0)
    return x * scale


def uncontract(y: np.ndarray) -> np.ndarray:
    """Inverse of :func:`contract` on the open radius-2 ball."""
    y = np.asarray(y, np.float64)
    r = np.linalg.norm(y, axis=-1, keepdims=True)
    safe = np.maximum(r, 1.0)
    scale = np.where(r > 1.0, 1.0 / ((2.0 - safe) * safe), 1.0)
    return y * scale


def fg_to_unit(x: np.ndarray) -> np.ndarray:
    return np.clip(x * 0.5 + 0.5, 0.0, 1.0)


def bg_to_unit(x: np.ndarray) -> np.ndarray:
    return np.clip(contract(x) * 0.25 + 0.5, 0.0, 1.0)


def sphere_exit(origins: np.ndarray, dirs: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Distance along unit ``dirs`` to where each ray leaves the ball."""
    b = np.sum(origins * dirs, axis=1)
    c = np.sum(origins * origins, axis=1) - radius * radius
    disc = np.maximum(b * b - c, 0.0)
    return -b + np.sqrt(disc)


@dataclass(frozen=True)
class SamplingConfig:
    fg_coarse: int = 128
    fg_fine: int = 128
    bg_coarse: int = 64
    bg_fine: int = 64
    near: float = 0.0
    bg_far: float = 100.0
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    pdf_eps: float = 1e-5


@dataclass
class RayBatch:
    """Rays in the normalized frame."""

    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3) unit
    image_ids: np.ndarray  # (R,) int
    near: np.ndarray | None = None
    fg_far: np.ndarray | None = None

    def __post_init__(self):
        if self.near is None:
            self.near = np.zeros(len(self.origins))
        if self.fg_far is None:
            self.fg_far = sphere_exit(self.origins, self.dirs)
        if np.any(self.near >= self.fg_far):
            raise DataError("degenerate ray segment: near >= far (camera outside the scene bound?)")

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.image_ids[idx], self.near[idx], self.fg_far[idx])


def stratified(near, far, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """n stratified values per ray in [near, far]; bin midpoints when ``rng`` is None."""
    near = np.asarray(near, np.float64).reshape(-1, 1)
    far = np.asarray(far, np.float64).reshape(-1, 1)
    if np.any(near >= far):
        raise DataError("degenerate sampling interval: near >= far")
    u = np.full((near.shape[0], n), 0.5) if rng is None else rng.random((near.shape[0], n))
    return near + (np.arange(n) + u) / n * (far - near)


def stratified_inverse(start, far, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """n samples per ray stratified uniformly in 1/t between ``start`` and ``far``."""
    s = stratified(np.zeros_like(np.asarray(start, np.float64)), np.ones_like(np.asarray(start, np.float64)), n, rng)
    start = np.asarray(start, np.float64).reshape(-1, 1)
    inv = (1.0 - s) / start + s / far
    return 1.0 / inv


def deltas(t: np.ndarray, far) -> np.ndarray:
    """Segment lengths t_{i+1} - t_i; the last segment runs to ``far``."""
    far = np.broadcast_to(np.asarray(far, np.float64).reshape(-1, 1), (t.shape[0], 1))
    return np.diff(np.concatenate([t, far], axis=1), axis=1)


def sample_pdf(edges: np.ndarray, weights: np.ndarray, m: int, rng: np.random.Generator | None = None,
               eps: float = 1e-5) -> np.ndarray:
    """Inverse-CDF samples from piecewise-constant densities over ``edges`` (R, n+1)."""
    R, n = weights.shape
    w = np.asarray(weights, np.float64) + eps
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(m) + 0.5) / m, (R, m))
    else:
        u = (np.arange(m) + rng.random((R, m))) / m
    # row offsets make the flattened CDF monotone so one searchsorted suffices
    shift = 2.0 * np.arange(R)[:, None]
    idx = np.searchsorted((cdf + shift).ravel(), (u + shift).ravel(), side="right").reshape(R, m)
    idx = idx - (n + 1) * np.arange(R)[:, None] - 1
    idx = np.clip(idx, 0, n - 1)
    c0 = np.take_along_axis(cdf, idx, axis=1)
    p = np.take_along_axis(pdf, idx, axis=1)
    frac = np.clip((u - c0) / np.maximum(p, 1e-300), 0.0, 1.0)
    e0 = np.take_along_axis(edges, idx, axis=1)
    e1 = np.take_along_axis(edges, idx + 1, axis=1)
    return e0 + frac * (e1 - e0)


def importance_fine(t: np.ndarray, far, weights: np.ndarray, m: int, rng=None, *, inverse: bool = False,
                    eps: float = 1e-5) -> np.ndarray:
    """Fine samples from coarse weights, merged and sorted with the coarse ones.

    Bins are ``[t_i, t_{i+1})`` with the last ending at ``far``; with
    ``inverse=True`` samples are uniform in 1/t inside each bin.
    """
    far = np.broadcast_to(np.asarray(far, np.float64).reshape(-1, 1), (t.shape[0], 1))
    edges = np.concatenate([t, far], axis=1)
    if inverse:
        fine = 1.0 / sample_pdf(1.0 / edges, weights, m, rng, eps)
    else:
        fine = sample_pdf(edges, weights, m, rng, eps)
    return np.sort(np.concatenate([t, fine], axis=1), axis=1)


@dataclass
class RenderResult:
    color: np.ndarray  # (R, 3)
    opacity: np.ndarray  # (R,)
    depth: np.ndarray  # (R,)
    weights: np.ndarray  # (R, S)
    transmittance: np.ndarray  # (R, S) T_i
    final_transmittance: np.ndarray  # (R,)
    cache: dict = field(default_factory=dict, repr=False)


def composite(sigma: np.ndarray, rgb: np.ndarray | None, delta: np.ndarray, t: np.ndarray | None = None,
              background_color=(0.0, 0.0, 0.0)) -> RenderResult:
    """Alpha compositing: C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_final * bg."""
    sigma = np.asarray(sigma, np.float64)
    delta = np.asarray(delta, np.float64)
    tau = sigma * delta
    cum = np.cumsum(tau, axis=1)
    excl = np.concatenate([np.zeros((tau.shape[0], 1)), cum[:, :-1]], axis=1)
    T = np.exp(-excl)
    alpha = -np.expm1(-tau)
    w = T * alpha
    t_final = np.exp(-cum[:, -1]) if tau.shape[1] else np.ones(tau.shape[0])
    bg = np.asarray(background_color, np.float64)
    if rgb is not None:
        rgb = np.asarray(rgb, np.float64)
        color = np.einsum("rs,rsc->rc", w, rgb) + t_final[:, None] * bg
    else:
        color = np.zeros((tau.shape[0], 3))
    depth = (w * t).sum(axis=1) if t is not None else np.zeros(tau.shape[0])
    return RenderResult(color, 1.0 - t_final, depth, w, T, t_final,
                        cache=dict(rgb=rgb, delta=delta, bg=bg))


def composite_backward(res: RenderResult, dcolor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a loss w.r.t. per-sample sigma (R, S) and rgb (R, S, 3)."""
    rgb = res.cache["rgb"]
    delta = res.cache["delta"]
    w = res.weights
    drgb = w[:, :, None] * dcolor[:, None, :]
    cdot = np.einsum("rsc,rc->rs", rgb, dcolor)
    a = w * cdot
    suffix = a.sum(axis=1, keepdims=True) - np.cumsum(a, axis=1)
    bgdot = (dcolor @ res.cache["bg"])[:, None]
    dsigma = delta * ((res.transmittance - w) * cdot - suffix - res.final_transmittance[:, None] * bgdot)
    return dsigma, drgb


def rendering_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rays of the per-ray squared error summed over channels; returns (L_r, dL_r/dpred)."""
    diff = np.asarray(pred, np.float64) - np.asarray(gt, np.float64)
    R = diff.shape[0]
    return float(np.sum(diff * diff) / R), 2.0 * diff / R


def losses(pred: RenderResult | np.ndarray, gt: np.ndarray, dec=None, balance_weight: float = 5e-4):
    """(L_o, L_r, L_b) with L_o = L_r + lambda * L_b."""
    from hashmoe.gating import balance_loss

    color = pred.color if isinstance(pred, RenderResult) else pred
    l_r, _ = rendering_loss(color, gt)
    l_b = balance_loss(dec) if dec is not None else 0.0
    return l_r + balance_weight * l_b, l_r, l_b


# -- image output -------------------------------------------------------------


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    img = np.clip(np.asarray(image, np.float64), 0.0, 1.0)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


def write_raw(path, image: np.ndarray) -> None:
    """Header: 8-byte magic, then little-endian u32 height, width, channels; then f32 pixels."""
    img = np.asarray(image, np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<III", *img.shape))
        fh.write(img.astype("<f4").tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != RAW_MAGIC:
            raise DataError(f"{path}: not a raw image dump")
        h, w, c = struct.unpack("<III", fh.read(12))
        return np.frombuffer(fh.read(), "<f4").reshape(h, w, c).copy()
