"""Datasets: on-disk formats, scene bounds, and procedural synthetic scenes.

Native format (``TransformsJson``): a directory holding
``transforms_train.json`` and ``transforms_val.json``::

    {
      "fl_x": 137.2, "fl_y": 137.2, "cx": 64.0, "cy": 64.0, "w": 128, "h": 128,
      "scene_bound": {"center": [0, 0, 1.6], "radius": 3.3},      # optional
      "frames": [{"file_path": "train/r_000.png", "transform_matrix": [[...4x4...]]}]
    }

``camera_angle_x`` may replace the explicit intrinsics. Camera axes follow
the OpenGL convention (x right, y up, looking down -z).

Read-only ``MegaNerfLayout`` (one pinned variant)::

    coordinates.json|.pt      {"origin_drb": [3], "pose_scale_factor": s}
    {train,val}/metadata/<name>.json|.pt
                              {"W", "H", "intrinsics": [fx, fy, cx, cy], "c2w": 3x4}
    {train,val}/rgbs/<name>.jpg|.png

with ``c2w`` already re-centred/scaled by ``coordinates`` and whose columns
are the camera's down, right and back axes. ``.pt`` files need torch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hashmoe.errors import ConfigError, DataError
from hashmoe.render import (
    Camera,
    RayBatch,
    SceneBound,
    composite,
    deltas,
    sphere_exit,
    stratified,
    stratified_inverse,
)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".PNG", ".JPG")


@dataclass
class Dataset:
    images: list[np.ndarray]  # float32 (H, W, 3) in [0, 1]
    cameras: list[Camera]
    train_ids: list[int]
    val_ids: list[int]
    scene_bound: SceneBound
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise DataError(f"{len(self.images)} images but {len(self.cameras)} cameras")
        if set(self.train_ids) & set(self.val_ids):
            raise DataError("train and val splits overlap")
        if not self.train_ids:
            raise DataError("dataset has no training images")
        if not self.names:
            self.names = [f"{i:04d}" for i in range(len(self.images))]
        for i, cam in enumerate(self.cameras):
            if np.linalg.norm(self.scene_bound.normalize(cam.position)) > 1 + 1e-9:
                raise DataError(f"camera {self.names[i]} lies outside the scene bound")

    @property
    def n_train(self) -> int:
        return len(self.train_ids)

    def ae_row(self, index: int, mode: str = "nearest") -> int:
        """Appearance-embedding row: own row for train images, nearest train camera otherwise."""
        if mode != "nearest":
            raise ConfigError(f"unknown appearance mode {mode!r} (expected 'nearest')")
        if index in self.train_ids:
            return self.train_ids.index(index)
        pos = self.cameras[index].position
        d = [np.linalg.norm(self.cameras[t].position - pos) for t in self.train_ids]
        return int(np.argmin(d))

    def rays(self, index: int, ae_mode: str = "nearest") -> tuple[RayBatch, np.ndarray]:
        cam = self.cameras[index]
        o, d = cam.rays(cam.pixel_grid())
        ids = np.full(len(o), self.ae_row(index, ae_mode), np.int64)
        rays = RayBatch(self.scene_bound.normalize(o), d, ids)
        return rays, self.images[index].reshape(-1, 3)

    def train_rays(self) -> tuple[RayBatch, np.ndarray]:
        origins, dirs, ids, colors = [], [], [], []
        for row, i in enumerate(self.train_ids):
            cam = self.cameras[i]
            o, d = cam.rays(cam.pixel_grid())
            origins.append(self.scene_bound.normalize(o))
            dirs.append(d)
            ids.append(np.full(len(o), row, np.int64))
            colors.append(self.images[i].reshape(-1, 3))
        return RayBatch(np.concatenate(origins), np.concatenate(dirs), np.concatenate(ids)), np.concatenate(colors)


def compute_scene_bound(cameras: list[Camera], margin: float = 1.1) -> SceneBound:
    pos = np.stack([c.position for c in cameras])
    center = pos.mean(axis=0)
    radius = float(np.max(np.linalg.norm(pos - center, axis=1)) * margin)
    if radius <= 0:
        raise DataError("cannot derive a scene bound from coincident cameras; pass one explicitly")
    return SceneBound(tuple(float(v) for v in center), radius)


# -- TransformsJson ------------------------------------------------------------


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), np.float32) / 255.0
    return arr


def _resolve_image(root: Path, file_path: str) -> Path:
    p = root / file_path
    if p.suffix and p.exists():
        return p
    for suf in IMAGE_SUFFIXES:
        q = p.with_name(p.name + suf) if not p.suffix else p.with_suffix(suf)
        if q.exists():
            return q
    raise DataError(f"missing image file: {p}")


def _load_transforms(root: Path, scene_bound: SceneBound | None):
    images, cameras, names, splits = [], [], [], {"train": [], "val": []}
    bound_json = None
    errors = []
    for split in ("train", "val"):
        meta_path = root / f"transforms_{split}.json"
        if not meta_path.exists():
            if split == "train":
                raise DataError(f"missing {meta_path}")
            continue
        meta = json.loads(meta_path.read_text())
        bound_json = bound_json or meta.get("scene_bound")
        for fr in meta.get("frames", []):
            if "file_path" not in fr or "transform_matrix" not in fr:
                errors.append(f"{meta_path}: frame without file_path/transform_matrix")
                continue
            try:
                img_path = _resolve_image(root, fr["file_path"])
            except DataError as exc:
                errors.append(str(exc))
                continue
            img = _read_image(img_path)
            h, w = img.shape[:2]
            if "fl_x" in meta or "fl_x" in fr:
                fx = float(fr.get("fl_x", meta.get("fl_x")))
                fy = float(fr.get("fl_y", meta.get("fl_y", fx)))
            elif "camera_angle_x" in meta:
                fx = fy = 0.5 * w / math.tan(0.5 * float(meta["camera_angle_x"]))
            else:
                errors.append(f"{meta_path}: no focal length (fl_x or camera_angle_x)")
                continue
            cx = float(fr.get("cx", meta.get("cx", w / 2)))
            cy = float(fr.get("cy", meta.get("cy", h / 2)))
            cameras.append(Camera(fx, fy, cx, cy, np.asarray(fr["transform_matrix"], np.float64), w, h))
            images.append(img)
            names.append(fr["file_path"])
            splits[split].append(len(images) - 1)
    if errors:
        raise DataError("; ".join(errors))
    if scene_bound is None and bound_json is not None:
        scene_bound = SceneBound(tuple(float(v) for v in bound_json["center"]), float(bound_json["radius"]))
    return images, cameras, names, splits, scene_bound


def _load_torch_or_json(path_stem: Path):
    js = path_stem.with_suffix(".json")
    if js.exists():
        return json.loads(js.read_text())
    pt = path_stem.with_suffix(".pt")
    if pt.exists():
        try:
            import torch
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise DataError(f"{pt}: reading .pt metadata requires torch") from exc
        obj = torch.load(pt, map_location="cpu")
        return {k: (v.numpy().tolist() if hasattr(v, "numpy") else v) for k, v in obj.items()}
    raise DataError(f"missing metadata file: {path_stem}.json|.pt")


def _load_meganerf(root: Path, scene_bound: SceneBound | None):
    _load_torch_or_json(root / "coordinates")  # presence check; poses are pre-normalized
    images, cameras, names, splits = [], [], [], {"train": [], "val": []}
    errors = []
    for split in ("train", "val"):
        meta_dir = root / split / "metadata"
        if not meta_dir.is_dir():
            if split == "train":
                raise DataError(f"missing {meta_dir}")
            continue
        stems = sorted({p.stem for p in meta_dir.iterdir() if p.suffix in (".json", ".pt")})
        for stem in stems:
            meta = _load_torch_or_json(meta_dir / stem)
            missing = [k for k in ("W", "H", "intrinsics", "c2w") if k not in meta]
            if missing:
                errors.append(f"{meta_dir / stem}: missing keys {missing}")
                continue
            try:
                img_path = _resolve_image(root / split / "rgbs", stem)
            except DataError as exc:
                errors.append(str(exc))
                continue
            fx, fy, cx, cy = (float(v) for v in meta["intrinsics"])
            img = _read_image(img_path)
            if img.shape[:2] != (int(meta["H"]), int(meta["W"])):
                errors.append(f"{img_path}: size {img.shape[:2]} != metadata {(meta['H'], meta['W'])}")
                continue
            cameras.append(Camera(fx, fy, cx, cy, np.asarray(meta["c2w"], np.float64),
                                  int(meta["W"]), int(meta["H"]), convention="drb"))
            images.append(img)
            names.append(f"{split}/{stem}")
            splits[split].append(len(images) - 1)
    if errors:
        raise DataError("; ".join(errors))
    return images, cameras, names, splits, scene_bound


def detect_format(path: Path) -> str:
    path = Path(path)
    if (path / "transforms_train.json").exists():
        return "TransformsJson"
    if (path / "train" / "metadata").is_dir():
        return "MegaNerfLayout"
    raise DataError(f"{path}: cannot detect dataset format (no transforms_train.json or train/metadata/)")


def load_dataset(path, format: str | None = None, scene_bound: SceneBound | None = None) -> Dataset:
    root = Path(path)
    if not root.exists():
        raise DataError(f"dataset path does not exist: {root}")
    fmt = format or detect_format(root)
    if fmt == "TransformsJson":
        images, cameras, names, splits, bound = _load_transforms(root, scene_bound)
    elif fmt == "MegaNerfLayout":
        images, cameras, names, splits, bound = _load_meganerf(root, scene_bound)
    else:
        raise DataError(f"unknown dataset format {fmt!r}")
    if not cameras:
        raise DataError(f"{root}: no frames found")
    bound = bound or compute_scene_bound(cameras)
    return Dataset(images, cameras, splits["train"], splits["val"], bound, names)


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` in the TransformsJson layout (PNG images)."""
    from hashmoe.render import write_png

    root = Path(path)
    for split, ids in (("train", ds.train_ids), ("val", ds.val_ids)):
        (root / split).mkdir(parents=True, exist_ok=True)
        frames = []
        for i in ids:
            cam = ds.cameras[i]
            rel = f"{split}/r_{i:04d}.png"
            write_png(root / rel, ds.images[i])
            m = np.eye(4)
            m[:3, :4] = cam.c2w
            frames.append({"file_path": rel, "transform_matrix": m.tolist(),
                           "fl_x": cam.fx, "fl_y": cam.fy, "cx": cam.cx, "cy": cam.cy})
        cam0 = ds.cameras[ids[0]] if ids else ds.cameras[0]
        meta = {
            "w": cam0.width, "h": cam0.height,
            "scene_bound": {"center": list(ds.scene_bound.center), "radius": ds.scene_bound.radius},
            "frames": frames,
        }
        (root / f"transforms_{split}.json").write_text(json.dumps(meta, indent=1))


# -- procedural scenes ------------------------------------------------------------


def _box_sdf(q, half):
    d = np.abs(q) - half
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(np.max(d, axis=-1), 0.0)
    return outside + inside


def _box_surface(q, half):
    """Closest point on the box surface (box-local coordinates)."""
    s = np.clip(q, -half, half)
    inside = np.all(np.abs(q) < half, axis=-1)
    if np.any(inside):
        qi = q[inside]
        margin = half - np.abs(qi)
        ax = np.argmin(margin, axis=-1)
        si = qi.copy()
        rows = np.arange(qi.shape[0])
        si[rows, ax] = np.sign(qi[rows, ax] + 1e-300) * half[ax]
        s[inside] = si
    return s


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: np.ndarray
    size: np.ndarray  # radius (1,) or half extents (3,)
    base: np.ndarray  # rgb
    accent: np.ndarray  # rgb
    freq: float  # stripe frequency (rad / world unit) on the surface; 0 = flat
    axis: np.ndarray  # stripe direction
    softness: float
    sigma_max: float

    def sdf(self, x):
        q = x - self.center
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        return _box_sdf(q, self.size)

    def color(self, x):
        q = x - self.center
        if self.kind == "sphere":
            n = q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)
            s = n * self.size[0]
        else:
            s = _box_surface(q, self.size)
        if self.freq == 0:
            return np.broadcast_to(self.base, x.shape).copy()
        phase = self.freq * (s @ self.axis)
        mix = 0.5 + 0.5 * np.sin(phase)
        return self.base + mix[:, None] * (self.accent - self.base)


# bump when procedural content changes so cached renders are regenerated
LAYOUT_VERSION = 2


class SyntheticScene:
    """Closed-form density/colour field in world units (z up).

    Layouts: ``"city"`` (smooth ground, high-frequency clutter, distant
    buildings and a sky dome), ``"sphere"`` (one opaque sphere at the
    origin), ``"empty"`` (vacuum).
    """

    def __init__(self, seed: int = 0, layout: str = "city", sphere_radius: float = 1.0):
        self.seed = seed
        self.layout = layout
        self.prims: list[Primitive] = []
        self.ground = layout == "city"
        self.sky = layout == "city"
        rng = np.random.default_rng(seed)
        if layout == "city":
            self._build_city(rng)
        elif layout == "sphere":
            self.prims.append(Primitive("sphere", np.zeros(3), np.array([sphere_radius]), np.array([0.8, 0.3, 0.2]),
                                        np.array([0.8, 0.3, 0.2]), 0.0, np.array([1.0, 0, 0]), 0.002, 2000.0))
        elif layout != "empty":
            raise DataError(f"unknown synthetic layout {layout!r}")

    def _build_city(self, rng):
        palette = np.array([[0.85, 0.2, 0.15], [0.15, 0.45, 0.85], [0.95, 0.8, 0.2], [0.2, 0.7, 0.3],
                            [0.75, 0.35, 0.8], [0.95, 0.55, 0.15], [0.1, 0.75, 0.75], [0.9, 0.9, 0.9]])
        for j in range(10):
            r = 1.2 * math.sqrt(rng.uniform(0.05, 1.0))
            a = rng.uniform(0, 2 * math.pi)
            base = palette[rng.integers(len(palette))]
            accent = np.clip(1.0 - base + rng.uniform(-0.1, 0.1, 3), 0.05, 0.95)
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            freq = rng.uniform(18.0, 32.0)
            if j % 2 == 0:
                rad = rng.uniform(0.15, 0.32)
                c = np.array([r * math.cos(a), r * math.sin(a), rad])
                self.prims.append(Primitive("sphere", c, np.array([rad]), base, accent, freq, axis, 0.02, 60.0))
            else:
                half = rng.uniform(0.1, 0.28, 3)
                half[2] = rng.uniform(0.15, 0.45)
                c = np.array([r * math.cos(a), r * math.sin(a), half[2]])
                self.prims.append(Primitive("box", c, half, base, accent, freq, axis, 0.02, 60.0))
        for j in range(7):
            a = 2 * math.pi * j / 7 + rng.uniform(-0.2, 0.2)
            r = rng.uniform(5.0, 6.5)
            half = np.array([rng.uniform(0.4, 0.8), rng.uniform(0.4, 0.8), rng.uniform(0.8, 1.8)])
            c = np.array([r * math.cos(a), r * math.sin(a), half[2]])
            base = np.array([0.55, 0.5, 0.45]) + rng.uniform(-0.15, 0.15, 3)
            self.prims.append(Primitive("box", c, half, base, base, 0.0, np.array([1.0, 0, 0]), 0.05, 40.0))

    # ground: z < 0 inside a disk of radius 8, smooth colour
    def _ground_sdf(self, x):
        return np.maximum(x[:, 2], np.linalg.norm(x[:, :2], axis=1) - 8.0)

    def _ground_color(self, x):
        u = 0.5 + 0.5 * np.sin(0.7 * x[:, 0] + 0.3) * np.cos(0.5 * x[:, 1] - 0.2)
        lo = np.array([0.35, 0.42, 0.25])
        hi = np.array([0.55, 0.5, 0.35])
        return lo + u[:, None] * (hi - lo)

    def _sky_sdf(self, x):
        return 12.0 - np.linalg.norm(x, axis=1)

    def _sky_color(self, x):
        n = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
        e = np.clip(n[:, 2], -0.2, 1.0)
        top = np.array([0.25, 0.45, 0.85])
        hor = np.array([0.8, 0.85, 0.9])
        return hor + ((e + 0.2) / 1.2)[:, None] * (top - hor)

    def _components(self):
        """(sigma_max, softness, sdf, colour fn, bounding centre, bounding radius) per component."""
        comps = []
        for p in self.prims:
            reach = p.size[0] if p.kind == "sphere" else float(np.linalg.norm(p.size))
            comps.append((p.sigma_max, p.softness, p.sdf, p.color, p.center, reach + 14 * p.softness))
        if self.ground:
            comps.append((60.0, 0.02, self._ground_sdf, self._ground_color, None, None))
        if self.sky:
            comps.append((20.0, 0.3, self._sky_sdf, self._sky_color, None, None))
        return comps

    def density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, np.float64)
        sigma = np.zeros(x.shape[0])
        for smax, soft, sdf, _, _, _ in self._components():
            sigma = np.maximum(sigma, smax * _soft(-sdf(x) / soft))
        return sigma

    def density_along(self, origins: np.ndarray, dirs: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Density at ``origins + t * dirs`` (world units, unit dirs, sorted t of shape (R, S)).

        Matches :meth:`density` except that bounded components are only
        evaluated on samples inside their bounding sphere (the tail outside
        is below 1e-4 of the peak density).
        """
        R, S = t.shape
        pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
        flat = pts.reshape(-1, 3)
        sigma = np.zeros(R * S)
        for smax, soft, sdf, _, centre, reach in self._components():
            if centre is None:
                # unbounded components: skip points whose sdf is surely beyond the soft tail
                near = np.nonzero(sdf(flat) < 14 * soft)[0] if sdf is self._sky_sdf else np.nonzero(flat[:, 2] < 14 * soft)[0]
                sigma[near] = np.maximum(sigma[near], smax * _soft(-sdf(flat[near]) / soft))
                continue
            oc = origins - centre
            b = np.sum(oc * dirs, axis=1)
            disc = b * b - (np.sum(oc * oc, axis=1) - reach * reach)
            hit = disc > 0
            if not np.any(hit):
                continue
            rows = np.nonzero(hit)[0]
            root = np.sqrt(disc[rows])
            idx = _samples_between(t[rows], -b[rows] - root, -b[rows] + root)
            if idx.size == 0:
                continue
            gidx = rows[idx // S] * S + idx % S
            sigma[gidx] = np.maximum(sigma[gidx], smax * _soft(-sdf(flat[gidx]) / soft))
        return sigma.reshape(R, S)

    def color(self, x: np.ndarray) -> np.ndarray:
        """Colour of the densest contributing component at each point."""
        x = np.asarray(x, np.float64)
        best = np.full(x.shape[0], -1.0)
        rgb = np.zeros((x.shape[0], 3))
        for smax, soft, sdf, fn, centre, reach in self._components():
            if centre is None:
                sel = np.arange(x.shape[0])
            else:
                sel = np.nonzero(np.sum((x - centre) ** 2, axis=1) < reach * reach)[0]
            if sel.size == 0:
                continue
            s = smax * _soft(-sdf(x[sel]) / soft)
            take = s > best[sel]
            if np.any(take):
                rows = sel[take]
                rgb[rows] = fn(x[rows])
                best[rows] = s[take]
        return rgb


def _samples_between(t: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Flat indices into ``t`` (R, S), rows sorted, of entries with lo <= t <= hi per row."""
    R, S = t.shape
    width = float(np.max(t[:, -1] - t[:, 0])) + 2.0
    # shifting row r by r * width keeps the flattened array sorted, so one searchsorted serves all rows
    shift = width * np.arange(R)
    flat = (t - t[:, :1] + shift[:, None]).ravel()
    lo_s = np.clip(lo - t[:, 0], -0.5, width - 1.5) + shift
    hi_s = np.clip(hi - t[:, 0], -0.5, width - 1.5) + shift
    i0 = np.searchsorted(flat, lo_s, side="left") - np.arange(R) * S
    i1 = np.searchsorted(flat, hi_s, side="right") - np.arange(R) * S
    counts = np.maximum(i1 - i0, 0)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64)
    starts = np.arange(R) * S + i0
    return np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts) + np.arange(total)


def _soft(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def orbit_cameras(n_views: int, resolution: int, *, radius: float = 3.0, heights=(1.2, 2.0),
                  target=(0.0, 0.0, 0.4), fov_deg: float = 50.0, phase: float = 0.0) -> list[Camera]:
    f = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2)
    cams = []
    for i in range(n_views):
        a = phase + 2 * math.pi * i / n_views
        pos = np.array([radius * math.cos(a), radius * math.sin(a), heights[i % len(heights)]])
        cams.append(Camera(f, f, resolution / 2, resolution / 2, look_at(pos, np.asarray(target)),
                           resolution, resolution))
    return cams


def look_at(pos: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """OpenGL camera-to-world (3, 4): -z looks at ``target``."""
    fwd = target - pos
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    return np.column_stack([right, true_up, -fwd, pos])


def render_analytic(scene: SyntheticScene, rays: RayBatch, bound: SceneBound, *, fg_samples: int = 512,
                    bg_samples: int = 256, bg_far: float = 100.0, background_color=(0.0, 0.0, 0.0),
                    chunk: int = 512) -> np.ndarray:
    """Oracle renderer: evaluate the closed-form field at fixed stratified samples and composite."""
    out = np.empty((len(rays), 3))
    for s in range(0, len(rays), chunk):
        sub = rays.subset(slice(s, s + chunk))
        t_fg = stratified(sub.near, sub.fg_far, fg_samples)
        t_bg = stratified_inverse(sub.fg_far, bg_far, bg_samples)
        t = np.concatenate([t_fg, t_bg], axis=1)
        delta = np.concatenate([deltas(t_fg, sub.fg_far), deltas(t_bg, bg_far)], axis=1)
        pts = sub.origins[:, None, :] + t[:, :, None] * sub.dirs[:, None, :]
        world = bound.denormalize(pts.reshape(-1, 3))
        sigma = scene.density_along(bound.denormalize(sub.origins), sub.dirs, t * bound.radius) * bound.radius
        first = composite(sigma, None, delta)
        need = first.weights.reshape(-1) > 1e-9
        rgb = np.zeros((world.shape[0], 3))
        if np.any(need):
            rgb[need] = scene.color(world[need])
        res = composite(sigma, rgb.reshape(t.shape + (3,)), delta, background_color=background_color)
        out[s : s + chunk] = res.color
    return out


def generate_synthetic(seed: int = 0, n_views: int = 32, resolution: int = 128, *, layout: str = "city",
                       val_every: int = 8, fg_samples: int = 512, bg_samples: int = 256, bg_far: float = 100.0,
                       cameras: list[Camera] | None = None, scene_bound: SceneBound | None = None,
                       background_color=(0.0, 0.0, 0.0), cache_dir=None) -> tuple[Dataset, SyntheticScene]:
    """Render a procedural scene from an orbit of cameras with the oracle renderer.

    With ``cache_dir`` the rendered images are stored as ``.npz`` keyed by
    the arguments and reused on later calls (orbit cameras only).
    """
    if resolution > 256:
        raise DataError("synthetic scenes are limited to 256x256 images")
    scene = SyntheticScene(seed, layout)
    cams = cameras if cameras is not None else orbit_cameras(n_views, resolution, phase=0.1 * seed)
    bound = scene_bound or compute_scene_bound(cams)
    val = [i for i in range(len(cams)) if val_every and i % val_every == 0 and len(cams) > 1]
    train = [i for i in range(len(cams)) if i not in val]
    cache = None
    if cache_dir is not None and cameras is None:
        key = f"{layout}{LAYOUT_VERSION}_s{seed}_v{n_views}_r{resolution}_f{fg_samples}_b{bg_samples}_far{bg_far:g}_bg" + \
            "_".join(f"{c:g}" for c in background_color)
        cache = Path(cache_dir) / f"synthetic_{key}.npz"
        if cache.exists():
            with np.load(cache) as z:
                images = [z["images"][i] for i in range(len(cams))]
            return Dataset(images, cams, train, val, bound), scene
    images = []
    for cam in cams:
        o, d = cam.rays(cam.pixel_grid())
        rays = RayBatch(bound.normalize(o), d, np.zeros(len(o), np.int64))
        img = render_analytic(scene, rays, bound, fg_samples=fg_samples, bg_samples=bg_samples, bg_far=bg_far,
                              background_color=background_color)
        images.append(img.reshape(cam.height, cam.width, 3).astype(np.float32))
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache.with_name(cache.stem + ".tmp.npz")
        np.savez(tmp, images=np.stack(images))
        tmp.replace(cache)
    return Dataset(images, cams, train, val, bound), scene


__all__ = [
    "Dataset",
    "SyntheticScene",
    "compute_scene_bound",
    "detect_format",
    "generate_synthetic",
    "load_dataset",
    "orbit_cameras",
    "render_analytic",
    "save_dataset",
    "sphere_exit",
]
