"""Multi-resolution hash encoding.

Level ``l`` has lattice resolution ``N_l = floor(N_min * b**l)`` with
``b = exp((ln N_max - ln N_min) / (L - 1))``; the last level is pinned to
``N_max`` and a ``1e-9`` slack guards the floor against ``b**l`` landing just
below an integer. Levels whose full lattice fits the table,
``(N_l + 1)**3 <= T``, are indexed densely (x fastest); finer levels use the
XOR-of-primes spatial hash masked to ``T``.

Several grids can share one contiguous table. :class:`GridLayout` holds the
``(grid, level)`` resolution / entry-count / row-offset arrays the kernels
consume, which is how the expert pyramid folds the expert index into the row
offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from hashmoe._backend import kernels
from hashmoe.errors import ConfigError, ContractError, InputDomainError

PRIMES = (1, 2654435761, 805459861)
DOMAIN_TOL = 1e-6


@dataclass(frozen=True)
class GridConfig:
    levels: int = 16
    features: int = 2
    table_size: int = 2**19
    base_resolution: int = 16
    max_resolution: int = 2048

    def __post_init__(self):
        if self.levels < 1 or self.features < 1:
            raise ConfigError(f"levels and features must be >= 1: {self}")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ConfigError(f"table_size must be a power of two, got {self.table_size}")
        if self.base_resolution < 1 or self.max_resolution < self.base_resolution:
            raise ConfigError(
                f"need 1 <= base_resolution <= max_resolution, got {self.base_resolution}, {self.max_resolution}"
            )

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.max_resolution) - math.log(self.base_resolution)) / (self.levels - 1))

    @cached_property
    def resolutions(self) -> tuple[int, ...]:
        b = self.growth
        res = [int(math.floor(self.base_resolution * b**l + 1e-9)) for l in range(self.levels)]
        if self.levels > 1:
            res[-1] = self.max_resolution
        return tuple(res)

    @cached_property
    def entries(self) -> tuple[int, ...]:
        return tuple(min(self.table_size, (r + 1) ** 3) for r in self.resolutions)

    @property
    def rows(self) -> int:
        return sum(self.entries)

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    @property
    def n_params(self) -> int:
        return self.rows * self.features


@dataclass(frozen=True)
class GridLayout:
    """Kernel-facing description of one or more grids packed into one table."""

    res: np.ndarray  # (G, L) int32
    entries: np.ndarray  # (G, L) int64
    offsets: np.ndarray  # (G, L) int64
    rows: int

    @classmethod
    def pack(cls, configs: list[GridConfig]) -> "GridLayout":
        levels = {c.levels for c in configs}
        feats = {c.features for c in configs}
        if len(levels) != 1 or len(feats) != 1:
            raise ConfigError("grids sharing one table must agree on levels and features")
        n_levels = levels.pop()
        res = np.zeros((len(configs), n_levels), np.int32)
        entries = np.zeros((len(configs), n_levels), np.int64)
        offsets = np.zeros((len(configs), n_levels), np.int64)
        row = 0
        for g, cfg in enumerate(configs):
            for l in range(n_levels):
                res[g, l] = cfg.resolutions[l]
                entries[g, l] = cfg.entries[l]
                offsets[g, l] = row
                row += cfg.entries[l]
        return cls(res, entries, offsets, row)


def spatial_hash(corner, level_entries: int, resolution: int | None = None) -> int:
    """Row of an integer lattice corner inside one level's table.

    Dense row-major (x fastest, stride ``resolution + 1``) when the lattice
    fits in ``level_entries``; otherwise XOR of coordinate-prime products
    masked to ``level_entries - 1`` (32-bit wrap-around).
    """
    if level_entries < 1:
        raise ConfigError("level_entries must be >= 1")
    cx, cy, cz = (int(c) for c in corner)
    if resolution is not None and (resolution + 1) ** 3 <= level_entries:
        s = resolution + 1
        return cx + s * (cy + s * cz)
    h = ((cx * PRIMES[0]) ^ (cy * PRIMES[1]) ^ (cz * PRIMES[2])) & 0xFFFFFFFF
    return h & (level_entries - 1)


@dataclass
class GridCache:
    """Inputs of an encode call; corner rows and weights are recomputed on demand."""

    owner: object
    points: np.ndarray
    grid_ids: np.ndarray


class HashTableSet:
    """Feature tables of one or more grids stored in a single (rows, F) array."""

    def __init__(self, configs: GridConfig | list[GridConfig], data: np.ndarray | None = None, *,
                 rng: np.random.Generator | None = None, dtype=np.float32, init_scale: float = 1e-4):
        self.configs = [configs] if isinstance(configs, GridConfig) else list(configs)
        self.layout = GridLayout.pack(self.configs)
        self.features = self.configs[0].features
        self.levels = self.configs[0].levels
        if data is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            data = rng.uniform(-init_scale, init_scale, size=(self.layout.rows, self.features)).astype(dtype)
        if data.shape != (self.layout.rows, self.features):
            raise ConfigError(f"table data shape {data.shape} != {(self.layout.rows, self.features)}")
        if not data.flags.c_contiguous:
            raise ConfigError("table data must be C-contiguous")
        self.data = data

    @property
    def n_grids(self) -> int:
        return len(self.configs)

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    def grid_rows(self, g: int) -> slice:
        start = int(self.layout.offsets[g, 0])
        return slice(start, start + self.configs[g].rows)

    def level_table(self, level: int, g: int = 0) -> np.ndarray:
        start = int(self.layout.offsets[g, level])
        return self.data[start : start + int(self.layout.entries[g, level])]

    def standalone(self, g: int) -> "HashTableSet":
        """Single-grid view sharing memory with grid ``g`` of this set."""
        return HashTableSet(self.configs[g], self.data[self.grid_rows(g)])

    def row_of(self, g: int, level: int, corner) -> int:
        """Absolute row of ``corner`` at ``level`` of grid ``g`` (the fused offset)."""
        return int(self.layout.offsets[g, level]) + spatial_hash(
            corner, int(self.layout.entries[g, level]), int(self.layout.res[g, level])
        )

    def encode(self, points: np.ndarray, grid_ids: np.ndarray | None = None) -> tuple[np.ndarray, GridCache]:
        """Interpolated features (N, L*F) for points in the unit cube."""
        points = _check_points(points, self.data.dtype)
        grid_ids = _grid_ids(grid_ids, points.shape[0], self.n_grids)
        out = np.empty((points.shape[0], self.out_dim), self.data.dtype)
        kernels.encode(self.data, points, grid_ids, self.layout.res, self.layout.entries, self.layout.offsets, out)
        return out, GridCache(self, points, grid_ids)

    def backward(self, cache: GridCache, dfeat: np.ndarray, table_grad: np.ndarray, want_dx: bool = False):
        """Scatter ``dfeat`` into ``table_grad``; optionally return dL/dpoints."""
        if cache.owner is not self:
            raise ContractError("grid cache belongs to a different table set")
        if dfeat.shape != (cache.points.shape[0], self.out_dim):
            raise ContractError(f"dfeat shape {dfeat.shape} does not match cached batch")
        if table_grad.shape != self.data.shape:
            raise ContractError(f"table_grad shape {table_grad.shape} != {self.data.shape}")
        dfeat = np.ascontiguousarray(dfeat, dtype=self.data.dtype)
        kernels.encode_backward(
            table_grad, cache.points, cache.grid_ids, self.layout.res, self.layout.entries, self.layout.offsets, dfeat
        )
        if want_dx:
            return self._position_grad(cache, dfeat)
        return None

    def corners(self, points: np.ndarray, grid_ids: np.ndarray | None = None):
        """Absolute corner rows (N, L, 8) and trilinear weights (N, L, 8)."""
        from hashmoe._fallback import _level_corners

        points = _check_points(points, self.data.dtype)
        grid_ids = _grid_ids(grid_ids, points.shape[0], self.n_grids)
        rows, weights = [], []
        for l in range(self.levels):
            r, w = _level_corners(points, grid_ids, self.layout.res, self.layout.entries, self.layout.offsets, l)
            rows.append(r)
            weights.append(w)
        return np.stack(rows, 1), np.stack(weights, 1)

    def _position_grad(self, cache: GridCache, dfeat: np.ndarray) -> np.ndarray:
        from hashmoe._fallback import _level_corners

        pts, gid = cache.points, cache.grid_ids
        F = self.features
        dx = np.zeros_like(pts)
        for l in range(self.levels):
            rows, _ = _level_corners(pts, gid, self.layout.res, self.layout.entries, self.layout.offsets, l)
            r = self.layout.res[gid, l].astype(pts.dtype)
            p = pts * r[:, None]
            c = np.clip(np.floor(p), 0, (r - 1)[:, None])
            frac = p - c
            d = dfeat[:, l * F : (l + 1) * F]
            for k in range(8):
                bits = ((k & 1), (k >> 1) & 1, (k >> 2) & 1)
                val = (self.data[rows[:, k]] * d).sum(axis=1)
                w1d = [frac[:, a] if bits[a] else 1 - frac[:, a] for a in range(3)]
                for a in range(3):
                    dw = (1.0 if bits[a] else -1.0) * r
                    others = w1d[(a + 1) % 3] * w1d[(a + 2) % 3]
                    dx[:, a] += val * dw * others
        return dx


def _check_points(points: np.ndarray, dtype) -> np.ndarray:
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ConfigError(f"points must have shape (N, 3), got {points.shape}")
    if points.size and (points.min() < -DOMAIN_TOL or points.max() > 1 + DOMAIN_TOL):
        raise InputDomainError(
            f"points outside the unit cube: range [{points.min():.6g}, {points.max():.6g}]"
        )
    return np.ascontiguousarray(np.clip(points, 0, 1), dtype=dtype)


def _grid_ids(grid_ids, n: int, n_grids: int) -> np.ndarray:
    if grid_ids is None:
        return np.zeros(n, np.int32)
    grid_ids = np.ascontiguousarray(grid_ids, dtype=np.int32)
    if grid_ids.shape != (n,):
        raise ConfigError(f"grid_ids shape {grid_ids.shape} != ({n},)")
    if n and (grid_ids.min() < 0 or grid_ids.max() >= n_grids):
        raise ConfigError(f"grid id out of range [0, {n_grids})")
    return grid_ids


def grid_encode(tables: HashTableSet, cfg: GridConfig, x: np.ndarray) -> tuple[np.ndarray, GridCache]:
    if tables.configs[0] != cfg or tables.n_grids != 1:
        raise ConfigError("grid_encode expects a single-grid table set built from cfg")
    return tables.encode(x)


def grid_backward(tables: HashTableSet, cfg: GridConfig, cache: GridCache, dfeat: np.ndarray,
                  table_grads: np.ndarray, want_dx: bool = False):
    if tables.configs[0] != cfg:
        raise ConfigError("grid_backward: config does not match table set")
    return tables.backward(cache, dfeat, table_grads, want_dx=want_dx)
