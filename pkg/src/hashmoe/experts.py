"""Heterogeneous hash experts, the unified head, and the mixture field.

A foreground point ``x`` is routed by the gate to expert ``i`` and encoded as
``G_i(x) * E_i(x)`` (summed over both choices for top-2). Background points
skip the gate and use a single background grid. Both feed one shared head
that predicts ``sigma = softplus(raw)`` and ``rgb = sigmoid(raw)``, the colour
branch conditioned on the density branch's geometry feature, the SH-encoded
view direction and a per-image appearance embedding.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from hashmoe.errors import ConfigError, DataError
from hashmoe.field_math import (
    DenseMlp,
    mlp_backward,
    mlp_forward,
    positional_encoding,
    sh_encode,
    sigmoid,
    softplus,
)
from hashmoe.gating import (
    DispatchPlan,
    GateConfig,
    GateDecision,
    balance_loss_grad,
    gate_backward,
    gate_forward,
    make_gate,
    make_plan,
)
from hashmoe.hash_grid import GridConfig, HashTableSet

BASE_RANGE = (16, 512)
MAX_RANGE = (2048, 16384)


def pyramid_configs(
    n: int,
    heterogeneous: bool = True,
    *,
    levels: int = 16,
    features: int = 2,
    table_size: int = 2**19,
    base_range: tuple[int, int] = BASE_RANGE,
    max_range: tuple[int, int] = MAX_RANGE,
) -> list[GridConfig]:
    """Per-expert grid configs; resolutions are log-spaced across experts.

    Expert ``i`` gets ``round(geomspace(*base_range, n)[i])`` as base and
    ``round(geomspace(*max_range, n)[i])`` as max resolution. With
    ``heterogeneous=False`` every expert uses the first expert's range.
    """
    if n < 1:
        raise ConfigError("need at least one expert")
    if heterogeneous:
        bases = np.rint(np.geomspace(*base_range, n)).astype(int)
        maxes = np.rint(np.geomspace(*max_range, n)).astype(int)
    else:
        bases = np.full(n, base_range[0])
        maxes = np.full(n, max_range[0])
    return [
        GridConfig(levels=levels, features=features, table_size=table_size,
                   base_resolution=int(b), max_resolution=int(m))
        for b, m in zip(bases, maxes)
    ]


@dataclass(frozen=True)
class FieldConfig:
    n_experts: int = 8
    heterogeneous: bool = True
    expert_kind: str = "hash"
    levels: int = 16
    features: int = 2
    expert_table_size: int = 2**19
    base_range: tuple[int, int] = BASE_RANGE
    max_range: tuple[int, int] = MAX_RANGE
    gate: GateConfig = GateConfig()
    background: GridConfig = GridConfig()
    head_width: int = 64
    geo_features: int = 15
    sh_degree: int = 4
    ae_dim: int = 16
    n_images: int = 1
    renormalize_top2: bool = False
    mlp_expert_width: int = 64
    mlp_expert_freqs: int = 6
    dtype: str = "float32"

    def __post_init__(self):
        if self.gate.n_experts != self.n_experts:
            raise ConfigError(f"gate routes to {self.gate.n_experts} experts but field has {self.n_experts}")
        if self.expert_kind not in ("hash", "mlp"):
            raise ConfigError(f"expert_kind must be 'hash' or 'mlp', got {self.expert_kind!r}")
        if self.background.levels * self.background.features != self.levels * self.features:
            raise ConfigError("background grid must produce the same feature width as the experts")
        if self.n_images < 1:
            raise ConfigError("n_images must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features

    def expert_configs(self) -> list[GridConfig]:
        return pyramid_configs(
            self.n_experts, self.heterogeneous, levels=self.levels, features=self.features,
            table_size=self.expert_table_size, base_range=tuple(self.base_range), max_range=tuple(self.max_range),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        d["gate"] = GateConfig(**{**d["gate"], "grid": GridConfig(**d["gate"]["grid"])})
        d["background"] = GridConfig(**d["background"])
        d["base_range"] = tuple(d["base_range"])
        d["max_range"] = tuple(d["max_range"])
        return cls(**d)


class ExpertPyramid:
    """All expert hash grids in one table; row offsets carry the expert index."""

    kind = "hash"
    param_name = "expert_pyramid.tables"

    def __init__(self, configs: list[GridConfig], rng: np.random.Generator, dtype=np.float32):
        self.configs = configs
        self.tables = HashTableSet(configs, rng=rng, dtype=dtype)

    @property
    def n_experts(self) -> int:
        return len(self.configs)

    @property
    def out_dim(self) -> int:
        return self.tables.out_dim

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {self.param_name: self.tables.data}

    def encode(self, points, expert_ids):
        """Fused dispatch: one kernel pass, the expert id selects the row offset."""
        return self.tables.encode(points, expert_ids)

    def backward(self, cache, dfeat, grads) -> None:
        self.tables.backward(cache, dfeat, grads[self.param_name])

    def standalone(self, e: int) -> HashTableSet:
        return self.tables.standalone(e)

    def encode_expert(self, e: int, points):
        return self.standalone(e).encode(points)

    def backward_expert(self, e: int, cache, dfeat, grads) -> None:
        tables = cache.owner
        tables.backward(cache, dfeat, grads[self.param_name][self.tables.grid_rows(e)])


class MlpExperts:
    """Reduced MLP experts (positional encoding -> 2 hidden layers) for the legacy gate mode."""

    kind = "mlp"

    def __init__(self, n: int, out_dim: int, width: int, freqs: int, rng, dtype=np.float32):
        self.freqs = freqs
        self.mlps = [
            DenseMlp.create(f"experts.mlp{e}", [3 + 6 * freqs, width, width, out_dim], rng, dtype=dtype)
            for e in range(n)
        ]

    @property
    def n_experts(self) -> int:
        return len(self.mlps)

    @property
    def out_dim(self) -> int:
        return self.mlps[0].out_dim

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.mlps:
            out.update(m.named_parameters())
        return out

    def encode_expert(self, e: int, points):
        x = positional_encoding(points * 2 - 1, self.freqs).astype(self.mlps[e].weights[0].dtype, copy=False)
        return mlp_forward(self.mlps[e], x)

    def backward_expert(self, e: int, cache, dfeat, grads) -> None:
        mlp_backward(self.mlps[e], cache, dfeat, grads, need_dx=False)


class UnifiedHead:
    """Shared density (2-layer) and colour (3-layer) MLPs for every expert."""

    def __init__(self, feature_dim: int, cfg: FieldConfig, rng, dtype=np.float32):
        w = cfg.head_width
        self.geo = cfg.geo_features
        self.sh_degree = cfg.sh_degree
        self.density = DenseMlp.create("head.density", [feature_dim, w, 1 + self.geo], rng, dtype=dtype)
        color_in = self.geo + cfg.sh_degree**2 + cfg.ae_dim
        self.color = DenseMlp.create("head.color", [color_in, w, w, 3], rng, dtype=dtype)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {**self.density.named_parameters(), **self.color.named_parameters()}

    def forward(self, feat, sh, ae, need_color: bool = True):
        h, dcache = mlp_forward(self.density, feat)
        sigma_raw = h[:, 0]
        sigma = softplus(sigma_raw)
        if not need_color:
            return sigma, None, (dcache, None, sigma_raw, None)
        col_in = np.concatenate([h[:, 1:], sh, ae], axis=1)
        rgb_raw, ccache = mlp_forward(self.color, col_in)
        rgb = sigmoid(rgb_raw)
        return sigma, rgb, (dcache, ccache, sigma_raw, rgb)

    def backward(self, cache, dsigma, drgb, grads):
        """Returns (dfeat, dae)."""
        dcache, ccache, sigma_raw, rgb = cache
        dh = np.empty((dsigma.shape[0], 1 + self.geo), dsigma.dtype)
        dh[:, 0] = dsigma * sigmoid(sigma_raw)
        drgb_raw = drgb * rgb * (1 - rgb)
        dcol = mlp_backward(self.color, ccache, drgb_raw, grads)
        dh[:, 1:] = dcol[:, : self.geo]
        dae = dcol[:, self.geo + self.sh_degree**2 :]
        dfeat = mlp_backward(self.density, dcache, dh, grads)
        return dfeat, dae


class AppearanceTable:
    param_name = "appearance"

    def __init__(self, n_images: int, dim: int, rng, dtype=np.float32):
        self.data = (rng.standard_normal((n_images, dim)) * 0.01).astype(dtype)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {self.param_name: self.data}

    def lookup(self, image_ids: np.ndarray) -> np.ndarray:
        image_ids = np.asarray(image_ids)
        if image_ids.size and (image_ids.min() < 0 or image_ids.max() >= self.data.shape[0]):
            raise DataError(f"image id out of range [0, {self.data.shape[0]})")
        return self.data[image_ids]


@dataclass
class FieldOutput:
    sigma: np.ndarray  # (Nf + Nb,) density, foreground samples first
    rgb: np.ndarray | None  # (Nf + Nb, 3)
    n_fg: int
    decision: GateDecision | None = None
    plan: DispatchPlan | None = None
    cache: dict = field(default_factory=dict, repr=False)


class MixtureField:
    """Gate + expert pyramid + background grid + unified head + appearance embeddings."""

    def __init__(self, cfg: FieldConfig, seed: int = 0):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype).type
        rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.gate = make_gate(cfg.gate, rng, dtype) if cfg.n_experts > 1 else None
        if cfg.expert_kind == "hash":
            self.experts = ExpertPyramid(cfg.expert_configs(), rng, dtype)
        else:
            self.experts = MlpExperts(cfg.n_experts, cfg.feature_dim, cfg.mlp_expert_width,
                                      cfg.mlp_expert_freqs, rng, dtype)
        self.background = HashTableSet(cfg.background, rng=rng, dtype=dtype)
        self.head = UnifiedHead(cfg.feature_dim, cfg, rng, dtype)
        self.appearance = AppearanceTable(cfg.n_images, cfg.ae_dim, rng, dtype)

    def named_parameters(self) -> dict[str, np.ndarray]:
        params = {}
        if self.gate is not None:
            params.update(self.gate.named_parameters())
        params.update(self.experts.named_parameters())
        params["background.tables"] = self.background.data
        params.update(self.head.named_parameters())
        params.update(self.appearance.named_parameters())
        return params

    def mlps(self) -> list[DenseMlp]:
        out = [self.head.density, self.head.color]
        if self.gate is not None:
            out.append(self.gate.mlp)
        if isinstance(self.experts, MlpExperts):
            out.extend(self.experts.mlps)
        return out

    def bump_version(self) -> None:
        for m in self.mlps():
            m.version += 1

    # -- routing ---------------------------------------------------------------

    def route(self, fg_points: np.ndarray, step: int | None = None):
        if self.gate is None:
            n = fg_points.shape[0]
            probs = np.ones((n, 1), self.dtype)
            return GateDecision.from_probs(probs, 1), None
        return gate_forward(self.cfg.gate, self.gate, fg_points, step=step)

    def _expert_features(self, points, dec: GateDecision, plan: DispatchPlan):
        """Per-assignment expert features (N*k, D); assignment a = point*k + choice."""
        k = dec.top_k
        n_assign = points.shape[0] * k
        D = self.cfg.feature_dim
        ids = dec.indices.reshape(-1)
        if plan.strategy == "fused":
            if self.experts.kind != "hash":
                raise ConfigError("fused dispatch needs hash experts")
            pts = points if k == 1 else np.repeat(points, k, axis=0)
            feat, cache = self.experts.encode(pts, ids)
            return feat, ("fused", cache)
        feat = np.zeros((n_assign, D), self.dtype)
        caches = []
        if plan.strategy == "full":
            for e in range(plan.n_experts):
                a = plan.order[plan.offsets[e] : plan.offsets[e + 1]]
                if a.size == 0:
                    continue
                fe, c = self.experts.encode_expert(e, points[a // k])
                feat[a] = fe
                caches.append((e, a, c))
            return feat, ("full", caches)
        if plan.strategy == "uniform":
            cap = plan.capacity
            slots = plan.slots
            valid = slots >= 0
            buf_pts = np.zeros((plan.n_experts, cap, 3), points.dtype)
            buf_pts[valid] = points[slots[valid] // k]
            if self.experts.kind == "hash":
                buf_ids = np.repeat(np.arange(plan.n_experts, dtype=np.int32), cap)
                fbuf, c = self.experts.encode(buf_pts.reshape(-1, 3), buf_ids)
                fbuf = fbuf.reshape(plan.n_experts, cap, D)
                feat[slots[valid]] = fbuf[valid]
                return feat, ("uniform", (c, valid, slots))
            for e in range(plan.n_experts):
                fe, c = self.experts.encode_expert(e, buf_pts[e])
                feat[slots[e][valid[e]]] = fe[valid[e]]
                caches.append((e, c))
            return feat, ("uniform", (caches, valid, slots))
        raise ConfigError(f"unknown dispatch strategy {plan.strategy!r}")

    def _expert_backward(self, cache, dfeat_assign, grads) -> None:
        kind, inner = cache
        D = self.cfg.feature_dim
        if kind == "fused":
            self.experts.backward(inner, dfeat_assign, grads)
        elif kind == "full":
            for e, a, c in inner:
                self.experts.backward_expert(e, c, np.ascontiguousarray(dfeat_assign[a]), grads)
        else:
            c, valid, slots = inner
            n, cap = slots.shape
            dbuf = np.zeros((n, cap, D), dfeat_assign.dtype)
            dbuf[valid] = dfeat_assign[slots[valid]]
            if self.experts.kind == "hash":
                self.experts.backward(c, dbuf.reshape(-1, D), grads)
            else:
                for e, ce in c:
                    self.experts.backward_expert(e, ce, dbuf[e], grads)

    # -- forward / backward ----------------------------------------------------

    def forward(
        self,
        fg_points: np.ndarray,
        bg_points: np.ndarray,
        fg_dirs: np.ndarray,
        bg_dirs: np.ndarray,
        fg_images: np.ndarray,
        bg_images: np.ndarray,
        *,
        strategy: str = "fused",
        need_color: bool = True,
        training: bool = True,
        step: int | None = None,
        force_gate: np.ndarray | None = None,
    ) -> FieldOutput:
        """Evaluate the field on unit-cube foreground and background samples.

        ``force_gate`` (N, k) overrides the chosen gate values (used to zero a
        choice or pin ``G = 1``); it detaches them from the gate.
        """
        dt = self.dtype
        fg_points = np.asarray(fg_points, dt)
        bg_points = np.asarray(bg_points, dt)
        n_fg = fg_points.shape[0]
        if not training and strategy == "uniform":
            strategy = "full"
        if self.experts.kind == "mlp" and strategy == "fused":
            strategy = "full"
        dec, gcache = self.route(fg_points, step=step)
        plan = make_plan(strategy, dec, self.cfg.gate)
        e_assign, ecache = self._expert_features(fg_points, dec, plan)
        k = dec.top_k
        e_assign3 = e_assign.reshape(n_fg, k, -1)
        gvals = dec.values.astype(dt, copy=False) if force_gate is None else np.asarray(force_gate, dt)
        if k == 2 and self.cfg.renormalize_top2:
            total = gvals.sum(axis=1, keepdims=True)
            weights = gvals / total
        else:
            total = None
            weights = gvals
        e_hat = weights[:, 0:1] * e_assign3[:, 0]
        for j in range(1, k):
            e_hat = e_hat + weights[:, j : j + 1] * e_assign3[:, j]
        bg_feat, bcache = self.background.encode(bg_points) if bg_points.shape[0] else (
            np.zeros((0, self.cfg.feature_dim), dt), None)
        feat = np.concatenate([e_hat, bg_feat], axis=0)
        if need_color:
            dirs = np.concatenate([fg_dirs, bg_dirs], axis=0)
            sh = sh_encode(np.asarray(dirs, np.float64), self.cfg.sh_degree).astype(dt)
            images = np.concatenate([np.asarray(fg_images), np.asarray(bg_images)])
            ae = self.appearance.lookup(images)
        else:
            sh = ae = images = None
        sigma, rgb, hcache = self.head.forward(feat, sh, ae, need_color=need_color)
        cache = {}
        if training:
            cache = dict(gate=gcache, experts=ecache, e_assign=e_assign3, gvals=gvals, total=total,
                         background=bcache, head=hcache, images=images, forced=force_gate is not None)
        return FieldOutput(sigma, rgb, n_fg, dec, plan, cache)

    def backward(self, out: FieldOutput, dsigma: np.ndarray, drgb: np.ndarray, grads,
                 balance_weight: float = 0.0) -> None:
        """Accumulate all parameter gradients of ``L(sigma, rgb) + balance_weight * L_b``."""
        c = out.cache
        if not c:
            raise ConfigError("field output was produced without training caches")
        dt = self.dtype
        dfeat, dae = self.head.backward(c["head"], dsigma.astype(dt, copy=False), drgb.astype(dt, copy=False), grads)
        np.add.at(grads[AppearanceTable.param_name], c["images"], dae)
        n_fg = out.n_fg
        if c["background"] is not None:
            self.background.backward(c["background"], np.ascontiguousarray(dfeat[n_fg:]), grads["background.tables"])
        de_hat = dfeat[:n_fg]
        e3 = c["e_assign"]
        gvals = c["gvals"]
        k = e3.shape[1]
        total = c["total"]
        weights = gvals if total is None else gvals / total
        dassign = np.empty_like(e3)
        for j in range(k):
            dassign[:, j] = weights[:, j : j + 1] * de_hat
        self._expert_backward(c["experts"], dassign.reshape(n_fg * k, -1), grads)
        if self.gate is None or c["forced"]:
            return
        dweights = np.einsum("nd,nkd->nk", de_hat, e3)
        if total is None:
            dvals = dweights
        else:
            dvals = dweights / total - (dweights * gvals).sum(axis=1, keepdims=True) / total**2
        dpbar = balance_weight * balance_loss_grad(out.decision) if balance_weight else None
        gate_backward(self.gate, out.decision, c["gate"], dvals, dpbar, grads)


def field_forward(model: MixtureField, *args, **kwargs) -> FieldOutput:
    return model.forward(*args, **kwargs)


def field_backward(model: MixtureField, out: FieldOutput, dsigma, drgb, grads, balance_weight: float = 0.0) -> None:
    model.backward(out, dsigma, drgb, grads, balance_weight)
