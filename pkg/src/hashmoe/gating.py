"""Scene decomposition: gating networks, top-k routing, balance loss, dispatch plans.

Two gates produce per-point expert logits:

* :class:`HashGate` - hash-grid features followed by a small MLP.
* :class:`MlpGate` - positional encoding followed by a 4x256 MLP (legacy mode).

Three dispatch strategies move points to experts:

* ``uniform`` - fixed per-expert capacity ``ceil(k*B*C_f/n)``; overflow is
  dropped and underfull experts are padded (training only).
* ``full`` - stable counting sort by expert id, no drops, no pads.
* ``fused`` - no reordering at all; the expert id is folded into the hash-table
  row offset inside the encode kernel (see :mod:`hashmoe.experts`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from hashmoe.errors import ConfigError, ContractError, DivergenceError
from hashmoe.field_math import DenseMlp, mlp_backward, mlp_forward, positional_encoding, softmax, softmax_backward
from hashmoe.hash_grid import GridConfig, HashTableSet

STRATEGIES = ("uniform", "full", "fused")


@dataclass(frozen=True)
class GateConfig:
    n_experts: int = 8
    top_k: int = 1
    capacity_factor: float = 1.0
    mode: str = "hash"
    balance_weight: float = 5e-4
    batch_prioritized: bool = True
    grid: GridConfig = GridConfig()
    hidden_width: int = 64
    mlp_gate_width: int = 256
    pe_freqs: int = 10

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError("n_experts must be >= 1")
        if self.top_k not in (1, 2) or self.top_k > self.n_experts:
            raise ConfigError(f"top_k must be 1 or 2 and <= n_experts, got {self.top_k}")
        if self.capacity_factor <= 0:
            raise ConfigError("capacity_factor must be > 0")
        if self.balance_weight < 0:
            raise ConfigError("balance_weight must be >= 0")
        if self.mode not in ("hash", "mlp"):
            raise ConfigError(f"gate mode must be 'hash' or 'mlp', got {self.mode!r}")


@dataclass
class GateDecision:
    probs: np.ndarray  # (N, n)
    indices: np.ndarray  # (N, k) int64, chosen experts in descending probability
    values: np.ndarray  # (N, k) gate values of the chosen experts
    counts: np.ndarray  # (n,) routed assignments over all k choices
    f: np.ndarray  # (n,) hard fraction of points whose top-1 is i
    pbar: np.ndarray  # (n,) mean probability

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def top_k(self) -> int:
        return self.indices.shape[1]

    @property
    def top1(self) -> np.ndarray:
        return self.indices[:, 0]

    @classmethod
    def from_probs(cls, probs: np.ndarray, k: int = 1, ranking: np.ndarray | None = None) -> "GateDecision":
        """Top-k over ``ranking`` (defaults to ``probs``); ties go to the lower index."""
        n_pts, n = probs.shape
        ranking = probs if ranking is None else ranking
        if k == 1:
            idx = np.argmax(ranking, axis=1)[:, None]
        else:
            idx = np.argsort(-ranking, axis=1, kind="stable")[:, :k]
        idx = idx.astype(np.int64)
        values = np.take_along_axis(probs, idx, axis=1)
        counts = np.bincount(idx.ravel(), minlength=n)
        if n_pts:
            f = np.bincount(idx[:, 0], minlength=n) / n_pts
            pbar = probs.mean(axis=0)
        else:
            f = np.zeros(n)
            pbar = np.zeros(n)
        return cls(probs, idx, values, counts, f, pbar)

    @classmethod
    def from_logits(cls, logits: np.ndarray, k: int = 1) -> "GateDecision":
        # rank on logits: softmax underflow must not create artificial ties
        return cls.from_probs(softmax(logits, axis=1), k, ranking=logits)


@dataclass
class GateCache:
    owner: object
    inner: object


class HashGate:
    """Hash-grid features -> small MLP -> expert logits."""

    def __init__(self, cfg: GateConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.grid = HashTableSet(cfg.grid, rng=rng, dtype=dtype)
        w = cfg.hidden_width
        self.mlp = DenseMlp.create("gate.mlp", [self.grid.out_dim, w, w, cfg.n_experts], rng, dtype=dtype)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {"gate.grid": self.grid.data, **self.mlp.named_parameters()}

    def logits(self, points: np.ndarray):
        feat, gcache = self.grid.encode(points)
        z, mcache = mlp_forward(self.mlp, feat)
        return z, GateCache(self, (gcache, mcache))

    def backward(self, cache: GateCache, dz: np.ndarray, grads) -> None:
        if cache.owner is not self:
            raise ContractError("gate cache belongs to a different gate")
        gcache, mcache = cache.inner
        dfeat = mlp_backward(self.mlp, mcache, dz, grads)
        self.grid.backward(gcache, dfeat, grads["gate.grid"])


class MlpGate:
    """Positional encoding -> 4 linear layers of width 256 -> expert logits."""

    def __init__(self, cfg: GateConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        w = cfg.mlp_gate_width
        in_dim = 3 + 6 * cfg.pe_freqs
        self.mlp = DenseMlp.create("gate.mlp", [in_dim, w, w, w, cfg.n_experts], rng, dtype=dtype)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return self.mlp.named_parameters()

    def logits(self, points: np.ndarray):
        x = positional_encoding(points * 2 - 1, self.cfg.pe_freqs).astype(self.mlp.weights[0].dtype, copy=False)
        z, mcache = mlp_forward(self.mlp, x)
        return z, GateCache(self, mcache)

    def backward(self, cache: GateCache, dz: np.ndarray, grads) -> None:
        if cache.owner is not self:
            raise ContractError("gate cache belongs to a different gate")
        mlp_backward(self.mlp, cache.inner, dz, grads, need_dx=False)


def make_gate(cfg: GateConfig, rng: np.random.Generator, dtype=np.float32):
    return HashGate(cfg, rng, dtype) if cfg.mode == "hash" else MlpGate(cfg, rng, dtype)


def gate_forward(cfg: GateConfig, gate, xs: np.ndarray, step: int | None = None):
    """Route unit-cube points. Returns ``(GateDecision, cache)``."""
    z, cache = gate.logits(xs)
    if not np.all(np.isfinite(z)):
        bad = int(np.sum(~np.isfinite(z).all(axis=1)))
        raise DivergenceError(f"non-finite gate logits for {bad} of {z.shape[0]} points", step=step)
    return GateDecision.from_logits(z, cfg.top_k), cache


def gate_backward(gate, dec: GateDecision, cache, dvalues: np.ndarray | None, dpbar: np.ndarray | None, grads) -> None:
    """Backprop gradients w.r.t. the chosen gate values and the mean probabilities."""
    n_pts = dec.probs.shape[0]
    dprobs = np.zeros_like(dec.probs)
    if dpbar is not None and n_pts:
        dprobs += (np.asarray(dpbar) / n_pts).astype(dprobs.dtype)
    if dvalues is not None:
        rows = np.arange(n_pts)[:, None]
        dprobs[rows, dec.indices] += dvalues
    gate.backward(cache, softmax_backward(dec.probs, dprobs), grads)


def balance_loss(dec: GateDecision) -> float:
    """n * sum_i f_i * pbar_i; equals 1 when routing is perfectly balanced."""
    return float(dec.n_experts * np.dot(dec.f, dec.pbar))


def balance_loss_grad(dec: GateDecision) -> np.ndarray:
    """dL_b / dpbar (f is piecewise constant, so no gradient flows through it)."""
    return dec.n_experts * dec.f


@dataclass
class DispatchPlan:
    strategy: str
    n_experts: int
    top_k: int
    n_points: int
    routed: np.ndarray  # (n,) assignments per expert before capacity
    capacity: int | None = None
    # full: assignment ids (point * k + choice) grouped by expert
    order: np.ndarray | None = None
    offsets: np.ndarray | None = None
    inverse: np.ndarray | None = None
    # uniform: (n, capacity) assignment ids, -1 = pad
    slots: np.ndarray | None = None
    kept: np.ndarray | None = None  # (N, k) bool
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    pads: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def expert_range(self, e: int) -> np.ndarray:
        """Point indices handled by expert ``e`` (full plans)."""
        a = self.order[self.offsets[e] : self.offsets[e + 1]]
        return a // self.top_k


def expert_capacity(k: int, batch: int, capacity_factor: float, n: int) -> int:
    return math.ceil(Fraction(k * batch) * Fraction(repr(float(capacity_factor))) / n)


def plan_uniform(dec: GateDecision, cfg: GateConfig, batch: int | None = None) -> DispatchPlan:
    """Fixed-capacity plan; overflow assignments are dropped, free slots padded."""
    n, k = dec.n_experts, dec.top_k
    n_pts = dec.probs.shape[0]
    batch = n_pts if batch is None else batch
    cap = expert_capacity(k, batch, cfg.capacity_factor, n)
    if k * batch < n:
        warnings.warn(f"k*B = {k * batch} < n = {n}: some experts cannot receive any point", RuntimeWarning,
                      stacklevel=2)
    if cfg.batch_prioritized:
        point_order = np.argsort(-dec.values[:, 0], kind="stable")
    else:
        point_order = np.arange(n_pts)
    slots = np.full((n, cap), -1, np.int64)
    kept = np.zeros((n_pts, k), bool)
    fill = np.zeros(n, np.int64)
    for j in range(k):
        e = dec.indices[point_order, j]
        srt = np.argsort(e, kind="stable")
        e_sorted = e[srt]
        first = np.searchsorted(e_sorted, np.arange(n))
        rank = np.empty(n_pts, np.int64)
        rank[srt] = np.arange(n_pts) - first[e_sorted]
        pos = fill[e] + rank
        ok = pos < cap
        pts = point_order[ok]
        slots[e[ok], pos[ok]] = pts * k + j
        kept[pts, j] = True
        fill += np.bincount(e[ok], minlength=n)
    routed = dec.counts.astype(np.int64)
    return DispatchPlan(
        "uniform", n, k, n_pts, routed, capacity=cap, slots=slots, kept=kept,
        dropped=routed - fill, pads=cap - fill,
    )


def plan_full(dec: GateDecision) -> DispatchPlan:
    """Stable counting sort of assignments by expert; no drops, no pads."""
    n, k = dec.n_experts, dec.top_k
    experts = dec.indices.ravel()
    order = np.argsort(experts, kind="stable")
    offsets = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(experts, minlength=n), out=offsets[1:])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    routed = dec.counts.astype(np.int64)
    zeros = np.zeros(n, np.int64)
    return DispatchPlan("full", n, k, dec.probs.shape[0], routed, order=order, offsets=offsets,
                        inverse=inverse, dropped=zeros, pads=zeros.copy())


def plan_fused(dec: GateDecision) -> DispatchPlan:
    """Fused plans carry no permutation; the kernel reads expert ids directly."""
    zeros = np.zeros(dec.n_experts, np.int64)
    return DispatchPlan("fused", dec.n_experts, dec.top_k, dec.probs.shape[0], dec.counts.astype(np.int64),
                        dropped=zeros, pads=zeros.copy())


def make_plan(strategy: str, dec: GateDecision, cfg: GateConfig) -> DispatchPlan:
    if strategy == "uniform":
        return plan_uniform(dec, cfg)
    if strategy == "full":
        return plan_full(dec)
    if strategy == "fused":
        return plan_fused(dec)
    raise ConfigError(f"unknown dispatch strategy {strategy!r}; expected one of {STRATEGIES}")


def fused_hash_offset(expert_id: int, corner, level: int, pyramid) -> int:
    """Absolute table row of ``corner`` at ``level`` of expert ``expert_id``."""
    if not 0 <= expert_id < pyramid.n_experts:
        raise ConfigError(f"expert id {expert_id} out of range [0, {pyramid.n_experts})")
    return pyramid.tables.row_of(expert_id, level, corner)


def changing_rate(prev: np.ndarray | None, current: np.ndarray) -> float:
    """Fraction of probe points whose top-1 expert changed since ``prev``."""
    if prev is None:
        return float("nan")
    prev = np.asarray(prev)
    current = np.asarray(current)
    if prev.shape != current.shape:
        raise ConfigError("probe assignment shapes differ")
    if current.size == 0:
        return 0.0
    return float(np.count_nonzero(prev != current)) / current.size


def routing_record(dec: GateDecision, plan: DispatchPlan | None, lb: float) -> dict:
    return {
        "f": [float(v) for v in dec.f],
        "pbar": [float(v) for v in dec.pbar],
        "dropped": [int(v) for v in plan.dropped] if plan is not None else [0] * dec.n_experts,
        "L_b": float(lb),
    }
