"""Shared builders and oracles for the test suite."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from hashmoe.experts import FieldConfig, MixtureField
from hashmoe.field_math import GradBuffer
from hashmoe.gating import GateConfig, balance_loss
from hashmoe.hash_grid import GridConfig
from hashmoe.pipeline import backward_rays, render_at, sample_along
from hashmoe.render import RayBatch, SamplingConfig, rendering_loss


def tiny_field_config(n_experts=4, top_k=1, dtype="float64", table_size=2**8, levels=4, n_images=3,
                      gate_mode="hash", expert_kind="hash", heterogeneous=True, renorm=False, **kw) -> FieldConfig:
    g = GridConfig(levels=levels, features=2, table_size=table_size, base_resolution=2, max_resolution=16)
    gate = GateConfig(n_experts=n_experts, top_k=top_k, mode=gate_mode, grid=g, hidden_width=16,
                      mlp_gate_width=16, pe_freqs=3, capacity_factor=kw.pop("capacity_factor", 1.0))
    return FieldConfig(n_experts=n_experts, levels=levels, expert_table_size=table_size, base_range=(2, 8),
                       max_range=(16, 64), heterogeneous=heterogeneous, gate=gate, background=g, head_width=16,
                       geo_features=7, sh_degree=2, ae_dim=4, n_images=n_images, dtype=dtype,
                       expert_kind=expert_kind, renormalize_top2=renorm, mlp_expert_width=16, mlp_expert_freqs=2, **kw)


def random_rays(rng, n, n_images=3) -> RayBatch:
    o = rng.uniform(-0.4, 0.4, (n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return RayBatch(o, d, rng.integers(0, n_images, n))


def scramble(model: MixtureField, rng, scale=0.5) -> None:
    """Give tables O(1) values so finite differences see healthy signals."""
    for name, p in model.named_parameters().items():
        if name.endswith(".grid") or name.endswith(".tables") or name == "appearance":
            p[...] = rng.uniform(-scale, scale, p.shape)


TINY_SAMPLING = SamplingConfig(fg_coarse=4, fg_fine=4, bg_coarse=3, bg_fine=3, bg_far=20.0,
                               background_color=(0.2, 0.3, 0.4))


class FixedRenderLoss:
    """L_o = L_r + lambda * L_b at frozen sample distances, with analytic gradients."""

    def __init__(self, model, rays, gt, scfg=TINY_SAMPLING, strategy="full", balance_weight=5e-4, force_gate=None):
        self.model, self.rays, self.gt, self.scfg = model, rays, gt, scfg
        self.strategy, self.lam, self.force_gate = strategy, balance_weight, force_gate
        self.t_fg, self.t_bg = sample_along(model, rays, scfg, None, strategy=strategy)

    def render(self, training=True):
        return render_at(self.model, self.rays, self.t_fg, self.t_bg, self.scfg, training=training,
                         strategy=self.strategy, force_gate=self.force_gate)

    def value(self) -> float:
        rp = self.render(training=False)
        l_r, _ = rendering_loss(rp.result.color, self.gt)
        lb = balance_loss(rp.field.decision) if self.model.gate is not None else 0.0
        return l_r + self.lam * lb

    def gradient(self) -> GradBuffer:
        rp = self.render(training=True)
        _, dcolor = rendering_loss(rp.result.color, self.gt)
        grads = GradBuffer.like(self.model.named_parameters())
        backward_rays(self.model, rp, dcolor, grads, self.lam if self.model.gate is not None else 0.0)
        return grads


def fd_check(loss: FixedRenderLoss, name: str, coords: np.ndarray, h=1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``loss`` w.r.t. flat ``coords`` of parameter ``name``."""
    p = loss.model.named_parameters()[name].reshape(-1)
    fd = np.empty(len(coords))
    for i, c in enumerate(coords):
        old = p[c]
        p[c] = old + h
        loss.model.bump_version()
        up = loss.value()
        p[c] = old - h
        loss.model.bump_version()
        down = loss.value()
        p[c] = old
        fd[i] = (up - down) / (2 * h)
    loss.model.bump_version()
    return fd


def pick_coords(grad: np.ndarray, rng, n_top=4, n_rand=2, rows=None) -> np.ndarray:
    """Largest-|g| coordinates plus random ones (optionally restricted to a row range)."""
    g = np.abs(grad).reshape(-1)
    width = grad.shape[1] if grad.ndim == 2 else 1
    if rows is not None:
        allowed = np.arange(rows.start * width, rows.stop * width)
    else:
        allowed = np.arange(g.size)
    top = allowed[np.argsort(-g[allowed], kind="stable")[:n_top]]
    rand = rng.choice(allowed, size=min(n_rand, allowed.size), replace=False)
    return np.unique(np.concatenate([top, rand]))


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def capacity_oracle(k, B, cf, n):
    """ceil(k * B * cf / n) in exact rational arithmetic."""
    num = Fraction(k * B) * Fraction(str(cf))
    return -((-num) // n)


def uniform_oracle(indices, values, n, cap, prioritized):
    """Straightforward loop: first choices of every point, then second choices."""
    n_pts, k = indices.shape
    order = sorted(range(n_pts), key=lambda p: -values[p, 0]) if prioritized else list(range(n_pts))
    fill = [0] * n
    kept = np.zeros((n_pts, k), bool)
    slots = [[] for _ in range(n)]
    for j in range(k):
        for p in order:
            e = indices[p, j]
            if fill[e] < cap:
                fill[e] += 1
                kept[p, j] = True
                slots[e].append(p * k + j)
    return kept, slots, fill
