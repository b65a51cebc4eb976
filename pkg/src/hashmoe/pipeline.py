"""Coarse-to-fine rendering of ray batches through a :class:`MixtureField`.

The coarse pass evaluates density only and is not differentiated; its weights
drive inverse-CDF sampling of the fine samples, which are merged with the
coarse ones and rendered with gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hashmoe.errors import DataError
from hashmoe.experts import FieldOutput, MixtureField
from hashmoe.render import (
    RayBatch,
    RenderResult,
    SamplingConfig,
    bg_to_unit,
    composite,
    composite_backward,
    deltas,
    fg_to_unit,
    importance_fine,
    stratified,
    stratified_inverse,
)


@dataclass
class RenderPass:
    result: RenderResult
    field: FieldOutput
    t_fg: np.ndarray  # (R, Sf)
    t_bg: np.ndarray  # (R, Sb)


def _points(rays: RayBatch, t: np.ndarray) -> np.ndarray:
    return rays.origins[:, None, :] + t[:, :, None] * rays.dirs[:, None, :]


def _eval(model: MixtureField, rays: RayBatch, t_fg, t_bg, *, need_color, training, strategy, step, force_gate=None):
    R, Sf = t_fg.shape
    Sb = t_bg.shape[1]
    fg = fg_to_unit(_points(rays, t_fg).reshape(-1, 3))
    bg = bg_to_unit(_points(rays, t_bg).reshape(-1, 3))
    if need_color:
        fg_dirs = np.repeat(rays.dirs, Sf, axis=0)
        bg_dirs = np.repeat(rays.dirs, Sb, axis=0)
        fg_img = np.repeat(rays.image_ids, Sf)
        bg_img = np.repeat(rays.image_ids, Sb)
    else:
        fg_dirs = bg_dirs = fg_img = bg_img = None
    return model.forward(fg, bg, fg_dirs, bg_dirs, fg_img, bg_img, strategy=strategy,
                         need_color=need_color, training=training, step=step, force_gate=force_gate)


def _split(values: np.ndarray, R: int, Sf: int, Sb: int) -> np.ndarray:
    n_fg = R * Sf
    fg = values[:n_fg].reshape((R, Sf) + values.shape[1:])
    bg = values[n_fg:].reshape((R, Sb) + values.shape[1:])
    return np.concatenate([fg, bg], axis=1)


def sample_along(model: MixtureField, rays: RayBatch, scfg: SamplingConfig, rng=None, *, strategy="fused", step=None):
    """Coarse stratified samples, a density-only pass, then importance-sampled fine samples."""
    near = rays.near
    if scfg.near > 0:
        near = np.maximum(near, scfg.near)
        if np.any(near >= rays.fg_far):
            raise DataError(f"near = {scfg.near} reaches past the foreground exit of some rays")
    t_fg = stratified(near, rays.fg_far, scfg.fg_coarse, rng)
    t_bg = stratified_inverse(rays.fg_far, scfg.bg_far, scfg.bg_coarse, rng)
    if scfg.fg_fine == 0 and scfg.bg_fine == 0:
        return t_fg, t_bg
    coarse = _eval(model, rays, t_fg, t_bg, need_color=False, training=False, strategy=strategy, step=step)
    R = len(rays)
    sigma = _split(coarse.sigma, R, scfg.fg_coarse, scfg.bg_coarse)
    delta = np.concatenate([deltas(t_fg, rays.fg_far), deltas(t_bg, scfg.bg_far)], axis=1)
    w = composite(sigma, None, delta).weights
    if scfg.fg_fine:
        t_fg = importance_fine(t_fg, rays.fg_far, w[:, : scfg.fg_coarse], scfg.fg_fine, rng, eps=scfg.pdf_eps)
    if scfg.bg_fine:
        t_bg = importance_fine(t_bg, scfg.bg_far, w[:, scfg.fg_coarse :], scfg.bg_fine, rng, inverse=True,
                               eps=scfg.pdf_eps)
    return t_fg, t_bg


def render_rays(model: MixtureField, rays: RayBatch, scfg: SamplingConfig, rng=None, *, training=False,
                strategy="fused", step=None) -> RenderPass:
    t_fg, t_bg = sample_along(model, rays, scfg, rng, strategy=strategy, step=step)
    return render_at(model, rays, t_fg, t_bg, scfg, training=training, strategy=strategy, step=step)


def render_at(model: MixtureField, rays: RayBatch, t_fg, t_bg, scfg: SamplingConfig, *, training=False,
              strategy="fused", step=None, force_gate=None) -> RenderPass:
    """Render with fixed sample distances (foreground and background)."""
    out = _eval(model, rays, t_fg, t_bg, need_color=True, training=training, strategy=strategy, step=step,
                force_gate=force_gate)
    R, Sf, Sb = len(rays), t_fg.shape[1], t_bg.shape[1]
    sigma = _split(out.sigma, R, Sf, Sb)
    rgb = _split(out.rgb, R, Sf, Sb)
    delta = np.concatenate([deltas(t_fg, rays.fg_far), deltas(t_bg, scfg.bg_far)], axis=1)
    res = composite(sigma, rgb, delta, t=np.concatenate([t_fg, t_bg], axis=1),
                    background_color=scfg.background_color)
    return RenderPass(res, out, t_fg, t_bg)


def backward_rays(model: MixtureField, rp: RenderPass, dcolor: np.ndarray, grads, balance_weight: float = 0.0):
    dsigma, drgb = composite_backward(rp.result, dcolor)
    Sf = rp.t_fg.shape[1]
    dsig = np.concatenate([dsigma[:, :Sf].reshape(-1), dsigma[:, Sf:].reshape(-1)])
    drg = np.concatenate([drgb[:, :Sf].reshape(-1, 3), drgb[:, Sf:].reshape(-1, 3)])
    model.backward(rp.field, dsig, drg, grads, balance_weight)


def render_image_rays(model: MixtureField, rays: RayBatch, scfg: SamplingConfig, *, chunk: int = 2048,
                      strategy: str = "fused"):
    """Inference over many rays in chunks; returns (colors, depth, opacity, weight-sum check)."""
    colors, depth, opacity, conservation = [], [], [], []
    for s in range(0, len(rays), chunk):
        sub = rays.subset(slice(s, s + chunk))
        rp = render_rays(model, sub, scfg, None, training=False, strategy=strategy)
        colors.append(rp.result.color)
        depth.append(rp.result.depth)
        opacity.append(rp.result.opacity)
        conservation.append(rp.result.weights.sum(axis=1) + rp.result.final_transmittance)
    return (np.concatenate(colors), np.concatenate(depth), np.concatenate(opacity), np.concatenate(conservation))
