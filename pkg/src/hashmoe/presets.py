"""Named configurations. ``toy`` is sized for a single CPU core and 128x128 synthetic scenes."""

from __future__ import annotations

from hashmoe.experts import FieldConfig
from hashmoe.gating import GateConfig
from hashmoe.hash_grid import GridConfig
from hashmoe.render import SamplingConfig
from hashmoe.trainer import TrainConfig

TOY_EXPERT_TABLE = 2**14
TOY_BASE_RANGE = (16, 64)
TOY_MAX_RANGE = (128, 512)


def toy_sampling() -> SamplingConfig:
    return SamplingConfig(fg_coarse=32, fg_fine=32, bg_coarse=16, bg_fine=16, bg_far=100.0)


def toy_field(n_images: int, n_experts: int = 8, *, heterogeneous: bool = True, top_k: int = 1,
              capacity_factor: float = 1.0, gate_mode: str = "hash", balance_weight: float = 5e-4) -> FieldConfig:
    """Toy mixture; a single expert gets the whole table budget of ``n_experts`` experts."""
    gate_grid = GridConfig(levels=8, features=2, table_size=2**12, base_resolution=8, max_resolution=128)
    budget = TOY_EXPERT_TABLE * 8
    return FieldConfig(
        n_experts=n_experts,
        heterogeneous=heterogeneous,
        levels=16,
        features=2,
        expert_table_size=budget // n_experts,
        base_range=TOY_BASE_RANGE,
        max_range=TOY_MAX_RANGE,
        gate=GateConfig(n_experts=n_experts, top_k=top_k, capacity_factor=capacity_factor, mode=gate_mode,
                        balance_weight=balance_weight, grid=gate_grid),
        background=GridConfig(levels=16, features=2, table_size=2**15, base_resolution=16, max_resolution=256),
        n_images=n_images,
    )


def toy_train(steps: int = 15_000, seed: int = 0, **overrides) -> TrainConfig:
    kw = dict(lr0=1e-2, lr_final=1e-3, steps=steps, rays_per_batch=256, seed=seed, sampling=toy_sampling(),
              log_every=100, probe_points=4096)
    kw.update(overrides)
    return TrainConfig(**kw)


def full_field(n_images: int, n_experts: int = 8, *, heterogeneous: bool = True, top_k: int = 1) -> FieldConfig:
    """Full-size configuration (tables of 2^19 per expert)."""
    return FieldConfig(n_experts=n_experts, heterogeneous=heterogeneous, n_images=n_images,
                       gate=GateConfig(n_experts=n_experts, top_k=top_k))


def full_train(steps: int = 50_000, seed: int = 0) -> TrainConfig:
    return TrainConfig(steps=steps, seed=seed)
