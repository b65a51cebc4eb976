"""Training loop: Adam with exponential learning-rate decay, checkpoints, metrics and the routing probe.

Randomness is counter-based: every step draws from
``default_rng([seed, stream, step])``, and the ray sampler's epoch
permutations are derived the same way. A run is therefore fully determined
by (config, seed, step, parameters, moments), which is what a checkpoint
stores, so resuming reproduces an uninterrupted run bit for bit.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hashmoe._backend import kernels
from hashmoe.errors import CheckpointError, ConfigError, DivergenceError
from hashmoe.experts import FieldConfig, MixtureField
from hashmoe.field_math import GradBuffer
from hashmoe.gating import balance_loss, changing_rate
from hashmoe.pipeline import backward_rays, render_rays
from hashmoe.render import RayBatch, SamplingConfig, fg_to_unit, rendering_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"HMOECKPT"
CKPT_VERSION = 1

# counter-based RNG streams
_STREAM_SAMPLER = 1
_STREAM_JITTER = 2
_STREAM_PROBE = 3


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-4
    lr_final: float = 5e-5
    steps: int = 50_000
    rays_per_batch: int = 16384
    balance_weight: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_table: float = 1e-15
    eps_mlp: float = 1e-8
    seed: int = 0
    strategy: str = "fused"
    sampling: SamplingConfig = SamplingConfig()
    log_every: int = 100
    probe_points: int = 4096
    probe_every: int | None = None  # None: probe at every logging interval, 0: never
    checkpoint_every: int = 0
    deterministic: bool = True
    threads: int = 1

    @property
    def probe_interval(self) -> int:
        return self.log_every if self.probe_every is None else self.probe_every

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not self.lr_final > 0:
            raise ConfigError(f"lr_final must be > 0, got {self.lr_final}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.rays_per_batch < 1:
            raise ConfigError("rays_per_batch must be >= 1")
        if self.strategy not in ("uniform", "full", "fused"):
            raise ConfigError(f"unknown dispatch strategy {self.strategy!r}")

    def lr_at(self, step: int) -> float:
        return self.lr0 * (self.lr_final / self.lr0) ** (step / self.steps)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        s = dict(d.get("sampling", {}))
        if "background_color" in s:
            s["background_color"] = tuple(s["background_color"])
        d["sampling"] = SamplingConfig(**s)
        return cls(**d)


def is_table(name: str) -> bool:
    return name.endswith(".grid") or name.endswith(".tables")


class Adam:
    """Adam with per-group epsilon (hash tables vs dense layers). Moments share the parameter dtype."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def eps(self, name: str) -> float:
        return self.cfg.eps_table if is_table(name) else self.cfg.eps_mlp

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in params.items():
            kernels.adam_update(p.reshape(-1), grads[name].reshape(-1), self.m[name].reshape(-1),
                                self.v[name].reshape(-1), lr, b1, b2, self.eps(name), bias1, bias2)


class RaySampler:
    """Uniform over all training rays without replacement per epoch; stateless in the step index."""

    def __init__(self, n_rays: int, batch: int, seed: int):
        if n_rays < 1:
            raise ConfigError("no training rays")
        self.n = n_rays
        self.batch = batch
        self.seed = seed
        self._perm_epoch = None
        self._perm = None

    def _permutation(self, epoch: int) -> np.ndarray:
        if self._perm_epoch != epoch:
            self._perm = np.random.default_rng([self.seed, _STREAM_SAMPLER, epoch]).permutation(self.n)
            self._perm_epoch = epoch
        return self._perm

    def indices(self, step: int) -> np.ndarray:
        pos = step * self.batch + np.arange(self.batch, dtype=np.int64)
        epochs = pos // self.n
        out = np.empty(self.batch, np.int64)
        for e in np.unique(epochs):
            sel = epochs == e
            out[sel] = self._permutation(int(e))[pos[sel] % self.n]
        return out


@dataclass
class TrainState:
    model: MixtureField
    optim: Adam
    config: TrainConfig
    step: int = 0
    probe: np.ndarray | None = None  # (P, 3) unit-cube foreground points
    probe_assign: np.ndarray | None = None
    meta: dict = field(default_factory=dict)  # free-form JSON (scene spec, scene bound)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.model.named_parameters()

    def rng_state(self) -> dict:
        return {"kind": "counter", "seed": self.config.seed, "step": self.step}


def init_state(field_cfg: FieldConfig, train_cfg: TrainConfig) -> TrainState:
    model = MixtureField(field_cfg, seed=train_cfg.seed)
    return TrainState(model, Adam(model.named_parameters(), train_cfg), train_cfg)


def _divergence(state: TrainState, rays: RayBatch, colors, pred, loss, grads=None) -> DivergenceError:
    bad = ~np.all(np.isfinite(pred), axis=1)
    details = {
        "loss": loss,
        "ray_index": np.nonzero(bad)[0],
        "origins": rays.origins[bad],
        "dirs": rays.dirs[bad],
        "image_ids": rays.image_ids[bad],
        "colors": np.asarray(colors)[bad],
    }
    return DivergenceError(f"non-finite loss ({loss}); {int(bad.sum())} rays with non-finite colour",
                           step=state.step, details=details)


def train_step(state: TrainState, rays: RayBatch, colors: np.ndarray, grads: GradBuffer | None = None,
               lr: float | None = None) -> dict:
    """One forward/backward/Adam update on a ray batch; mutates ``state`` and returns metrics.

    ``lr`` overrides the scheduled learning rate for this step.
    """
    cfg = state.config
    model = state.model
    params = model.named_parameters()
    if grads is None:
        grads = GradBuffer.like(params)
    else:
        grads.zero_()
    if lr is None:
        lr = cfg.lr_at(state.step)
    rng = np.random.default_rng([cfg.seed, _STREAM_JITTER, state.step])
    rp = render_rays(model, rays, cfg.sampling, rng, training=True, strategy=cfg.strategy, step=state.step)
    l_r, dcolor = rendering_loss(rp.result.color, colors)
    dec = rp.field.decision
    l_b = balance_loss(dec) if model.gate is not None else 1.0
    loss = l_r + cfg.balance_weight * l_b
    if not math.isfinite(loss):
        raise _divergence(state, rays, colors, rp.result.color, loss)
    backward_rays(model, rp, dcolor, grads, cfg.balance_weight if model.gate is not None else 0.0)
    state.optim.step(params, grads, lr)
    model.bump_version()
    state.step += 1
    mse = l_r / 3.0
    return {
        "step": state.step,
        "loss": loss,
        "L_r": l_r,
        "L_b": l_b,
        "psnr": 99.0 if mse <= 0 else min(99.0, -10.0 * math.log10(mse)),
        "lr": lr,
        "f": [float(v) for v in dec.f],
        "dropped": int(rp.field.plan.dropped.sum()) if rp.field.plan is not None else 0,
    }


# -- routing probe ------------------------------------------------------------


def make_probe(model: MixtureField, rays: RayBatch, n_points: int, seed: int, scfg: SamplingConfig,
               chunk: int = 2048) -> np.ndarray:
    """Unit-cube foreground points drawn in proportion to the model's rendering weights.

    Candidate samples come from the usual coarse-to-fine sampling of random
    training rays. Empty space carries no weight, so its routing (which moves
    only under the balance term and never changes a rendered colour) is left
    out of the probe.
    """
    rng = np.random.default_rng([seed, _STREAM_PROBE])
    n_rays = min(len(rays), 2 * n_points)
    sub = rays.subset(rng.choice(len(rays), size=n_rays, replace=False))
    pts, wts = [], []
    for s in range(0, n_rays, chunk):
        part = sub.subset(slice(s, s + chunk))
        rp = render_rays(model, part, scfg, rng, training=False, strategy="full")
        sf = rp.t_fg.shape[1]
        pts.append((part.origins[:, None, :] + rp.t_fg[:, :, None] * part.dirs[:, None, :]).reshape(-1, 3))
        wts.append(rp.result.weights[:, :sf].reshape(-1))
    pts = np.concatenate(pts)
    w = np.concatenate(wts)
    if w.sum() > 0 and np.count_nonzero(w) >= n_points:
        pick = rng.choice(len(w), size=n_points, replace=False, p=w / w.sum())
    else:
        pick = rng.choice(len(w), size=n_points, replace=len(w) < n_points)
    return fg_to_unit(pts[np.sort(pick)]).astype(np.float32)


def probe_assignments(model: MixtureField, probe: np.ndarray) -> np.ndarray:
    dec, _ = model.route(probe.astype(model.dtype))
    return dec.top1.copy()


def changing_rate_probe(state: TrainState, probe_points: np.ndarray | None = None,
                        prev_assignments: np.ndarray | None = None) -> float:
    """Fraction of probe points whose top-1 expert changed since the previous measurement.

    Updates ``state.probe_assign``; returns NaN on the first call.
    """
    probe = state.probe if probe_points is None else probe_points
    prev = state.probe_assign if prev_assignments is None else prev_assignments
    current = probe_assignments(state.model, probe)
    rate = changing_rate(prev, current)
    state.probe_assign = current
    return rate


# -- checkpoints ----------------------------------------------------------------


def _grid_headers(model: MixtureField) -> dict[str, list]:
    heads = {}
    if model.gate is not None and hasattr(model.gate, "grid"):
        heads["gate.grid"] = [_levels(model.gate.grid.configs[0])]
    if model.experts.kind == "hash":
        heads["expert_pyramid.tables"] = [_levels(c) for c in model.experts.tables.configs]
    heads["background.tables"] = [_levels(model.background.configs[0])]
    return heads


def _levels(cfg) -> list[dict]:
    return [{"level": l, "entries": int(e), "features": cfg.features, "resolution": int(r)}
            for l, (e, r) in enumerate(zip(cfg.entries, cfg.resolutions))]


def _blobs(state: TrainState) -> list[tuple[str, np.ndarray]]:
    params = state.model.named_parameters()
    out = [(k, params[k]) for k in params]
    out += [(f"adam.m/{k}", state.optim.m[k]) for k in params]
    out += [(f"adam.v/{k}", state.optim.v[k]) for k in params]
    return out


def save_checkpoint(state: TrainState, path) -> None:
    """Binary container: magic, u32 version, u64 header length, JSON header, raw little-endian f32 blobs."""
    blobs = _blobs(state)
    grids = _grid_headers(state.model)
    index = []
    for name, arr in blobs:
        entry = {"name": name, "shape": list(arr.shape), "dtype": "<f4"}
        if name in grids:
            entry["grids"] = grids[name]
        index.append(entry)
    header = {
        "field": state.model.cfg.to_dict(),
        "train": state.config.to_dict(),
        "step": state.step,
        "adam_t": state.optim.t,
        "rng": state.rng_state(),
        "probe": None if state.probe is None else state.probe.astype("<f4").tobytes().hex(),
        "probe_assign": None if state.probe_assign is None else [int(v) for v in state.probe_assign],
        "meta": state.meta,
        "blobs": index,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(raw)))
        fh.write(raw)
        for _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, "<f4").tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<IQ", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    pos = 20
    header = json.loads(data[pos : pos + n])
    pos += n
    blobs = {}
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        end = pos + 4 * count
        if end > len(data):
            raise CheckpointError("truncated checkpoint", blob=entry["name"])
        blobs[entry["name"]] = np.frombuffer(data, "<f4", count, pos).reshape(shape)
        pos = end
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return header, blobs


def _validation_order(names):
    # hash tables first: their shapes encode the expert layout, the most informative mismatch
    return sorted(names, key=lambda k: (not is_table(k), list(names).index(k)))


def load_checkpoint(path, field_cfg: FieldConfig | None = None, train_cfg: TrainConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`; ``field_cfg`` (if given) must match the stored shapes."""
    header, blobs = read_checkpoint(path)
    stored_field = FieldConfig.from_dict(header["field"])
    stored_train = TrainConfig.from_dict(header["train"])
    fcfg = field_cfg or stored_field
    tcfg = train_cfg or stored_train
    state = init_state(fcfg, tcfg)
    params = state.model.named_parameters()
    for name in _validation_order(params):
        if name not in blobs:
            raise CheckpointError("missing from checkpoint", blob=name)
        if blobs[name].shape != params[name].shape:
            raise CheckpointError(f"shape {blobs[name].shape} does not match expected {params[name].shape}",
                                  blob=name)
    extra = set(blobs) - set(params) - {f"adam.{s}/{k}" for s in "mv" for k in params}
    if extra:
        raise CheckpointError("unexpected blob in checkpoint", blob=sorted(extra)[0])
    for name, p in params.items():
        p[...] = blobs[name]
        for s, store in (("m", state.optim.m), ("v", state.optim.v)):
            key = f"adam.{s}/{name}"
            if key not in blobs:
                raise CheckpointError("missing optimizer moment", blob=key)
            store[name][...] = blobs[key]
    state.step = int(header["step"])
    state.optim.t = int(header["adam_t"])
    if header.get("probe"):
        state.probe = np.frombuffer(bytes.fromhex(header["probe"]), "<f4").reshape(-1, 3).copy()
    if header.get("probe_assign") is not None:
        state.probe_assign = np.asarray(header["probe_assign"], np.int64)
    state.meta = dict(header.get("meta") or {})
    state.model.bump_version()
    return state


# -- run loop ---------------------------------------------------------------------


@contextlib.contextmanager
def thread_limit(cfg: TrainConfig):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1 if cfg.deterministic else cfg.threads):
        yield


@dataclass
class RunResult:
    state: TrainState
    history: list[dict] = field(default_factory=list)
    probe_rates: list[tuple[int, float]] = field(default_factory=list)
    seconds: float = 0.0


def train(dataset, field_cfg: FieldConfig, train_cfg: TrainConfig, *, out_dir=None, state: TrainState | None = None,
          until: int | None = None, callback=None) -> RunResult:
    """Train on ``dataset.train_rays()``; resumes from ``state`` when given.

    Writes ``metrics.jsonl``, ``config.json`` and checkpoints into ``out_dir``.
    ``until`` stops early (exclusive step bound) without changing the schedule.
    """
    if field_cfg.n_images != dataset.n_train:
        raise ConfigError(f"field has {field_cfg.n_images} appearance rows but dataset has {dataset.n_train} training images")
    rays, colors = dataset.train_rays()
    sampler = RaySampler(len(rays), train_cfg.rays_per_batch, train_cfg.seed)
    if state is None:
        state = init_state(field_cfg, train_cfg)
    bound = dataset.scene_bound
    state.meta.setdefault("scene_bound", {"center": list(bound.center), "radius": bound.radius})
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({"field": field_cfg.to_dict(), "train": train_cfg.to_dict()},
                                                    indent=1, sort_keys=True))
        metrics_fh = open(out / "metrics.jsonl", "a" if state.step else "w")
    result = RunResult(state)
    stop = train_cfg.steps if until is None else min(until, train_cfg.steps)
    grads = GradBuffer.like(state.model.named_parameters())
    t0 = time.perf_counter()
    last_rate = None
    try:
        with thread_limit(train_cfg):
            while state.step < stop:
                idx = sampler.indices(state.step)
                try:
                    m = train_step(state, rays.subset(idx), colors[idx], grads)
                except DivergenceError as exc:
                    if out is not None:
                        _dump_divergence(out, exc)
                    raise
                if state.model.gate is not None and train_cfg.probe_interval and state.step % train_cfg.probe_interval == 0:
                    if state.probe is None:
                        # drawn after one interval of warm-up, when surfaces have started to form
                        state.probe = make_probe(state.model, rays, train_cfg.probe_points, train_cfg.seed,
                                                 train_cfg.sampling)
                    last_rate = changing_rate_probe(state)
                    result.probe_rates.append((state.step, last_rate))
                m["changing_rate"] = last_rate
                result.history.append(m)
                if metrics_fh is not None and (state.step % train_cfg.log_every == 0 or state.step == stop):
                    metrics_fh.write(json.dumps({k: m[k] for k in ("step", "L_r", "L_b", "psnr", "lr", "f",
                                                                    "changing_rate")}) + "\n")
                    metrics_fh.flush()
                if state.step % train_cfg.log_every == 0:
                    log.info("step %d L_r %.5f psnr %.2f lr %.2e", state.step, m["L_r"], m["psnr"], m["lr"])
                if out is not None and train_cfg.checkpoint_every and state.step % train_cfg.checkpoint_every == 0:
                    save_checkpoint(state, out / "checkpoint.hmoe")
                if callback is not None:
                    callback(state, m)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoint.hmoe")
    result.seconds = time.perf_counter() - t0
    return result


def _dump_divergence(out: Path, exc: DivergenceError) -> None:
    arrays = {k: np.asarray(v) for k, v in exc.details.items() if k != "loss"}
    np.savez(out / f"divergence_step{exc.step}.npz", loss=np.asarray(exc.details.get("loss", np.nan)), **arrays)
    log.error("%s; offending rays written to %s", exc, out / f"divergence_step{exc.step}.npz")
