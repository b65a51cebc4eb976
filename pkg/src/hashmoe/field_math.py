"""Dense numeric kernels with hand-derived gradients.

Small MLPs, softmax, activations, spherical-harmonics and positional
encodings. All functions operate on batches (leading axis = points) and never
allocate parameters themselves except through :meth:`DenseMlp.create`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from hashmoe.errors import ConfigError, ContractError

log = logging.getLogger(__name__)

RELU = "relu"


@dataclass(eq=False)
class DenseMlp:
    """Chain of affine layers, each optionally followed by ReLU.

    Weights are stored ``(fan_in, fan_out)`` so a batch ``x`` of shape
    ``(N, fan_in)`` maps as ``x @ W + b``. ``version`` is bumped by the
    optimizer after every in-place update; caches remember the version they
    were produced at.
    """

    name: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str | None]
    version: int = 0

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ConfigError(f"{self.name}: weights/biases/activations length mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigError(f"{self.name}: layer {i} has weight {w.shape} and bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ConfigError(
                    f"{self.name}: layer {i - 1} outputs {self.weights[i - 1].shape[1]} "
                    f"but layer {i} expects {w.shape[0]}"
                )
        for a in self.activations:
            if a not in (RELU, None):
                raise ConfigError(f"{self.name}: unknown activation {a!r}")

    @classmethod
    def create(
        cls,
        name: str,
        widths: Sequence[int],
        rng: np.random.Generator,
        *,
        hidden: str | None = RELU,
        output: str | None = None,
        dtype=np.float32,
    ) -> "DenseMlp":
        """Glorot-uniform weights, zero biases. ``widths`` = [in, h1, ..., out]."""
        if len(widths) < 2 or any(int(w) < 1 for w in widths):
            raise ConfigError(f"{name}: invalid layer widths {list(widths)}")
        weights, biases, acts = [], [], []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype))
            acts.append(output if i == len(widths) - 2 else hidden)
        return cls(name, weights, biases, acts)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.w{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out


@dataclass
class MlpCache:
    owner: DenseMlp
    version: int
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]


class GradBuffer(dict):
    """Gradient accumulators keyed by parameter name, shaped like the params."""

    @classmethod
    def like(cls, params: Mapping[str, np.ndarray]) -> "GradBuffer":
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def zero_(self) -> None:
        for v in self.values():
            v.fill(0)


def mlp_forward(mlp: DenseMlp, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    if x.ndim != 2 or x.shape[1] != mlp.in_dim:
        raise ConfigError(f"{mlp.name}: expected input width {mlp.in_dim}, got shape {x.shape}")
    inputs, preacts = [], []
    h = x
    for w, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
        inputs.append(h)
        z = h @ w
        z += b
        preacts.append(z)
        h = np.maximum(z, 0) if act == RELU else z
    return h, MlpCache(mlp, mlp.version, inputs, preacts)


def mlp_backward(
    mlp: DenseMlp,
    cache: MlpCache,
    dy: np.ndarray,
    grads: Mapping[str, np.ndarray],
    need_dx: bool = True,
) -> np.ndarray | None:
    """Accumulate parameter gradients into ``grads`` and return dL/dx."""
    if cache.owner is not mlp:
        raise ContractError(f"{mlp.name}: cache was produced by {cache.owner.name}")
    if cache.version != mlp.version:
        raise ContractError(f"{mlp.name}: stale cache (version {cache.version}, params at {mlp.version})")
    if dy.shape != cache.preacts[-1].shape:
        raise ContractError(f"{mlp.name}: cotangent shape {dy.shape} != output {cache.preacts[-1].shape}")
    d = dy
    for i in range(len(mlp.weights) - 1, -1, -1):
        if mlp.activations[i] == RELU:
            d = d * (cache.preacts[i] > 0)
        grads[f"{mlp.name}.w{i}"] += cache.inputs[i].T @ d
        grads[f"{mlp.name}.b{i}"] += d.sum(axis=0)
        if i or need_dx:
            d = d @ mlp.weights[i].T
    return d if need_dx else None


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax along the last axis."""
    return p * (dp - (p * dp).sum(axis=-1, keepdims=True))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


# Real spherical harmonics, Condon-Shortley phase, (y, z, x) ordering inside
# each band as in common hash-encoding codebases:
#   band 0: 1/(2 sqrt(pi))
#   band 1: -C1 y, C1 z, -C1 x                         C1 = sqrt(3/(4 pi))
#   band 2: C2a xy, -C2a yz, C2b (3z^2 - 1), -C2a xz, C2c (x^2 - y^2)
#           C2a = sqrt(15/pi)/2, C2b = sqrt(5/pi)/4, C2c = sqrt(15/pi)/4
#   band 3: see _SH3 (sqrt(35/(2pi))/4, sqrt(105/pi)/2, sqrt(21/(2pi))/4,
#           sqrt(7/pi)/4, sqrt(105/pi)/4)
_SH0 = 0.28209479177387814
_SH1 = 0.4886025119029199
_SH2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
_SH3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
MAX_SH_DEGREE = 4


def sh_encode(d: np.ndarray, degree: int = 4) -> np.ndarray:
    """Real SH basis up to ``degree`` bands (``degree**2`` outputs) for (N, 3) unit directions."""
    if not 1 <= degree <= MAX_SH_DEGREE:
        raise ConfigError(f"SH degree must be in [1, {MAX_SH_DEGREE}], got {degree}")
    d = np.atleast_2d(np.asarray(d))
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(np.abs(norm - 1) > 1e-6):
        log.debug("sh_encode: normalizing %d non-unit directions", int(np.sum(np.abs(norm - 1) > 1e-6)))
        d = d / np.maximum(norm, 1e-12)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((d.shape[0], degree * degree), d.dtype)
    out[:, 0] = _SH0
    if degree > 1:
        out[:, 1] = -_SH1 * y
        out[:, 2] = _SH1 * z
        out[:, 3] = -_SH1 * x
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = _SH2[0] * x * y
        out[:, 5] = _SH2[1] * y * z
        out[:, 6] = _SH2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = _SH2[3] * x * z
        out[:, 8] = _SH2[4] * (xx - yy)
    if degree > 3:
        out[:, 9] = _SH3[0] * y * (3 * xx - yy)
        out[:, 10] = _SH3[1] * x * y * z
        out[:, 11] = _SH3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = _SH3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = _SH3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = _SH3[5] * z * (xx - yy)
        out[:, 15] = _SH3[6] * x * (xx - 3 * yy)
    return out


def positional_encoding(x: np.ndarray, n_freqs: int) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x) for k < n_freqs], (N, 3 + 6 n_freqs)."""
    parts = [x]
    for k in range(n_freqs):
        s = (2.0**k) * np.pi * x
        parts.append(np.sin(s))
        parts.append(np.cos(s))
    return np.concatenate(parts, axis=-1)
