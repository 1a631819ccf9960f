"""Conditional invertible network with exact log-determinant.

The map squeezes 2x2 spatial blocks into channels (3 -> 12), then applies
`steps` blocks of [activation normalization -> channel reversal ->
conditional affine coupling] and unsqueezes back, so latents keep the image
shape. Conditioning features come from a small convolutional encoder over
the squeezed low-light input, with a per-step linear head.

Coupling scales are bounded via log_s = 2*tanh(raw/2); the second coupling
conv starts at zero so every block is the identity at init. All arithmetic
is float64 and deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_SQ_CH = 12  # channels after squeezing an RGB image
_HALF = _SQ_CH // 2


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or inconsistent."""


@dataclass(frozen=True)
class FlowConfig:
    steps: int = 4
    width: int = 16
    cond_channels: int = 8

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.width < 1 or self.cond_channels < 1:
            raise ValueError("width and cond_channels must be >= 1")


@dataclass(frozen=True)
class LatentOutput:
    """Forward-pass result: latent (same shape as the input) and log |det J|."""

    z: np.ndarray
    log_det: float


def _block_specs(config: FlowConfig) -> list[tuple[str, tuple[int, ...]]]:
    specs: list[tuple[str, tuple[int, ...]]] = []
    if config.steps > 0:
        w = config.width
        specs += [
            ("encoder.conv1.weight", (w, _SQ_CH, 3, 3)),
            ("encoder.conv1.bias", (w,)),
            ("encoder.conv2.weight", (w, w, 3, 3)),
            ("encoder.conv2.bias", (w,)),
            ("encoder.conv3.weight", (w, w, 3, 3)),
            ("encoder.conv3.bias", (w,)),
        ]
    for k in range(config.steps):
        w = config.width
        specs += [
            (f"step{k}.actnorm.bias", (_SQ_CH,)),
            (f"step{k}.actnorm.logs", (_SQ_CH,)),
            (f"step{k}.head.weight", (config.cond_channels, w, 3, 3)),
            (f"step{k}.head.bias", (config.cond_channels,)),
            (f"step{k}.coupling.conv1.weight", (w, _HALF + config.cond_channels, 3, 3)),
            (f"step{k}.coupling.conv1.bias", (w,)),
            (f"step{k}.coupling.conv2.weight", (_SQ_CH, w, 3, 3)),
            (f"step{k}.coupling.conv2.bias", (_SQ_CH,)),
        ]
    return specs


def _check_image(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"{name} must have shape (3, H, W), got {arr.shape}")
    if arr.shape[1] % 2 or arr.shape[2] % 2:
        raise ValueError(f"{name} spatial size {arr.shape[1]}x{arr.shape[2]} must be even")
    return arr


class ConditionalFlow:
    """Invertible map y <-> z conditioned on a paired low-light image."""

    def __init__(self, config: FlowConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.actnorm_initialized = config.steps == 0
        self.params: dict[str, np.ndarray] = {}
        for name, shape in _block_specs(config):
            if name.endswith("coupling.conv2.weight") or "actnorm" in name or name.endswith(".bias"):
                self.params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                self.params[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    # ------------------------------------------------------------ parameters

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def block_names(self) -> list[str]:
        return [name for name, _ in _block_specs(self.config)]

    def get_params(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([self.params[n].ravel() for n in self.block_names()])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {flat.shape}")
        offset = 0
        for name, shape in _block_specs(self.config):
            size = int(np.prod(shape))
            self.params[name] = flat[offset : offset + size].reshape(shape).copy()
            offset += size

    def make_param_tensors(self) -> dict[str, Tensor]:
        """Gradient-enabled views of the current parameters, for tape passes."""
        return {n: Tensor(self.params[n].copy(), requires_grad=True) for n in self.block_names()}

    def collect_grad(self, param_tensors: dict[str, Tensor]) -> np.ndarray:
        parts = []
        for name, shape in _block_specs(self.config):
            t = param_tensors[name]
            g = t.grad if t.grad is not None else np.zeros(shape)
            parts.append(g.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def _frozen_tensors(self) -> dict[str, Tensor]:
        return {n: Tensor(self.params[n]) for n in self.block_names()}

    # ------------------------------------------------------------- tape core

    def _encode(self, low_sq: Tensor, pt: dict[str, Tensor]) -> Tensor:
        f = ad.tanh(ad.conv2d(low_sq, pt["encoder.conv1.weight"], pt["encoder.conv1.bias"]))
        f = ad.tanh(ad.conv2d(f, pt["encoder.conv2.weight"], pt["encoder.conv2.bias"]))
        return ad.tanh(ad.conv2d(f, pt["encoder.conv3.weight"], pt["encoder.conv3.bias"]))

    def _coupling_nets(self, x1: Tensor, cond: Tensor, pt: dict[str, Tensor], k: int) -> tuple[Tensor, Tensor]:
        sub_in = ad.concat_ch(x1, cond)
        hidden = ad.tanh(ad.conv2d(sub_in, pt[f"step{k}.coupling.conv1.weight"], pt[f"step{k}.coupling.conv1.bias"]))
        raw = ad.conv2d(hidden, pt[f"step{k}.coupling.conv2.weight"], pt[f"step{k}.coupling.conv2.bias"])
        log_s = ad.scale(ad.tanh(ad.scale(ad.slice_ch(raw, 0, _HALF), 0.5)), 2.0)
        t = ad.slice_ch(raw, _HALF, _SQ_CH)
        return log_s, t

    def _forward_tape(self, y: Tensor, low: Tensor, pt: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
        x = ad.squeeze2(y)
        h, w = x.shape[1], x.shape[2]
        log_det = Tensor(0.0)
        features = self._encode(ad.squeeze2(low), pt) if self.config.steps > 0 else None
        for k in range(self.config.steps):
            bias = ad.expand_ch(pt[f"step{k}.actnorm.bias"], h, w)
            logs = pt[f"step{k}.actnorm.logs"]
            x = ad.mul(ad.add(x, bias), ad.exp(ad.expand_ch(logs, h, w)))
            log_det = ad.add(log_det, ad.scale(ad.tsum(logs), float(h * w)))
            x = ad.flip_ch(x)
            cond = ad.conv2d(features, pt[f"step{k}.head.weight"], pt[f"step{k}.head.bias"])
            x1 = ad.slice_ch(x, 0, _HALF)
            x2 = ad.slice_ch(x, _HALF, _SQ_CH)
            log_s, t = self._coupling_nets(x1, cond, pt, k)
            x2 = ad.add(ad.mul(x2, ad.exp(log_s)), t)
            log_det = ad.add(log_det, ad.tsum(log_s))
            x = ad.concat_ch(x1, x2)
        return ad.unsqueeze2(x), log_det

    def _inverse_tape(self, z: Tensor, low: Tensor, pt: dict[str, Tensor]) -> Tensor:
        x = ad.squeeze2(z)
        h, w = x.shape[1], x.shape[2]
        features = self._encode(ad.squeeze2(low), pt) if self.config.steps > 0 else None
        for k in reversed(range(self.config.steps)):
            cond = ad.conv2d(features, pt[f"step{k}.head.weight"], pt[f"step{k}.head.bias"])
            x1 = ad.slice_ch(x, 0, _HALF)
            y2 = ad.slice_ch(x, _HALF, _SQ_CH)
            log_s, t = self._coupling_nets(x1, cond, pt, k)
            x2 = ad.mul(ad.sub(y2, t), ad.exp(ad.scale(log_s, -1.0)))
            x = ad.flip_ch(ad.concat_ch(x1, x2))
            logs = pt[f"step{k}.actnorm.logs"]
            x = ad.sub(
                ad.mul(x, ad.exp(ad.expand_ch(ad.scale(logs, -1.0), h, w))),
                ad.expand_ch(pt[f"step{k}.actnorm.bias"], h, w),
            )
        return ad.unsqueeze2(x)

    def nll_tape(self, y: np.ndarray, low: np.ndarray, pt: dict[str, Tensor]) -> Tensor:
        """Negative log-likelihood (nats per image) as a differentiable node."""
        y = _check_image(y, "y")
        low = _check_image(low, "low")
        z, log_det = self._forward_tape(Tensor(y), Tensor(low), pt)
        quad = ad.scale(ad.tsum(ad.mul(z, z)), 0.5)
        const = Tensor(0.5 * y.size * math.log(2.0 * math.pi))
        return ad.sub(ad.add(quad, const), log_det)

    def inverse_tape(self, low: np.ndarray, pt: dict[str, Tensor], z: np.ndarray | None = None) -> Tensor:
        low = _check_image(low, "low")
        if z is None:
            z = np.zeros_like(low)
        else:
            z = _check_image(z, "z")
            if z.shape != low.shape:
                raise ValueError(f"latent shape {z.shape} != conditioning shape {low.shape}")
        return self._inverse_tape(Tensor(z), Tensor(low), pt)

    # --------------------------------------------------------- public (eager)

    def forward(self, y: np.ndarray, low: np.ndarray) -> LatentOutput:
        y = _check_image(y, "y")
        low = _check_image(low, "low")
        if y.shape != low.shape:
            raise ValueError(f"image shape {y.shape} != conditioning shape {low.shape}")
        z, log_det = self._forward_tape(Tensor(y), Tensor(low), self._frozen_tensors())
        return LatentOutput(z=z.data, log_det=float(log_det.data))

    def inverse(self, z: np.ndarray, low: np.ndarray) -> np.ndarray:
        return self.inverse_tape(low, self._frozen_tensors(), z=np.asarray(z, dtype=np.float64)).data

    def nll(self, y: np.ndarray, low: np.ndarray) -> float:
        return float(self.nll_tape(y, low, self._frozen_tensors()).data)

    def enhance(self, low: np.ndarray, tau: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
        """Restore an image from its low-light input; tau scales latent noise."""
        low = _check_image(low, "low")
        if tau < 0:
            raise ValueError(f"tau must be >= 0, got {tau}")
        if tau == 0.0:
            z = np.zeros_like(low)
        else:
            if rng is None:
                rng = np.random.default_rng()
            z = tau * rng.standard_normal(low.shape)
        return self.inverse(z, low)

    # ----------------------------------------------------------- initializers

    def init_actnorm(self, ys: list[np.ndarray], lows: list[np.ndarray]) -> None:
        """Data-dependent init: each step's input becomes zero-mean unit-variance.

        Steps are initialized sequentially, so later statistics see earlier
        normalizations. Calling twice is an error.
        """
        if self.actnorm_initialized:
            raise RuntimeError("activation normalization is already initialized")
        if len(ys) != len(lows) or not ys:
            raise ValueError("need equal, nonempty lists of images and conditioning images")
        xs = [ad.squeeze2(Tensor(_check_image(y, "y"))) for y in ys]
        feats = [self._encode(ad.squeeze2(Tensor(_check_image(lo, "low"))), self._frozen_tensors()) for lo in lows]
        h, w = xs[0].shape[1], xs[0].shape[2]
        pt = self._frozen_tensors()
        for k in range(self.config.steps):
            stacked = np.stack([x.data for x in xs])
            mean = stacked.mean(axis=(0, 2, 3))
            std = stacked.std(axis=(0, 2, 3))
            self.params[f"step{k}.actnorm.bias"] = -mean
            self.params[f"step{k}.actnorm.logs"] = -np.log(np.maximum(std, 1e-6))
            pt = self._frozen_tensors()
            advanced = []
            for x, f in zip(xs, feats):
                x = ad.mul(ad.add(x, ad.expand_ch(pt[f"step{k}.actnorm.bias"], h, w)),
                           ad.exp(ad.expand_ch(pt[f"step{k}.actnorm.logs"], h, w)))
                x = ad.flip_ch(x)
                cond = ad.conv2d(f, pt[f"step{k}.head.weight"], pt[f"step{k}.head.bias"])
                x1 = ad.slice_ch(x, 0, _HALF)
                x2 = ad.slice_ch(x, _HALF, _SQ_CH)
                log_s, t = self._coupling_nets(x1, cond, pt, k)
                advanced.append(ad.concat_ch(x1, ad.add(ad.mul(x2, ad.exp(log_s)), t)))
            xs = advanced
        self.actnorm_initialized = True


# ------------------------------------------------------------- checkpointing

_CHECKPOINT_FORMAT = "calflow-checkpoint"
_CHECKPOINT_VERSION = 1


def save_checkpoint(flow: ConditionalFlow, path) -> None:
    payload = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "config": {
            "steps": flow.config.steps,
            "width": flow.config.width,
            "cond_channels": flow.config.cond_channels,
        },
        "actnorm_initialized": flow.actnorm_initialized,
        "params": flow.get_params().tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> ConditionalFlow:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != _CHECKPOINT_FORMAT:
        raise CheckpointError("missing or wrong format marker")
    if payload.get("version") != _CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {payload.get('version')!r}")
    try:
        config = FlowConfig(**payload["config"])
        flat = np.asarray(payload["params"], dtype=np.float64)
        actnorm_flag = bool(payload["actnorm_initialized"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint fields: {exc}") from exc
    flow = ConditionalFlow(config)
    if flat.ndim != 1 or flat.size != flow.n_params:
        raise CheckpointError(f"expected {flow.n_params} parameters for this config, found {flat.size}")
    flow.set_params(flat)
    flow.actnorm_initialized = actnorm_flag
    return flow
