"""Backbone, growing image-class head and fixed orientation head.

The backbone is a stack of conv + batchnorm + leaky-ReLU blocks producing a
``C x H x W`` feature map. Both heads read that same map: the image head
pools and applies one linear map, the orientation head runs four 3x3 conv
blocks before pooling and a linear map to the ``M`` orientation classes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .engine import (
    BatchNormState,
    Tensor,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    leaky_relu,
    linear,
    no_grad,
)
from .errors import ConfigError, ShapeError

LEAKY_GAIN = 1 + 0.1**2
ORIENTATION_BLOCKS = 4


@dataclass(frozen=True)
class BackboneConfig:
    """Stage ``s`` opens with a stride-2 block (except stage 0), then stride-1 blocks."""

    input_side: int
    in_channels: int
    stage_channels: tuple[int, ...]
    blocks_per_stage: int = 1

    @property
    def feature_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def feature_side(self) -> int:
        side = self.input_side
        for _ in self.stage_channels[1:]:
            side = (side - 1) // 2 + 1
        return side


PRESETS = {
    # 32x32 input -> 64 x 8 x 8 feature map
    "cifar": BackboneConfig(32, 3, (16, 32, 64), 1),
    # desk-scale preset for 16x16 synthetic data -> 32 x 8 x 8
    "small": BackboneConfig(16, 3, (16, 32), 1),
    "tiny": BackboneConfig(16, 3, (8, 16), 1),
}


def preset(name: str) -> BackboneConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None


def _uniform(rng, shape, fan_in, gain=LEAKY_GAIN):
    bound = math.sqrt(6.0 / (gain * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _head_weight(rng, fan_in, count):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, count)).astype(np.float32)


class ConvBlock:
    def __init__(self, rng, in_ch: int, out_ch: int, stride: int = 1):
        self.stride = stride
        self.weight = Tensor(_uniform(rng, (out_ch, in_ch, 3, 3), in_ch * 9), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, np.float32), requires_grad=True)
        self.gamma = Tensor(np.ones(out_ch, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(out_ch, np.float32), requires_grad=True)
        self.bn = BatchNormState(out_ch)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = conv2d(x, self.weight, self.bias, stride=self.stride, padding=1)
        return leaky_relu(batchnorm2d(h, self.gamma, self.beta, self.bn, mode))

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias, "gamma": self.gamma, "beta": self.beta}

    def frozen_copy(self) -> "ConvBlock":
        clone = ConvBlock.__new__(ConvBlock)
        clone.stride = self.stride
        for name, t in self.parameters().items():
            setattr(clone, name, Tensor(t.data.copy()))
        clone.bn = self.bn.copy()
        return clone


class ForwardOutput(NamedTuple):
    features: Tensor
    image_logits: Tensor
    orientation_logits: Optional[Tensor]


def _as_input(images, side: int, channels: int) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    if x.data.ndim == 3:
        x = Tensor(x.data[None])
    if x.data.ndim != 4 or x.shape[1:] != (channels, side, side):
        raise ShapeError(f"expected images shaped N x {channels} x {side} x {side}, got {x.shape}")
    return x


class Model:
    """Backbone + image head (grows per phase) + orientation head (fixed)."""

    def __init__(self, config: BackboneConfig, base_class_count: int, orientation_count: int, seed: int):
        if orientation_count < 1:
            raise ConfigError("need at least one orientation class")
        if base_class_count < 1:
            raise ConfigError("need at least one base class")
        self.config = config
        self.seed = int(seed)
        self.orientation_count = orientation_count
        rng = np.random.default_rng(self.seed)
        self.backbone: list[ConvBlock] = []
        in_ch = config.in_channels
        for s, ch in enumerate(config.stage_channels):
            for b in range(config.blocks_per_stage):
                self.backbone.append(ConvBlock(rng, in_ch, ch, stride=2 if (s > 0 and b == 0) else 1))
                in_ch = ch
        c = config.feature_channels
        self.image_weight = Tensor(_head_weight(rng, c, base_class_count), requires_grad=True)
        self.image_bias = Tensor(np.zeros(base_class_count, np.float32), requires_grad=True)
        self.orientation_blocks = [ConvBlock(rng, c, c) for _ in range(ORIENTATION_BLOCKS)]
        self.orientation_weight = Tensor(_head_weight(rng, c, orientation_count), requires_grad=True)
        self.orientation_bias = Tensor(np.zeros(orientation_count, np.float32), requires_grad=True)

    @property
    def class_count(self) -> int:
        return self.image_weight.shape[1]

    # -- parameters ----------------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, block in enumerate(self.backbone):
            for k, t in block.parameters().items():
                params[f"backbone.{i}.{k}"] = t
        params["image_head.weight"] = self.image_weight
        params["image_head.bias"] = self.image_bias
        for i, block in enumerate(self.orientation_blocks):
            for k, t in block.parameters().items():
                params[f"orientation_head.{i}.{k}"] = t
        params["orientation_head.fc.weight"] = self.orientation_weight
        params["orientation_head.fc.bias"] = self.orientation_bias
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def batchnorm_states(self) -> dict[str, BatchNormState]:
        states = {f"backbone.{i}.bn": b.bn for i, b in enumerate(self.backbone)}
        states.update({f"orientation_head.{i}.bn": b.bn for i, b in enumerate(self.orientation_blocks)})
        return states

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- forward -------------------------------------------------------------------

    def features(self, images, mode: str = "eval") -> Tensor:
        x = _as_input(images, self.config.input_side, self.config.in_channels)
        for block in self.backbone:
            x = block(x, mode)
        return x

    def image_logits(self, features: Tensor) -> Tensor:
        return linear(global_avg_pool(features), self.image_weight, self.image_bias)

    def orientation_logits(self, features: Tensor, mode: str = "eval") -> Tensor:
        h = features
        for block in self.orientation_blocks:
            h = block(h, mode)
        return linear(global_avg_pool(h), self.orientation_weight, self.orientation_bias)

    def forward(self, images, mode: str = "train", with_orientation: bool = True) -> ForwardOutput:
        """One backbone pass shared by both heads."""
        z = self.features(images, mode)
        orient = self.orientation_logits(z, mode) if with_orientation else None
        return ForwardOutput(z, self.image_logits(z), orient)

    def predict_logits(self, images, batch_size: int = 256) -> np.ndarray:
        """Eval-mode image logits without recording a graph."""
        images = np.asarray(images, dtype=np.float32)
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                z = self.features(images[start : start + batch_size], "eval")
                out.append(self.image_logits(z).data)
        return np.concatenate(out) if out else np.zeros((0, self.class_count), np.float32)

    def embed(self, images, batch_size: int = 256) -> np.ndarray:
        """Eval-mode pooled backbone features, L2-normalized per row."""
        images = np.asarray(images, dtype=np.float32)
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                out.append(global_avg_pool(self.features(images[start : start + batch_size], "eval")).data)
        feats = np.concatenate(out).astype(np.float64)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        return feats / np.maximum(norms, 1e-12)

    # -- phase growth --------------------------------------------------------------

    def expand_image_head(self, new_class_count: int) -> None:
        """Append freshly initialized outputs; existing ones are kept bitwise."""
        if new_class_count < 1:
            raise ConfigError("expansion needs at least one new class")
        old = self.class_count
        rng = np.random.default_rng([self.seed, old])
        extra = _head_weight(rng, self.config.feature_channels, new_class_count)
        self.image_weight = Tensor(np.concatenate([self.image_weight.data, extra], axis=1), requires_grad=True)
        self.image_bias = Tensor(
            np.concatenate([self.image_bias.data, np.zeros(new_class_count, np.float32)]), requires_grad=True
        )

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot(self)


class ModelSnapshot:
    """Frozen copy of backbone + image head; old-class logits only, eval mode."""

    def __init__(self, model: Model):
        self.config = model.config
        self._blocks = [b.frozen_copy() for b in model.backbone]
        self._weight = model.image_weight.data.copy()
        self._bias = model.image_bias.data.copy()
        self._weight.flags.writeable = False
        self._bias.flags.writeable = False

    @property
    def class_count(self) -> int:
        return self._weight.shape[1]

    def predict_logits(self, images, batch_size: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        w, b = Tensor(self._weight), Tensor(self._bias)
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                x = _as_input(images[start : start + batch_size], self.config.input_side, self.config.in_channels)
                for block in self._blocks:
                    x = block(x, "eval")
                out.append(linear(global_avg_pool(x), w, b).data)
        return np.concatenate(out)


def init_model(config: BackboneConfig, base_class_count: int, orientation_count: int, seed: int) -> Model:
    return Model(config, base_class_count, orientation_count, seed)


def forward(model: Model, images, mode: str = "train") -> ForwardOutput:
    return model.forward(images, mode)
