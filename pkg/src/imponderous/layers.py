"""Composite layers: max-feature-map, residual blocks, ECA attention, heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    InvalidArgumentError,
    Variable,
    add,
    conv1d_channels,
    conv2d_mfm,
    dense,
    max_halves,
    global_avg_pool,
    scale_channels,
    sigmoid,
)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform on +-sqrt(3 / fan_in): unit second moment for unit-variance inputs.

    MFM keeps the second moment of a pair of symmetric inputs, so no extra
    rectifier gain is applied.
    """
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def eca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Adaptive ECA kernel size: |log2(C)/gamma + b/gamma|, bumped to the next odd."""
    t = int(abs((math.log2(channels) + b) / gamma))
    return t if t % 2 else t + 1


def mfm(x: Variable) -> Variable:
    """Max-feature-map: elementwise max of the two channel halves."""
    if x.value.ndim not in (2, 4):
        raise InvalidArgumentError(f"mfm expects [N, 2C] or [N, 2C, H, W], got {x.shape}")
    if x.shape[1] % 2:
        raise InvalidArgumentError(f"mfm needs an even channel count, got {x.shape[1]}")
    return max_halves(x)


def mfm_conv(x: Variable, kernel: Variable, bias: Variable, pad: int) -> Variable:
    """Stride-1 convolution to 2C channels followed by MFM down to C."""
    return conv2d_mfm(x, kernel, bias, pad=pad)


@dataclass(frozen=True)
class ResidualBlockSpec:
    channels: int
    kernel_a: Variable
    bias_a: Variable
    kernel_b: Variable
    bias_b: Variable

    @staticmethod
    def shapes(channels: int) -> dict:
        c = channels
        return {
            "conv_a.kernel": (2 * c, c, 3, 3),
            "conv_a.bias": (2 * c,),
            "conv_b.kernel": (2 * c, c, 3, 3),
            "conv_b.bias": (2 * c,),
        }

    @classmethod
    def from_params(cls, params: dict, prefix: str, channels: int) -> "ResidualBlockSpec":
        return cls(
            channels,
            params[f"{prefix}.conv_a.kernel"],
            params[f"{prefix}.conv_a.bias"],
            params[f"{prefix}.conv_b.kernel"],
            params[f"{prefix}.conv_b.bias"],
        )


def residual_block(x: Variable, spec: ResidualBlockSpec) -> Variable:
    """``x + MFM(conv3x3(MFM(conv3x3(x))))``, each conv widening C to 2C."""
    if x.value.ndim != 4 or x.shape[1] != spec.channels:
        raise InvalidArgumentError(
            f"residual block for {spec.channels} channels got input of shape {x.shape}")
    y = mfm_conv(x, spec.kernel_a, spec.bias_a, pad=1)
    y = mfm_conv(y, spec.kernel_b, spec.bias_b, pad=1)
    return add(x, y)


@dataclass(frozen=True)
class EcaSpec:
    channels: int
    kernel: Variable

    def __post_init__(self):
        k = self.kernel.shape[0]
        if self.kernel.value.ndim != 1 or k % 2 == 0 or not 1 <= k <= self.channels:
            raise InvalidArgumentError(
                f"ECA kernel must be 1-d with odd size in [1, {self.channels}], got {self.kernel.shape}")


def eca_attention(x: Variable, spec: EcaSpec) -> Variable:
    """Per-channel attention weights ``sigmoid(conv1d(GAP(x)))``, shape [N, C]."""
    if x.value.ndim != 4 or x.shape[1] != spec.channels:
        raise InvalidArgumentError(f"ECA for {spec.channels} channels got input of shape {x.shape}")
    return sigmoid(conv1d_channels(global_avg_pool(x), spec.kernel))


def eca(x: Variable, spec: EcaSpec) -> Variable:
    """Efficient channel attention: rescale each channel by its attention weight."""
    return scale_channels(x, eca_attention(x, spec))


@dataclass(frozen=True)
class HeadSpec:
    """GAP -> dense -> (optional MFM) -> classifier.

    With ``activation="mfm"`` the dense layer emits ``2 * feature_dim`` units
    and MFM halves them; with ``"identity"`` it emits ``feature_dim`` directly.
    """

    in_dim: int
    feature_dim: int
    num_classes: int
    activation: str
    dense_weight: Variable
    dense_bias: Variable
    cls_weight: Variable
    cls_bias: Variable

    @staticmethod
    def shapes(in_dim: int, feature_dim: int, num_classes: int, activation: str) -> dict:
        width = 2 * feature_dim if activation == "mfm" else feature_dim
        return {
            "dense.weight": (in_dim, width),
            "dense.bias": (width,),
            "classifier.weight": (feature_dim, num_classes),
            "classifier.bias": (num_classes,),
        }

    @classmethod
    def from_params(cls, params: dict, prefix: str, activation: str) -> "HeadSpec":
        dw = params[f"{prefix}.dense.weight"]
        cw = params[f"{prefix}.classifier.weight"]
        return cls(dw.shape[0], cw.shape[0], cw.shape[1], activation, dw,
                   params[f"{prefix}.dense.bias"], cw, params[f"{prefix}.classifier.bias"])


def head(x: Variable, spec: HeadSpec) -> tuple[Variable, Variable]:
    """Return ``(features [N, feature_dim], logits [N, K])`` for one patch."""
    if x.value.ndim != 4 or x.shape[1] != spec.in_dim:
        raise InvalidArgumentError(f"head expects {spec.in_dim} channels, got input of shape {x.shape}")
    features = dense(global_avg_pool(x), spec.dense_weight, spec.dense_bias)
    if spec.activation == "mfm":
        features = mfm(features)
    logits = dense(features, spec.cls_weight, spec.cls_bias)
    return features, logits
