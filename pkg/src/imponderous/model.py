"""The full network: LightCNN-style base, quadrant partition, ECA + heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (
    EcaSpec,
    HeadSpec,
    ResidualBlockSpec,
    eca,
    eca_kernel_size,
    head,
    mfm,
    mfm_conv,
    residual_block,
    uniform_fan_in,
)
from .tensor import InvalidArgumentError, Variable, conv2d, crop, maxpool2, softmax

INPUT_SIZE = 128
BASE_CHANNELS = 192
BASE_GRID = 16
NUM_LOCAL = 4

# (name, kind, in_channels, out_channels_before_mfm, kernel, pad)
# kind "conv" is conv+MFM; kind "res" is a residual block at the given width.
BASE_LAYOUT = (
    ("conv1", "conv", 1, 96, 5, 2),
    ("pool1", "pool", None, None, None, None),
    ("res2.0", "res", 48, None, None, None),
    ("conv2a", "conv", 48, 96, 1, 0),
    ("conv2", "conv", 48, 192, 3, 1),
    ("pool2", "pool", None, None, None, None),
    ("res3.0", "res", 96, None, None, None),
    ("res3.1", "res", 96, None, None, None),
    ("conv3a", "conv", 96, 192, 1, 0),
    ("conv3", "conv", 96, 384, 3, 1),
    ("pool3", "pool", None, None, None, None),
)

ECA_PLACEMENTS = ("after_partition", "before_partition")
HEAD_ACTIVATIONS = ("identity", "mfm")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches; the defaults are the full network.

    ``head_activation`` defaults to ``"identity"``: a 192->256 dense layer per
    head keeps the total at ~1.45M parameters, whereas the MFM variant
    (192->512, halved) lands near 1.69M.
    """

    num_classes: int = 7
    feature_dim: int = 256
    eca_enabled: bool = True
    eca_placement: str = "after_partition"
    global_head: bool = True
    ensemble: bool = True
    head_activation: str = "identity"
    eca_kernel_override: int | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidArgumentError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_dim < 1:
            raise InvalidArgumentError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.eca_placement not in ECA_PLACEMENTS:
            raise InvalidArgumentError(f"eca_placement must be one of {ECA_PLACEMENTS}")
        if self.head_activation not in HEAD_ACTIVATIONS:
            raise InvalidArgumentError(f"head_activation must be one of {HEAD_ACTIVATIONS}")
        if not self.ensemble and not self.global_head:
            raise InvalidArgumentError("ensemble=False keeps only the global head, so global_head must stay on")
        k = self.eca_kernel_override
        if k is not None and (k < 1 or k % 2 == 0 or k > BASE_CHANNELS):
            raise InvalidArgumentError(f"ECA kernel override must be odd and in [1, {BASE_CHANNELS}], got {k}")

    @property
    def eca_kernel(self) -> int:
        return self.eca_kernel_override or eca_kernel_size(BASE_CHANNELS)

    @property
    def head_slots(self) -> list[str]:
        """Head names in output order: local quadrants first, then global."""
        slots = [str(i) for i in range(NUM_LOCAL)] if self.ensemble else []
        if self.global_head:
            slots.append("global")
        return slots

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    per_head_logits: list
    per_head_features: list = field(default_factory=list)


@dataclass(frozen=True)
class ParamCount:
    total: int
    base: int
    eca: int
    heads: int


def _group(name: str) -> str:
    return name.split(".", 1)[0]


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Ordered map of every learnable parameter name to its shape."""
    shapes: dict[str, tuple] = {}
    for name, kind, cin, cout, k, _ in BASE_LAYOUT:
        if kind == "conv":
            shapes[f"base.{name}.kernel"] = (cout, cin, k, k)
            shapes[f"base.{name}.bias"] = (cout,)
        elif kind == "res":
            for sub, shp in ResidualBlockSpec.shapes(cin).items():
                shapes[f"base.{name}.{sub}"] = shp
    if config.eca_enabled:
        for slot in config.head_slots:
            shapes[f"eca.{slot}.kernel"] = (config.eca_kernel,)
    for slot in config.head_slots:
        for sub, shp in HeadSpec.shapes(BASE_CHANNELS, config.feature_dim, config.num_classes,
                                        config.head_activation).items():
            shapes[f"head.{slot}.{sub}"] = shp
    return shapes


def build(config: ModelConfig, seed: int = 0) -> dict[str, Variable]:
    """Fresh, seeded parameters.  ECA kernels start at zero (uniform 0.5 attention)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias") or name.startswith("eca."):
            value = np.zeros(shape, dtype=np.float32)
        elif len(shape) == 4:
            value = uniform_fan_in(rng, shape, shape[1] * shape[2] * shape[3])
        else:
            value = uniform_fan_in(rng, shape, shape[0])
        params[name] = Variable(value, requires_grad=True, name=name)
    return params


def count_params(params: dict[str, Variable]) -> ParamCount:
    sizes = {"base": 0, "eca": 0, "head": 0}
    for name, var in params.items():
        sizes[_group(name)] += int(var.value.size)
    return ParamCount(sum(sizes.values()), sizes["base"], sizes["eca"], sizes["head"])


def cast_params(params: dict[str, Variable], dtype) -> dict[str, Variable]:
    """Copy of ``params`` in another float precision (float64 for gradient checks)."""
    return {k: Variable(v.value.astype(dtype), requires_grad=v.requires_grad, name=k)
            for k, v in params.items()}


def _check_input(x: Variable, strict: bool) -> None:
    if x.value.ndim != 4 or x.shape[1] != 1:
        raise InvalidArgumentError(f"expected grayscale batch [N, 1, H, W], got {x.shape}")
    h, w = x.shape[2:]
    if strict and (h, w) != (INPUT_SIZE, INPUT_SIZE):
        raise InvalidArgumentError(f"expected {INPUT_SIZE}x{INPUT_SIZE} input, got {h}x{w}")
    if h % 16 or w % 16:
        raise InvalidArgumentError(f"input spatial size must be a multiple of 16, got {h}x{w}")


def forward_base(params: dict[str, Variable], x: Variable, strict: bool = True,
                 trace: dict | None = None) -> Variable:
    """Run the base stack; ``[N, 1, 128, 128] -> [N, 192, 16, 16]``.

    ``strict=False`` admits any input whose side is a multiple of 16 (the
    reduced-scale gradient checks use 32x32).  If ``trace`` is a dict it
    receives every named intermediate (``conv1``, ``mfm1``, ``pool1``, ...).
    """
    _check_input(x, strict)
    y = x
    for name, kind, cin, _, _, pad in BASE_LAYOUT:
        if kind == "conv":
            kernel, bias = params[f"base.{name}.kernel"], params[f"base.{name}.bias"]
            if trace is None:
                y = mfm_conv(y, kernel, bias, pad)
            else:
                # unfused, so the pre-activation map is observed rather than inferred
                pre = conv2d(y, kernel, bias, 1, pad)
                y = mfm(pre)
                trace[name] = pre.shape
                trace["mfm" + name[4:]] = y.shape
        elif kind == "pool":
            y = maxpool2(y)
        else:
            y = residual_block(y, ResidualBlockSpec.from_params(params, f"base.{name}", cin))
        if trace is not None and kind != "conv":
            trace[name] = y.shape
    return y


def partition(f: Variable, size: int | None = BASE_GRID) -> list[Variable]:
    """Split ``[N, C, S, S]`` into four ``S/2`` quadrants: TL, TR, BL, BR."""
    if f.value.ndim != 4:
        raise InvalidArgumentError(f"partition expects [N, C, H, W], got {f.shape}")
    h, w = f.shape[2:]
    if size is not None and (h, w) != (size, size):
        raise InvalidArgumentError(f"partition expects {size}x{size} maps, got {h}x{w}")
    if h % 2 or w % 2:
        raise InvalidArgumentError(f"partition needs even spatial size, got {h}x{w}")
    hh, hw = h // 2, w // 2
    rows = (slice(0, hh), slice(hh, h))
    cols = (slice(0, hw), slice(hw, w))
    return [crop(f, (slice(None), slice(None), r, c)) for r in rows for c in cols]


def forward(params: dict[str, Variable], config: ModelConfig, x: Variable, strict: bool = True,
            patch_order=None) -> ForwardOutput:
    """Logits and features of every supervised head.

    Local head ``i`` reads quadrant ``patch_order[i]`` (identity by default);
    the global head reads the whole map.  With ``before_partition`` placement
    each local branch's ECA weights are computed from the whole map and the
    quadrant is cut afterwards, so the parameter set is unchanged.
    """
    f = forward_base(params, x, strict=strict)
    order = tuple(range(NUM_LOCAL)) if patch_order is None else tuple(patch_order)
    if sorted(order) != list(range(NUM_LOCAL)):
        raise InvalidArgumentError(f"patch_order must be a permutation of 0..3, got {order}")
    grid = BASE_GRID if strict else None
    logits, feats = [], []

    def run_head(slot, patch):
        feat, logit = head(patch, HeadSpec.from_params(params, f"head.{slot}", config.head_activation))
        feats.append(feat)
        logits.append(logit)

    def attend(slot, m):
        if not config.eca_enabled:
            return m
        return eca(m, EcaSpec(BASE_CHANNELS, params[f"eca.{slot}.kernel"]))

    if config.ensemble:
        if config.eca_enabled and config.eca_placement == "before_partition":
            for i in range(NUM_LOCAL):
                run_head(str(i), partition(attend(str(i), f), grid)[order[i]])
        else:
            patches = partition(f, grid)
            for i in range(NUM_LOCAL):
                run_head(str(i), attend(str(i), patches[order[i]]))
    if config.global_head:
        run_head("global", attend("global", f))
    return ForwardOutput(logits, feats)


def head_probabilities(out: ForwardOutput) -> np.ndarray:
    """Mean over heads of per-head softmax, ``[N, K]``."""
    probs = np.stack([softmax(l.value.astype(np.float64)) for l in out.per_head_logits])
    return probs.mean(axis=0)


def predict_batch(params: dict[str, Variable], config: ModelConfig, images: np.ndarray,
                  mirror: bool = True, strict: bool = True) -> np.ndarray:
    """Class probabilities for ``[N, 1, H, W]`` images, optionally mirror-averaged."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[:, None]
    n = images.shape[0]
    if mirror:
        batch = np.concatenate([images, images[..., ::-1]], axis=0)
        p = head_probabilities(forward(params, config, Variable(batch), strict=strict))
        return (p[:n] + p[n:]) / 2
    return head_probabilities(forward(params, config, Variable(images), strict=strict))


def predict(params: dict[str, Variable], config: ModelConfig, image: np.ndarray,
            mirror: bool = True) -> np.ndarray:
    """Class probabilities ``[K]`` for one preprocessed ``[1, 128, 128]`` image."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] != 1:
        raise InvalidArgumentError(f"predict expects a single [1, H, W] image, got {image.shape}")
    return predict_batch(params, config, image[None], mirror=mirror)[0]
