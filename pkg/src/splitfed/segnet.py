"""Split encoder/decoder segmentation network.

A network is a flat list of layers; the encoder and decoder are two slices of
that list joined at the latent tensor, so running them back to back is the
same computation as running the concatenated list.

Encoder: three Down Blocks ``(conv3x3 -> ReLU) * n -> maxpool2`` followed by a
1x1 projection + ReLU onto the shared latent channel count. Decoder: three
``upsample2 -> conv3x3 -> ReLU`` blocks and a 1x1 head producing one logit map.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .nn import ParamSet

VARIANT_WIDTHS = {
    "small": (8, 16, 32),
    "medium": (16, 32, 64),
    "large": (32, 64, 128),
}
VARIANT_CONVS_PER_BLOCK = {"small": 1, "medium": 1, "large": 2}
LATENT_CHANNELS = 32
ENCODER_PREFIX = "enc."
DECODER_PREFIX = "dec."
DECODER_WIDTHS = (32, 16, 8)


class LatentShape(NamedTuple):
    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class EncoderSpec:
    variant: str = "small"
    input_channels: int = 1
    image_size: tuple[int, int] = (32, 32)
    latent_channels: int = LATENT_CHANNELS

    def __post_init__(self):
        if self.variant not in VARIANT_WIDTHS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}; choose from {sorted(VARIANT_WIDTHS)}")
        h, w = self.image_size
        if h % 8 or w % 8 or h <= 0 or w <= 0:
            raise ConfigError(f"input resolution {h}x{w} is not divisible by 8")
        if self.input_channels <= 0:
            raise ConfigError("input_channels must be positive")

    @property
    def widths(self) -> tuple[int, int, int]:
        return VARIANT_WIDTHS[self.variant]

    @property
    def base_width(self) -> int:
        return self.widths[0]

    @property
    def convs_per_block(self) -> int:
        return VARIANT_CONVS_PER_BLOCK[self.variant]

    @property
    def latent_shape(self) -> LatentShape:
        h, w = self.image_size
        return LatentShape(self.latent_channels, h // 8, w // 8)

    def describe(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["widths"] = list(self.widths)
        d["latent_shape"] = list(self.latent_shape)
        return d


@dataclass(frozen=True)
class DecoderSpec:
    latent: LatentShape = LatentShape(LATENT_CHANNELS, 4, 4)
    widths: tuple[int, int, int] = DECODER_WIDTHS

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.latent.height * 8, self.latent.width * 8)

    def describe(self) -> dict:
        return {"latent_shape": list(self.latent), "widths": list(self.widths),
                "image_size": list(self.image_size)}


# A layer is ("conv", prefix) | ("relu",) | ("pool",) | ("up",); conv
# parameters live under "<prefix>.w" and "<prefix>.b".


def encoder_layers(spec: EncoderSpec) -> list[tuple]:
    layers = []
    for i in range(1, 4):
        for j in range(1, spec.convs_per_block + 1):
            layers += [("conv", f"enc.down{i}.conv{j}"), ("relu",)]
        layers.append(("pool",))
    layers += [("conv", "enc.proj"), ("relu",)]
    return layers


def encoder_layout(spec: EncoderSpec) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    c_in = spec.input_channels
    for i, width in enumerate(spec.widths, start=1):
        for j in range(1, spec.convs_per_block + 1):
            layout += [(f"enc.down{i}.conv{j}.w", (width, c_in, 3, 3)),
                       (f"enc.down{i}.conv{j}.b", (width,))]
            c_in = width
    layout += [("enc.proj.w", (spec.latent_channels, c_in, 1, 1)),
               ("enc.proj.b", (spec.latent_channels,))]
    return layout


def decoder_layers(spec: DecoderSpec | None = None) -> list[tuple]:
    layers = []
    for i in range(1, 4):
        layers += [("up",), ("conv", f"dec.up{i}.conv"), ("relu",)]
    layers.append(("conv", "dec.head"))
    return layers


def decoder_layout(spec: DecoderSpec) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    c_in = spec.latent.channels
    for i, width in enumerate(spec.widths, start=1):
        layout += [(f"dec.up{i}.conv.w", (width, c_in, 3, 3)), (f"dec.up{i}.conv.b", (width,))]
        c_in = width
    layout += [("dec.head.w", (1, c_in, 1, 1)), ("dec.head.b", (1,))]
    return layout


def build_encoder(spec: EncoderSpec, seed: int) -> tuple[ParamSet, LatentShape]:
    return nn.init_params(encoder_layout(spec), seed), spec.latent_shape


def build_decoder(spec: DecoderSpec, seed: int) -> ParamSet:
    return nn.init_params(decoder_layout(spec), seed)


def decoder_spec_from_params(params: ParamSet, image_size=(32, 32)) -> DecoderSpec:
    """Recover the decoder architecture from its parameter shapes."""
    try:
        widths = tuple(int(params[f"dec.up{i}.conv.w"].shape[0]) for i in range(1, 4))
        c_lat = int(params["dec.up1.conv.w"].shape[1])
    except KeyError as exc:
        raise ConfigError(f"not a decoder ParamSet: missing {exc}") from None
    h, w = image_size
    if h % 8 or w % 8:
        raise ConfigError(f"image size {h}x{w} is not divisible by 8")
    return DecoderSpec(LatentShape(c_lat, h // 8, w // 8), widths)


def param_count(params: ParamSet) -> int:
    return params.count()


# ---------------------------------------------------------------- execution


def run_layers(layers, params: ParamSet, x: np.ndarray):
    """Forward pass through ``layers``; returns ``(out, caches)``."""
    caches = []
    for layer in layers:
        kind = layer[0]
        if kind == "conv":
            x, cache = nn.conv2d(x, params[layer[1] + ".w"], params[layer[1] + ".b"])
        elif kind == "relu":
            x, cache = nn.relu(x)
        elif kind == "pool":
            x, cache = nn.maxpool2(x)
        elif kind == "up":
            x, cache = nn.upsample2(x)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        caches.append(cache)
    return x, caches


def backprop_layers(layers, caches, dout, need_input_grad=True, need_param_grads=True):
    """Reverse pass; returns ``(d_input, {param_name: grad})``.

    With ``need_param_grads=False`` no weight gradients are formed; the input
    gradient is unaffected.
    """
    grads = {}
    d = dout
    last = len(layers) - 1
    for pos in range(last, -1, -1):
        layer, cache = layers[pos], caches[pos]
        kind = layer[0]
        need_dx = need_input_grad or pos > 0
        if kind == "conv":
            d, dw, db = nn.conv2d_backward(cache, d, need_dx=need_dx, need_params=need_param_grads)
            if need_param_grads:
                grads[layer[1] + ".w"] = dw
                grads[layer[1] + ".b"] = db
        elif kind == "relu":
            d = nn.relu_backward(cache, d)
        elif kind == "pool":
            d = nn.maxpool2_backward(cache, d)
        elif kind == "up":
            d = nn.upsample2_backward(cache, d)
        if d is None:
            break
    return d, grads


def _ordered(params: ParamSet, grads: dict) -> ParamSet:
    return ParamSet((name, grads[name]) for name in params)


def _to_planes(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """``(B,C,H,W)`` or ``(C,H,W)`` -> channel-major ``(C,B,H,W)``."""
    if x.ndim == 3:
        return x[:, None], True
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)), False


def _from_planes(x: np.ndarray, single: bool) -> np.ndarray:
    if single:
        return x[:, 0]
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _encoder_layers_for(params: ParamSet) -> list[tuple]:
    n = sum(1 for k in params if k.startswith("enc.down1.") and k.endswith(".w"))
    layers = []
    for i in range(1, 4):
        for j in range(1, n + 1):
            layers += [("conv", f"enc.down{i}.conv{j}"), ("relu",)]
        layers.append(("pool",))
    layers += [("conv", "enc.proj"), ("relu",)]
    return layers


class _Cache(NamedTuple):
    layers: list
    caches: list
    out_shape: tuple
    in_shape: tuple
    single: bool


def encoder_forward(params: ParamSet, image: np.ndarray):
    """Image ``(C,H,W)`` or batch ``(B,C,H,W)`` -> post-ReLU latent of the same rank.

    Returns ``(latent, cache)``.
    """
    image = np.asarray(image)
    w = params["enc.down1.conv1.w"]
    if image.ndim not in (3, 4):
        raise ShapeError(f"encoder input: expected (C,H,W) or (B,C,H,W), got rank {image.ndim}")
    c, h, wd = image.shape[-3:]
    if c != w.shape[1]:
        raise ShapeError(f"encoder input: channel axis is {c}, encoder expects {w.shape[1]}")
    if h % 8 or wd % 8:
        raise ShapeError(f"encoder input: spatial axes {h}x{wd} not divisible by 8")
    x, single = _to_planes(image.astype(w.dtype, copy=False))
    layers = _encoder_layers_for(params)
    z, caches = run_layers(layers, params, x)
    latent = _from_planes(z, single)
    return latent, _Cache(layers, caches, latent.shape, image.shape, single)


def encoder_backward(params: ParamSet, cache: _Cache, d_latent: np.ndarray) -> ParamSet:
    """Gradients of every encoder parameter, in ``params`` order."""
    d_latent = np.asarray(d_latent)
    if d_latent.shape != cache.out_shape:
        raise ShapeError(f"encoder_backward: dLatent shape {d_latent.shape} != latent shape {cache.out_shape}")
    d, _ = _to_planes(d_latent)
    _, grads = backprop_layers(cache.layers, cache.caches, d, need_input_grad=False)
    return _ordered(params, grads)


def decoder_forward(params: ParamSet, latent: np.ndarray):
    """Latent ``(c,h,w)`` or ``(B,c,h,w)`` -> logits ``([B,]1,8h,8w)``."""
    latent = np.asarray(latent)
    w = params["dec.up1.conv.w"]
    if latent.ndim not in (3, 4) or latent.shape[-3] != w.shape[1]:
        raise ShapeError(f"decoder input: latent shape {latent.shape} does not have {w.shape[1]} channels on axis -3")
    z, single = _to_planes(latent.astype(w.dtype, copy=False))
    layers = decoder_layers()
    out, caches = run_layers(layers, params, z)
    logits = _from_planes(out, single)
    return logits, _Cache(layers, caches, logits.shape, latent.shape, single)


def decoder_backward(params: ParamSet, cache: _Cache, d_logits: np.ndarray, param_grads=True):
    """Returns ``(dLatent, decoder_grads)``.

    ``param_grads=False`` skips the weight gradients (returned as None); the
    latent gradient is computed identically either way.
    """
    d_logits = np.asarray(d_logits)
    if d_logits.shape != cache.out_shape:
        raise ShapeError(f"decoder_backward: dLogits shape {d_logits.shape} != logits shape {cache.out_shape}")
    d, _ = _to_planes(d_logits)
    d_lat, grads = backprop_layers(cache.layers, cache.caches, d, need_param_grads=param_grads)
    return _from_planes(d_lat, cache.single), (_ordered(params, grads) if param_grads else None)


def full_forward(enc_params: ParamSet, dec_params: ParamSet, image):
    """Encoder and decoder run as one concatenated layer list (no split)."""
    image = np.asarray(image)
    x, single = _to_planes(image.astype(np.float32, copy=False))
    layers = _encoder_layers_for(enc_params) + decoder_layers()
    out, _ = run_layers(layers, enc_params.merged(dec_params), x)
    return _from_planes(out, single)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: ParamSet, path, descriptor: dict | None = None) -> None:
    path = Path(path)
    nn.save_params(params, path)
    if descriptor is not None:
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(descriptor, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[ParamSet, dict | None]:
    path = Path(path)
    params = nn.load_params(path)
    side = path.with_suffix(path.suffix + ".json")
    descriptor = json.loads(side.read_text()) if side.exists() else None
    return params, descriptor


def encoder_spec_from_descriptor(d: dict) -> EncoderSpec:
    return EncoderSpec(
        variant=d["variant"],
        input_channels=int(d.get("input_channels", 1)),
        image_size=tuple(d.get("image_size", (32, 32))),
        latent_channels=int(d.get("latent_channels", LATENT_CHANNELS)),
    )
