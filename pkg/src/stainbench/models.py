"""The stain-normalization U-Net and a 1x1-convolution pixel-mapper baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .layers import Conv, InitSpec, LayerStack, UpConv, init_params

KINDS = ("unet", "pixelmapper")


@dataclass
class ModelSpec:
    kind: str = "unet"
    base_channels: int = 64
    depth: int = 2
    widths: list[int] = field(default_factory=lambda: [3, 32, 32, 3])

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "unet":
            if self.depth != 2:
                raise ValueError(f"only the two-block U-Net is supported, got depth {self.depth}")
            if self.base_channels < 1:
                raise ValueError("base_channels must be positive")
        else:
            w = list(self.widths)
            if len(w) < 2 or w[0] != 3 or w[-1] != 3 or min(w) < 1:
                raise ValueError(f"pixel-mapper widths must run 3 -> ... -> 3, got {w}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d).validate()


class UNet(LayerStack):
    """Two contraction blocks, a bottleneck, two expansion blocks and a 1x1 head.

    Widths for base b: b, 2b (encoders), 4b (bottleneck), 2b, b (decoders).
    Each expansion step is upconv (halving channels), concatenation with the
    matching encoder output (skip first), then two 3x3 convs. Every 3x3 conv
    is followed by ReLU; the 1x1 head is linear.
    """

    def __init__(self, spec: ModelSpec):
        spec.validate()
        b = spec.base_channels
        self.widths = [b * 2**i for i in range(spec.depth + 1)]
        layers, prev = [], 3
        for i, w in enumerate(self.widths[:-1]):
            layers += [Conv(f"enc{i + 1}.conv1", prev, w), Conv(f"enc{i + 1}.conv2", w, w)]
            prev = w
        top = self.widths[-1]
        layers += [Conv("bottleneck.conv1", prev, top), Conv("bottleneck.conv2", top, top)]
        prev = top
        for i, w in enumerate(reversed(self.widths[:-1])):
            layers += [UpConv(f"up{i + 1}", prev),
                       Conv(f"dec{i + 1}.conv1", 2 * w, w), Conv(f"dec{i + 1}.conv2", w, w)]
            prev = w
        layers.append(Conv("head", prev, 3, k=1, relu=False))
        super().__init__(spec, layers)
        self._by_name = {layer.name: layer for layer in layers}

    @property
    def multiple(self) -> int:
        return 2**self.spec.depth

    def check_input(self, x):
        x = super().check_input(x)
        m = self.multiple
        for dim, size in (("h", x.shape[2]), ("w", x.shape[3])):
            if size % m:
                raise T.ShapeError(
                    f"U-Net input {dim}={size} must be divisible by {m}; "
                    "reflect-pad the image (stainbench.data.pad_to_multiple) first",
                    dim=dim, expected=m, got=size)
        return x

    def _block(self, prefix, x, caches):
        for name in (f"{prefix}.conv1", f"{prefix}.conv2"):
            x, c = self._by_name[name].forward(self.params, x)
            caches[name] = c
        return x

    def _block_back(self, prefix, g, caches, grads):
        for name in (f"{prefix}.conv2", f"{prefix}.conv1"):
            g, gr = self._by_name[name].backward(self.params, caches[name], g)
            grads.update(gr)
        return g

    def forward(self, x):
        x = self.check_input(x)
        caches, skips, masks = {}, [], []
        for i in range(self.spec.depth):
            x = self._block(f"enc{i + 1}", x, caches)
            skips.append(x)
            x, m = T.maxpool2x2_forward(x)
            masks.append(m)
        x = self._block("bottleneck", x, caches)
        for i in range(self.spec.depth):
            up = self._by_name[f"up{i + 1}"]
            x, caches[up.name] = up.forward(self.params, x)
            x = T.concat_channels(skips[-1 - i], x)
            x = self._block(f"dec{i + 1}", x, caches)
        x, caches["head"] = self._by_name["head"].forward(self.params, x)
        return x, {"caches": caches, "masks": masks, "skip_ch": [s.shape[1] for s in skips]}

    def backward(self, grad_out, ctx):
        caches, masks = ctx["caches"], ctx["masks"]
        grads = {}
        g, gr = self._by_name["head"].backward(self.params, caches["head"], grad_out)
        grads.update(gr)
        skip_grads = {}
        for i in reversed(range(self.spec.depth)):
            g = self._block_back(f"dec{i + 1}", g, caches, grads)
            enc = self.spec.depth - 1 - i
            skip_grads[enc], g = T.split_channels(g, ctx["skip_ch"][enc])
            g, gr = self._by_name[f"up{i + 1}"].backward(self.params, caches[f"up{i + 1}"], g)
            grads.update(gr)
        g = self._block_back("bottleneck", g, caches, grads)
        for i in reversed(range(self.spec.depth)):
            g = T.maxpool2x2_backward(g, masks[i]) + skip_grads[i]
            g = self._block_back(f"enc{i + 1}", g, caches, grads)
        return grads


class PixelMapper(LayerStack):
    """Fully 1x1-convolutional colour mapper: each output pixel sees one input pixel."""

    def __init__(self, spec: ModelSpec):
        spec.validate()
        w = spec.widths
        layers = [Conv(f"conv{i + 1}", w[i], w[i + 1], k=1, relu=i < len(w) - 2)
                  for i in range(len(w) - 1)]
        super().__init__(spec, layers)

    def forward(self, x):
        x = self.check_input(x)
        caches = []
        for layer in self.layers:
            x, c = layer.forward(self.params, x)
            caches.append(c)
        return x, caches

    def backward(self, grad_out, ctx):
        grads, g = {}, grad_out
        for layer, c in zip(reversed(self.layers), reversed(ctx)):
            g, gr = layer.backward(self.params, c, g)
            grads.update(gr)
        return grads


def build_unet(spec: ModelSpec, seed: int = 0) -> UNet:
    if spec.kind != "unet":
        raise ValueError(f"build_unet needs kind 'unet', got {spec.kind!r}")
    model = UNet(spec)
    init_params(InitSpec(seed), model)
    return model


def build_pixelmapper(spec: ModelSpec, seed: int = 0) -> PixelMapper:
    if spec.kind != "pixelmapper":
        raise ValueError(f"build_pixelmapper needs kind 'pixelmapper', got {spec.kind!r}")
    model = PixelMapper(spec)
    init_params(InitSpec(seed), model)
    return model


def build_model(spec: ModelSpec, seed: int = 0) -> LayerStack:
    spec.validate()
    return build_unet(spec, seed) if spec.kind == "unet" else build_pixelmapper(spec, seed)


def infer(model: LayerStack, image, batch_size: int = 8) -> np.ndarray:
    """Run the model on (n, 3, h, w) images in [0, 1] and clamp the result to [0, 1]."""
    x = model.check_input(np.asarray(image, dtype=model.dtype))
    outs = [model(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    return np.clip(np.concatenate(outs, axis=0), 0.0, 1.0)
