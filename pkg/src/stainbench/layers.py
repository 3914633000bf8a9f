"""Layer objects, parameter registry, initialization and the L1 objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class InitSpec:
    seed: int = 0
    scheme: str = "he-normal"

    def __post_init__(self):
        if self.scheme != "he-normal":
            raise ValueError(f"unknown init scheme {self.scheme!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


class Conv:
    """Square-kernel convolution with optional trailing ReLU.

    3x3 kernels use padding 1 so spatial size is preserved.
    """

    def __init__(self, name: str, in_ch: int, out_ch: int, k: int = 3, relu: bool = True):
        if k not in (1, 3):
            raise ValueError(f"{name}: kernel size must be 1 or 3, got {k}")
        self.name, self.in_ch, self.out_ch, self.k, self.relu = name, in_ch, out_ch, k, relu

    def param_shapes(self):
        return {f"{self.name}.weight": (self.out_ch, self.in_ch, self.k, self.k),
                f"{self.name}.bias": (self.out_ch,)}

    def fan_in(self) -> int:
        return self.in_ch * self.k * self.k

    def _params(self, params) -> T.ConvParams:
        return T.ConvParams(params[f"{self.name}.weight"], params[f"{self.name}.bias"],
                            stride=1, padding=self.k // 2)

    def forward(self, params, x):
        z = T.conv2d_forward(x, self._params(params))
        if self.relu:
            return T.relu_forward(z), (x, z)
        return z, (x, None)

    def backward(self, params, cache, g):
        x, z = cache
        if self.relu:
            g = T.relu_backward(g, z)
        gx, gw, gb = T.conv2d_backward(g, x, self._params(params))
        return gx, {f"{self.name}.weight": gw, f"{self.name}.bias": gb}


class UpConv:
    """2x2 stride-2 transposed convolution halving the channel count."""

    def __init__(self, name: str, in_ch: int):
        if in_ch % 2:
            raise ValueError(f"{name}: up-convolution needs an even channel count, got {in_ch}")
        self.name, self.in_ch, self.out_ch = name, in_ch, in_ch // 2

    def param_shapes(self):
        return {f"{self.name}.weight": (self.in_ch, self.out_ch, 2, 2),
                f"{self.name}.bias": (self.out_ch,)}

    def fan_in(self) -> int:
        # each output pixel receives exactly one tap from every input channel
        return self.in_ch

    def _params(self, params) -> T.ConvParams:
        return T.ConvParams(params[f"{self.name}.weight"], params[f"{self.name}.bias"], stride=2)

    def forward(self, params, x):
        return T.upconv2x2_forward(x, self._params(params)), x

    def backward(self, params, cache, g):
        gx, gw, gb = T.upconv2x2_backward(g, cache, self._params(params))
        return gx, {f"{self.name}.weight": gw, f"{self.name}.bias": gb}


class LayerStack:
    """Base class for models: an ordered set of layers plus their parameters.

    Subclasses wire ``forward``/``backward``. ``forward`` returns the output
    and a context object holding that call's cached activations, so separate
    calls never share caches.
    """

    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = layers
        self.params: dict[str, np.ndarray] = {}

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for layer in self.layers:
            for name, shape in layer.param_shapes().items():
                if name in shapes:
                    raise ValueError(f"duplicate parameter name {name}")
                shapes[name] = shape
        return shapes

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        """Copy of the model with all parameters cast to ``dtype``."""
        clone = self.__class__(self.spec)
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return clone

    def check_input(self, x):
        x = T.as_tensor(x)
        if x.shape[1] != 3:
            raise T.ShapeError(f"model expects 3 input channels, got {x.shape[1]}",
                               dim="c", expected=3, got=x.shape[1])
        return x

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out, ctx):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)[0]


def init_params(spec: InitSpec, model: LayerStack) -> dict[str, np.ndarray]:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases, in registry order."""
    rng = np.random.default_rng(spec.seed)
    params = {}
    for layer in model.layers:
        std = np.sqrt(2.0 / layer.fan_in())
        for name, shape in layer.param_shapes().items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=T.DTYPE)
            else:
                params[name] = (rng.standard_normal(shape) * std).astype(T.DTYPE)
    model.params = params
    return params


def l1_loss(pred, target):
    """Mean absolute error and its gradient, with sign(0) = 0."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise T.ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}",
                           dim="shape", expected=target.shape, got=pred.shape)
    diff = pred - target
    loss = float(np.abs(diff).astype(np.float64).mean())
    grad = (np.sign(diff) / diff.size).astype(diff.dtype)
    return loss, grad


def forward_backward(model: LayerStack, batch_in, batch_target):
    """One training evaluation: returns (L1 loss, gradient for every parameter)."""
    out, ctx = model.forward(batch_in)
    loss, g = l1_loss(out, batch_target)
    grads = model.backward(g, ctx)
    missing = set(model.params) - set(grads)
    if missing:
        raise RuntimeError(f"backward did not produce gradients for {sorted(missing)}")
    return loss, grads
