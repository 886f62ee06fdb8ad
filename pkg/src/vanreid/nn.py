"""Small layer library on top of the autodiff engine.

Parameters are Tensors with requires_grad=True, buffers (running statistics)
are Tensors with requires_grad=False; both are discovered by walking module
attributes in definition order, so state naming is deterministic.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import io, ops
from .tensor import Tensor

__all__ = ["Module", "Conv2d", "Linear", "global_average_pool"]


class Module:
    def named_state(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_state(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_state(f"{name}.{i}.")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_state():
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_state()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_state())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, t in own.items():
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != t.data.shape:
                raise ValueError(f"state {name}: shape {src.shape} != {t.data.shape}")
            t.data = src.copy()

    def save(self, path) -> None:
        io.save_checkpoint(path, self.state_arrays())

    def load(self, path) -> None:
        self.load_state(io.load_checkpoint(path))


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    """2-d convolution with square kernel; init is He-normal or zero."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True, init: str = "he"):
        self.stride = stride
        self.padding = padding
        if init == "zero":
            w = np.zeros((cout, cin, k, k))
        else:
            w = _he_normal(rng, (cout, cin, k, k), cin * k * k)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            b, _, h, w = out.shape
            bmap = ops.reshape(self.bias, (1, self.bias.shape[0], 1, 1))
            out = ops.add(out, ops.tile(bmap, (b, 1, h, w)))
        return out


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator,
                 bias: bool = True, init: str = "he"):
        if init == "zero":
            w = np.zeros((din, dout))
        else:
            w = _he_normal(rng, (din, dout), din)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, self.weight)
        if self.bias is not None:
            brow = ops.reshape(self.bias, (1, self.bias.shape[0]))
            out = ops.add(out, ops.tile(brow, (out.shape[0], 1)))
        return out


def global_average_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    return ops.mean(x, axes=(2, 3))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of (B, C, H, W)."""
    b, c, h, w = x.shape
    out = ops.reshape(x, (b, c, h, 1, w, 1))
    out = ops.tile(out, (1, 1, 1, 2, 1, 2))
    return ops.reshape(out, (b, c, 2 * h, 2 * w))


def _instance_norm(x: Tensor, eps: float) -> Tensor:
    b, c, h, w = x.shape
    mu = ops.tile(ops.mean(x, axes=(2, 3), keepdims=True), (1, 1, h, w))
    var = ops.tile(ops.variance(x, axes=(2, 3), keepdims=True), (1, 1, h, w))
    return ops.mul(ops.sub(x, mu), ops.pow_(ops.add(var, eps), -0.5))


class SnrBlock(Module):
    """Style-normalization block: instance-normalize, then gate back the
    removed residual per channel, out = IN(F) + sigmoid(gate) * (F - IN(F)).

    The gate starts at zero, so at init the block keeps half the residual.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.gate = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ValueError(f"snr block expects (B, C, H, W), got {x.shape}")
        b, c, h, w = x.shape
        if c != self.gate.shape[0]:
            raise ValueError(f"snr block built for {self.gate.shape[0]} channels, got {c}")
        normed = _instance_norm(x, self.eps)
        gate = ops.tile(ops.reshape(ops.sigmoid(self.gate), (1, c, 1, 1)), (b, 1, h, w))
        return ops.add(normed, ops.mul(gate, ops.sub(x, normed)))
