"""Dual-stream recognition model.

One conv backbone serves two streams: the captured image and a rendered view
of the same person in a fixed pose. Per-stream batch norm keeps their
statistics apart while the conv weights stay shared. Fusion blocks after the
later stages let render tokens attend across both streams; image tokens
attend only within their own stream, so the image branch is unaffected by
whatever is (or is not) rendered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .tensor import Tensor

__all__ = [
    "DualBatchNorm",
    "cross_attention",
    "FusionBlock",
    "Backbone",
    "DualStreamModel",
    "ModelOutputs",
    "texture_embedder",
    "STAGE_CHANNELS",
]

STAGE_CHANNELS = (16, 32, 64, 128)
_STREAMS = ("image", "render")


class DualBatchNorm(nn.Module):
    """Batch norm with separate affine weights and running stats per stream.

    Training mode standardizes with the current batch (population variance)
    and folds it into the running estimates; eval mode uses the running
    estimates only. Updating stats for one stream never touches the other.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        for stream in _STREAMS:
            setattr(self, f"gamma_{stream}", Tensor(np.ones(channels), requires_grad=True))
            setattr(self, f"beta_{stream}", Tensor(np.zeros(channels), requires_grad=True))
            setattr(self, f"running_mean_{stream}", Tensor(np.zeros(channels)))
            setattr(self, f"running_var_{stream}", Tensor(np.ones(channels)))

    def forward(self, x: Tensor, stream: str, training: bool) -> Tensor:
        if stream not in _STREAMS:
            raise ValueError(f"unknown stream {stream!r}, expected one of {_STREAMS}")
        if len(x.shape) != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, H, W), got {x.shape}")
        b, c, h, w = x.shape
        if training:
            if b < 2:
                raise ValueError(f"batch norm needs batch >= 2 in training mode, got {b}")
            mean = ops.mean(x, axes=(0, 2, 3), keepdims=True)
            var = ops.variance(x, axes=(0, 2, 3), keepdims=True)
            rm = getattr(self, f"running_mean_{stream}")
            rv = getattr(self, f"running_var_{stream}")
            m = self.momentum
            rm.data = (1 - m) * rm.data + m * mean.data.reshape(c)
            rv.data = (1 - m) * rv.data + m * var.data.reshape(c)
        else:
            mean = Tensor(getattr(self, f"running_mean_{stream}").data.reshape(1, c, 1, 1))
            var = Tensor(getattr(self, f"running_var_{stream}").data.reshape(1, c, 1, 1))
        mean = ops.tile(mean, (b, 1, h, w))
        var = ops.tile(var, (b, 1, h, w))
        xhat = ops.div(ops.sub(x, mean), ops.pow_(ops.add(var, self.eps), 0.5))
        gamma = getattr(self, f"gamma_{stream}")
        beta = getattr(self, f"beta_{stream}")
        gamma = ops.tile(ops.reshape(gamma, (1, c, 1, 1)), (b, 1, h, w))
        beta = ops.tile(ops.reshape(beta, (1, c, 1, 1)), (b, 1, h, w))
        return ops.add(ops.mul(xhat, gamma), beta)


# ------------------------------------------------------------- attention core


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    t = ops.reshape(t, (b, n, heads, c // heads))
    t = ops.transpose(t, (0, 2, 1, 3))
    return ops.reshape(t, (b * heads, n, c // heads))


def _merge_heads(t: Tensor, heads: int) -> Tensor:
    bh, n, d = t.shape
    t = ops.reshape(t, (bh // heads, heads, n, d))
    t = ops.transpose(t, (0, 2, 1, 3))
    return ops.reshape(t, (bh // heads, n, heads * d))


def cross_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                    scale: float | None = None) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention over token sequences.

    q is (B, Nq, C); k and v are (B, Nk, C). Returns the attended tokens
    (B, Nq, C) and the attention probabilities (B*heads, Nq, Nk), whose rows
    each sum to one.
    """
    b, nq, c = q.shape
    if c % heads:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    if k.shape[0] != b or v.shape[0] != b or k.shape[2] != c or v.shape[2] != c:
        raise ValueError(f"mismatched attention shapes q={q.shape} k={k.shape} v={v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(c / heads)
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    logits = ops.mul(ops.matmul(qh, ops.transpose(kh, (0, 2, 1))), float(scale))
    probs = ops.softmax(logits, axis=2)
    out = _merge_heads(ops.matmul(probs, vh), heads)
    return out, probs


def _to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def _to_maps(t: Tensor, h: int, w: int) -> Tensor:
    b, n, c = t.shape
    return ops.transpose(ops.reshape(t, (b, h, w, c)), (0, 3, 1, 2))


class _TokenMlp(nn.Module):
    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 2,
                 zero_init: bool = True):
        self.fc1 = nn.Linear(channels, channels * ratio, rng)
        self.fc2 = nn.Linear(channels * ratio, channels, rng,
                             init="zero" if zero_init else "he")

    def __call__(self, t: Tensor) -> Tensor:
        b, n, c = t.shape
        x = ops.reshape(t, (b * n, c))
        x = self.fc2(ops.relu(self.fc1(x)))
        return ops.reshape(x, (b, n, c))


class FusionBlock(nn.Module):
    """Cross-stream token mixer with one-way information flow.

    Both streams are batch-normalized (separately), projected to q/k/v with
    shared 3x3 convs, and attended: render tokens query the union of both
    streams' keys, image tokens query only their own. With zero_residual_init
    the output projection and second MLP layer start at zero, so the block is
    an exact identity on the normalized features at initialization. An
    optional learned class vector queries the union as well, giving one
    summary embedding per sample.
    """

    def __init__(self, channels: int, rng: np.random.Generator, heads: int = 4,
                 class_token: bool = False, mlp_ratio: int = 2,
                 zero_residual_init: bool = True, scale: float | None = None):
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.scale = scale
        self.bn = DualBatchNorm(channels)
        self.q_conv = nn.Conv2d(channels, channels, 3, rng, stride=1, padding=1)
        self.k_conv = nn.Conv2d(channels, channels, 3, rng, stride=1, padding=1)
        self.v_conv = nn.Conv2d(channels, channels, 3, rng, stride=1, padding=1)
        self.proj = nn.Linear(channels, channels, rng,
                              init="zero" if zero_residual_init else "he")
        self.mlp = _TokenMlp(channels, rng, ratio=mlp_ratio, zero_init=zero_residual_init)
        self.class_vec = Tensor(
            rng.normal(scale=0.02, size=channels), requires_grad=True) if class_token else None

    def _project(self, t: Tensor) -> Tensor:
        b, n, c = t.shape
        return ops.reshape(self.proj(ops.reshape(t, (b * n, c))), (b, n, c))

    def _residual(self, base: Tensor, attended: Tensor) -> Tensor:
        y = ops.add(base, self._project(attended))
        return ops.add(y, self.mlp(y))

    def forward(self, image_maps: Tensor, render_maps: Tensor | None,
                training: bool) -> tuple[Tensor, Tensor | None, Tensor | None]:
        if render_maps is not None and render_maps.shape != image_maps.shape:
            raise ValueError(
                f"streams must share shape, got {image_maps.shape} and {render_maps.shape}")
        b, c, h, w = image_maps.shape
        x_i = self.bn.forward(image_maps, "image", training)
        t_i = _to_tokens(x_i)
        q_i = _to_tokens(self.q_conv(x_i))
        k_i = _to_tokens(self.k_conv(x_i))
        v_i = _to_tokens(self.v_conv(x_i))

        att_i, _ = cross_attention(q_i, k_i, v_i, self.heads, self.scale)
        y_i = self._residual(t_i, att_i)

        y_r = None
        cls = None
        if render_maps is not None:
            x_r = self.bn.forward(render_maps, "render", training)
            t_r = _to_tokens(x_r)
            q_r = _to_tokens(self.q_conv(x_r))
            k_r = _to_tokens(self.k_conv(x_r))
            v_r = _to_tokens(self.v_conv(x_r))
            k_all = ops.concat([k_r, k_i], axis=1)
            v_all = ops.concat([v_r, v_i], axis=1)
            att_r, _ = cross_attention(q_r, k_all, v_all, self.heads, self.scale)
            y_r = self._residual(t_r, att_r)

            if self.class_vec is not None:
                q_cls = ops.tile(ops.reshape(self.class_vec, (1, 1, c)), (b, 1, 1))
                att_cls, _ = cross_attention(q_cls, k_all, v_all, self.heads, self.scale)
                cls = ops.reshape(self._residual(q_cls, att_cls), (b, c))

        maps_i = _to_maps(y_i, h, w)
        maps_r = _to_maps(y_r, h, w) if y_r is not None else None
        return maps_i, maps_r, cls


# ------------------------------------------------------------------- backbone


class Backbone(nn.Module):
    """Stem plus four stride-2 stages, each followed by a feature
    restitution gate. No batch norm here: stream-specific normalization
    happens in the fusion blocks."""

    def __init__(self, rng: np.random.Generator, in_channels: int = 3,
                 stage_channels: tuple[int, ...] = STAGE_CHANNELS):
        if not stage_channels or any(c < 1 for c in stage_channels):
            raise ValueError(f"stage channels must be positive, got {stage_channels}")
        self.channels = tuple(int(c) for c in stage_channels)
        self.stem = nn.Conv2d(in_channels, self.channels[0], 3, rng, stride=2, padding=1)
        self.stage_a = []
        self.stage_b = []
        self.snr = []
        cin = self.channels[0]
        for cout in self.channels:
            self.stage_a.append(nn.Conv2d(cin, cout, 3, rng, stride=2, padding=1))
            self.stage_b.append(nn.Conv2d(cout, cout, 3, rng, stride=1, padding=1))
            self.snr.append(nn.SnrBlock(cout))
            cin = cout

    def run_stem(self, x: Tensor) -> Tensor:
        return ops.relu(self.stem(x))

    def run_stage(self, index: int, x: Tensor) -> Tensor:
        x = ops.relu(self.stage_a[index](x))
        x = ops.relu(self.stage_b[index](x))
        return self.snr[index](x)

    def forward(self, x: Tensor) -> Tensor:
        x = self.run_stem(x)
        for i in range(len(self.channels)):
            x = self.run_stage(i, x)
        return x


def texture_embedder(backbone: Backbone, depth: int = 2):
    """Embed texture maps (B, 3, T, T) with the first ``depth`` backbone
    stages, flattened per sample. Used as the distance space for the
    content-biased texture loss."""
    if not 1 <= depth <= len(backbone.channels):
        raise ValueError(f"depth must be in 1..{len(backbone.channels)}, got {depth}")

    def embed(textures: Tensor) -> Tensor:
        x = backbone.run_stem(textures)
        for i in range(depth):
            x = backbone.run_stage(i, x)
        b = x.shape[0]
        return ops.reshape(x, (b, int(np.prod(x.shape[1:]))))

    return embed


# ---------------------------------------------------------------- full model


@dataclass
class ModelOutputs:
    embed_image: Tensor                 # (B, C)
    embed_render: Tensor | None         # (B, C)
    embed_class: Tensor | None          # (B, C)
    logits_image: Tensor                # (B, num_ids)
    logits_render: Tensor | None
    logits_class: Tensor | None


class DualStreamModel(nn.Module):
    """Shared backbone over both streams with fusion after chosen stages.

    The render stream carries one rendered view per sample, shaped exactly
    like the image batch. ``fusion_stages`` counts stages 1-based; the class
    vector lives in the last fusion block. With fusion_stages=() the model
    runs the image stream alone (renders, if passed, are embedded but never
    mixed in).
    """

    def __init__(self, rng: np.random.Generator, num_ids: int,
                 fusion_stages: tuple[int, ...] = (3, 4), heads: int = 4,
                 class_token: bool = True, zero_residual_init: bool = True,
                 stage_channels: tuple[int, ...] = STAGE_CHANNELS, mlp_ratio: int = 2):
        for s in fusion_stages:
            if not 1 <= s <= len(stage_channels):
                raise ValueError(f"fusion stage {s} out of range 1..{len(stage_channels)}")
        self.num_ids = num_ids
        self.fusion_stages = tuple(sorted(fusion_stages))
        self.embed_dim = stage_channels[-1]
        self.backbone = Backbone(rng, stage_channels=stage_channels)
        last = max(self.fusion_stages) if self.fusion_stages else None
        self.fusion_blocks = [
            FusionBlock(stage_channels[s - 1], rng, heads=heads,
                        class_token=class_token and s == last,
                        zero_residual_init=zero_residual_init, mlp_ratio=mlp_ratio)
            for s in self.fusion_stages
        ]
        self.head_image = nn.Linear(self.embed_dim, num_ids, rng)
        self.head_render = nn.Linear(self.embed_dim, num_ids, rng) if self.fusion_stages else None
        self.head_class = (nn.Linear(self.embed_dim, num_ids, rng)
                           if self.fusion_stages and class_token else None)

    def forward(self, images: Tensor, renders: Tensor | None = None,
                training: bool = True) -> ModelOutputs:
        """images (B, 3, H, W); renders (B, 3, H, W), one view per sample."""
        if len(images.shape) != 4:
            raise ValueError(f"expected (B, 3, H, W) images, got {images.shape}")
        if self.fusion_stages and renders is None:
            raise ValueError("model was built with fusion stages; renders are required")
        if renders is not None and renders.shape != images.shape:
            raise ValueError(
                f"renders must match images, got {renders.shape} vs {images.shape}")
        x_i = self.backbone.run_stem(images)
        x_r = self.backbone.run_stem(renders) if renders is not None else None

        cls = None
        block_at = dict(zip(self.fusion_stages, self.fusion_blocks))
        for i in range(len(self.backbone.channels)):
            x_i = self.backbone.run_stage(i, x_i)
            if x_r is not None:
                x_r = self.backbone.run_stage(i, x_r)
            block = block_at.get(i + 1)
            if block is not None:
                x_i, x_r, block_cls = block.forward(x_i, x_r, training)
                if block_cls is not None:
                    cls = block_cls

        e_i = nn.global_average_pool(x_i)
        e_r = logits_render = logits_class = None
        if x_r is not None:
            e_r = nn.global_average_pool(x_r)
            if self.head_render is not None:
                logits_render = self.head_render(e_r)
        logits_image = self.head_image(e_i)
        if cls is not None and self.head_class is not None:
            logits_class = self.head_class(cls)
        return ModelOutputs(
            embed_image=e_i, embed_render=e_r, embed_class=cls,
            logits_image=logits_image, logits_render=logits_render,
            logits_class=logits_class)
