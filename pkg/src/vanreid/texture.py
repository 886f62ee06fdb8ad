"""Style randomization, texture prediction, and the content-biased loss.

restyle shifts an image's per-channel statistics onto a seeded perturbation
of target statistics. The predictor is a small conv encoder-decoder mapping a
person image to a UV texture map; the content-biased hinge trains it to keep
identity content while ignoring the injected style.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import body, nn, ops
from .camera import TextureMap
from .tensor import Tensor, no_grad

__all__ = [
    "StyleStats",
    "ContentBiasConfig",
    "TexturePredictor",
    "restyle",
    "random_style",
    "predict_texture",
    "content_biased_loss",
    "identity_texture",
]


@dataclass(frozen=True)
class StyleStats:
    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,)

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64).reshape(3))
        if (self.std <= 0).any():
            raise ValueError(f"style std must be positive, got {self.std}")


@dataclass(frozen=True)
class ContentBiasConfig:
    tau: float = 0.3
    distance_depth: int = 2  # backbone stage feeding the distance embedding

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"tau must be nonnegative, got {self.tau}")


def random_style(rng: np.random.Generator) -> StyleStats:
    return StyleStats(mean=rng.uniform(0.25, 0.75, size=3), std=rng.uniform(0.08, 0.30, size=3))


def restyle(image: np.ndarray, stats: StyleStats, noise_seed: int,
            noise_scale: float = 0.05, clamp: bool = True) -> np.ndarray:
    """Transfer per-channel statistics onto seeded perturbations of targets.

    Channels with (numerically) zero variance pass through unchanged. With
    noise_scale 0 the targets are the stats themselves.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"restyle expects (H, W, 3), got {img.shape}")
    rng = np.random.default_rng(noise_seed)
    target_mean = stats.mean + noise_scale * rng.normal(size=3)
    target_std = stats.std * np.exp(noise_scale * rng.normal(size=3))
    out = img.copy()
    for c in range(3):
        mu = img[:, :, c].mean()
        sigma = img[:, :, c].std()
        if sigma < 1e-12:
            continue
        out[:, :, c] = target_std[c] * (img[:, :, c] - mu) / sigma + target_mean[c]
    return np.clip(out, 0.0, 1.0) if clamp else out


class TexturePredictor(nn.Module):
    """Conv encoder (stride 2, SNR after each layer), linear bottleneck, and
    a nearest-upsample conv decoder squashed to [0,1]."""

    def __init__(self, rng: np.random.Generator, in_height: int, in_width: int,
                 texture_size: int = 64):
        if texture_size < 4 or texture_size & (texture_size - 1):
            raise ValueError(f"texture_size must be a power of two >= 4, got {texture_size}")
        self.in_height = in_height
        self.in_width = in_width
        self.texture_size = texture_size

        chans = [3, 8, 16, 32, 64]
        self.enc = [
            nn.Conv2d(chans[i], chans[i + 1], 3, rng, stride=2, padding=1)
            for i in range(4)
        ]
        self.snr = [nn.SnrBlock(chans[i + 1]) for i in range(4)]
        h, w = in_height, in_width
        for _ in range(4):
            h = (h + 1) // 2
            w = (w + 1) // 2
        self.bottleneck_hw = (h, w)
        self.fc = nn.Linear(64 * h * w, 64 * 4 * 4, rng)

        ups = int(np.log2(texture_size // 4))
        dec_chans = [64] + [max(8, 64 >> (i + 1)) for i in range(ups)]
        self.dec = [
            nn.Conv2d(dec_chans[i], dec_chans[i + 1], 3, rng, stride=1, padding=1)
            for i in range(ups)
        ]
        self.out_conv = nn.Conv2d(dec_chans[-1] if ups else 64, 3, 3, rng, stride=1, padding=1)

    def forward(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, 3, T, T) in (0, 1); fully differentiable."""
        b = images.shape[0]
        if images.shape[1:] != (3, self.in_height, self.in_width):
            raise ValueError(
                f"predictor built for 3x{self.in_height}x{self.in_width} input, got {images.shape[1:]}"
            )
        x = images
        for conv, snr in zip(self.enc, self.snr):
            x = snr(ops.relu(conv(x)))
        h, w = self.bottleneck_hw
        x = ops.reshape(x, (b, 64 * h * w))
        x = ops.relu(self.fc(x))
        x = ops.reshape(x, (b, 64, 4, 4))
        for conv in self.dec:
            x = ops.relu(conv(nn.upsample2x(x)))
        return ops.sigmoid(self.out_conv(x))


def _image_batch(*images) -> Tensor:
    arrays = []
    base = None
    for img in images:
        arr = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) images, got {arr.shape}")
        if base is None:
            base = arr.shape
        elif arr.shape != base:
            raise ValueError(f"mismatched image sizes: {base} vs {arr.shape}")
        arrays.append(arr.transpose(2, 0, 1))
    return Tensor(np.stack(arrays))


def predict_texture(predictor: TexturePredictor, image) -> TextureMap:
    """Run the predictor on one image and materialize the texture map."""
    batch = _image_batch(image)
    with no_grad():
        out = predictor.forward(batch)
    texels = out.data[0].transpose(1, 2, 0)
    return TextureMap(texels=np.clip(texels, 0.0, 1.0))


def _flatten_embedder(textures: Tensor) -> Tensor:
    b = textures.shape[0]
    return ops.reshape(textures, (b, int(np.prod(textures.shape[1:]))))


def content_biased_loss(predictor: TexturePredictor, image_p, image_a, image_n,
                        config: ContentBiasConfig, embedder=None) -> Tensor:
    """Hinge on embedded texture distances: max(0, tau + d(a,p) - d(a,n)).

    The anchor is the style-randomized view of the positive; the negative
    shares the anchor's style. ``embedder`` maps predicted textures
    (B, 3, T, T) to embeddings (B, D); identity flatten when omitted.
    """
    if embedder is None:
        embedder = _flatten_embedder
    batch = _image_batch(image_p, image_a, image_n)
    textures = predictor.forward(batch)
    emb = embedder(textures)
    e_p = ops.slice_(emb, ((0, 1), None))
    e_a = ops.slice_(emb, ((1, 2), None))
    e_n = ops.slice_(emb, ((2, 3), None))
    d_ap = ops.euclidean_distance(e_a, e_p)
    d_an = ops.euclidean_distance(e_a, e_n)
    # Difference first, so equal distances cancel exactly and leave tau.
    hinge = ops.relu(ops.add(ops.sub(d_ap, d_an), config.tau))
    return ops.reshape(hinge, ())


# --------------------------------------------------------- synthetic textures


def identity_texture(rng: np.random.Generator, size: int = 64) -> TextureMap:
    """Paint per-identity clothing colors into the body's UV regions, with a
    few horizontal stripes for texture detail. Front and back torso differ."""
    tex = np.empty((size, size, 3))
    tex[:] = rng.uniform(0.2, 0.8, size=3)  # underlay

    def paint(region: str, color: np.ndarray) -> None:
        u0, u1, v0, v1 = body.UV_REGIONS[region]
        r0, r1 = int(v0 * size), int(np.ceil(v1 * size))
        c0, c1 = int(u0 * size), int(np.ceil(u1 * size))
        tex[r0:r1, c0:c1] = color

    skin_tone = rng.uniform(0.35, 0.85) * np.array([1.0, 0.8, 0.7])
    shirt = rng.uniform(0.05, 0.95, size=3)
    back = np.clip(shirt * rng.uniform(0.5, 1.1) + rng.uniform(-0.15, 0.15, size=3), 0, 1)
    trousers = rng.uniform(0.05, 0.95, size=3)
    sleeves = np.clip(shirt + rng.uniform(-0.2, 0.2, size=3), 0, 1)
    paint("torso_front", shirt)
    paint("torso_back", back)
    paint("head", np.clip(skin_tone, 0, 1))
    paint("arms", sleeves)
    paint("legs", trousers)

    # Stripes across the torso rows give identities higher-frequency detail.
    for region in ("torso_front", "torso_back"):
        if rng.uniform() < 0.5:
            continue
        u0, u1, v0, v1 = body.UV_REGIONS[region]
        stripe = rng.uniform(0.05, 0.95, size=3)
        period = int(rng.integers(3, 7))
        width = max(1, period // 2)
        for row in range(int(v0 * size), int(v1 * size)):
            if (row // width) % 2 == 0:
                tex[row, int(u0 * size) : int(np.ceil(u1 * size))] = stripe
    return TextureMap(texels=np.clip(tex, 0.0, 1.0))
