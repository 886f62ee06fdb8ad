"""Pinhole projection and z-buffered textured rasterization.

Screen convention: pixel coordinate (px, py) has px along image width and py
along height, sampled at pixel centers (col + 0.5, row + 0.5). A vertex on
the optical axis lands exactly on the principal point. Depth is the camera-
frame z; geometry at or behind the camera is skipped, never drawn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import body as body_mod
from .body import BodyTemplate, Mesh

BACKGROUND = np.array([0.5, 0.5, 0.5])
_Z_NEAR = 1e-6

CANONICAL_VIEW_NAMES = ("forward", "backward", "left", "right")
_CANONICAL_YAWS = {"forward": 0.0, "backward": np.pi, "left": np.pi / 2, "right": -np.pi / 2}

__all__ = [
    "BACKGROUND",
    "CANONICAL_VIEW_NAMES",
    "CameraView",
    "ProjectedPoints",
    "RenderedImage",
    "TextureMap",
    "project",
    "rasterize",
    "render_canonical",
    "canonical_views",
    "save_image",
    "load_image",
]


@dataclass(frozen=True)
class TextureMap:
    """Square texel grid indexed by UV; u spans columns, v spans rows."""

    texels: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.texels, dtype=np.float64)
        if t.ndim != 3 or t.shape[0] != t.shape[1] or t.shape[2] != 3:
            raise ValueError(f"texture must be (T, T, 3), got {t.shape}")
        size = t.shape[0]
        if size < 1 or size & (size - 1):
            raise ValueError(f"texture side must be a power of two, got {size}")
        if t.min() < 0.0 or t.max() > 1.0:
            raise ValueError("texel values must lie in [0, 1]")
        object.__setattr__(self, "texels", t)

    @property
    def side(self) -> int:
        return self.texels.shape[0]


@dataclass(frozen=True)
class CameraView:
    name: str
    delta: np.ndarray           # translation of the observing view, meters
    yaw: float                  # rotation about the vertical axis, radians
    focal: float                # pixels
    principal: np.ndarray       # (px, py) pixels
    width: int = 128
    height: int = 256

    def __post_init__(self):
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=np.float64).reshape(3))
        object.__setattr__(self, "principal", np.asarray(self.principal, dtype=np.float64).reshape(2))


@dataclass(frozen=True)
class ProjectedPoints:
    points: np.ndarray  # (K, 2) pixel coordinates
    depths: np.ndarray  # (K,) camera-frame z


@dataclass(frozen=True)
class RenderedImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray    # (H, W) bool foreground flag


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def project(mesh: Mesh, camera: CameraView) -> ProjectedPoints:
    """Rotate by yaw, translate by delta, divide by depth, scale by focal."""
    if camera.focal <= 0:
        raise ValueError(f"degenerate camera: focal {camera.focal} <= 0")
    cam = mesh.vertices @ _yaw_matrix(camera.yaw).T + camera.delta
    z = cam[:, 2]
    safe = np.where(np.abs(z) < _Z_NEAR, _Z_NEAR, z)
    points = camera.focal * cam[:, :2] / safe[:, None] + camera.principal
    return ProjectedPoints(points=points, depths=z)


def rasterize(mesh: Mesh, texture: TextureMap, camera: CameraView) -> RenderedImage:
    """Paint nearest-triangle texels through a z-buffer; pure and ordered."""
    h, w = camera.height, camera.width
    pixels = np.tile(BACKGROUND, (h, w, 1))
    mask = np.zeros((h, w), dtype=bool)
    if mesh.faces.size == 0 or mesh.vertices.size == 0:
        return RenderedImage(pixels=pixels, mask=mask)

    proj = project(mesh, camera)
    pts, depths = proj.points, proj.depths
    zbuf = np.full((h, w), np.inf)
    tex = texture.texels
    t_side = texture.side
    uv = mesh.uv

    for face in mesh.faces:
        a, b, c = int(face[0]), int(face[1]), int(face[2])
        za, zb, zc = depths[a], depths[b], depths[c]
        if za <= _Z_NEAR or zb <= _Z_NEAR or zc <= _Z_NEAR:
            continue
        p0, p1, p2 = pts[a], pts[b], pts[c]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area) < 1e-12:
            continue
        x_lo = max(0, int(np.ceil(min(p0[0], p1[0], p2[0]) - 0.5)))
        x_hi = min(w - 1, int(np.floor(max(p0[0], p1[0], p2[0]) - 0.5)))
        y_lo = max(0, int(np.ceil(min(p0[1], p1[1], p2[1]) - 0.5)))
        y_hi = min(h - 1, int(np.floor(max(p0[1], p1[1], p2[1]) - 0.5)))
        if x_lo > x_hi or y_lo > y_hi:
            continue
        qx = np.arange(x_lo, x_hi + 1) + 0.5
        qy = (np.arange(y_lo, y_hi + 1) + 0.5)[:, None]
        w0 = (p2[0] - p1[0]) * (qy - p1[1]) - (p2[1] - p1[1]) * (qx - p1[0])
        w1 = (p0[0] - p2[0]) * (qy - p2[1]) - (p0[1] - p2[1]) * (qx - p2[0])
        w2 = (p1[0] - p0[0]) * (qy - p0[1]) - (p1[1] - p0[1]) * (qx - p0[0])
        l0, l1, l2 = w0 / area, w1 / area, w2 / area
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        z = l0 * za + l1 * zb + l2 * zc
        tile = zbuf[y_lo : y_hi + 1, x_lo : x_hi + 1]
        win = inside & (z < tile)
        if not win.any():
            continue
        u_val = l0 * uv[a, 0] + l1 * uv[b, 0] + l2 * uv[c, 0]
        v_val = l0 * uv[a, 1] + l1 * uv[b, 1] + l2 * uv[c, 1]
        cols = np.clip((u_val[win] * t_side).astype(np.int64), 0, t_side - 1)
        rows = np.clip((v_val[win] * t_side).astype(np.int64), 0, t_side - 1)
        yy, xx = np.nonzero(win)
        tile[win] = z[win]
        pixels[y_lo + yy, x_lo + xx] = tex[rows, cols]
        mask[y_lo + yy, x_lo + xx] = True
    return RenderedImage(pixels=pixels, mask=mask)


def canonical_views(template: BodyTemplate, height: int = 256, width: int = 128,
                    distance: float = 3.0) -> list[CameraView]:
    """The four observing views on a subject-centered orbit.

    One shared focal length, the largest that keeps every clamped body fully
    in frame for all four views (worst-case shape offsets included).
    """
    posed = body_mod.skin(template, np.zeros(body_mod.NUM_SHAPE_COEFFS), body_mod.CANONICAL_POSE)
    slack = 3.0 * np.abs(template.shape_basis).sum(axis=0).max(axis=0)
    lo = posed.vertices.min(axis=0) - slack
    hi = posed.vertices.max(axis=0) + slack
    center_y = 0.5 * (lo[1] + hi[1])
    half_y = 0.5 * (hi[1] - lo[1])
    # Because of the orbit, either horizontal axis can face the camera.
    half_x = max(abs(lo[0]), abs(hi[0]), abs(lo[2]), abs(hi[2]))
    depth_bound = half_x
    z_near_world = distance - depth_bound
    f_h = (0.5 * height - 2.0) * z_near_world / half_y
    f_w = (0.5 * width - 2.0) * z_near_world / half_x
    focal = min(f_h, f_w)
    principal = np.array([width / 2.0, height / 2.0])
    delta = np.array([0.0, -center_y, distance])
    return [
        CameraView(name=n, delta=delta, yaw=_CANONICAL_YAWS[n], focal=focal,
                   principal=principal, width=width, height=height)
        for n in CANONICAL_VIEW_NAMES
    ]


def render_canonical(template: BodyTemplate, shape, texture: TextureMap,
                     views: list[CameraView]) -> list[RenderedImage]:
    """Skin at the fixed walking posture, rasterize once per view, in order."""
    if not views:
        raise ValueError("render_canonical: views must be nonempty")
    mesh = body_mod.skin(template, shape, body_mod.CANONICAL_POSE)
    return [rasterize(mesh, texture, view) for view in views]


def save_image(path, image) -> None:
    pixels = image.pixels if isinstance(image, RenderedImage) else np.asarray(image)
    quantized = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0
