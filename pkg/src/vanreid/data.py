"""Synthetic identity corpus with a seen/unseen-camera evaluation split.

Each identity owns a body shape, a procedural clothing texture, and a gait
seed. Each image additionally draws a camera, a posture perturbation, and a
color style, all derived from one recorded per-sample seed, so any single
image can be regenerated byte-exactly from the manifest alone.
"""

from __future__ import annotations

import dataclasses
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import body
from .camera import CameraView, TextureMap, load_image, rasterize, save_image
from .seeds import derive_seed as _derived_seed
from .texture import StyleStats, identity_texture, random_style, restyle

__all__ = [
    "DataConfig",
    "Identity",
    "CameraSpec",
    "SynthSample",
    "DatasetManifest",
    "build_identities",
    "build_camera_roster",
    "gen_dataset",
    "regenerate_image",
    "split_cvg",
    "save_manifest",
    "load_manifest",
    "load_images",
    "sample_identities",
    "sample_cameras",
]

LOW_ELEVATION_DEG = (5.0, 15.0)
HIGH_ELEVATION_DEG = (45.0, 60.0)
_FOCAL_MARGIN = 0.9
_SPLIT_TRIES = 200


@dataclass(frozen=True)
class DataConfig:
    """Corpus dimensions plus the jitters applied around each nominal draw."""

    num_identities: int = 50
    images_per_identity: int = 16
    num_cameras: int = 8
    height: int = 64
    width: int = 32
    texture_size: int = 64
    distance: float = 3.0
    pose_jitter: float = 0.08
    azimuth_jitter_deg: float = 3.0
    elevation_jitter_deg: float = 2.0
    min_gap_deg: float = 20.0
    query_per_id: int = 2
    gallery_train_per_id: int = 2
    template_seed: int = 0
    template_resolution: int = 1

    def __post_init__(self):
        if self.num_identities < 1 or self.images_per_identity < 1:
            raise ValueError("identity and image counts must be positive")
        if self.num_cameras < 2 or self.num_cameras % 2:
            raise ValueError(f"camera roster size must be even and >= 2, got {self.num_cameras}")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"image size too small: {self.height}x{self.width}")
        if self.distance <= 0:
            raise ValueError("camera distance must be positive")
        for name in ("pose_jitter", "azimuth_jitter_deg", "elevation_jitter_deg", "min_gap_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.query_per_id < 1:
            raise ValueError("query_per_id must be positive")
        if self.gallery_train_per_id < 0:
            raise ValueError("gallery_train_per_id must be nonnegative")


@dataclass(frozen=True)
class Identity:
    id: int
    shape: np.ndarray
    texture_seed: int
    gait_seed: int

    def __post_init__(self):
        object.__setattr__(
            self, "shape", np.asarray(self.shape, dtype=np.float64).reshape(body.NUM_SHAPE_COEFFS))

    def base_texture(self, size: int) -> TextureMap:
        return identity_texture(np.random.default_rng(self.texture_seed), size)


@dataclass(frozen=True)
class CameraSpec:
    id: int
    azimuth_deg: float
    elevation_deg: float
    distance: float
    focal: float


@dataclass(frozen=True)
class SynthSample:
    index: int
    path: str
    identity: int
    camera: int
    azimuth_deg: float
    elevation_deg: float
    distance: float
    style_mean: tuple
    style_std: tuple
    seed: int


@dataclass(frozen=True)
class DatasetManifest:
    config: DataConfig
    seed: int
    identities: list
    cameras: list
    samples: list
    split: dict | None = None


def build_identities(seed: int, count: int) -> list:
    """Independent per-identity parameters; shapes are clamped symmetric draws."""
    out = []
    for i in range(count):
        rng = np.random.default_rng(_derived_seed(seed, f"shape/{i}"))
        shape = np.clip(rng.normal(size=body.NUM_SHAPE_COEFFS), -3.0, 3.0)
        out.append(Identity(
            id=i,
            shape=shape,
            texture_seed=_derived_seed(seed, f"texture/{i}"),
            gait_seed=_derived_seed(seed, f"gait/{i}"),
        ))
    return out


def _body_bounds(template) -> tuple:
    """Worst-case extents of the clamped shape family at the walking posture."""
    posed = body.skin(template, np.zeros(body.NUM_SHAPE_COEFFS), body.CANONICAL_POSE)
    slack = 3.0 * np.abs(template.shape_basis).sum(axis=0).max(axis=0)
    lo = posed.vertices.min(axis=0) - slack
    hi = posed.vertices.max(axis=0) + slack
    center_y = 0.5 * (lo[1] + hi[1])
    half_y = 0.5 * (hi[1] - lo[1])
    half_x = max(abs(lo[0]), abs(hi[0]), abs(lo[2]), abs(hi[2]))
    return center_y, half_y, half_x


def _fit_focal(cfg: DataConfig, elevation_deg: float, half_y: float, half_x: float) -> float:
    depth = cfg.distance * np.cos(np.radians(elevation_deg))
    z_near = depth - half_x
    if z_near <= 0:
        raise ValueError(
            f"camera at elevation {elevation_deg:.1f} deg sits inside the body envelope; "
            f"increase distance above {half_x / np.cos(np.radians(elevation_deg)):.2f}")
    f_h = (0.5 * cfg.height - 2.0) * z_near / half_y
    f_w = (0.5 * cfg.width - 2.0) * z_near / half_x
    return _FOCAL_MARGIN * min(f_h, f_w)


def build_camera_roster(seed: int, cfg: DataConfig, half_y: float, half_x: float) -> list:
    """Evenly spaced azimuths; one camera drawn from the high-elevation band."""
    rng = np.random.default_rng(_derived_seed(seed, "cameras"))
    high = int(rng.integers(cfg.num_cameras))
    roster = []
    for k in range(cfg.num_cameras):
        band = HIGH_ELEVATION_DEG if k == high else LOW_ELEVATION_DEG
        elevation = float(rng.uniform(*band))
        roster.append(CameraSpec(
            id=k,
            azimuth_deg=360.0 * k / cfg.num_cameras,
            elevation_deg=elevation,
            distance=cfg.distance,
            focal=_fit_focal(cfg, elevation, half_y, half_x),
        ))
    return roster


def _build_view(cam: CameraSpec, d_az: float, d_el: float, cfg: DataConfig,
                center_y: float) -> CameraView:
    """Observing view for one sample: shared-focal orbit with a vertical offset
    for elevation, re-centered through the principal point."""
    elevation = np.radians(max(0.0, cam.elevation_deg + d_el))
    d = cam.distance
    delta = np.array([0.0, -(center_y + d * np.sin(elevation)), d * np.cos(elevation)])
    principal = np.array([cfg.width / 2.0, cfg.height / 2.0 + cam.focal * np.tan(elevation)])
    return CameraView(
        name=f"cam{cam.id}",
        delta=delta,
        yaw=np.radians(cam.azimuth_deg + d_az),
        focal=cam.focal,
        principal=principal,
        width=cfg.width,
        height=cfg.height,
    )


def _sample_draws(sample_seed: int, cfg: DataConfig):
    """Every stochastic choice for one image in a fixed consumption order."""
    rng = np.random.default_rng(sample_seed)
    cam_id = int(rng.integers(cfg.num_cameras))
    d_az = cfg.azimuth_jitter_deg * float(rng.uniform(-1.0, 1.0))
    d_el = cfg.elevation_jitter_deg * float(rng.uniform(-1.0, 1.0))
    pose_noise = rng.normal(size=(body.NUM_JOINTS, 3))
    style = random_style(rng)
    noise_seed = int(rng.integers(2 ** 63))
    return cam_id, d_az, d_el, pose_noise, style, noise_seed


def _render_sample(template, identity: Identity, roster: list, sample_seed: int,
                   cfg: DataConfig, center_y: float):
    cam_id, d_az, d_el, pose_noise, style, noise_seed = _sample_draws(sample_seed, cfg)
    cam = roster[cam_id]
    gait_rng = np.random.default_rng(identity.gait_seed)
    gait = 0.5 * cfg.pose_jitter * gait_rng.normal(size=(body.NUM_JOINTS, 3))
    pose = body.wrap_pose(body.CANONICAL_POSE + gait + cfg.pose_jitter * pose_noise)
    mesh = body.skin(template, identity.shape, pose)
    view = _build_view(cam, d_az, d_el, cfg, center_y)
    rendered = rasterize(mesh, identity.base_texture(cfg.texture_size), view)
    pixels = restyle(rendered.pixels, style, noise_seed)
    return pixels, cam, d_az, d_el, style


def gen_dataset(config: DataConfig, out_dir, seed: int, threads: int = 1) -> DatasetManifest:
    """Render the corpus under out_dir (images/ plus manifest.json).

    The whole tree is a pure function of (config, seed); workers only split
    the per-sample renders, which are independent by construction.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    template = body.build_template(config.template_seed, config.template_resolution)
    center_y, half_y, half_x = _body_bounds(template)
    identities = build_identities(seed, config.num_identities)
    roster = build_camera_roster(seed, config, half_y, half_x)

    jobs = []
    for ident in identities:
        for j in range(config.images_per_identity):
            index = ident.id * config.images_per_identity + j
            jobs.append((index, ident, _derived_seed(seed, f"sample/{ident.id}/{j}")))

    def run(job):
        index, ident, sample_seed = job
        pixels, cam, d_az, d_el, style = _render_sample(
            template, ident, roster, sample_seed, config, center_y)
        rel = f"images/{index:05d}_id{ident.id:03d}_cam{cam.id:02d}.png"
        save_image(out / rel, pixels)
        return SynthSample(
            index=index,
            path=rel,
            identity=ident.id,
            camera=cam.id,
            azimuth_deg=cam.azimuth_deg + d_az,
            elevation_deg=cam.elevation_deg + d_el,
            distance=cam.distance,
            style_mean=tuple(style.mean.tolist()),
            style_std=tuple(style.std.tolist()),
            seed=sample_seed,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(run, jobs))
    else:
        samples = [run(job) for job in jobs]
    samples.sort(key=lambda s: s.index)

    manifest = DatasetManifest(config=config, seed=seed, identities=identities,
                               cameras=roster, samples=samples, split=None)
    save_manifest(manifest, out / "manifest.json")
    return manifest


def regenerate_image(manifest: DatasetManifest, index: int, template=None) -> np.ndarray:
    """Rebuild one sample's pixels from its recorded seed; byte-exact vs disk."""
    cfg = manifest.config
    sample = manifest.samples[index]
    if sample.index != index:
        raise ValueError(f"manifest sample order broken at {index}")
    if template is None:
        template = body.build_template(cfg.template_seed, cfg.template_resolution)
    center_y, _, _ = _body_bounds(template)
    ident = manifest.identities[sample.identity]
    pixels, _, _, _, _ = _render_sample(template, ident, manifest.cameras,
                                        sample.seed, cfg, center_y)
    return pixels


def _circular_gap_deg(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def split_cvg(manifest: DatasetManifest, seed: int, min_gap_deg: float | None = None,
              query_per_id: int | None = None,
              gallery_train_per_id: int | None = None) -> DatasetManifest:
    """Hold out half the cameras from training while keeping them in the test
    pool: queries come only from held-out cameras, the gallery mixes both.

    Every identity that contributes a query keeps at least one cross-camera
    gallery positive; assignments are re-drawn until that holds.
    """
    cfg = manifest.config
    min_gap = cfg.min_gap_deg if min_gap_deg is None else min_gap_deg
    q_n = cfg.query_per_id if query_per_id is None else query_per_id
    g_t_n = cfg.gallery_train_per_id if gallery_train_per_id is None else gallery_train_per_id
    cams = manifest.cameras
    if len(cams) < 2:
        raise ValueError("split needs at least 2 cameras")
    rng = np.random.default_rng(seed)

    n_train = len(cams) // 2
    azimuths = {c.id: c.azimuth_deg for c in cams}
    ids = np.array(sorted(azimuths))
    for _ in range(_SPLIT_TRIES):
        picked = rng.permutation(ids)[:n_train]
        train_cams = set(int(c) for c in picked)
        test_cams = set(int(c) for c in ids) - train_cams
        gap = min(_circular_gap_deg(azimuths[t], azimuths[h])
                  for t in train_cams for h in test_cams)
        if gap >= min_gap:
            break
    else:
        raise ValueError(
            f"no camera half keeps held-out azimuths >= {min_gap} deg from every "
            "training azimuth; widen the roster or lower the gap")

    by_identity: dict = {}
    for s in manifest.samples:
        by_identity.setdefault(s.identity, []).append(s)

    train, query, gallery = [], [], []
    for ident_id in sorted(by_identity):
        group = by_identity[ident_id]
        held = [s for s in group if s.camera in test_cams]
        seen = [s for s in group if s.camera in train_cams]
        g_t_k = min(g_t_n, len(seen))
        picked_t = set(rng.choice(len(seen), size=g_t_k, replace=False).tolist()) if g_t_k else set()
        gallery_t = [seen[i] for i in sorted(picked_t)]
        train += [seen[i] for i in range(len(seen)) if i not in picked_t]

        chosen_q: list = []
        gallery_h = list(held)
        for want in range(min(q_n, len(held)), 0, -1):
            done = False
            for _ in range(64):
                pick = set(rng.choice(len(held), size=want, replace=False).tolist())
                q_try = [held[i] for i in sorted(pick)]
                g_try = [held[i] for i in range(len(held)) if i not in pick]
                pool = gallery_t + g_try
                if all(any(g.camera != q.camera for g in pool) for q in q_try):
                    chosen_q, gallery_h, done = q_try, g_try, True
                    break
            if done:
                break
        query += chosen_q
        gallery += gallery_h + gallery_t

    query.sort(key=lambda s: s.index)
    gallery.sort(key=lambda s: s.index)
    train.sort(key=lambda s: s.index)
    if not query:
        raise ValueError("split produced no queries; corpus too small for the protocol")

    gallery_by_id: dict = {}
    for s in gallery:
        gallery_by_id.setdefault(s.identity, set()).add(s.camera)
    for q in query:
        others = gallery_by_id.get(q.identity, set()) - {q.camera}
        if not others:
            raise AssertionError(f"query identity {q.identity} lacks a cross-camera positive")

    split = {
        "seed": seed,
        "min_gap_deg": min_gap,
        "train_cameras": sorted(train_cams),
        "test_cameras": sorted(test_cams),
        "train": [s.index for s in train],
        "query": [s.index for s in query],
        "gallery": [s.index for s in gallery],
    }
    return dataclasses.replace(manifest, split=split)


def _manifest_dict(manifest: DatasetManifest) -> dict:
    return {
        "format": "vanreid-manifest",
        "version": 1,
        "seed": manifest.seed,
        "config": dataclasses.asdict(manifest.config),
        "identities": [{
            "id": i.id,
            "shape": i.shape.tolist(),
            "texture_seed": i.texture_seed,
            "gait_seed": i.gait_seed,
        } for i in manifest.identities],
        "cameras": [dataclasses.asdict(c) for c in manifest.cameras],
        "samples": [{**dataclasses.asdict(s),
                     "style_mean": list(s.style_mean),
                     "style_std": list(s.style_std)} for s in manifest.samples],
        "split": manifest.split,
    }


def save_manifest(manifest: DatasetManifest, path) -> None:
    text = json.dumps(_manifest_dict(manifest), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("format") != "vanreid-manifest":
        raise ValueError(f"{path} is not a corpus manifest")
    return DatasetManifest(
        config=DataConfig(**raw["config"]),
        seed=raw["seed"],
        identities=[Identity(id=i["id"], shape=i["shape"], texture_seed=i["texture_seed"],
                             gait_seed=i["gait_seed"]) for i in raw["identities"]],
        cameras=[CameraSpec(**c) for c in raw["cameras"]],
        samples=[SynthSample(**{**s, "style_mean": tuple(s["style_mean"]),
                                "style_std": tuple(s["style_std"])}) for s in raw["samples"]],
        split=raw.get("split"),
    )


def load_images(root_dir, manifest: DatasetManifest, indices) -> np.ndarray:
    """Stack the referenced PNGs as (N, 3, H, W) floats in [0, 1]."""
    root = Path(root_dir)
    out = []
    for i in indices:
        arr = load_image(root / manifest.samples[i].path)
        out.append(arr.transpose(2, 0, 1))
    return np.stack(out) if out else np.zeros((0, 3, manifest.config.height, manifest.config.width))


def sample_identities(manifest: DatasetManifest, indices) -> np.ndarray:
    return np.array([manifest.samples[i].identity for i in indices], dtype=np.int64)


def sample_cameras(manifest: DatasetManifest, indices) -> np.ndarray:
    return np.array([manifest.samples[i].camera for i in indices], dtype=np.int64)


def png_bytes(pixels: np.ndarray) -> bytes:
    """Encode exactly as the generator writes to disk, for byte comparisons."""
    buf = io.BytesIO()
    save_image(buf, pixels)
    return buf.getvalue()
