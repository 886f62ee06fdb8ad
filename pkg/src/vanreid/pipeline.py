"""End-to-end orchestration on a fixed output tree.

Layout under the run directory:
    config.json      resolved configuration for the run
    manifest.json    corpus description incl. the camera split
    images/          captured (original) frames
    renders/         cached per-sample canonical views, 4 PNGs per sample
    checkpoints/     texture.van, model.van
    metrics/         train_loss.csv, texture_loss.csv, metrics.csv,
                     descriptors.van

All randomness flows from config.seed through named streams, so every
artifact is a pure function of (config, seed).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import body, io
from .camera import CANONICAL_VIEW_NAMES, canonical_views, load_image, render_canonical, save_image
from .config import RunConfig, run_config_to_dict
from .data import DatasetManifest, gen_dataset, load_images, load_manifest, save_manifest, split_cvg
from .evaluation import RetrievalResult, evaluate_retrieval, extract_descriptors
from .fusion import Backbone, DualStreamModel, texture_embedder
from .seeds import derive_seed, seed_stream
from .tensor import backward
from .texture import (ContentBiasConfig, TexturePredictor, content_biased_loss,
                      predict_texture, random_style, restyle)
from .training import PKSampler, Sgd, augment_image, draw_view, lr_at, train_step

__all__ = [
    "run_gen_data",
    "run_train_texture",
    "run_train",
    "run_eval",
    "run_render",
    "ensure_texture_predictor",
    "ensure_render_cache",
    "load_renders",
    "load_corpus",
    "LOSS_CSV_HEADER",
]

LOSS_CSV_HEADER = "epoch,step,tri_o,tri_c,id_o,id_c,id_cls,total,lr"
_CSV_KEY_ORDER = ("tri_image", "tri_render", "id_image", "id_render", "id_class")


def _dirs(out_dir) -> dict:
    out = Path(out_dir)
    d = {
        "out": out,
        "manifest": out / "manifest.json",
        "images": out / "images",
        "renders": out / "renders",
        "checkpoints": out / "checkpoints",
        "metrics": out / "metrics",
    }
    d["texture_ckpt"] = d["checkpoints"] / "texture.van"
    d["model_ckpt"] = d["checkpoints"] / "model.van"
    return d


def _write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(run_config_to_dict(cfg), indent=2, sort_keys=True)
    (out / "config.json").write_text(text + "\n", encoding="utf-8")


def run_gen_data(cfg: RunConfig, out_dir, threads: int = 1) -> DatasetManifest:
    """Render the corpus and fill in the camera split, all under out_dir."""
    d = _dirs(out_dir)
    _write_config(cfg, d["out"])
    manifest = gen_dataset(cfg.data, d["out"], derive_seed(cfg.seed, "data"), threads=threads)
    manifest = split_cvg(manifest, derive_seed(cfg.seed, "data/split"))
    save_manifest(manifest, d["manifest"])
    return manifest


def load_corpus(out_dir) -> DatasetManifest:
    d = _dirs(out_dir)
    if not d["manifest"].exists():
        raise ValueError(f"no manifest under {d['out']}; run gen-data first")
    return load_manifest(d["manifest"])


def _images_hwc(out_dir, manifest: DatasetManifest, indices) -> list:
    root = Path(out_dir)
    return [load_image(root / manifest.samples[i].path) for i in indices]


def _new_predictor(cfg: RunConfig, rng) -> TexturePredictor:
    return TexturePredictor(rng, cfg.data.height, cfg.data.width,
                            texture_size=cfg.texture.size)


def run_train_texture(cfg: RunConfig, out_dir) -> Path:
    """Fit the texture predictor on restyled triplets from training images.

    The anchor restyles a positive image; the negative (another identity)
    gets the anchor's style, so only content separates them.
    """
    d = _dirs(out_dir)
    manifest = load_corpus(out_dir)
    d["checkpoints"].mkdir(parents=True, exist_ok=True)
    d["metrics"].mkdir(parents=True, exist_ok=True)

    indices = manifest.split["train"] if manifest.split else [s.index for s in manifest.samples]
    by_identity: dict = {}
    for i in indices:
        by_identity.setdefault(manifest.samples[i].identity, []).append(i)
    ids = sorted(k for k, v in by_identity.items() if v)
    if len(ids) < 2:
        raise ValueError("texture training needs at least 2 identities with images")

    predictor = _new_predictor(cfg, seed_stream(cfg.seed, "init/texture"))
    frozen = Backbone(seed_stream(cfg.seed, "init/texture-embedder"))
    embedder = texture_embedder(frozen, depth=cfg.texture.distance_depth)
    bias = ContentBiasConfig(tau=cfg.texture.tau, distance_depth=cfg.texture.distance_depth)
    opt = Sgd(predictor.parameters(), cfg.texture.lr, momentum=0.9)
    rng = seed_stream(cfg.seed, "train/texture")
    images = {i: img for i, img in zip(indices, _images_hwc(out_dir, manifest, indices))}

    rows = ["step,loss"]
    for step in range(cfg.texture.steps):
        pair = rng.choice(len(ids), size=2, replace=False)
        pool_p = by_identity[ids[pair[0]]]
        pool_n = by_identity[ids[pair[1]]]
        img_p = images[pool_p[int(rng.integers(len(pool_p)))]]
        img_n = images[pool_n[int(rng.integers(len(pool_n)))]]
        style = random_style(rng)
        anchor = restyle(img_p, style, int(rng.integers(2 ** 63)))
        negative = restyle(img_n, style, int(rng.integers(2 ** 63)))
        loss = content_biased_loss(predictor, img_p, anchor, negative, bias, embedder)
        opt.zero_grad()
        backward(loss)
        opt.step()
        rows.append(f"{step},{float(loss.data):.12g}")
    (d["metrics"] / "texture_loss.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    predictor.save(d["texture_ckpt"])
    return d["texture_ckpt"]


def ensure_texture_predictor(cfg: RunConfig, out_dir) -> TexturePredictor:
    """Load the texture checkpoint, training it first if absent."""
    d = _dirs(out_dir)
    if not d["texture_ckpt"].exists():
        run_train_texture(cfg, out_dir)
    predictor = _new_predictor(cfg, seed_stream(cfg.seed, "init/texture"))
    predictor.load(d["texture_ckpt"])
    return predictor


def _render_paths(renders_dir: Path, index: int) -> list:
    return [renders_dir / f"{index:05d}_{name}.png" for name in CANONICAL_VIEW_NAMES]


def ensure_render_cache(cfg: RunConfig, out_dir, manifest: DatasetManifest, indices,
                        predictor: TexturePredictor | None = None, threads: int = 1) -> None:
    """Render missing canonical views: the sample's predicted texture on the
    identity's true shape, observed from the four fixed views."""
    d = _dirs(out_dir)
    d["renders"].mkdir(parents=True, exist_ok=True)
    missing = [i for i in sorted(set(int(i) for i in indices))
               if not all(p.exists() for p in _render_paths(d["renders"], i))]
    if not missing:
        return
    if predictor is None:
        predictor = ensure_texture_predictor(cfg, out_dir)
    template = body.build_template(cfg.data.template_seed, cfg.data.template_resolution)
    views = canonical_views(template, cfg.data.height, cfg.data.width)

    def build(i: int) -> None:
        sample = manifest.samples[i]
        image = load_image(d["out"] / sample.path)
        tex = predict_texture(predictor, image)
        shape = manifest.identities[sample.identity].shape
        rendered = render_canonical(template, shape, tex, views)
        for path, img in zip(_render_paths(d["renders"], i), rendered):
            save_image(path, img)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(build, missing))
    else:
        for i in missing:
            build(i)


def load_renders(out_dir, manifest: DatasetManifest, indices) -> np.ndarray:
    """Stack cached views as (N, 4, 3, H, W) floats in [0, 1]."""
    d = _dirs(out_dir)
    out = []
    for i in indices:
        stack = [load_image(p).transpose(2, 0, 1) for p in _render_paths(d["renders"], int(i))]
        out.append(np.stack(stack))
    cfg = manifest.config
    return (np.stack(out) if out
            else np.zeros((0, len(CANONICAL_VIEW_NAMES), 3, cfg.height, cfg.width)))


def _build_model(cfg: RunConfig, num_ids: int) -> DualStreamModel:
    return DualStreamModel(
        seed_stream(cfg.seed, "init/model"),
        num_ids,
        fusion_stages=cfg.model.fusion_stages,
        heads=cfg.model.heads,
        class_token=cfg.model.class_token,
        stage_channels=cfg.model.stage_channels,
        mlp_ratio=cfg.model.mlp_ratio,
    )


def run_train(cfg: RunConfig, out_dir, threads: int = 1,
              epochs: int | None = None) -> Path:
    """Main training loop over the train split; writes the loss CSV and the
    model checkpoint. epochs overrides the configured count when given."""
    d = _dirs(out_dir)
    manifest = load_corpus(out_dir)
    if not manifest.split:
        raise ValueError("manifest has no split; regenerate with gen-data")
    _write_config(cfg, d["out"])
    d["checkpoints"].mkdir(parents=True, exist_ok=True)
    d["metrics"].mkdir(parents=True, exist_ok=True)

    total_epochs = cfg.train.epochs if epochs is None else epochs
    if total_epochs < 0:
        raise ValueError(f"epochs must be nonnegative, got {total_epochs}")
    train_idx = np.asarray(manifest.split["train"], dtype=np.int64)
    labels = np.array([manifest.samples[i].identity for i in train_idx], dtype=np.int64)
    model = _build_model(cfg, num_ids=len(manifest.identities))
    fused = bool(cfg.model.fusion_stages)

    renders = None
    if fused and total_epochs > 0:
        ensure_render_cache(cfg, out_dir, manifest, train_idx, threads=threads)
        renders = load_renders(out_dir, manifest, train_idx)
    images = load_images(d["out"], manifest, train_idx)

    opt = Sgd(model.parameters(), lr_at(0, cfg.train.base_lr, cfg.train.lr_drop_epochs),
              momentum=cfg.train.momentum)
    sampler_rng = seed_stream(cfg.seed, "train/sampler")
    augment_rng = seed_stream(cfg.seed, "train/augment")
    view_rng = seed_stream(cfg.seed, "view-draw")
    flip_prob = 0.5 if cfg.train.flip else 0.0

    rows = [LOSS_CSV_HEADER]
    if total_epochs > 0:
        sampler = PKSampler(labels, cfg.train.p_identities, cfg.train.k_instances, sampler_rng)
        for epoch in range(total_epochs):
            lr = lr_at(epoch, cfg.train.base_lr, cfg.train.lr_drop_epochs)
            opt.lr = lr
            for step, batch in enumerate(sampler.epoch()):
                stack = []
                for row in batch:
                    hwc = images[row].transpose(1, 2, 0)
                    aug = augment_image(hwc, augment_rng, flip_prob, cfg.train.color_jitter)
                    stack.append(aug.transpose(2, 0, 1))
                batch_images = np.stack(stack)
                batch_renders = None
                if fused:
                    view = draw_view(view_rng, len(CANONICAL_VIEW_NAMES))
                    batch_renders = renders[batch][:, view]
                losses = train_step(model, opt, batch_images, batch_renders,
                                    labels[batch], cfg.train.margin)
                if step % cfg.train.log_every == 0:
                    cells = [f"{losses[k]:.12g}" if k in losses else "" for k in _CSV_KEY_ORDER]
                    rows.append(f"{epoch},{step}," + ",".join(cells)
                                + f",{losses['total']:.12g},{lr:.12g}")
    (d["metrics"] / "train_loss.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    model.save(d["model_ckpt"])
    return d["model_ckpt"]


def _descriptors_for(cfg: RunConfig, out_dir, manifest, indices, model, threads: int = 1):
    d = _dirs(out_dir)
    images = load_images(d["out"], manifest, indices)
    renders = None
    if cfg.model.fusion_stages:
        ensure_render_cache(cfg, out_dir, manifest, indices, threads=threads)
        renders = load_renders(out_dir, manifest, indices)
    return extract_descriptors(model, images, renders, batch_size=cfg.eval.batch_size)


def run_eval(cfg: RunConfig, out_dir, threads: int = 1) -> RetrievalResult:
    """Score the query/gallery split; writes metrics.csv (echoed to stdout)
    and optionally the raw descriptors."""
    d = _dirs(out_dir)
    manifest = load_corpus(out_dir)
    if not manifest.split:
        raise ValueError("manifest has no split; regenerate with gen-data")
    if not d["model_ckpt"].exists():
        raise ValueError(f"no model checkpoint under {d['checkpoints']}; run train first")
    model = _build_model(cfg, num_ids=len(manifest.identities))
    model.load(d["model_ckpt"])

    query = np.asarray(manifest.split["query"], dtype=np.int64)
    gallery = np.asarray(manifest.split["gallery"], dtype=np.int64)
    q_desc = _descriptors_for(cfg, out_dir, manifest, query, model, threads)
    g_desc = _descriptors_for(cfg, out_dir, manifest, gallery, model, threads)
    def ids(idx):
        return np.array([manifest.samples[i].identity for i in idx])

    def cams(idx):
        return np.array([manifest.samples[i].camera for i in idx])

    result = evaluate_retrieval(q_desc, ids(query), cams(query),
                                g_desc, ids(gallery), cams(gallery),
                                normalize=cfg.eval.normalize)

    d["metrics"].mkdir(parents=True, exist_ok=True)
    lines = ["metric,value", f"map,{result.mean_ap:.12g}"]
    for rank in range(1, len(result.cmc) + 1):
        lines.append(f"cmc{rank},{result.cmc_at(rank):.12g}")
    lines.append(f"num_valid_queries,{result.num_valid}")
    lines.append(f"num_skipped_queries,{result.num_skipped}")
    text = "\n".join(lines) + "\n"
    (d["metrics"] / "metrics.csv").write_text(text, encoding="utf-8")
    print(text, end="")

    if cfg.eval.dump_descriptors:
        io.save_checkpoint(d["metrics"] / "descriptors.van", {
            "query": q_desc,
            "query_ids": ids(query).astype(np.float64),
            "query_cams": cams(query).astype(np.float64),
            "gallery": g_desc,
            "gallery_ids": ids(gallery).astype(np.float64),
            "gallery_cams": cams(gallery).astype(np.float64),
        })
    return result


def run_render(cfg: RunConfig, out_dir, sample: int, threads: int = 1) -> list:
    """Materialize the four canonical views for one sample; returns paths."""
    d = _dirs(out_dir)
    manifest = load_corpus(out_dir)
    if not 0 <= sample < len(manifest.samples):
        raise ValueError(f"sample index {sample} out of range 0..{len(manifest.samples) - 1}")
    ensure_render_cache(cfg, out_dir, manifest, [sample], threads=threads)
    return _render_paths(d["renders"], sample)
