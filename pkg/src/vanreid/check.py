"""Self-contained verification suite behind the `check` subcommand.

Each check is a named callable that raises on failure; the runner prints one
pass/fail line per check and returns a process exit code. The fast subset
covers gradients and algebraic invariants; the full run adds small
end-to-end pieces (corpus generation, a few training steps).
"""

from __future__ import annotations

import tempfile
import traceback
from pathlib import Path

import numpy as np

from . import body, ops
from .camera import canonical_views, rasterize, render_canonical
from .data import DataConfig, build_identities, gen_dataset, png_bytes, regenerate_image, split_cvg
from .evaluation import evaluate_retrieval, extract_descriptors
from .fusion import DualBatchNorm, DualStreamModel, cross_attention
from .seeds import seed_stream
from .tensor import Tensor, finite_difference_check
from .texture import (ContentBiasConfig, StyleStats, TexturePredictor,
                      content_biased_loss, restyle)
from .training import Sgd, batch_hard_triplet, compute_losses, lr_at, train_step

__all__ = ["run_checks", "FAST_CHECKS", "FULL_CHECKS"]


def check_gradients_composite():
    """Finite differences across a conv/relu/matmul/softmax composition."""
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3)
    m = Tensor(rng.normal(size=(4, 2)))
    x = rng.normal(size=(2, 3, 6, 6))

    def graph(t):
        y = ops.conv2d(t, w, stride=2, padding=1)
        y = ops.relu(y)
        y = ops.mean(y, axes=(2, 3))
        y = ops.matmul(y, m)
        y = ops.softmax(y, axis=1)
        return ops.mean(ops.mul(y, y))

    err = finite_difference_check(graph, Tensor(x), step=1e-6)
    assert err < 1e-4, f"gradient error {err:.3e}"


def check_dual_bn_standardizes():
    rng = np.random.default_rng(8)
    bn = DualBatchNorm(5)
    x = Tensor(rng.normal(loc=3.0, scale=2.5, size=(6, 5, 4, 3)))
    y = bn.forward(x, "image", training=True).data
    mean = y.mean(axis=(0, 2, 3))
    var = y.var(axis=(0, 2, 3))
    assert np.abs(mean).max() < 1e-6, f"mean {np.abs(mean).max():.2e}"
    assert np.abs(var - 1).max() < 1e-4, f"var offset {np.abs(var - 1).max():.2e}"


def check_attention_rows_normalize():
    rng = np.random.default_rng(9)
    q = Tensor(rng.normal(size=(2, 5, 8)))
    k = Tensor(rng.normal(size=(2, 7, 8)))
    v = Tensor(rng.normal(size=(2, 7, 8)))
    _, probs = cross_attention(q, k, v, heads=2)
    sums = probs.data.sum(axis=-1)
    assert np.abs(sums - 1).max() < 1e-9, "attention rows must sum to one"


def check_stream_asymmetry():
    rng = np.random.default_rng(10)
    model = DualStreamModel(rng, num_ids=3, fusion_stages=(4,), zero_residual_init=False)
    data = np.random.default_rng(11)
    images = Tensor(data.uniform(size=(2, 3, 32, 16)))
    a = model.forward(images, Tensor(data.uniform(size=(2, 3, 32, 16))), training=False)
    b = model.forward(images, Tensor(data.uniform(size=(2, 3, 32, 16))), training=False)
    assert np.array_equal(a.embed_image.data, b.embed_image.data), \
        "image embedding must ignore render content"
    assert not np.array_equal(a.embed_render.data, b.embed_render.data), \
        "render embedding must see render content"


def check_triplet_brute_force():
    rng = np.random.default_rng(12)
    emb = rng.normal(size=(8, 5))
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    got = float(batch_hard_triplet(Tensor(emb), labels, margin=0.3).data)
    dist = np.sqrt(((emb[:, None] - emb[None]) ** 2).sum(-1))
    hinges = []
    for i in range(8):
        pos = (labels == labels[i]) & (np.arange(8) != i)
        neg = labels != labels[i]
        hinges.append(max(0.0, dist[i][pos].max() - dist[i][neg].min() + 0.3))
    assert abs(got - np.mean(hinges)) < 1e-12, f"triplet mismatch {got} vs {np.mean(hinges)}"


def check_retrieval_oracle():
    rng = np.random.default_rng(13)
    qd = rng.normal(size=(6, 4))
    gd = rng.normal(size=(15, 4))
    qi = np.arange(6) % 3
    gi = rng.integers(0, 3, size=15)
    gi[:3] = [0, 1, 2]
    qc = np.zeros(6, dtype=int)
    gc = np.ones(15, dtype=int)
    res = evaluate_retrieval(qd, qi, qc, gd, gi, gc)
    aps = []
    hits = np.zeros(10)
    for i in range(6):
        dist = np.sqrt(((gd - qd[i]) ** 2).sum(-1))
        order = sorted(range(15), key=lambda j: (dist[j], j))
        matches = [gi[j] == qi[i] for j in order]
        precisions = [sum(matches[: r + 1]) / (r + 1) for r, m in enumerate(matches) if m]
        aps.append(np.mean(precisions))
        first = matches.index(True)
        if first < 10:
            hits[first:] += 1
    assert abs(res.mean_ap - np.mean(aps)) < 1e-12, "mAP differs from oracle"
    assert np.abs(res.cmc - hits / 6).max() < 1e-12, "CMC differs from oracle"


def check_restyle_statistics():
    rng = np.random.default_rng(14)
    img = rng.uniform(size=(12, 9, 3))
    stats = StyleStats(mean=[0.4, 0.5, 0.6], std=[0.1, 0.12, 0.14])
    out = restyle(img, stats, noise_seed=0, noise_scale=0.0, clamp=False)
    for c in range(3):
        assert abs(out[:, :, c].mean() - stats.mean[c]) < 1e-9
        assert abs(out[:, :, c].std() - stats.std[c]) < 1e-9


def check_render_deterministic():
    template = body.build_template(0, 1)
    views = canonical_views(template, 32, 16)
    ident = build_identities(3, 1)[0]
    imgs = render_canonical(template, ident.shape, ident.base_texture(32), views)
    again = render_canonical(template, ident.shape, ident.base_texture(32), views)
    for a, b in zip(imgs, again):
        assert np.array_equal(a.pixels, b.pixels), "render must be deterministic"
        assert a.mask.any(), "render must contain foreground"
    flat = {imgs[i].pixels.tobytes() for i in range(4)}
    assert len(flat) == 4, "the four canonical views must differ"


def check_seed_streams_independent():
    a = seed_stream(5, "alpha").normal(size=8)
    b = seed_stream(5, "beta").normal(size=8)
    a2 = seed_stream(5, "alpha").normal(size=8)
    assert np.array_equal(a, a2), "named stream must replay"
    assert not np.array_equal(a, b), "streams with different names must differ"


def check_lr_schedule():
    assert lr_at(0) == 1e-4
    assert lr_at(40) == 1e-5
    assert lr_at(90) == 1e-6
    assert lr_at(119) == 1e-6


def check_descriptor_layout():
    rng = np.random.default_rng(15)
    model = DualStreamModel(rng, num_ids=3, fusion_stages=(4,))
    data = np.random.default_rng(16)
    images = data.uniform(size=(3, 3, 32, 16))
    renders = data.uniform(size=(3, 4, 3, 32, 16))
    desc = extract_descriptors(model, images, renders)
    assert desc.shape == (3, 5 * model.embed_dim), f"descriptor shape {desc.shape}"
    zeroed = extract_descriptors(model, images, np.zeros_like(renders))
    assert np.array_equal(desc[:, :model.embed_dim], zeroed[:, :model.embed_dim]), \
        "image segment must not depend on renders"


def check_loss_composition():
    rng = np.random.default_rng(17)
    model = DualStreamModel(rng, num_ids=4, fusion_stages=(4,))
    data = np.random.default_rng(18)
    images = Tensor(data.uniform(size=(4, 3, 16, 8)))
    renders = Tensor(data.uniform(size=(4, 3, 16, 8)))
    labels = np.array([0, 0, 1, 1])
    out = model.forward(images, renders, training=True)
    parts = compute_losses(out, labels)
    direct = sum(float(parts[k].data) for k in parts if k != "total")
    assert abs(float(parts["total"].data) - direct) < 1e-12, "total must equal the sum"


def check_texture_predictor_gradient():
    rng = np.random.default_rng(19)
    predictor = TexturePredictor(rng, 16, 8, texture_size=8)
    data = np.random.default_rng(20)
    batch = Tensor(data.uniform(size=(1, 3, 16, 8)))
    original = predictor.out_conv.bias

    def graph(t):
        predictor.out_conv.bias = t
        try:
            return ops.mean(predictor.forward(batch))
        finally:
            predictor.out_conv.bias = original

    err = finite_difference_check(graph, original, step=1e-6)
    assert err < 1e-4, f"texture predictor gradient error {err:.3e}"


def check_content_bias_hinge():
    rng = np.random.default_rng(21)
    predictor = TexturePredictor(rng, 16, 8, texture_size=8)
    data = np.random.default_rng(22)
    img = data.uniform(size=(16, 8, 3))
    cfg = ContentBiasConfig(tau=0.3)
    loss = content_biased_loss(predictor, img, img, img, cfg)
    assert float(loss.data) == cfg.tau, "identical triplet must sit exactly at tau"


def check_tiny_corpus_roundtrip():
    cfg = DataConfig(num_identities=2, images_per_identity=4, num_cameras=4,
                     height=32, width=16, texture_size=32)
    with tempfile.TemporaryDirectory() as tmp:
        manifest = gen_dataset(cfg, tmp, seed=3)
        assert len(manifest.samples) == 8
        pixels = regenerate_image(manifest, 5)
        disk = (Path(tmp) / manifest.samples[5].path).read_bytes()
        assert png_bytes(pixels) == disk, "regeneration must be byte-exact"
        manifest = split_cvg(manifest, seed=4)
        split = manifest.split
        assert not set(split["train_cameras"]) & set(split["test_cameras"])
        assert split["query"], "split must produce queries"


def check_training_steps_deterministic():
    def run():
        model = DualStreamModel(np.random.default_rng(23), num_ids=4, fusion_stages=(4,))
        opt = Sgd(model.parameters(), 1e-3, momentum=0.9)
        data = np.random.default_rng(24)
        images = data.uniform(size=(8, 3, 16, 8))
        renders = data.uniform(size=(8, 3, 16, 8))
        labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        logs = [train_step(model, opt, images, renders, labels) for _ in range(3)]
        return logs, model

    logs_a, model_a = run()
    logs_b, model_b = run()
    assert logs_a == logs_b, "training logs must replay bitwise"
    state_a, state_b = model_a.state_arrays(), model_b.state_arrays()
    assert all(np.array_equal(state_a[k], state_b[k]) for k in state_a), \
        "model state must replay bitwise"
    init = DualStreamModel(np.random.default_rng(23), num_ids=4, fusion_stages=(4,)).state_arrays()
    assert any(not np.array_equal(state_a[k], init[k]) for k in state_a), \
        "training must move weights"


def check_rasterizer_depth_order():
    template = body.build_template(0, 1)
    mesh = body.skin(template, np.zeros(body.NUM_SHAPE_COEFFS), body.CANONICAL_POSE)
    view = canonical_views(template, 32, 16)[0]
    ident = build_identities(5, 1)[0]
    img = rasterize(mesh, ident.base_texture(32), view)
    assert img.mask.any() and not img.mask.all(), "foreground and background must coexist"
    assert img.pixels.min() >= 0 and img.pixels.max() <= 1


FAST_CHECKS = (
    ("gradients-composite", check_gradients_composite),
    ("dual-batchnorm", check_dual_bn_standardizes),
    ("attention-rows", check_attention_rows_normalize),
    ("stream-asymmetry", check_stream_asymmetry),
    ("triplet-oracle", check_triplet_brute_force),
    ("retrieval-oracle", check_retrieval_oracle),
    ("restyle-statistics", check_restyle_statistics),
    ("seed-streams", check_seed_streams_independent),
    ("lr-schedule", check_lr_schedule),
    ("loss-composition", check_loss_composition),
    ("content-bias-hinge", check_content_bias_hinge),
    ("rasterizer", check_rasterizer_depth_order),
)

FULL_CHECKS = FAST_CHECKS + (
    ("render-determinism", check_render_deterministic),
    ("descriptor-layout", check_descriptor_layout),
    ("texture-gradient", check_texture_predictor_gradient),
    ("tiny-corpus", check_tiny_corpus_roundtrip),
    ("training-determinism", check_training_steps_deterministic),
)


def run_checks(fast: bool = False, verbose: bool = True) -> int:
    checks = FAST_CHECKS if fast else FULL_CHECKS
    failures = 0
    for name, fn in checks:
        try:
            fn()
        except Exception as err:  # noqa: BLE001 - report every failure kind
            failures += 1
            if verbose:
                print(f"FAIL {name}: {err}")
                traceback.print_exc()
        else:
            if verbose:
                print(f"ok   {name}")
    if verbose:
        total = len(checks)
        print(f"{total - failures}/{total} checks passed")
    return 1 if failures else 0
