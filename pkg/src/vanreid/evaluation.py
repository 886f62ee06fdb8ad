"""Descriptor extraction and retrieval scoring.

A probe's descriptor is its image embedding concatenated with one embedding
per rendered view: the model runs once per view (image paired with that
view), and the image segment is identical across those runs because image
tokens never attend to render tokens. Retrieval is scored with mean average
precision and the cumulative match curve; gallery entries that share both
identity and camera with the query are junk and never counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import DualStreamModel
from .tensor import Tensor, no_grad

__all__ = ["extract_descriptors", "pairwise_distances", "evaluate_retrieval",
           "RetrievalResult"]


def extract_descriptors(model: DualStreamModel, images: np.ndarray,
                        renders: np.ndarray | None = None,
                        batch_size: int = 16) -> np.ndarray:
    """images (N, 3, H, W), renders (N, V, 3, H, W) or None ->
    (N, (1+V)*C) with the image embedding first, then each view's."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    out = []
    with no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            chunk = Tensor(images[lo:hi])
            if renders is None:
                res = model.forward(chunk, None, training=False)
                out.append(res.embed_image.data)
                continue
            parts = None
            for view in range(renders.shape[1]):
                res = model.forward(chunk, Tensor(np.asarray(
                    renders[lo:hi, view], dtype=np.float64)), training=False)
                if parts is None:
                    parts = [res.embed_image.data]
                parts.append(res.embed_render.data)
            out.append(np.concatenate(parts, axis=1))
    return np.concatenate(out, axis=0)


def pairwise_distances(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Euclidean distances between row sets, (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"need matching row vectors, got {a.shape} and {b.shape}")
    out = np.empty((a.shape[0], b.shape[0]))
    for lo in range(0, a.shape[0], chunk):
        hi = min(lo + chunk, a.shape[0])
        diff = a[lo:hi, None, :] - b[None, :, :]
        out[lo:hi] = np.sqrt((diff * diff).sum(axis=2))
    return out


CMC_RANKS = 10


@dataclass(frozen=True)
class RetrievalResult:
    mean_ap: float
    cmc: np.ndarray          # ranks 1..CMC_RANKS; cmc[k]: hit in the top k+1
    per_query_ap: np.ndarray  # AP of each scored query, in query order
    num_valid: int
    num_skipped: int         # queries with no valid positive in the gallery

    def cmc_at(self, rank: int) -> float:
        if not 1 <= rank <= len(self.cmc):
            raise ValueError(f"rank must be in 1..{len(self.cmc)}, got {rank}")
        return float(self.cmc[rank - 1])


def _l2_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def evaluate_retrieval(query_desc, query_ids, query_cams,
                       gallery_desc, gallery_ids, gallery_cams,
                       normalize: bool = False) -> RetrievalResult:
    """Score queries against a gallery.

    Ties in distance break by gallery position (stable sort), so results are
    reproducible. Queries whose every positive is junk are excluded from the
    averages and reported in num_skipped. With normalize=True descriptors
    are L2-normalized per row before distances (off by default).
    """
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    nq = len(query_ids)
    ng = len(gallery_ids)
    if len(query_cams) != nq or len(gallery_cams) != ng:
        raise ValueError("ids and cams must align")
    query_desc = np.asarray(query_desc, dtype=np.float64)
    gallery_desc = np.asarray(gallery_desc, dtype=np.float64)
    if normalize:
        query_desc = _l2_rows(query_desc)
        gallery_desc = _l2_rows(gallery_desc)
    dist = pairwise_distances(query_desc, gallery_desc)

    per_query_ap = []
    cmc_counts = np.zeros(CMC_RANKS)
    skipped = 0
    for q in range(nq):
        junk = (gallery_ids == query_ids[q]) & (gallery_cams == query_cams[q])
        keep = ~junk
        ids = gallery_ids[keep]
        order = np.argsort(dist[q][keep], kind="stable")
        matches = ids[order] == query_ids[q]
        if not matches.any():
            skipped += 1
            continue
        hits = np.cumsum(matches)
        precisions = hits / np.arange(1, len(matches) + 1)
        per_query_ap.append(float((precisions * matches).sum() / matches.sum()))
        first = int(np.argmax(matches))
        if first < CMC_RANKS:
            cmc_counts[first:] += 1
    if not per_query_ap:
        raise ValueError("no query has a scorable positive in the gallery")
    per_query_ap = np.asarray(per_query_ap)
    valid = len(per_query_ap)
    return RetrievalResult(
        mean_ap=float(per_query_ap.mean()), cmc=cmc_counts / valid,
        per_query_ap=per_query_ap, num_valid=valid, num_skipped=skipped)
