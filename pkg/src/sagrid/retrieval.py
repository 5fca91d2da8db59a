"""Retrieval metrics for person re-identification.

Single-query CMC and mAP follow the Market-1501 protocol: gallery entries
sharing both the query's identity and camera are discarded, negative pids are
distractors, and queries left without any valid match are excluded from the
averages. Distance ties are broken by gallery index. Final averages use
exactly-rounded summation (math.fsum) so results do not depend on summation
order.

Re-ranking implements k-reciprocal encoding: reciprocal neighbor sets over
the query+gallery union, expanded by half-k1 reciprocal sets, turned into
Gaussian-weighted assignment vectors, locally expanded over k2 neighbors, and
combined as (1-lambda) * Jaccard + lambda * original distance.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import load_image
from .tensor import Tensor, no_grad
from .train import preprocess

__all__ = [
    "EmbeddingSet",
    "EvalReport",
    "pairwise_l2",
    "cmc_map",
    "k_reciprocal_rerank",
    "extract_embeddings",
    "evaluate_embeddings",
    "evaluate",
    "save_embeddings",
    "load_embeddings",
    "format_report",
]

EMBEDDING_MAGIC = b"SAGEMB1"


@dataclass
class EmbeddingSet:
    features: np.ndarray  # [M x d] float
    pids: np.ndarray  # [M] int64
    camids: np.ndarray  # [M] int32

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.pids = np.asarray(self.pids, dtype=np.int64)
        self.camids = np.asarray(self.camids, dtype=np.int32)
        m = self.features.shape[0]
        if m < 1 or self.pids.shape != (m,) or self.camids.shape != (m,):
            raise ValueError("features, pids and camids must align on a non-empty first axis")


@dataclass
class EvalReport:
    cmc: np.ndarray  # rank-k accuracy, k = 1..K_max
    map: float
    reranked: Optional["EvalReport"] = None

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])


def pairwise_l2(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix [Nq x Ng], computed in float64."""
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dimensions disagree: {q.shape} vs {g.shape}")
    sq = (q * q).sum(axis=1)[:, None] + (g * g).sum(axis=1)[None, :] - 2.0 * (q @ g.T)
    return np.sqrt(np.maximum(sq, 0.0))


def cmc_map(dist: np.ndarray, q_pids, g_pids, q_camids, g_camids, k_max: int = 50) -> EvalReport:
    """Single-query CMC curve and mAP with standard junk filtering.

    Per query: sort the gallery by distance (ties by index), drop same-pid
    same-cam entries and negative-pid distractors, then score rank hits and
    average precision. Queries with no remaining correct match are excluded.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    dist = np.asarray(dist, dtype=np.float64)
    q_pids = np.asarray(q_pids)
    g_pids = np.asarray(g_pids)
    q_camids = np.asarray(q_camids)
    g_camids = np.asarray(g_camids)
    nq, ng = dist.shape

    hit_curves: list[np.ndarray] = []
    aps: list[float] = []
    for qi in range(nq):
        order = np.argsort(dist[qi], kind="stable")
        keep = ~((g_pids[order] == q_pids[qi]) & (g_camids[order] == q_camids[qi]))
        keep &= g_pids[order] >= 0
        matches = (g_pids[order][keep] == q_pids[qi]).astype(np.float64)
        num_rel = int(matches.sum())
        if num_rel == 0:
            continue
        first = int(np.argmax(matches))
        curve = np.zeros(k_max)
        curve[first:] = 1.0  # empty slice when the first hit falls beyond k_max
        hit_curves.append(curve)
        hits = 0
        precisions = []
        for pos in np.flatnonzero(matches):
            hits += 1
            precisions.append(hits / (int(pos) + 1))
        aps.append(math.fsum(precisions) / num_rel)

    if not hit_curves:
        raise ValueError("no query has a valid gallery match")
    n_valid = len(hit_curves)
    cmc = np.array([math.fsum(c[k] for c in hit_curves) / n_valid for k in range(k_max)])
    return EvalReport(cmc=cmc, map=math.fsum(aps) / n_valid)


def _k_reciprocal_neighbors(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    return forward[np.any(backward == i, axis=1)]


def k_reciprocal_rerank(q_feats: np.ndarray, g_feats: np.ndarray, k1: int = 20,
                        k2: int = 6, lam: float = 0.3) -> np.ndarray:
    """Refined query-gallery distances via k-reciprocal encoding.

    Returns a [Nq x Ng] matrix whose row-wise order at lam=1 reproduces the
    Euclidean ranking (the combination then reduces to a per-row monotone
    transform of the original distances).
    """
    if not (k1 > k2 >= 1):
        raise ValueError(f"need k1 > k2 >= 1, got k1={k1}, k2={k2}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0,1], got {lam}")
    q_feats = np.asarray(q_feats, dtype=np.float64)
    g_feats = np.asarray(g_feats, dtype=np.float64)
    nq = q_feats.shape[0]
    feats = np.vstack([q_feats, g_feats])
    all_num = feats.shape[0]
    if k1 >= all_num:
        raise ValueError(f"k1={k1} must be smaller than the set size {all_num}")

    original = pairwise_l2(feats, feats) ** 2
    original = (original / np.maximum(original.max(axis=0), 1e-300)).T
    initial_rank = np.argsort(original, kind="stable", axis=1)

    v = np.zeros_like(original, dtype=np.float64)
    half_k1 = int(np.around(k1 / 2))
    for i in range(all_num):
        neighbors = _k_reciprocal_neighbors(initial_rank, i, k1)
        expanded = neighbors
        for cand in neighbors:
            cand_neighbors = _k_reciprocal_neighbors(initial_rank, int(cand), half_k1)
            if len(np.intersect1d(cand_neighbors, neighbors)) > 2 / 3 * len(cand_neighbors):
                expanded = np.append(expanded, cand_neighbors)
        expanded = np.unique(expanded)
        weights = np.exp(-original[i, expanded])
        v[i, expanded] = weights / weights.sum()

    if k2 != 1:
        v = np.stack([v[initial_rank[i, :k2]].mean(axis=0) for i in range(all_num)])

    inverted = [np.flatnonzero(v[:, j]) for j in range(all_num)]
    jaccard = np.zeros((nq, all_num), dtype=np.float64)
    for i in range(nq):
        min_sum = np.zeros(all_num)
        nonzero = np.flatnonzero(v[i])
        for j in nonzero:
            min_sum[inverted[j]] += np.minimum(v[i, j], v[inverted[j], j])
        jaccard[i] = 1.0 - min_sum / (2.0 - min_sum)

    final = jaccard * (1 - lam) + original[:nq] * lam
    return final[:, nq:]


def extract_embeddings(model, items, root: str, mean_rgb, batch_size: int = 32,
                       input_hw=(160, 64)) -> EmbeddingSet:
    """Run the model in eval mode over manifest items and collect pooled features."""
    if not items:
        raise ValueError("cannot extract embeddings from an empty item list")
    mean_scaled = 2.0 * np.asarray(mean_rgb, dtype=np.float64) - 1.0
    feats = []
    with no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            batch = np.stack([
                preprocess(load_image(os.path.join(root, it.path)), mean_scaled, input_hw)
                for it in chunk
            ]).astype(np.float32)
            feats.append(model.extract_embedding(Tensor(batch)).data.astype(np.float64))
    return EmbeddingSet(
        features=np.vstack(feats),
        pids=np.asarray([it.raw_pid for it in items], dtype=np.int64),
        camids=np.asarray([it.camid for it in items], dtype=np.int32),
    )


def evaluate_embeddings(query: EmbeddingSet, gallery: EmbeddingSet, rerank: bool = False,
                        k1: int = 20, k2: int = 6, lam: float = 0.3, k_max: int = 50,
                        filter_same_camera: bool = True) -> EvalReport:
    q_cam = query.camids if filter_same_camera else np.full_like(query.camids, -1)
    dist = pairwise_l2(query.features, gallery.features)
    report = cmc_map(dist, query.pids, gallery.pids, q_cam, gallery.camids, k_max)
    if rerank:
        refined = k_reciprocal_rerank(query.features, gallery.features, k1, k2, lam)
        report.reranked = cmc_map(refined, query.pids, gallery.pids, q_cam,
                                  gallery.camids, k_max)
    return report


def evaluate(model, query_items, gallery_items, root: str, mean_rgb, rerank: bool = False,
             k1: int = 20, k2: int = 6, lam: float = 0.3, k_max: int = 50,
             filter_same_camera: bool = True, batch_size: int = 32,
             input_hw=(160, 64)) -> EvalReport:
    """Embed query and gallery with the model, then score CMC/mAP (optionally re-ranked)."""
    if not query_items or not gallery_items:
        raise ValueError("query and gallery must be non-empty")
    q = extract_embeddings(model, query_items, root, mean_rgb, batch_size, input_hw)
    g = extract_embeddings(model, gallery_items, root, mean_rgb, batch_size, input_hw)
    return evaluate_embeddings(q, g, rerank, k1, k2, lam, k_max, filter_same_camera)


def save_embeddings(path, emb: EmbeddingSet) -> None:
    """Binary embedding file: magic, u64 count, u64 dim, then per item
    (i64 pid, i32 camid, dim x f32-LE features)."""
    m, d = emb.features.shape
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<QQ", m, d))
        for i in range(m):
            fh.write(struct.pack("<qi", int(emb.pids[i]), int(emb.camids[i])))
            fh.write(np.ascontiguousarray(emb.features[i], dtype="<f4").tobytes())


def load_embeddings(path) -> EmbeddingSet:
    with open(path, "rb") as fh:
        if fh.read(len(EMBEDDING_MAGIC)) != EMBEDDING_MAGIC:
            raise ValueError(f"{path}: not an embedding file (bad magic)")
        m, d = struct.unpack("<QQ", fh.read(16))
        pids = np.empty(m, dtype=np.int64)
        camids = np.empty(m, dtype=np.int32)
        feats = np.empty((m, d), dtype=np.float64)
        for i in range(m):
            pid, camid = struct.unpack("<qi", fh.read(12))
            pids[i] = pid
            camids[i] = camid
            row = fh.read(4 * d)
            if len(row) != 4 * d:
                raise ValueError(f"{path}: truncated embedding file")
            feats[i] = np.frombuffer(row, dtype="<f4")
    return EmbeddingSet(features=feats, pids=pids, camids=camids)


def format_report(report: EvalReport, label: str = "SAG") -> str:
    """Tab-separated table row(s) plus a machine-readable key=value block."""
    lines = ["method\tR1\tR5\tR10\tmAP"]
    lines.append(_report_row(label, report))
    if report.reranked is not None:
        lines.append(_report_row(label + "+RR", report.reranked))
    lines.append("")
    lines.append(f"rank1={report.rank(1):.6f}")
    lines.append(f"rank5={report.rank(5):.6f}")
    lines.append(f"rank10={report.rank(10):.6f}")
    lines.append(f"map={report.map:.6f}")
    if report.reranked is not None:
        lines.append(f"rerank_rank1={report.reranked.rank(1):.6f}")
        lines.append(f"rerank_map={report.reranked.map:.6f}")
    return "\n".join(lines)


def _report_row(label: str, report: EvalReport) -> str:
    return (f"{label}\t{100 * report.rank(1):.2f}\t{100 * report.rank(5):.2f}"
            f"\t{100 * report.rank(10):.2f}\t{100 * report.map:.2f}")
