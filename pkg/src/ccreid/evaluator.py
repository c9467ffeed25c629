"""Retrieval evaluation: descriptor extraction, CMC/mAP, protocol filters.

Distances are Euclidean over L2-normalized descriptors; ranking ties break
on the gallery index so results are reproducible. Per query, junk gallery
entries (same camera + same identity, and optionally same clothes + same
identity under the cloth-change protocol) are removed before ranking.
Queries left without any valid match are dropped from the metrics and
counted in the result.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .config import EvalConfig
from .data import DatasetManifest, SampleCache
from .model import ReidModel


@dataclass
class DescriptorSet:
    features: np.ndarray   # (N, D) float64, L2-normalized rows
    ids: np.ndarray        # (N,) int64
    cams: np.ndarray
    clothes: np.ndarray


@dataclass
class RankingResult:
    cmc: np.ndarray                 # cmc[k-1] = fraction matched in top-k
    mean_ap: float
    per_query_ap: np.ndarray        # AP of each evaluated query
    per_query_ranking: list         # kept gallery indices, best first
    num_queries: int                # evaluated queries
    num_dropped: int                # queries with no valid match

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])


def extract_descriptors(model: ReidModel, manifest: DatasetManifest,
                        split: str, batch_size: int = 32) -> DescriptorSet:
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"manifest has no '{split}' records")
    cache = SampleCache(manifest)
    model.eval()
    feats = []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            images = torch.from_numpy(
                np.stack([cache.image(r) for r in chunk]))
            out = model(images)
            feats.append(out.descriptor.numpy())
    features = np.concatenate(feats, axis=0).astype(np.float64)
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    features = features / np.maximum(norms, 1e-12)
    return DescriptorSet(
        features=features,
        ids=np.array([r.identity_id for r in records], dtype=np.int64),
        cams=np.array([r.camera_id for r in records], dtype=np.int64),
        clothes=np.array([r.clothes_id for r in records], dtype=np.int64))


def evaluate(query: DescriptorSet, gallery: DescriptorSet,
             cfg: EvalConfig | None = None) -> RankingResult:
    cfg = cfg or EvalConfig()
    if query.features.shape[1] != gallery.features.shape[1]:
        raise ValueError("query/gallery descriptor dimensions differ")
    n_g = gallery.features.shape[0]
    sq_q = (query.features ** 2).sum(axis=1)
    sq_g = (gallery.features ** 2).sum(axis=1)
    d2 = sq_q[:, None] + sq_g[None, :] - 2.0 * query.features @ gallery.features.T
    dist = np.sqrt(np.clip(d2, 0.0, None))

    max_rank = min(cfg.max_rank, n_g)
    first_hits, aps, rankings = [], [], []
    num_dropped = 0
    for q in range(query.features.shape[0]):
        qid = query.ids[q]
        junk = np.zeros(n_g, dtype=bool)
        if cfg.exclude_same_camera_same_id:
            junk |= (gallery.ids == qid) & (gallery.cams == query.cams[q])
        if cfg.cloth_change_only:
            junk |= (gallery.ids == qid) & (gallery.clothes == query.clothes[q])
        kept = np.nonzero(~junk)[0]
        matches_exist = kept.size and (gallery.ids[kept] == qid).any()
        if not matches_exist:
            num_dropped += 1
            continue
        # sort by distance, ties by gallery index
        order = np.lexsort((kept, dist[q, kept]))
        ranked = kept[order]
        rel = gallery.ids[ranked] == qid
        hit_pos = np.nonzero(rel)[0]
        precision = (np.arange(hit_pos.size) + 1.0) / (hit_pos + 1.0)
        aps.append(precision.mean())
        first_hits.append(hit_pos[0])
        rankings.append(ranked)
    if not aps:
        raise ValueError("no query has a valid gallery match after filtering")
    first_hits = np.asarray(first_hits)
    cmc = np.array([(first_hits < k).mean() for k in range(1, max_rank + 1)])
    return RankingResult(cmc=cmc, mean_ap=float(np.mean(aps)),
                         per_query_ap=np.asarray(aps),
                         per_query_ranking=rankings,
                         num_queries=len(aps), num_dropped=num_dropped)


# ---------------------------------------------------------------------------
# Descriptor files: binary (N, D) header + float64 rows, JSON sidecar
# ---------------------------------------------------------------------------

def save_descriptors(path, dset: DescriptorSet) -> None:
    path = str(path)
    n, d = dset.features.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<QQ", n, d))
        f.write(np.ascontiguousarray(dset.features, dtype="<f8").tobytes())
    sidecar = {"ids": dset.ids.tolist(), "cams": dset.cams.tolist(),
               "clothes": dset.clothes.tolist()}
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True)


def load_descriptors(path) -> DescriptorSet:
    path = str(path)
    with open(path, "rb") as f:
        n, d = struct.unpack("<QQ", f.read(16))
        features = np.frombuffer(f.read(n * d * 8), dtype="<f8").reshape(n, d).copy()
    with open(path + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    return DescriptorSet(features=features,
                         ids=np.asarray(sidecar["ids"], dtype=np.int64),
                         cams=np.asarray(sidecar["cams"], dtype=np.int64),
                         clothes=np.asarray(sidecar["clothes"], dtype=np.int64))


# ---------------------------------------------------------------------------
# Ablation report
# ---------------------------------------------------------------------------

VARIANT_ORDER = ("baseline", "mgr", "mgr+cdn", "mgr+cdn+psa")

VARIANT_FLAGS = {
    "baseline": [],
    "mgr": ["mgr"],
    "mgr+cdn": ["mgr", "cdn"],
    "mgr+cdn+psa": ["mgr", "cdn", "psa"],
}


def ablation_report(results: dict[str, RankingResult]) -> dict:
    """Fixed-order table of mAP / rank-k per ablation variant."""
    unknown = set(results) - set(VARIANT_ORDER)
    if unknown:
        raise ValueError(f"unknown ablation variant(s): {sorted(unknown)}")
    missing = [v for v in VARIANT_ORDER if v not in results]
    if missing:
        raise ValueError(f"missing ablation variant(s): {missing}")
    rows = []
    for variant in VARIANT_ORDER:
        r = results[variant]
        row = {"variant": variant, "mAP": r.mean_ap, "rank1": float(r.cmc[0]),
               "num_queries": r.num_queries, "num_dropped": r.num_dropped}
        for k in (5, 10):
            if len(r.cmc) >= k:
                row[f"rank{k}"] = float(r.cmc[k - 1])
        rows.append(row)
    return {"rows": rows}


def format_report(report: dict) -> str:
    rows = report["rows"]
    keys = ["variant", "mAP", "rank1", "rank5", "rank10",
            "num_queries", "num_dropped"]
    present = [k for k in keys if any(k in r for r in rows)]
    widths = {k: max(len(k), *(len(_fmt(r.get(k))) for r in rows))
              for k in present}
    lines = ["  ".join(k.ljust(widths[k]) for k in present)]
    for r in rows:
        lines.append("  ".join(_fmt(r.get(k)).ljust(widths[k]) for k in present))
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
