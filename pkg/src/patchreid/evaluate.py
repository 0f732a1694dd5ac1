"""Retrieval evaluation (CMC / mAP, single query) and selection diagnostics.

Every query is scored independently against the gallery by cosine distance.
Gallery entries sharing both the query's identity and camera are excluded
before ranking, following the universal re-ID junk rule. Average precision
accumulates sequentially per query so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import IdentitySample
from .model import Model
from .selection import select


@dataclass
class EvalReport:
    rank_1: float
    rank_5: float
    rank_10: float
    mAP: float
    per_query_ap: list[float] = field(default_factory=list)
    skipped_queries: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rank_1": self.rank_1,
            "rank_5": self.rank_5,
            "rank_10": self.rank_10,
            "mAP": self.mAP,
            "num_queries": len(self.per_query_ap),
            "skipped_queries": self.skipped_queries,
        }


def cmc_map(
    dist: np.ndarray,
    q_ids: np.ndarray,
    q_cams: np.ndarray,
    g_ids: np.ndarray,
    g_cams: np.ndarray,
) -> EvalReport:
    """CMC rank-k and mAP from a query x gallery distance matrix.

    Queries with no valid positive (after excluding same-id same-camera
    entries) are skipped and reported.
    """
    nq, ng = dist.shape
    if nq == 0 or ng == 0:
        raise ValueError("need nonempty query and gallery")
    cmc_hits = {1: 0, 5: 0, 10: 0}
    aps: list[float] = []
    skipped: list[int] = []
    for qi in range(nq):
        order = np.argsort(dist[qi], kind="stable")
        ids = g_ids[order]
        cams = g_cams[order]
        keep = ~((ids == q_ids[qi]) & (cams == q_cams[qi]))
        kept_ids = ids[keep]
        matches = kept_ids == q_ids[qi]
        num_rel = int(matches.sum())
        if num_rel == 0:
            skipped.append(qi)
            continue
        first = int(np.flatnonzero(matches)[0])
        for r in cmc_hits:
            if first < r:
                cmc_hits[r] += 1
        hits = 0
        acc = 0.0
        for pos in np.flatnonzero(matches):
            hits += 1
            acc += hits / (int(pos) + 1)
        aps.append(acc / num_rel)
    if not aps:
        raise ValueError("every query was skipped; no valid positives at all")
    nvalid = len(aps)
    return EvalReport(
        rank_1=cmc_hits[1] / nvalid,
        rank_5=cmc_hits[5] / nvalid,
        rank_10=cmc_hits[10] / nvalid,
        mAP=sum(aps) / nvalid,
        per_query_ap=aps,
        skipped_queries=skipped,
    )


def extract_descriptors(
    model: Model,
    samples: list[IdentitySample],
    pre_dpsm: bool = False,
    normalize: bool = True,
) -> np.ndarray:
    vecs = np.stack([model.descriptor(s.image, pre_dpsm=pre_dpsm) for s in samples])
    if normalize:
        vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    return vecs


def evaluate(
    model: Model,
    query: list[IdentitySample],
    gallery: list[IdentitySample],
    pre_dpsm: bool | None = None,
) -> EvalReport:
    """Single-query retrieval over cosine distances between descriptors."""
    if not query or not gallery:
        raise ValueError("need nonempty query and gallery")
    if pre_dpsm is None:
        pre_dpsm = model.cfg.eval_pre_dpsm
    normalize = model.cfg.normalize_eval
    q = extract_descriptors(model, query, pre_dpsm=pre_dpsm, normalize=normalize)
    g = extract_descriptors(model, gallery, pre_dpsm=pre_dpsm, normalize=normalize)
    dist = 1.0 - q @ g.T
    return cmc_map(
        dist,
        np.array([s.identity for s in query]),
        np.array([s.camera for s in query]),
        np.array([s.identity for s in gallery]),
        np.array([s.camera for s in gallery]),
    )


@dataclass
class SelectionQualityReport:
    mean_precision: float
    random_precision: float       # expected precision of a uniform equal-k pick
    per_image_precision: list[float] = field(default_factory=list)
    per_image_prevalence: list[float] = field(default_factory=list)
    skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "mean_precision": self.mean_precision,
            "random_precision": self.random_precision,
            "num_images": len(self.per_image_precision),
            "skipped": self.skipped,
        }


def selection_quality(model: Model, samples: list[IdentitySample]) -> SelectionQualityReport:
    """How well selected patch cells land on visible body pixels.

    A grid cell counts as body when the majority of its pixels are body
    pixels in the ground-truth mask. The baseline is the expected precision
    of selecting the same number of cells uniformly at random, which equals
    the body-cell prevalence.
    """
    from .encoder import encode

    patch = model.cfg.encoder.patch
    precisions: list[float] = []
    prevalences: list[float] = []
    skipped = 0
    for sample in samples:
        if sample.truth_body_mask is None:
            skipped += 1
            continue
        tokens = encode(model.encoder, sample.image)
        sel = select(tokens, model.cfg.selection)
        n = tokens.num_patches
        cell_body = np.empty(n, dtype=bool)
        for idx in range(n):
            r, c = tokens.grid[idx]
            cell = sample.truth_body_mask[r * patch : (r + 1) * patch, c * patch : (c + 1) * patch]
            cell_body[idx] = cell.mean() > 0.5
        precisions.append(float(cell_body[sel.selected].mean()))
        prevalences.append(float(cell_body.mean()))
    if not precisions:
        raise ValueError("no samples carried a truth body mask")
    return SelectionQualityReport(
        mean_precision=float(np.mean(precisions)),
        random_precision=float(np.mean(prevalences)),
        per_image_precision=precisions,
        per_image_prevalence=prevalences,
        skipped=skipped,
    )
