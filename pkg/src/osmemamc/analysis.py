"""Post-training measurements: embedding geometry and attention placement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mamc import GROUPS, all_anchors, flat_index, partition_indices
from .osme import OsmeConfig, OsmeParams, heatmap, heatmap_peak, osme_forward
from .synth import Dataset, sample_batch
from .tensor import Tensor


def _detached(params: OsmeParams) -> OsmeParams:
    return {k: v.detach() for k, v in params.items()}


def quadrant(row: int, col: int, shape: tuple[int, int]) -> int:
    """0 upper-left, 1 upper-right, 2 lower-left, 3 lower-right."""
    return 2 * int(row >= shape[0] / 2) + int(col >= shape[1] / 2)


def branch_heatmaps(params: OsmeParams, images: np.ndarray, cfg: OsmeConfig) -> np.ndarray:
    """``(n, P, H, W)`` normalized channel-mean maps of every branch."""
    out = osme_forward(_detached(params), Tensor(images), cfg)
    return np.stack([[heatmap(S.data[j]) for S in out.attention_maps] for j in range(len(images))])


@dataclass
class DivergenceReport:
    fraction: float
    peaks: list[list[tuple[int, int]]]


def attention_divergence(params: OsmeParams, ds: Dataset, cfg: OsmeConfig) -> DivergenceReport:
    """Share of images whose first two branch peaks lie in different quadrants."""
    if cfg.P < 2:
        raise ValueError("attention divergence needs at least two branches")
    maps = branch_heatmaps(params, ds.images, cfg)
    peaks = [[heatmap_peak(m) for m in per_image] for per_image in maps]
    shape = maps.shape[2:]
    split = [quadrant(*pk[0], shape) != quadrant(*pk[1], shape) for pk in peaks]
    return DivergenceReport(float(np.mean(split)), peaks)


@dataclass
class GeometryReport:
    fraction_ordered: float
    mean_sq_dist: dict[str, float]
    anchors: int


def embedding_geometry(params: OsmeParams, ds: Dataset, cfg: OsmeConfig, N: int,
                       batches: int, rng: np.random.Generator) -> GeometryReport:
    """Mean squared anchor distances per group over held-out pair batches.

    An anchor counts as ordered when its same-attention same-class distance is
    below both its same-attention different-class and its different-attention
    different-class mean distances.
    """
    detached = _detached(params)
    ordered, total = 0, 0
    sums = {g: 0.0 for g in GROUPS}
    counts = {g: 0 for g in GROUPS}
    for _ in range(batches):
        batch = sample_batch(ds, N, rng)
        feats = osme_forward(detached, Tensor(batch.images), cfg).features.data
        flat = feats.reshape(-1, feats.shape[-1])   # rows follow flat_index
        sq = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
        for anchor in all_anchors(N, cfg.P):
            a = flat_index(anchor, cfg.P)
            groups = partition_indices(N, cfg.P, anchor)
            means = {}
            for g in GROUPS:
                members = getattr(groups, g)
                if members:
                    means[g] = float(sq[a, members].mean())
                    sums[g] += float(sq[a, members].sum())
                    counts[g] += len(members)
            if "sadc" in means and "dadc" in means:
                total += 1
                ordered += means["sasc"] < means["sadc"] and means["sasc"] < means["dadc"]
    return GeometryReport(ordered / max(total, 1),
                          {g: sums[g] / counts[g] for g in GROUPS if counts[g]}, total)
