"""Overlap, centerline, surface-distance, and tree-detection metrics.

All overlap scores are percentages in [0, 100]; distances are in mm and
honour anisotropic spacing.  Surfaces are foreground voxels with at
least one background 6-neighbor, the volume border counting as
background.  Centerline-based scores share the toolkit's skeleton
semantics (hard_skeleton), so the same centerline feeds losses and
evaluation.
"""

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import NumericDomainError, ParameterError
from .skeleton import _components_array, _neighbor_counts, hard_skeleton
from .volume import Mask3


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool  # True when an empty denominator forced a 0


@dataclass(frozen=True)
class MetricsReport:
    dice: float
    cldice: float
    f1: float
    precision: float
    recall: float
    hd: float
    assd: float
    ahd: float
    bd: float
    tld: float
    pred_voxels: int
    gt_voxels: int
    pred_surface_voxels: int
    gt_surface_voxels: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check_same_dims(pred: Mask3, gt: Mask3):
    if pred.dims != gt.dims:
        raise ParameterError(f"shape mismatch: {pred.dims} vs {gt.dims}")


def dice(pred: Mask3, gt: Mask3) -> float:
    """100 * 2|P&G| / (|P|+|G|); both-empty pairs score 100 by convention."""
    _check_same_dims(pred, gt)
    p = pred.data > 0
    g = gt.data > 0
    np_, ng = int(p.sum()), int(g.sum())
    if np_ + ng == 0:
        return 100.0
    return 100.0 * 2.0 * int((p & g).sum()) / (np_ + ng)


def precision_recall_f1(pred: Mask3, gt: Mask3) -> PRF:
    _check_same_dims(pred, gt)
    p = pred.data > 0
    g = gt.data > 0
    tp = int((p & g).sum())
    np_, ng = int(p.sum()), int(g.sum())
    degenerate = np_ == 0 or ng == 0
    precision = 100.0 * tp / np_ if np_ else 0.0
    recall = 100.0 * tp / ng if ng else 0.0
    f1 = (2.0 * precision * recall / (precision + recall)
          if precision > 0 and recall > 0 else 0.0)
    return PRF(precision, recall, f1, degenerate)


def cldice(pred: Mask3, gt: Mask3, skel_k: int = 10) -> float:
    """Harmonic mean of topology precision/sensitivity on skeletons."""
    _check_same_dims(pred, gt)
    if pred == gt:
        return 100.0
    p = pred.data > 0
    g = gt.data > 0
    sp = hard_skeleton(pred, skel_k).data > 0
    sg = hard_skeleton(gt, skel_k).data > 0
    nsp, nsg = int(sp.sum()), int(sg.sum())
    if nsp == 0 or nsg == 0:
        return 0.0
    tprec = int((sp & g).sum()) / nsp
    tsens = int((sg & p).sum()) / nsg
    if tprec + tsens == 0:
        return 0.0
    return 100.0 * 2.0 * tprec * tsens / (tprec + tsens)


def surface_voxels(mask: Mask3) -> np.ndarray:
    """Coordinates of foreground voxels touching background 6-wise;
    the volume border counts as background."""
    fg = mask.data > 0
    interior = fg.copy()
    for axis in range(3):
        pad = [(0, 0)] * 3
        pad[axis] = (1, 1)
        g = np.pad(fg, pad)
        n = fg.shape[axis]
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[axis] = slice(0, n)
        sl_hi[axis] = slice(2, n + 2)
        interior &= g[tuple(sl_lo)] & g[tuple(sl_hi)]
    return np.argwhere(fg & ~interior)


def surface_distances(pred: Mask3, gt: Mask3, spacing=(1.0, 1.0, 1.0)):
    """(hd, assd, ahd) in mm between the two mask surfaces."""
    _check_same_dims(pred, gt)
    if not (pred.data.any() and gt.data.any()):
        raise NumericDomainError("undefined distance: empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (3,) or (sp <= 0).any():
        raise ParameterError(f"spacing must be three positives, got {spacing}")
    a = surface_voxels(pred) * sp
    b = surface_voxels(gt) * sp
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    hd = max(float(d_ab.max()), float(d_ba.max()))
    assd = (float(d_ab.sum()) + float(d_ba.sum())) / (len(a) + len(b))
    ahd = (float(d_ab.mean()) + float(d_ba.mean())) / 2.0
    return hd, assd, ahd


def _branch_components(centerline: np.ndarray):
    """Split a centerline into branches: junctions (>= 3 neighbors)
    removed, remaining voxels labelled 26-wise.

    A blob-like centerline can be all junctions; fall back to the whole
    centerline so thick degenerate skeletons still count as branches."""
    counts = _neighbor_counts(centerline)
    junctions = centerline & (counts >= 3)
    comp = _components_array(centerline & ~junctions, 26)
    if comp.count == 0:
        comp = _components_array(centerline, 26)
    return comp


def _walk_lengths(coords: np.ndarray, inside: np.ndarray, spacing):
    """(total, detected) mm length of a branch's 26-connected chain.

    Walks a BFS spanning tree from the smallest-linear-index voxel with
    neighbors visited in linear order; for simple paths this is the path
    itself.  A step counts as detected when both endpoints are inside."""
    order = np.lexsort((coords[:, 0], coords[:, 1], coords[:, 2]))
    coords = coords[order]
    inside = inside[order]
    index = {tuple(c): i for i, c in enumerate(map(tuple, coords))}
    sp = np.asarray(spacing, dtype=np.float64)
    seen = {0}
    queue = [0]
    total = detected = 0.0
    while queue:
        i = queue.pop(0)
        ci = coords[i]
        for j in sorted(index[t] for t in _neighbors26(tuple(ci)) if t in index):
            if j in seen:
                continue
            seen.add(j)
            queue.append(j)
            step = float(np.sqrt((((coords[j] - ci) * sp) ** 2).sum()))
            total += step
            if inside[i] and inside[j]:
                detected += step
    return total, detected


def _neighbors26(c):
    x, y, z = c
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx or dy or dz:
                    yield (x + dx, y + dy, z + dz)


def tree_metrics(pred: Mask3, gt: Mask3, skel_k: int = 10,
                 spacing=(1.0, 1.0, 1.0), detect_threshold: int = 1):
    """Branch-detected and tree-length-detected percentages.

    A reference branch counts as detected when at least detect_threshold
    of its centerline voxels fall inside the prediction.
    """
    _check_same_dims(pred, gt)
    if not gt.data.any():
        raise NumericDomainError("tree metrics need a non-empty reference")
    centerline = hard_skeleton(gt, skel_k).data > 0
    comp = _branch_components(centerline)
    if comp.count == 0:
        raise NumericDomainError("reference centerline has no branches")
    p = pred.data > 0

    detected_branches = 0
    total_len = detected_len = 0.0
    covered_voxels = 0
    for cid in range(1, comp.count + 1):
        coords = np.argwhere(comp.labels == cid)
        inside = p[coords[:, 0], coords[:, 1], coords[:, 2]]
        if int(inside.sum()) >= detect_threshold:
            detected_branches += 1
        covered_voxels += int(inside.sum())
        t, d = _walk_lengths(coords, inside, spacing)
        total_len += t
        detected_len += d

    bd = 100.0 * detected_branches / comp.count
    if total_len > 0:
        tld = 100.0 * detected_len / total_len
    else:
        # all branches are single voxels: fall back to voxel coverage
        tld = 100.0 * covered_voxels / int(comp.sizes.sum())
    return bd, tld


def evaluate(pred: Mask3, gt: Mask3, spacing=(1.0, 1.0, 1.0),
             skel_k: int = 10) -> MetricsReport:
    """Full metric panel for one prediction/reference pair."""
    prf = precision_recall_f1(pred, gt)
    hd, assd, ahd = surface_distances(pred, gt, spacing)
    bd, tld = tree_metrics(pred, gt, skel_k, spacing)
    return MetricsReport(
        dice=dice(pred, gt),
        cldice=cldice(pred, gt, skel_k),
        f1=prf.f1, precision=prf.precision, recall=prf.recall,
        hd=hd, assd=assd, ahd=ahd, bd=bd, tld=tld,
        pred_voxels=pred.count(), gt_voxels=gt.count(),
        pred_surface_voxels=len(surface_voxels(pred)),
        gt_surface_voxels=len(surface_voxels(gt)),
    )
