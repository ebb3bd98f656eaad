"""Boundary-matching benchmark for volumes: PR sweeps and ODS / OIS / AP.

Predicted and ground-truth boundary voxels are paired one-to-one within a
Euclidean tolerance. The pairing is a maximum-cardinality matching, with
ties broken by minimum total distance. Matched voxels are true positives;
unmatched predictions are false positives and unmatched truth voxels are
misses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import maximum_bipartite_matching, min_weight_full_bipartite_matching
from scipy.spatial import cKDTree

DEFAULT_THRESHOLDS = np.round(np.arange(99, 0, -1) / 100.0, 2)  # 0.99 .. 0.01


def default_max_dist(shape) -> float:
    """0.0075 of the volume diagonal, the usual boundary-benchmark tolerance."""
    return 0.0075 * float(np.sqrt(np.sum(np.square(shape))))


def evaluation_mask(vessel_gt: np.ndarray, radius: float = 20) -> np.ndarray:
    """Voxels within ``radius`` (Euclidean) of any vessel voxel."""
    vessel_gt = np.asarray(vessel_gt, dtype=bool)
    if not vessel_gt.any():
        raise ValueError("empty vessel ground truth: nothing to evaluate")
    return ndimage.distance_transform_edt(~vessel_gt) <= radius


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: np.ndarray  # (tp, 2) indices into pred_coords / gt_coords
    distances: np.ndarray
    pred_coords: np.ndarray
    gt_coords: np.ndarray

    @property
    def total_distance(self) -> float:
        return float(self.distances.sum())


def _candidates(pc: np.ndarray, gc: np.ndarray, max_dist: float):
    if len(pc) == 0 or len(gc) == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    found = cKDTree(pc).sparse_distance_matrix(cKDTree(gc), max_dist, output_type="ndarray")
    order = np.lexsort((found["j"], found["i"]))
    found = found[order]
    return found["i"].astype(int), found["j"].astype(int), found["v"].astype(float)


def _assignment(n_p: int, n_g: int, i, j, d, max_dist: float):
    """Max-cardinality, min-distance matching via a full matching on an augmented graph.

    Rows: predictions then one dummy per truth voxel. Columns: truth voxels
    then one dummy per prediction. Leaving a voxel unmatched costs ``big``;
    mirrored dummy-dummy edges let every real pair be used.
    """
    if len(i) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    big = (min(n_p, n_g) + 2) * (2.0 + max_dist) + 1.0
    rows = np.concatenate([i, np.arange(n_p), n_p + np.arange(n_g), n_p + j])
    cols = np.concatenate([j, n_g + np.arange(n_p), np.arange(n_g), n_g + i])
    cost = np.concatenate([1.0 + d, np.full(n_p, big), np.full(n_g, big), np.ones(len(i))])
    graph = sparse.csr_matrix((cost, (rows, cols)), shape=(n_p + n_g, n_g + n_p))
    row_ind, col_ind = min_weight_full_bipartite_matching(graph)
    real = (row_ind < n_p) & (col_ind < n_g)
    return row_ind[real], col_ind[real]


def _max_cardinality(n_p: int, n_g: int, i, j) -> int:
    """Size of a maximum matching (Hopcroft-Karp); distances do not affect it."""
    if len(i) == 0:
        return 0
    graph = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n_p, n_g))
    return int(np.count_nonzero(maximum_bipartite_matching(graph, perm_type="column") >= 0))


def match_counts(pred: np.ndarray, gt: np.ndarray, max_dist: float, method: str = "assignment") -> tuple[int, int, int]:
    """(tp, fp, fn) of :func:`match_boundaries` without recovering the pairs."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"extent mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    if method != "assignment":
        m = match_boundaries(pred, gt, max_dist, method)
        return m.tp, m.fp, m.fn
    pc, gc = np.argwhere(pred), np.argwhere(gt)
    i, j, _ = _candidates(pc, gc, max_dist)
    tp = _max_cardinality(len(pc), len(gc), i, j)
    return tp, len(pc) - tp, len(gc) - tp


def _greedy(i, j, d):
    used_p, used_g, keep = set(), set(), []
    for k in np.argsort(d, kind="stable"):
        if i[k] not in used_p and j[k] not in used_g:
            used_p.add(i[k])
            used_g.add(j[k])
            keep.append(k)
    keep = np.array(keep, int)
    return i[keep], j[keep]


def match_boundaries(pred: np.ndarray, gt: np.ndarray, max_dist: float, method: str = "assignment") -> MatchResult:
    """One-to-one correspondence between predicted and truth boundary voxels.

    ``method="greedy"`` pairs nearest candidates first; it is faster but not
    guaranteed to reach maximum cardinality.
    """
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"extent mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    pc, gc = np.argwhere(pred), np.argwhere(gt)
    i, j, d = _candidates(pc, gc, max_dist)
    if method == "assignment":
        mi, mj = _assignment(len(pc), len(gc), i, j, d, max_dist)
    elif method == "greedy":
        mi, mj = _greedy(i, j, d)
    else:
        raise ValueError(f"unknown matching method {method!r}")
    dist = np.linalg.norm(pc[mi] - gc[mj], axis=1) if len(mi) else np.zeros(0)
    tp = len(mi)
    return MatchResult(tp, len(pc) - tp, len(gc) - tp, np.stack([mi, mj], axis=1).reshape(-1, 2), dist, pc, gc)


def precision_recall(tp, fp, fn):
    """Precision 1 when nothing is predicted; recall 1 when nothing is to be found."""
    tp, fp, fn = (np.asarray(a, dtype=float) for a in (tp, fp, fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tp + fp > 0, tp / (tp + fp), 1.0)
        r = np.where(tp + fn > 0, tp / (tp + fn), 1.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f


@dataclass
class PRCurve:
    thresholds: np.ndarray  # descending
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    name: str = ""

    @property
    def precision(self) -> np.ndarray:
        return precision_recall(self.tp, self.fp, self.fn)[0]

    @property
    def recall(self) -> np.ndarray:
        return precision_recall(self.tp, self.fp, self.fn)[1]

    @property
    def f_measure(self) -> np.ndarray:
        return precision_recall(self.tp, self.fp, self.fn)[2]


def pr_curve(
    prob: np.ndarray,
    gt: np.ndarray,
    mask: np.ndarray | None = None,
    thresholds: Sequence[float] | None = None,
    max_dist: float | None = None,
    method: str = "assignment",
    name: str = "",
) -> PRCurve:
    """Match ``prob >= t`` against ``gt`` inside ``mask`` for every threshold."""
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt, bool)
    if prob.shape != gt.shape:
        raise ValueError(f"extent mismatch: prediction {prob.shape} vs ground truth {gt.shape}")
    if prob.size and (prob.min() < 0 or prob.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if mask is None:
        mask = np.ones(gt.shape, bool)
    if max_dist is None:
        max_dist = default_max_dist(gt.shape)
    thr = np.sort(np.asarray(DEFAULT_THRESHOLDS if thresholds is None else thresholds, float))[::-1]
    gt_in = gt & mask
    counts = np.zeros((len(thr), 3), dtype=np.int64)
    for k, t in enumerate(thr):
        counts[k] = match_counts((prob >= t) & mask, gt_in, max_dist, method)
    return PRCurve(thr, counts[:, 0], counts[:, 1], counts[:, 2], name)


@dataclass
class BenchmarkSummary:
    ods: float
    ois: float
    ap: float
    ods_threshold: float
    best_thresholds: list[float] = field(default_factory=list)
    thresholds: np.ndarray | None = None
    precision: np.ndarray | None = None
    recall: np.ndarray | None = None
    f_measure: np.ndarray | None = None


def average_precision(precision: np.ndarray, recall: np.ndarray) -> float:
    """Trapezoidal area under the interpolated precision-recall curve."""
    order = np.argsort(recall, kind="stable")
    r, p = recall[order], precision[order]
    p_interp = np.maximum.accumulate(p[::-1])[::-1]
    r = np.concatenate([[0.0], r])
    p_interp = np.concatenate([[p_interp[0]], p_interp])
    return float(np.sum(np.diff(r) * (p_interp[1:] + p_interp[:-1]) / 2))


def summarize(curves: Sequence[PRCurve]) -> BenchmarkSummary:
    """Dataset-level ODS, OIS and AP from per-volume curves on a shared threshold grid."""
    if not curves:
        raise ValueError("no curves to summarize")
    thr = curves[0].thresholds
    for c in curves:
        if not np.array_equal(c.thresholds, thr):
            raise ValueError("all curves must share the same thresholds")
    tp = sum(c.tp for c in curves)
    fp = sum(c.fp for c in curves)
    fn = sum(c.fn for c in curves)
    p, r, f = precision_recall(tp, fp, fn)
    best = int(np.argmax(f))
    picks = [int(np.argmax(c.f_measure)) for c in curves]
    ois_counts = np.sum([[c.tp[k], c.fp[k], c.fn[k]] for c, k in zip(curves, picks)], axis=0)
    ois = float(precision_recall(*ois_counts)[2])
    return BenchmarkSummary(
        ods=float(f[best]),
        ois=ois,
        ap=average_precision(p, r),
        ods_threshold=float(thr[best]),
        best_thresholds=[float(thr[k]) for k in picks],
        thresholds=thr,
        precision=p,
        recall=r,
        f_measure=f,
    )


def write_results_csv(curves: Sequence[PRCurve], summary: BenchmarkSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["volume", "threshold", "tp", "fp", "fn", "precision", "recall", "f"])
        for c in curves:
            for row in zip(c.thresholds, c.tp, c.fp, c.fn, c.precision, c.recall, c.f_measure):
                t, tp, fp, fn, p, r, f = row
                w.writerow([c.name, f"{t:.2f}", int(tp), int(fp), int(fn), repr(float(p)), repr(float(r)), repr(float(f))])
        w.writerow(["summary", f"{summary.ods_threshold:.2f}", "", "", "", "ODS", repr(summary.ods), ""])
        w.writerow(["summary", "", "", "", "", "OIS", repr(summary.ois), ""])
        w.writerow(["summary", "", "", "", "", "AP", repr(summary.ap), ""])


def write_summary_csv(summary: BenchmarkSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["ODS", repr(summary.ods)])
        w.writerow(["OIS", repr(summary.ois)])
        w.writerow(["AP", repr(summary.ap)])
        w.writerow(["ODS_threshold", f"{summary.ods_threshold:.2f}"])


def write_pr_svg(summaries: dict[str, BenchmarkSummary], path) -> None:
    """Precision-recall plot of one or more dataset-level curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for label, s in summaries.items():
        ax.plot(s.recall, s.precision, label=f"{label} ODS={s.ods:.3f} AP={s.ap:.3f}")
    ax.set(xlabel="Recall", ylabel="Precision", xlim=(0, 1), ylim=(0, 1.01))
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(Path(path), format="svg", metadata={"Date": None})
    plt.close(fig)
