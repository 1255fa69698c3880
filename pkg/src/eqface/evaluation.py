"""Verification and identification metrics over cosine similarities.

Conventions fixed here so results are reproducible and oracle-checkable:
acceptance means score >= threshold; the operating threshold for a FAR
target is the smallest observed score (or +inf) whose empirical FAR does
not exceed the target, with no interpolation; rank ties break toward the
lower reference index.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (DimensionMismatch, EmptyInput, InsufficientPairs,
                     NoInGalleryQueries)


@dataclass
class SimilarityMatrix:
    """Reference-by-query cosine similarities with their identity labels."""

    values: np.ndarray      # (R, C)
    row_labels: np.ndarray  # (R,)
    col_labels: np.ndarray  # (C,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.row_labels = np.asarray(self.row_labels)
        self.col_labels = np.asarray(self.col_labels)
        if self.values.shape != (len(self.row_labels), len(self.col_labels)):
            raise DimensionMismatch(
                f"matrix {self.values.shape} vs labels "
                f"({len(self.row_labels)}, {len(self.col_labels)})")
        if self.values.size and (self.values.min() < -1 - 1e-9
                                 or self.values.max() > 1 + 1e-9):
            raise ValueError("similarities must lie in [-1, 1]")

    @property
    def same_identity(self) -> np.ndarray:
        return self.row_labels[:, None] == self.col_labels[None, :]


@dataclass
class TarFarPoint:
    """TAR at one FAR target; achievable is False when the impostor count is
    too small to measure the target (the FAR-0 floor is reported instead)."""

    far_target: float
    tar: float
    threshold: float
    achieved_far: float
    achievable: bool


@dataclass
class RocPoint:
    threshold: float
    tar: float
    far: float


def _entries(items):
    """Accept FeatureRecords or (label, vector) pairs; return (matrix, labels)."""
    vectors, labels = [], []
    for item in items:
        if hasattr(item, "f") and hasattr(item, "identity"):
            vectors.append(np.asarray(item.f, dtype=np.float64))
            labels.append(item.identity)
        else:
            label, vec = item
            vectors.append(np.asarray(vec, dtype=np.float64))
            labels.append(label)
    return np.stack(vectors), np.array(labels)


def similarity_matrix(refs, queries) -> SimilarityMatrix:
    """Pairwise cosine similarities; inputs must be unit-norm vectors."""
    if not len(refs) or not len(queries):
        raise EmptyInput("reference and query sets must be nonempty")
    R, row_labels = _entries(refs)
    Q, col_labels = _entries(queries)
    if R.shape[1] != Q.shape[1]:
        raise DimensionMismatch(f"dims differ: {R.shape[1]} vs {Q.shape[1]}")
    return SimilarityMatrix(values=R @ Q.T, row_labels=row_labels,
                            col_labels=col_labels)


def _split_scores(sim: SimilarityMatrix, ground_truth_same):
    gt = np.asarray(ground_truth_same, dtype=bool)
    if gt.shape != sim.values.shape:
        raise DimensionMismatch("ground truth shape differs from matrix")
    genuine = sim.values[gt]
    impostor = sim.values[~gt]
    if genuine.size == 0 or impostor.size == 0:
        raise InsufficientPairs(
            f"need both pair kinds: {genuine.size} genuine, {impostor.size} impostor")
    return genuine, impostor


def tar_at_far(sim: SimilarityMatrix, ground_truth_same, far_targets) -> list:
    """TAR at each FAR target: smallest threshold with empirical FAR <= target."""
    genuine, impostor = _split_scores(sim, ground_truth_same)
    gen_sorted = np.sort(genuine)
    imp_sorted = np.sort(impostor)
    G, M = gen_sorted.size, imp_sorted.size
    candidates = np.unique(np.concatenate([gen_sorted, imp_sorted]))

    points = []
    for target in far_targets:
        # largest k with k/M <= target, comparing FAR values the same way the
        # counting does (float division), so k*target boundaries stay exact
        allowed = int(np.floor(target * M))
        while allowed + 1 <= M and (allowed + 1) / M <= target:
            allowed += 1
        while allowed > 0 and allowed / M > target:
            allowed -= 1
        if allowed >= M:
            threshold = float(candidates[0])
        else:
            # v = (allowed+1)-th largest impostor; threshold is the smallest
            # observed score strictly above it (or +inf when none exists)
            v = imp_sorted[M - allowed - 1]
            pos = np.searchsorted(candidates, v, side="right")
            threshold = float(candidates[pos]) if pos < candidates.size else np.inf
        tar = float((G - np.searchsorted(gen_sorted, threshold, side="left")) / G)
        far = float((M - np.searchsorted(imp_sorted, threshold, side="left")) / M)
        points.append(TarFarPoint(far_target=float(target), tar=tar,
                                  threshold=threshold, achieved_far=far,
                                  achievable=1.0 / M <= target))
    return points


def rank_n(sim: SimilarityMatrix, n_values) -> list:
    """Closed-set rank-n accuracy over queries whose identity is in the gallery.

    A query scores a hit at rank n when one of its n most similar reference
    entries (ties broken toward the lower index) carries its identity.
    """
    gallery = set(sim.row_labels.tolist())
    in_gallery = np.array([label in gallery for label in sim.col_labels.tolist()])
    if not in_gallery.any():
        raise NoInGalleryQueries("no query identity appears in the reference set")

    cols = sim.values[:, in_gallery]
    labels = sim.col_labels[in_gallery]
    # stable argsort on negated scores: equal scores keep ascending row order
    order = np.argsort(-cols, axis=0, kind="stable")
    ranked_labels = sim.row_labels[order]  # (R, Cin)

    results = []
    for n in n_values:
        top = ranked_labels[:max(int(n), 1)]
        hits = (top == labels[None, :]).any(axis=0)
        results.append((int(n), float(hits.mean())))
    return results


def roc_curve(sim: SimilarityMatrix, ground_truth_same) -> list:
    """One point per distinct score, plus (+inf, 0, 0) and (-inf, 1, 1) sentinels.

    Swept from high thresholds to low, both rates are non-decreasing.
    """
    genuine, impostor = _split_scores(sim, ground_truth_same)
    gen_sorted = np.sort(genuine)
    imp_sorted = np.sort(impostor)
    G, M = gen_sorted.size, imp_sorted.size
    thresholds = np.unique(np.concatenate([gen_sorted, imp_sorted]))[::-1]
    tars = (G - np.searchsorted(gen_sorted, thresholds, side="left")) / G
    fars = (M - np.searchsorted(imp_sorted, thresholds, side="left")) / M

    points = [RocPoint(threshold=np.inf, tar=0.0, far=0.0)]
    points.extend(RocPoint(threshold=float(t), tar=float(tp), far=float(fp))
                  for t, tp, fp in zip(thresholds, tars, fars))
    points.append(RocPoint(threshold=-np.inf, tar=1.0, far=1.0))
    return points


def write_roc_csv(points, path) -> None:
    lines = ["threshold,far,tar"]
    for p in points:
        lines.append(f"{p.threshold:.17g},{p.far:.17g},{p.tar:.17g}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_metrics_csv(rows, path) -> None:
    """rows: (metric, operating_point, value) triples."""
    lines = ["metric,operating_point,value"]
    for metric, op, value in rows:
        lines.append(f"{metric},{op},{value:.17g}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
