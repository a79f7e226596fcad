"""Pointcloud comparison: PCA normals and nearest-neighbour error labelling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .scan import Label, LabelImage, PointCloud


@dataclass(frozen=True)
class CompareConfig:
    error_threshold: float = 0.5
    scan_gap: int = 4
    normal_k: int = 10
    normal_radius: float = 1.0
    k_min: int = 5

    def __post_init__(self):
        if not self.error_threshold > 0:
            raise ValueError("error_threshold must be positive")
        if self.scan_gap < 1:
            raise ValueError("scan_gap must be >= 1")
        if not 3 <= self.k_min <= self.normal_k:
            raise ValueError("need 3 <= k_min <= normal_k")
        if not self.normal_radius > 0:
            raise ValueError("normal_radius must be positive")


class NormalCloud:
    """Per-point unit normals, computed on demand.

    ``normals`` rows are NaN and ``planar`` False until :meth:`ensure` has
    covered them; a computed point is planar iff it has at least ``k_min``
    neighbours (itself included) within ``normal_radius``. Normals face the per-point sensor position.
    """

    def __init__(self, points, sensor_positions, cfg: CompareConfig = CompareConfig(),
                 tree: cKDTree | None = None, workers: int = 1):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.sensors = np.broadcast_to(np.asarray(sensor_positions, dtype=float),
                                       self.points.shape)
        self.cfg = cfg
        self.workers = workers
        self._tree = tree
        n = len(self.points)
        self.normals = np.full((n, 3), np.nan)
        self.planar = np.zeros(n, dtype=bool)
        self.computed = np.zeros(n, dtype=bool)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def ensure(self, idx=None) -> NormalCloud:
        idx = np.arange(len(self.points)) if idx is None else np.asarray(idx, dtype=np.int64)
        idx = np.unique(idx[~self.computed[idx]])
        if idx.size:
            nrm, planar = _pca_normals(self.points, self.sensors, idx, self.tree, self.cfg,
                                       self.workers)
            self.normals[idx] = nrm
            self.planar[idx] = planar
            self.computed[idx] = True
        return self

    def __len__(self) -> int:
        return len(self.points)


def _pca_normals(points, sensors, idx, tree, cfg, workers):
    n = len(idx)
    normals = np.full((n, 3), np.nan)
    k = min(cfg.normal_k, len(points))
    dist, nb_idx = tree.query(points[idx], k=k, distance_upper_bound=cfg.normal_radius,
                              workers=workers)
    dist = dist.reshape(n, k)
    nb_idx = nb_idx.reshape(n, k)
    found = np.isfinite(dist)
    count = found.sum(axis=1)
    planar = count >= cfg.k_min
    sel = np.flatnonzero(planar)
    if sel.size:
        w = found[sel].astype(float)
        nb = points[np.where(found[sel], nb_idx[sel], 0)]
        cnt = count[sel].astype(float)[:, None]
        mean = (w[..., None] * nb).sum(axis=1) / cnt
        d = (nb - mean[:, None, :]) * w[..., None]
        cov = np.einsum("nki,nkj->nij", d, d) / cnt[..., None]
        _, vecs = np.linalg.eigh(cov)
        nrm = vecs[:, :, 0]
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        p = points[idx[sel]]
        flip = ((sensors[idx[sel]] - p) * nrm).sum(axis=1) < 0
        nrm[flip] *= -1.0
        normals[sel] = nrm
    return normals, planar


def estimate_normals(points, sensor_positions, cfg: CompareConfig = CompareConfig(),
                     tree: cKDTree | None = None, workers: int = 1) -> NormalCloud:
    """Smallest-eigenvector normals of the k-nearest neighbourhood within a radius.

    The neighbourhood includes the point itself. Normals are flipped to face
    ``sensor_positions``.
    """
    return NormalCloud(points, sensor_positions, cfg, tree, workers).ensure()


def point_to_plane(n, p, q) -> float:
    n = np.asarray(n, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("normal must be unit length")
    return float(abs(np.dot(n, np.asarray(p, dtype=float) - np.asarray(q, dtype=float))))


def point_to_point(p, q) -> float:
    return float(np.linalg.norm(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)))


def nearest_neighbours(tree: cKDTree, points, workers: int = 1):
    """Exact nearest neighbour; equal-distance ties go to the lower index."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if tree.n == 1 or len(points) == 0:
        d, i = tree.query(points, k=1, workers=workers)
        return np.atleast_1d(d), np.atleast_1d(i)
    d, i = tree.query(points, k=2, workers=workers)
    tie = (d[:, 1] == d[:, 0]) & (i[:, 1] < i[:, 0])
    return d[:, 0], np.where(tie, i[:, 1], i[:, 0])


def comparison_errors(query: PointCloud, normals: NormalCloud, reference: PointCloud,
                      ref_tree: cKDTree | None = None, workers: int = 1,
                      threshold: float | None = None):
    """Per query point error against its nearest reference point.

    With ``threshold`` set, points whose nearest reference point lies within
    it are reported as that (upper-bound) distance: both metrics are then
    below the threshold, so normals are only computed where they matter.
    """
    if len(reference) == 0:
        raise ValueError("cannot compare against an empty reference scan")
    if ref_tree is None:
        ref_tree = cKDTree(reference.points)
    q = query.points
    err = np.empty(len(q))
    if threshold is None:
        todo = np.arange(len(q))
    else:
        d, _ = ref_tree.query(q, k=1, distance_upper_bound=threshold, workers=workers)
        near = np.isfinite(d)
        err[near] = d[near]
        todo = np.flatnonzero(~near)
    if todo.size:
        dist, nn = nearest_neighbours(ref_tree, q[todo], workers)
        normals.ensure(todo)
        diff = reference.points[nn] - q[todo]
        nrm = normals.normals[todo]
        plane = np.abs((np.nan_to_num(nrm) * diff).sum(axis=1))
        err[todo] = np.where(normals.planar[todo], plane, dist)
    return err


def compare_scans(query: PointCloud, normals: NormalCloud, reference: PointCloud,
                  cfg: CompareConfig = CompareConfig(), ref_tree: cKDTree | None = None,
                  workers: int = 1):
    """Label query points Dynamic where the comparison error exceeds the threshold.

    Returns the label image and the per-point Dynamic mask.
    """
    err = comparison_errors(query, normals, reference, ref_tree, workers,
                            threshold=cfg.error_threshold)
    dyn = err > cfg.error_threshold
    L, C = query.scan.shape
    labels = np.full(L * C, Label.INVALID, dtype=np.int8)
    labels[query.index] = np.where(dyn, Label.DYNAMIC, Label.STATIC)
    return LabelImage(labels.reshape(L, C)), dyn
