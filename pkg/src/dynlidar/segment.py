"""Dynamic point clustering and convex/parallel region growth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .compare import NormalCloud
from .scan import Label, LabelImage


@dataclass(frozen=True)
class GrowConfig:
    rbnn_radius: float = 0.5
    min_cluster_size: int = 5
    parallel_cos: float = 0.99
    grow_radius: float = 0.5

    def __post_init__(self):
        if not (self.rbnn_radius > 0 and self.grow_radius > 0):
            raise ValueError("radii must be positive")
        if not 0 < self.parallel_cos < 1:
            raise ValueError("parallel_cos must lie in (0, 1)")
        if self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be >= 1")


@dataclass
class Cluster:
    id: int
    members: np.ndarray
    seed_count: int


def _components(n, pairs):
    if len(pairs) == 0:
        return np.arange(n)
    g = coo_matrix((np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])),
                   shape=(n, n))
    _, comp = connected_components(g, directed=False)
    return comp


def rbnn_labels(points, radius, min_size):
    """Cluster index per point (-1 = dissolved), ids ordered by first member."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    comp = _components(n, pairs)
    # relabel by order of first appearance for determinism
    _, first, inverse, counts = np.unique(comp, return_index=True, return_inverse=True,
                                          return_counts=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    keep = counts >= min_size
    new_id = np.cumsum(keep[order]) - 1
    out = np.where(keep[inverse], new_id[rank[inverse]], -1)
    return out.astype(np.int64)


def rbnn_cluster(points, cfg: GrowConfig = GrowConfig()) -> list[Cluster]:
    """Radially bounded nearest-neighbour clusters over point indices."""
    lab = rbnn_labels(points, cfg.rbnn_radius, cfg.min_cluster_size)
    clusters = []
    for cid in range(lab.max() + 1 if lab.size else 0):
        members = np.flatnonzero(lab == cid)
        clusters.append(Cluster(cid, members, len(members)))
    return clusters


def is_convex(p1, n1, p2, n2) -> bool:
    n1 = np.asarray(n1, dtype=float)
    n2 = np.asarray(n2, dtype=float)
    if abs(np.linalg.norm(n1) - 1) > 1e-9 or abs(np.linalg.norm(n2) - 1) > 1e-9:
        raise ValueError("normals must be unit length")
    d = np.asarray(p2, dtype=float) - np.asarray(p1, dtype=float)
    return bool(n1 @ d <= 0 and n2 @ -d <= 0)


def _admissible(p1, n1, p2, n2, parallel_cos):
    d = p2 - p1
    convex = (np.einsum("nd,nd->n", n1, d) <= 0) & (np.einsum("nd,nd->n", n2, -d) <= 0)
    parallel = np.einsum("nd,nd->n", n1, n2) >= parallel_cos
    return convex | parallel


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            lo, hi = min(ra, rb), max(ra, rb)
            self.parent[hi] = lo


def region_grow(cluster_of, points, normals, planar=None, cfg: GrowConfig = GrowConfig(),
                tree: cKDTree | None = None):
    """Grow clusters over neighbouring Static points.

    ``cluster_of`` holds the cluster id per point (-1 for Static).
    ``normals`` is either an (N, 3) array with ``planar`` given, or a
    :class:`NormalCloud` whose normals are computed as growth reaches them.
    Returns the
    grown assignment with merged clusters relabelled 0..k-1 in order of their
    smallest original id, and the number of growth rounds.
    """
    cluster_of = np.asarray(cluster_of, dtype=np.int64).copy()
    points = np.asarray(points, dtype=float)
    if isinstance(normals, NormalCloud):
        cloud = normals
    else:
        cloud = None
        normals = np.asarray(normals, dtype=float)
        planar = np.asarray(planar, dtype=bool)

    def ensure(idx):
        if cloud is not None:
            cloud.ensure(idx)
            return cloud.normals, cloud.planar
        return normals, planar

    n_clusters = int(cluster_of.max()) + 1 if cluster_of.size else 0
    if n_clusters == 0:
        return cluster_of, 0
    if tree is None:
        tree = cKDTree(points)
    uf = _UnionFind(n_clusters)
    seeds = np.flatnonzero(cluster_of >= 0)
    normals, planar = ensure(seeds)
    frontier = seeds[planar[seeds]]
    rounds = 0
    while frontier.size:
        rounds += 1
        nbrs = tree.query_ball_point(points[frontier], cfg.grow_radius, return_sorted=True)
        lens = np.fromiter((len(x) for x in nbrs), dtype=np.int64, count=len(nbrs))
        if lens.sum() == 0:
            break
        src = np.repeat(frontier, lens)
        dst = np.concatenate([np.asarray(x, dtype=np.int64) for x in nbrs if len(x)])
        ok = cluster_of[dst] < 0
        src, dst = src[ok], dst[ok]
        normals, planar = ensure(dst)
        ok = planar[dst]
        src, dst = src[ok], dst[ok]
        if src.size == 0:
            break
        ok = _admissible(points[src], normals[src], points[dst], normals[dst],
                         cfg.parallel_cos)
        src, dst = src[ok], dst[ok]
        if src.size == 0:
            break
        claim = np.array([uf.find(c) for c in cluster_of[src]], dtype=np.int64)
        # a point claimed by several clusters joins the lowest id; claimants merge
        order = np.lexsort((claim, dst))
        dst, claim = dst[order], claim[order]
        first = np.r_[True, dst[1:] != dst[:-1]]
        owner = claim[first]
        uniq = dst[first]
        grp = np.cumsum(first) - 1
        for g, c in zip(grp[~first], claim[~first]):
            uf.union(owner[g], c)
        cluster_of[uniq] = owner
        frontier = uniq
    roots = np.array([uf.find(c) for c in range(n_clusters)])
    _, relabel = np.unique(roots, return_inverse=True)
    assigned = cluster_of >= 0
    cluster_of[assigned] = relabel[cluster_of[assigned]]
    return cluster_of, rounds


def segment(image: LabelImage, cloud, normals, cfg: GrowConfig = GrowConfig(),
            tree: cKDTree | None = None):
    """Cluster the Dynamic points of ``image`` and grow them.

    Returns ``(clustered_image, grown_image, clusters)``: the first has
    small clusters dissolved, the second the grown result.
    """
    flat = image.labels.reshape(-1)
    dyn = np.flatnonzero(flat[cloud.index] == Label.DYNAMIC)
    lab = rbnn_labels(cloud.points[dyn], cfg.rbnn_radius, cfg.min_cluster_size)
    cluster_of = np.full(len(cloud), -1, dtype=np.int64)
    cluster_of[dyn] = lab
    seeds = np.bincount(lab[lab >= 0], minlength=lab.max() + 1 if lab.size else 0)

    def to_image(assign):
        labels = np.where(flat == Label.INVALID, Label.INVALID, Label.STATIC).astype(np.int8)
        cid = np.full(flat.size, -1, dtype=np.int32)
        on = assign >= 0
        labels[cloud.index[on]] = Label.DYNAMIC
        cid[cloud.index[on]] = assign[on]
        return LabelImage(labels.reshape(image.shape), cid.reshape(image.shape))

    clustered = to_image(cluster_of)
    grown_of, _ = region_grow(cluster_of, cloud.points, normals, None, cfg, tree)
    clusters = []
    for cid in range(grown_of.max() + 1 if grown_of.size else 0):
        members = np.flatnonzero(grown_of == cid)
        seed_ids = np.unique(cluster_of[members][cluster_of[members] >= 0])
        clusters.append(Cluster(cid, cloud.index[members], int(seeds[seed_ids].sum())))
    return clustered, to_image(grown_of), clusters
