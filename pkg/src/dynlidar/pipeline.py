"""End-to-end detection over a sliding window of scans."""

from __future__ import annotations

import logging
import time
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .compare import CompareConfig, NormalCloud, compare_scans
from .freespace import FreespaceConfig, FreespaceReference, freespace_check
from .imagefilter import FilterConfig, FilterKernel, box_filter
from .scan import LabelImage, LidarScan, PointCloud, deskew
from .segment import Cluster, GrowConfig, segment
from .trajectory import Trajectory

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    error_threshold: float = 0.5
    scan_gap: int = 4
    normal_k: int = 10
    normal_radius: float = 1.0
    k_min: int = 5
    border_tol: float | None = None  # defaults to error_threshold
    gn_tol: float = 1e-7
    gn_max_iter: int = 20
    forward_gap: int = 1
    score_threshold: int = 10
    rbnn_radius: float = 0.5
    min_cluster_size: int = 5
    parallel_cos: float = 0.99
    grow_radius: float = 0.5
    workers: int = 1

    def __post_init__(self):
        # validate through the stage configs
        self.compare, self.freespace, self.filter, self.grow  # noqa: B018
        if self.workers == 0 or self.workers < -1:
            raise ValueError("workers must be -1 or >= 1")

    @property
    def compare(self) -> CompareConfig:
        return CompareConfig(self.error_threshold, self.scan_gap, self.normal_k,
                             self.normal_radius, self.k_min)

    @property
    def freespace(self) -> FreespaceConfig:
        tol = self.error_threshold if self.border_tol is None else self.border_tol
        return FreespaceConfig(tol, self.gn_tol, self.gn_max_iter, self.forward_gap)

    @property
    def filter(self) -> FilterConfig:
        return FilterConfig(self.score_threshold)

    @property
    def grow(self) -> GrowConfig:
        return GrowConfig(self.rbnn_radius, self.min_cluster_size, self.parallel_cos,
                          self.grow_radius)

    def replace(self, **changes) -> PipelineConfig:
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        data = asdict(self)
        data.update(changes)
        try:
            return PipelineConfig(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"


def _coerce(name, raw):
    f = {f.name: f for f in fields(PipelineConfig)}[name]
    if raw.lower() == "none":
        if name != "border_tol":
            raise ConfigError(f"{name} cannot be none")
        return None
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind.startswith("int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def parse_config(text: str, base: PipelineConfig | None = None,
                 source: str = "<config>") -> PipelineConfig:
    """Parse flat ``key = value`` lines; unknown keys are errors."""
    known = {f.name for f in fields(PipelineConfig)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            changes[key] = _coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return (base or PipelineConfig()).replace(**changes)


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), source=str(path))


STAGES = ("compare", "freespace", "filter", "cluster", "grow")


@dataclass
class DetectionResult:
    scan_index: int
    labels: LabelImage
    clusters: list[Cluster]
    timings_ms: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    stage_masks: dict = field(default_factory=dict)

    def check_monotone(self) -> None:
        """Stages only remove Dynamic labels, except growth which only adds."""
        m = self.stage_masks
        chain = ["compare", "freespace", "filter", "cluster"]
        for a, b in zip(chain, chain[1:]):
            if np.any(m[b] & ~m[a]):
                raise AssertionError(f"scan {self.scan_index}: {b} added Dynamic labels")
        if np.any(m["cluster"] & ~m["grow"]):
            raise AssertionError(f"scan {self.scan_index}: growth removed Dynamic labels")


@dataclass(eq=False)
class PreparedScan:
    scan: LidarScan
    cloud: PointCloud
    tree: cKDTree
    normals: NormalCloud
    _freespace: FreespaceReference | None = None

    def freespace(self, traj) -> FreespaceReference:
        if self._freespace is None:
            self._freespace = FreespaceReference(self.cloud, traj)
        return self._freespace


class MissingScanError(LookupError):
    pass


class Detector:
    """Runs the detection stages, caching per-scan preprocessing.

    Each scan is deskewed and indexed once, however many windows it appears
    in; normals are computed lazily and kept with the scan.
    """

    def __init__(self, traj: Trajectory, cfg: PipelineConfig = PipelineConfig(),
                 cache_size: int | None = None):
        self.traj = traj
        self.cfg = cfg
        self.kernel = FilterKernel()
        self._cache: OrderedDict[int, PreparedScan] = OrderedDict()
        self.cache_size = cache_size or cfg.scan_gap + cfg.forward_gap + 2

    def prepare(self, scan: LidarScan) -> PreparedScan:
        key = scan.scan_index
        hit = self._cache.get(key)
        if hit is not None and hit.scan is scan:
            self._cache.move_to_end(key)
            return hit
        cloud = deskew(scan, self.traj)
        tree = cKDTree(cloud.points)
        normals = NormalCloud(cloud.points, cloud.origins, self.cfg.compare, tree,
                              workers=self.cfg.workers)
        prep = PreparedScan(scan, cloud, tree, normals)
        self._cache[key] = prep
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return prep

    def detect(self, query: LidarScan, backward: LidarScan,
               forward: LidarScan | None) -> DetectionResult:
        cfg = self.cfg
        if backward is None:
            raise MissingScanError(f"no backward reference for scan {query.scan_index}")
        timings = {}
        t = time.perf_counter()
        q = self.prepare(query)
        b = self.prepare(backward)
        f = self.prepare(forward) if forward is not None else None
        timings["prepare"] = time.perf_counter() - t

        t = time.perf_counter()
        img, _ = compare_scans(q.cloud, q.normals, b.cloud, cfg.compare, b.tree,
                               workers=cfg.workers)
        timings["compare"] = time.perf_counter() - t
        masks = {"compare": img.dynamic}

        t = time.perf_counter()
        if f is None:
            warnings.warn(f"scan {query.scan_index}: forward scan missing", RuntimeWarning,
                          stacklevel=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            img, _ = freespace_check(img, q.cloud, q.normals, b.freespace(self.traj),
                                     f.freespace(self.traj) if f else None, cfg.freespace)
        timings["freespace"] = time.perf_counter() - t
        masks["freespace"] = img.dynamic

        t = time.perf_counter()
        img = box_filter(img, self.kernel, cfg.filter)
        timings["filter"] = time.perf_counter() - t
        masks["filter"] = img.dynamic

        t = time.perf_counter()
        clustered, grown, clusters = segment(img, q.cloud, q.normals, cfg.grow, q.tree)
        timings["segment"] = time.perf_counter() - t
        masks["cluster"] = clustered.dynamic
        masks["grow"] = grown.dynamic

        result = DetectionResult(
            query.scan_index, grown, clusters,
            {k: 1000.0 * v for k, v in timings.items()},
            {k: int(v.sum()) for k, v in masks.items()},
            masks,
        )
        result.check_monotone()
        return result

    def run(self, scans):
        """Stream detections over consecutive scans.

        Scan ``n`` is emitted once scan ``n + forward_gap`` has arrived; the
        first ``scan_gap`` scans produce nothing. At the end of the stream the
        pending scans are flushed without a forward pass.
        """
        gap, fg = self.cfg.scan_gap, self.cfg.forward_gap
        window: dict[int, LidarScan] = {}
        pending = []
        for scan in scans:
            n = scan.scan_index
            window[n] = scan
            pending.append(n)
            while pending and pending[0] + fg <= n:
                qn = pending.pop(0)
                if qn - gap in window:
                    yield self.detect(window[qn], window[qn - gap], window.get(qn + fg))
            for k in [k for k in window if k < n - gap - fg]:
                del window[k]
        for qn in pending:
            if qn - gap in window:
                yield self.detect(window[qn], window[qn - gap], window.get(qn + fg))


def detect(scans, query_index: int, traj: Trajectory,
           cfg: PipelineConfig = PipelineConfig()) -> DetectionResult:
    """Detect Dynamic points in scan ``query_index`` of ``scans``.

    ``scans`` is a sequence or mapping of :class:`LidarScan`; the backward
    reference (``query_index - scan_gap``) is required, the forward one
    (``query_index + forward_gap``) is optional.
    """
    by_index = {s.scan_index: s for s in (scans.values() if isinstance(scans, dict) else scans)}
    if query_index not in by_index:
        raise MissingScanError(f"query scan {query_index} not in window")
    back = by_index.get(query_index - cfg.scan_gap)
    if back is None:
        raise MissingScanError(f"backward reference {query_index - cfg.scan_gap} missing")
    return Detector(traj, cfg).detect(by_index[query_index], back,
                                      by_index.get(query_index + cfg.forward_gap))
