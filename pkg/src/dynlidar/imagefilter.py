"""XNOR box filter on the label image."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scan import Label, LabelImage

STREAK_KERNEL = np.array([[0, 0, 0, 0],
                          [1, 1, 1, 1],
                          [0, 0, 0, 0]], dtype=np.int8)


@dataclass(frozen=True)
class FilterKernel:
    pattern: np.ndarray = field(default_factory=lambda: STREAK_KERNEL.copy())
    anchor: tuple[int, int] = (1, 1)

    def __post_init__(self):
        p = np.asarray(self.pattern, dtype=np.int8)
        if p.shape != (3, 4) or not np.isin(p, (0, 1)).all():
            raise ValueError("kernel must be a 3x4 binary grid")
        r, c = self.anchor
        if not (0 <= r < 3 and 0 <= c < 4) or p[r, c] != 1:
            raise ValueError("anchor must lie on a 1-cell of the kernel")
        object.__setattr__(self, "pattern", p)


@dataclass(frozen=True)
class FilterConfig:
    score_threshold: int = 10

    def __post_init__(self):
        if not 0 <= self.score_threshold <= 12:
            raise ValueError("score_threshold must lie in [0, 12]")


def window_scores(binary, kernel: FilterKernel = FilterKernel()):
    """XNOR score of the window anchored at every cell.

    Columns wrap around; rows whose window would overhang the image get -1.
    """
    img = np.asarray(binary, dtype=np.int8)
    H, W = img.shape
    kh, kw = kernel.pattern.shape
    ar, ac = kernel.anchor
    scores = np.full((H, W), -1, dtype=np.int16)
    rows = np.arange(ar, H - (kh - 1 - ar))
    if rows.size == 0:
        return scores
    total = np.zeros((rows.size, W), dtype=np.int16)
    for i in range(kh):
        band = img[rows - ar + i]
        for j in range(kw):
            # window column j sits at image column c - ac + j
            shifted = np.roll(band, ac - j, axis=1)
            total += shifted == kernel.pattern[i, j]
    scores[rows] = total
    return scores


def box_filter(image: LabelImage, kernel: FilterKernel = FilterKernel(),
               cfg: FilterConfig = FilterConfig()) -> LabelImage:
    """Demote Dynamic cells covered by a kernel 1-cell of an outlier window.

    Every window scoring above the threshold marks the Dynamic cells that
    sit under its kernel 1-cells as outliers; all windows are scored on the
    unmodified input.
    """
    dyn = image.labels == Label.DYNAMIC
    if dyn.shape[0] < kernel.pattern.shape[0]:
        raise ValueError("image needs at least 3 rows")
    scores = window_scores(dyn, kernel)
    hit = scores > cfg.score_threshold
    outlier = np.zeros_like(dyn)
    ar, ac = kernel.anchor
    for i, j in zip(*np.nonzero(kernel.pattern)):
        shifted = np.roll(hit, j - ac, axis=1)
        outlier |= np.roll(shifted, i - ar, axis=0) if i != ar else shifted
    outlier &= dyn
    labels = image.labels.copy()
    labels[outlier] = Label.STATIC
    cid = image.cluster_id.copy()
    cid[outlier] = -1
    return LabelImage(labels, cid)
