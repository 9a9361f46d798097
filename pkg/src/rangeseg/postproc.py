"""Range-based kNN vote that cleans up back-projected point labels.

Back-projection gives every point the label of whichever point won its pixel,
so points occluded in the range image inherit labels from nearer surfaces
("shadow" artifacts). The fix: each point compares its own range against the
range image inside a window around its pixel, votes among the k closest-in-
range neighbors, and drops neighbors whose range differs by more than a
cutoff. Inference-only; training never calls this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .projection import RangeImage

WEIGHTINGS = ("uniform", "inverse-range-gap")
GAP_EPS = 1e-3


@dataclass(frozen=True)
class KnnConfig:
    window: int = 5          # S, odd
    k: int = 5
    cutoff: float = 1.0      # meters of allowed |range - range| gap
    weighting: str = "inverse-range-gap"

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("window must be odd and >= 1")
        if not 1 <= self.k <= self.window**2:
            raise ConfigError("k must lie in [1, window^2]")
        if self.cutoff <= 0:
            raise ConfigError("cutoff must be positive")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}")


def knn_filter(
    img: RangeImage,
    pixel_labels: np.ndarray,
    point_ranges: np.ndarray,
    point_labels: np.ndarray,
    cfg: KnnConfig = KnnConfig(),
) -> np.ndarray:
    """Per-point weighted vote over range-nearest window neighbors.

    Each point uses its own range (not its pixel winner's), which is what
    lets occluded points recover their true label. Ties in the range gap are
    broken by window slot order, label-vote ties by the smaller class index.
    Points with no surviving neighbor, including those that fell outside the
    image, keep their input label.
    """
    h, w = img.valid.shape
    pixel_labels = np.asarray(pixel_labels)
    point_ranges = np.asarray(point_ranges, dtype=np.float64)
    point_labels = np.asarray(point_labels)
    n = img.num_points
    if pixel_labels.shape != (h, w):
        raise DimensionError(f"pixel_labels must be ({h}, {w}), got {pixel_labels.shape}")
    if point_ranges.shape != (n,) or point_labels.shape != (n,):
        raise DimensionError(f"need {n} point ranges and labels")

    out = point_labels.copy()
    u = img.pixel_of_point[:, 0].astype(np.int64)
    v = img.pixel_of_point[:, 1].astype(np.int64)
    mapped = u >= 0
    if not mapped.any():
        return out
    u, v, r = u[mapped], v[mapped], point_ranges[mapped]

    half = cfg.window // 2
    dv, du = np.mgrid[-half : half + 1, -half : half + 1]
    dv, du = dv.ravel(), du.ravel()

    cv = v[:, None] + dv[None, :]  # (M, S^2)
    cu = u[:, None] + du[None, :]
    inside = (cv >= 0) & (cv < h) & (cu >= 0) & (cu < w)
    cvc, cuc = cv.clip(0, h - 1), cu.clip(0, w - 1)
    usable = inside & img.valid[cvc, cuc]

    gaps = np.abs(img.range_channel()[cvc, cuc].astype(np.float64) - r[:, None])
    gaps[~usable] = np.inf

    # stable sort: equal gaps keep window scan order, matching the oracle
    nearest = np.argsort(gaps, axis=1, kind="stable")[:, : cfg.k]
    rows = np.arange(len(r))[:, None]
    kept_gaps = gaps[rows, nearest]
    survives = kept_gaps <= cfg.cutoff  # also kills the inf (unusable) slots

    labels = pixel_labels[cvc, cuc][rows, nearest]
    if cfg.weighting == "uniform":
        votes = survives.astype(np.float64)
    else:
        votes = np.where(survives, 1.0 / (GAP_EPS + kept_gaps), 0.0)

    num_classes = int(pixel_labels.max()) + 1 if pixel_labels.size else 1
    scores = np.zeros((len(r), num_classes))
    np.add.at(scores, (rows.repeat(cfg.k, axis=1), labels), votes)

    any_vote = survives.any(axis=1)
    winners = scores.argmax(axis=1)  # argmax takes the smallest index on ties
    mapped_out = out[mapped]
    mapped_out[any_vote] = winners[any_vote].astype(out.dtype)
    out[mapped] = mapped_out
    return out
