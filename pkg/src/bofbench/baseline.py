"""One-point average model: temporal mean of the features, compared by Euclidean distance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from bofbench.errors import DataError
from bofbench.features import FeatureSequence


@dataclass(frozen=True, eq=False)
class MeanFeature:
    vector: np.ndarray
    source_id: str = ""
    segment_index: int | None = None

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("mean vector must be 1-D")
        if not np.all(np.isfinite(v)):
            raise ValueError("mean vector must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def d(self) -> int:
        return self.vector.shape[0]

    def csv_row(self, item_id: str) -> str:
        return ",".join([item_id] + [repr(float(x)) for x in self.vector])


def mean_feature(features: FeatureSequence) -> MeanFeature:
    if features.n_frames == 0:
        raise DataError(f"{features.source_id}: empty feature sequence")
    return MeanFeature(features.frames.mean(axis=0), features.source_id, features.segment_index)


def euclidean(a: MeanFeature, b: MeanFeature) -> float:
    if a.d != b.d:
        raise ValueError(f"dimension mismatch: {a.d} vs {b.d}")
    diff = a.vector - b.vector
    return math.sqrt(float(np.dot(diff, diff)))
