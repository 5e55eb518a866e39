"""Dataset-diversity analysis via the entropy of per-image scalar statistics.

Each image is reduced to a single number under one of six metrics (mean of
the H/S/V channels, or median/mean/standard deviation of the RGB pixels),
quantized to an integer in 0..255, histogrammed over the dataset, and the
histogram's Shannon entropy in bits is reported.  256 bins bound the
entropy to [0, 8].
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from soi.errors import DataError
from soi.imgproc import rgb_to_hsv


class MetricKind(enum.Enum):
    HSV_H = "HSV_H"
    HSV_S = "HSV_S"
    HSV_V = "HSV_V"
    MEDIAN = "Median"
    MEAN = "Mean"
    SD = "SD"


ALL_METRICS = tuple(MetricKind)


@dataclass(frozen=True)
class Histogram256:
    counts: np.ndarray  # 256 non-negative ints
    total: int

    def probabilities(self) -> np.ndarray:
        return self.counts / self.total


@dataclass(frozen=True)
class DiversityReport:
    dataset_id: str
    image_count: int
    entropies: dict  # MetricKind -> bits in [0, 8]


def image_statistic(image: np.ndarray, metric: MetricKind) -> float:
    """One scalar in [0, 255] summarizing a (3,H,W) image in [0,1].

    RGB metrics are computed over all pixel values scaled to [0,255]; HSV
    metrics are per-channel means after conversion, with hue rescaled from
    its angular range onto [0,255] like the other channels.
    """
    if metric in (MetricKind.HSV_H, MetricKind.HSV_S, MetricKind.HSV_V):
        hsv = rgb_to_hsv(image)  # h in [0,1), s,v in [0,1]
        channel = {MetricKind.HSV_H: 0, MetricKind.HSV_S: 1, MetricKind.HSV_V: 2}[metric]
        return float(hsv[channel].mean() * 255.0)
    values = image * 255.0
    if metric is MetricKind.MEDIAN:
        return float(np.median(values))
    if metric is MetricKind.MEAN:
        return float(values.mean())
    return float(values.std())


def quantize(x: float) -> int:
    """Round half away from zero, clamped to 0..255."""
    clamped = min(max(float(x), 0.0), 255.0)
    return int(min(np.floor(clamped + 0.5), 255.0))


def statistic_histogram(images, metric: MetricKind) -> Histogram256:
    counts = np.zeros(256, dtype=np.int64)
    total = 0
    for img in images:
        counts[quantize(image_statistic(img, metric))] += 1
        total += 1
    if total == 0:
        raise DataError("empty dataset")
    return Histogram256(counts, total)


def entropy_bits(hist: Histogram256) -> float:
    """Shannon entropy of the 256-bin histogram, with 0*log2(0) = 0."""
    p = hist.probabilities()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum() + 0.0)  # +0.0 normalizes -0.0


def dataset_entropy(images, metric: MetricKind) -> float:
    return entropy_bits(statistic_histogram(images, metric))


def analyze(images, dataset_id: str) -> DiversityReport:
    """Entropy under all six metrics for one dataset."""
    images = list(images)
    if not images:
        raise DataError("empty dataset")
    entropies = {m: dataset_entropy(images, m) for m in ALL_METRICS}
    return DiversityReport(dataset_id, len(images), entropies)


def compare_report(report_a: DiversityReport, report_b: DiversityReport) -> str:
    """CSV with one row per metric: ``metric,H_a,H_b``."""
    lines = ["metric,H_a,H_b"]
    for m in ALL_METRICS:
        lines.append(f"{m.value},{report_a.entropies[m]:.9g},{report_b.entropies[m]:.9g}")
    return "\n".join(lines) + "\n"


def single_report_csv(report: DiversityReport) -> str:
    lines = ["metric,H_a"]
    for m in ALL_METRICS:
        lines.append(f"{m.value},{report.entropies[m]:.9g}")
    return "\n".join(lines) + "\n"


def report_json(reports) -> dict:
    return {
        r.dataset_id: {
            "image_count": r.image_count,
            "entropy_bits": {m.value: r.entropies[m] for m in ALL_METRICS},
        }
        for r in reports
    }
