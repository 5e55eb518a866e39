"""Diversity analyzer: per-image statistics, quantization, entropy."""

import numpy as np
import pytest

from soi.diversity import (
    ALL_METRICS,
    Histogram256,
    MetricKind,
    analyze,
    compare_report,
    dataset_entropy,
    entropy_bits,
    image_statistic,
    quantize,
    statistic_histogram,
)
from soi.errors import DataError


def solid(value, size=4):
    return np.full((3, size, size), value, dtype=np.float64)


class TestImageStatistic:
    def test_solid_midgray(self):
        img = solid(0.5)
        assert image_statistic(img, MetricKind.MEAN) == pytest.approx(127.5)
        assert image_statistic(img, MetricKind.SD) == pytest.approx(0.0)
        assert image_statistic(img, MetricKind.MEDIAN) == pytest.approx(127.5)

    def test_pure_red_hsv(self):
        img = np.zeros((3, 4, 4))
        img[0] = 1.0
        assert image_statistic(img, MetricKind.HSV_S) == pytest.approx(255.0)
        assert image_statistic(img, MetricKind.HSV_V) == pytest.approx(255.0)
        assert image_statistic(img, MetricKind.HSV_H) == pytest.approx(0.0)

    def test_two_pixel_statistics(self):
        img = np.zeros((3, 1, 2))
        img[:, 0, 1] = 1.0
        assert image_statistic(img, MetricKind.MEAN) == pytest.approx(127.5)
        assert image_statistic(img, MetricKind.SD) == pytest.approx(127.5)
        assert image_statistic(img, MetricKind.MEDIAN) == pytest.approx(127.5)

    def test_range_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            img = rng.uniform(size=(3, 5, 5))
            for m in ALL_METRICS:
                assert 0.0 <= image_statistic(img, m) <= 255.0


class TestQuantize:
    def test_half_rounds_away_from_zero(self):
        assert quantize(127.5) == 128

    def test_endpoints(self):
        assert quantize(0.0) == 0
        assert quantize(255.0) == 255

    def test_plain_rounding(self):
        assert quantize(254.49) == 254

    def test_clamping(self):
        assert quantize(-10.0) == 0
        assert quantize(300.0) == 255


class TestEntropy:
    def test_identical_images_zero_entropy(self):
        images = [solid(0.3)] * 12
        for m in ALL_METRICS:
            h = dataset_entropy(images, m)
            assert h == 0.0 and not str(h).startswith("-")

    def test_uniform_over_all_bins_is_eight(self):
        images = [solid(v / 255.0) for v in range(256)]
        assert dataset_entropy(images, MetricKind.MEAN) == pytest.approx(8.0, abs=1e-9)

    def test_two_equal_bins_one_bit(self):
        images = [solid(0.0)] * 5 + [solid(1.0)] * 5
        assert dataset_entropy(images, MetricKind.MEAN) == pytest.approx(1.0, abs=1e-12)

    def test_entropy_bounds_and_uniform_iff_eight(self):
        rng = np.random.default_rng(1)
        images = [rng.uniform(size=(3, 4, 4)) for _ in range(64)]
        for m in ALL_METRICS:
            assert 0.0 <= dataset_entropy(images, m) <= 8.0
        skew = Histogram256(np.array([2] + [1] * 254 + [0], dtype=np.int64), 256)
        assert entropy_bits(skew) < 8.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        images = [rng.uniform(size=(3, 4, 4)) for _ in range(30)]
        a = dataset_entropy(images, MetricKind.SD)
        b = dataset_entropy(images[::-1], MetricKind.SD)
        assert a == b

    def test_merging_copies_keeps_entropy(self):
        rng = np.random.default_rng(3)
        images = [rng.uniform(size=(3, 4, 4)) for _ in range(20)]
        a = dataset_entropy(images, MetricKind.MEAN)
        b = dataset_entropy(images * 3, MetricKind.MEAN)
        assert a == pytest.approx(b, abs=1e-12)

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(4)
        images = [solid(v) for v in rng.uniform(size=40)]
        hist = statistic_histogram(images, MetricKind.MEAN)
        p = hist.counts / hist.total
        expected = -sum(pi * np.log2(pi) for pi in p if pi > 0)
        assert dataset_entropy(images, MetricKind.MEAN) == pytest.approx(expected, abs=1e-9)

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            dataset_entropy([], MetricKind.MEAN)
        with pytest.raises(DataError):
            analyze([], "empty")


class TestReports:
    def test_self_comparison_identical_columns(self):
        rng = np.random.default_rng(5)
        images = [rng.uniform(size=(3, 4, 4)) for _ in range(10)]
        rep = analyze(images, "same")
        csv = compare_report(rep, rep)
        for line in csv.strip().splitlines()[1:]:
            _, a, b = line.split(",")
            assert a == b

    def test_constant_vs_diverse_ordering(self):
        rng = np.random.default_rng(6)
        const = analyze([solid(0.5)] * 16, "const")
        diverse = analyze([rng.uniform(size=(3, 4, 4)) for _ in range(16)], "div")
        for m in ALL_METRICS:
            assert const.entropies[m] == 0.0
            assert diverse.entropies[m] > 0.0

    def test_csv_shape(self):
        rng = np.random.default_rng(7)
        images = [rng.uniform(size=(3, 4, 4)) for _ in range(6)]
        csv = compare_report(analyze(images, "a"), analyze(images, "b"))
        lines = csv.strip().splitlines()
        assert lines[0] == "metric,H_a,H_b"
        assert len(lines) == 1 + 6
        assert [ln.split(",")[0] for ln in lines[1:]] == [m.value for m in ALL_METRICS]
