"""Color-conditionality testing of feature maps via Mood's median test.

Each feature map's global-max-pooled activation is sampled over a counterfeit
set twice, with and without grayscale ablation, and the two samples are
compared with a 2x2 chi-square median test (1 degree of freedom, p computed
through the erfc identity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import median

import numpy as np

from .errors import EmptyDatasetError, UsageError
from .model import DropoutMask, ModelGraph, forward
from .pipeline import decode_item, ordered_map, prepare
from .relevance import FeatureMapId


@dataclass
class ActivationSampleSet:
    fmap: FeatureMapId
    baseline: list[float]
    grayscale: list[float]


@dataclass
class MedianTestResult:
    fmap: FeatureMapId | None
    grand_median: float
    contingency: list  # [[above_a, above_b], [below_a, below_b]]
    chi2: float
    p_value: float
    color_conditional: bool = False
    degenerate: bool = False
    median_baseline: float = field(default=math.nan)
    median_grayscale: float = field(default=math.nan)


def moods_median_test(a, b, correction: bool = True) -> MedianTestResult:
    """Mood's median test on two samples.

    Values equal to the pooled grand median count as "below"; the Yates
    continuity correction is applied when `correction` is set. A zero row
    marginal (every value on one side of the median) is degenerate and is
    reported as chi2=0, p=1.
    """
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    if len(a) < 2 or len(b) < 2:
        raise UsageError("config error: median test needs at least 2 samples per group")
    grand = float(median(a + b))
    above = [sum(1 for v in a if v > grand), sum(1 for v in b if v > grand)]
    below = [len(a) - above[0], len(b) - above[1]]
    table = [above, below]
    row_totals = [sum(above), sum(below)]
    col_totals = [len(a), len(b)]
    n = len(a) + len(b)
    if 0 in row_totals:
        return MedianTestResult(
            fmap=None,
            grand_median=grand,
            contingency=table,
            chi2=0.0,
            p_value=1.0,
            degenerate=True,
        )
    chi2 = 0.0
    for i in range(2):
        for j in range(2):
            expected = row_totals[i] * col_totals[j] / n
            delta = abs(table[i][j] - expected)
            if correction:
                delta = max(0.0, delta - 0.5)
            chi2 += delta * delta / expected
    p_value = math.erfc(math.sqrt(chi2 / 2.0))
    return MedianTestResult(
        fmap=None,
        grand_median=grand,
        contingency=table,
        chi2=chi2,
        p_value=p_value,
    )


def collect_max_activations(
    graph: ModelGraph,
    images,
    fmaps,
    transform: str | None = None,
    mask: DropoutMask | None = None,
    threads: int = 1,
) -> dict:
    """Spatial max of each requested feature map's activation per image.

    One forward pass per image covers every feature map. Returns
    {FeatureMapId: list of floats}; unreadable images are skipped.
    """
    fmap_list = list(fmaps)
    if not fmap_list:
        raise UsageError("config error: no feature maps to sample")
    items = list(images)
    if not items:
        raise EmptyDatasetError("empty dataset error: no images supplied")

    def one(item):
        decoded = decode_item(item)
        if decoded is None:
            return None
        trace = forward(graph, prepare(graph, decoded, transform), mask=mask)
        return [float(np.max(trace.outputs[f.layer][f.channel])) for f in fmap_list]

    rows = [r for r in ordered_map(one, items, threads) if r is not None]
    if not rows:
        raise EmptyDatasetError("empty dataset error: all images failed to decode")
    return {fmap: [row[i] for row in rows] for i, fmap in enumerate(fmap_list)}


def run_color_test(
    graph: ModelGraph,
    images,
    fmaps,
    alpha: float = 0.05,
    correction: bool = True,
    threads: int = 1,
) -> list[MedianTestResult]:
    """Algorithmic driver: sample activations twice and median-test each map."""
    if not (0.0 < alpha <= 1.0):
        raise UsageError("config error: alpha must be in (0, 1]")
    fmap_list = list(fmaps)
    items = list(images)
    baseline = collect_max_activations(graph, items, fmap_list, transform=None, threads=threads)
    ablated = collect_max_activations(
        graph, items, fmap_list, transform="grayscale", threads=threads
    )
    samples = [
        ActivationSampleSet(fmap=f, baseline=baseline[f], grayscale=ablated[f])
        for f in fmap_list
    ]
    results = []
    for sample in samples:
        res = moods_median_test(sample.baseline, sample.grayscale, correction=correction)
        res.fmap = sample.fmap
        res.color_conditional = res.p_value < alpha
        res.median_baseline = float(median(sample.baseline))
        res.median_grayscale = float(median(sample.grayscale))
        results.append(res)
    return results


def color_conditional_fraction(results, alpha: float) -> float:
    """Percentage of tests rejecting at the given significance level."""
    if not (0.0 < alpha <= 1.0):
        raise UsageError("config error: alpha must be in (0, 1]")
    results = list(results)
    if not results:
        raise UsageError("config error: no median test results")
    hits = sum(1 for r in results if r.p_value < alpha)
    return 100.0 * hits / len(results)
