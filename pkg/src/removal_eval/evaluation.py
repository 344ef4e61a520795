"""Metric reports, remover ranking, and the sample-size reliability study.

The starred metrics (fid_star, uids_star) are only meaningful against a
comparison set that is declared free of target-class objects; requesting
them against a set that admits such objects is the central misuse this
toolkit exists to prevent, so that path fails loudly with a ProtocolError
rather than returning a number.

Scale guidance: reliability depends on query-set size. In class-wise
person-removal runs on COCO-scale data, the relative standard deviation of
fid_star drops below 1% only past roughly 7K query samples (9K for
uids_star), and absolute scores are never comparable across feature
extractors or toolkits. Desk-scale synthetic runs validate trends and
orderings, not absolute values.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ProtocolError, ValidationError
from .stats import FeatureMatrix, compute_gaussian_stats, frechet_distance_info
from .svm import SvmConfig, u_ids

# Direction of each known metric; ranking refuses metrics it cannot orient.
LOWER_IS_BETTER = frozenset({"fid", "fid_star", "lpips_mean"})
HIGHER_IS_BETTER = frozenset({"uids", "uids_star", "psnr", "ssim", "p_ids"})


@dataclass(frozen=True)
class QuerySetInfo:
    count: int
    kernel_size: Optional[int] = None
    coverage_band: Optional[tuple[float, float]] = None


@dataclass(frozen=True)
class ComparisonSetInfo:
    count: int
    contains_target_class: Optional[bool] = None


@dataclass
class MetricReport:
    """All metric values for one (remover, query set, comparison set) triple."""

    remover_label: str
    query_info: QuerySetInfo
    comparison_info: ComparisonSetInfo
    extractor_fingerprint: str
    metrics: dict[str, float] = field(default_factory=dict)
    svm_config: Optional[SvmConfig] = None
    jitter_events: list[str] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)

    def __post_init__(self):
        self._check_star_guard()

    def _check_star_guard(self) -> None:
        starred = {"fid_star", "uids_star"} & set(self.metrics)
        if starred and self.comparison_info.contains_target_class is not False:
            raise ProtocolError(
                f"report carries {sorted(starred)} but the comparison set is not "
                "declared free of target-class objects"
            )

    def to_json_dict(self) -> dict:
        return {
            "remover_label": self.remover_label,
            "query": {
                "count": self.query_info.count,
                "kernel_size": self.query_info.kernel_size,
                "coverage_band": list(self.query_info.coverage_band)
                if self.query_info.coverage_band
                else None,
            },
            "comparison": {
                "count": self.comparison_info.count,
                "contains_target_class": self.comparison_info.contains_target_class,
            },
            "extractor_fingerprint": self.extractor_fingerprint,
            "metrics": dict(self.metrics),
            "svm_config": self.svm_config.to_json_dict() if self.svm_config else None,
            "jitter_events": list(self.jitter_events),
            "config_echo": dict(self.config_echo),
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "MetricReport":
        query = doc["query"]
        comparison = doc["comparison"]
        svm_doc = doc.get("svm_config")
        return cls(
            remover_label=doc["remover_label"],
            query_info=QuerySetInfo(
                count=int(query["count"]),
                kernel_size=query.get("kernel_size"),
                coverage_band=tuple(query["coverage_band"]) if query.get("coverage_band") else None,
            ),
            comparison_info=ComparisonSetInfo(
                count=int(comparison["count"]),
                contains_target_class=comparison.get("contains_target_class"),
            ),
            extractor_fingerprint=doc["extractor_fingerprint"],
            metrics={k: float(v) for k, v in doc["metrics"].items()},
            svm_config=SvmConfig(**svm_doc) if svm_doc else None,
            jitter_events=list(doc.get("jitter_events", ())),
            config_echo=dict(doc.get("config_echo", {})),
        )

    def save_json(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "MetricReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def evaluate_unpaired(
    query: FeatureMatrix,
    comparison: FeatureMatrix,
    cfg: SvmConfig,
    *,
    starred: bool,
    query_fingerprint: str,
    comparison_fingerprint: str,
    comparison_contains_target: Optional[bool] = None,
    label: str = "",
    kernel_size: Optional[int] = None,
    coverage_band: Optional[tuple[float, float]] = None,
    config_echo: Optional[dict] = None,
) -> MetricReport:
    """Fréchet distance and SVM unseparability between query and comparison.

    ``starred`` switches the metric names to fid_star/uids_star and
    requires ``comparison_contains_target`` to be exactly False. Feature
    sets with different extractor fingerprints never mix.
    """
    if query_fingerprint != comparison_fingerprint:
        raise ValidationError(
            "extractor fingerprints differ between query and comparison; "
            f"{query_fingerprint[:12]}... vs {comparison_fingerprint[:12]}..."
        )
    if query.dim != comparison.dim:
        raise ValidationError(f"feature dims differ: query {query.dim} vs comparison {comparison.dim}")
    if starred and comparison_contains_target is not False:
        raise ProtocolError(
            "starred metrics require a comparison set declared free of "
            f"target-class objects (got contains_target_class={comparison_contains_target})"
        )

    fid_value, jitter = frechet_distance_info(
        compute_gaussian_stats(comparison), compute_gaussian_stats(query)
    )
    uids_value = u_ids(comparison, query, cfg)

    suffix = "_star" if starred else ""
    jitter_events = [f"fid{suffix}: diagonal jitter applied"] if jitter else []
    return MetricReport(
        remover_label=label,
        query_info=QuerySetInfo(count=query.n, kernel_size=kernel_size, coverage_band=coverage_band),
        comparison_info=ComparisonSetInfo(
            count=comparison.n, contains_target_class=comparison_contains_target
        ),
        extractor_fingerprint=query_fingerprint,
        metrics={f"fid{suffix}": fid_value, f"uids{suffix}": uids_value},
        svm_config=cfg,
        jitter_events=jitter_events,
        config_echo=dict(config_echo or {}),
    )


@dataclass(frozen=True)
class MetricRanking:
    metric: str
    higher_is_better: bool
    ordered_labels: tuple[str, ...]  # best first; ties broken lexicographically
    values: Mapping[str, float]
    ties: tuple[tuple[str, ...], ...]  # groups of labels with equal values


def rank_removers(reports: Sequence[MetricReport]) -> dict[str, MetricRanking]:
    """Order remover labels best-first under every metric present.

    All reports must share one extractor fingerprint; ties are broken by
    label and recorded.
    """
    if not reports:
        raise ValidationError("no reports to rank")
    fingerprints = {r.extractor_fingerprint for r in reports}
    if len(fingerprints) > 1:
        raise ValidationError(f"reports mix extractor fingerprints: {sorted(fingerprints)}")
    labels = [r.remover_label for r in reports]
    if len(set(labels)) != len(labels):
        raise ValidationError("duplicate remover labels in reports")

    rankings: dict[str, MetricRanking] = {}
    metric_names = sorted({name for r in reports for name in r.metrics})
    for metric in metric_names:
        if metric in LOWER_IS_BETTER:
            higher = False
        elif metric in HIGHER_IS_BETTER:
            higher = True
        else:
            raise ValidationError(f"metric {metric!r} has no known ranking direction")
        values = {
            r.remover_label: r.metrics[metric] for r in reports if metric in r.metrics
        }
        ordered = sorted(
            values, key=lambda lab: (-values[lab] if higher else values[lab], lab)
        )
        groups: dict[float, list[str]] = {}
        for lab, val in values.items():
            groups.setdefault(val, []).append(lab)
        ties = tuple(
            tuple(sorted(group)) for val, group in sorted(groups.items()) if len(group) > 1
        )
        rankings[metric] = MetricRanking(
            metric=metric,
            higher_is_better=higher,
            ordered_labels=tuple(ordered),
            values=values,
            ties=ties,
        )
    return rankings


# ---------------------------------------------------------------------------
# Sample-size reliability (RSD)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StabilityEntry:
    size: int
    rsd_percent: float
    iterations: int

    def __post_init__(self):
        if self.rsd_percent < 0:
            raise ValidationError(f"RSD must be >= 0, got {self.rsd_percent}")
        if self.iterations < 2:
            raise ValidationError(f"iterations must be >= 2, got {self.iterations}")


@dataclass(frozen=True)
class StabilityTable:
    entries: Mapping[str, tuple[StabilityEntry, ...]]  # metric -> rows

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "size", "rsd_percent", "iterations"])
            for metric in sorted(self.entries):
                for entry in self.entries[metric]:
                    writer.writerow([metric, entry.size, repr(entry.rsd_percent), entry.iterations])

    def rsd(self, metric: str, size: int) -> float:
        for entry in self.entries[metric]:
            if entry.size == size:
                return entry.rsd_percent
        raise KeyError(f"no entry for metric {metric!r} at size {size}")


def relative_std_percent(values: Sequence[float]) -> float:
    """100 * sample standard deviation / mean; a constant series is exactly 0."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ValidationError(f"RSD needs at least 2 values, got {arr.size}")
    # Checked directly: the roundtrip through mean() can miss exact zero by
    # an ulp for values like 3.7 that are not dyadic.
    if (arr == arr[0]).all():
        return 0.0
    mean = float(arr.mean())
    if mean == 0.0:
        return math.inf
    return 100.0 * float(arr.std(ddof=1)) / abs(mean)


def subsample_stability(
    query: FeatureMatrix,
    comparison: FeatureMatrix,
    sizes: Sequence[int],
    iterations: int,
    seed: int,
    cfg: SvmConfig,
) -> StabilityTable:
    """RSD of fid_star and uids_star over random query subsamples.

    For each size, draws ``iterations`` subsamples without replacement
    (comparison set fixed) and reports 100 * std / mean per metric.
    Iteration i uses seed + i, so results do not depend on scheduling.
    """
    if iterations < 2:
        raise ValidationError(f"iterations must be >= 2, got {iterations}")
    for size in sizes:
        if size < 2:
            raise ValidationError(f"subsample size must be >= 2, got {size}")
        if size > query.n:
            raise ValidationError(f"subsample size {size} exceeds query set size {query.n}")

    comparison_stats = compute_gaussian_stats(comparison)
    fid_rows = []
    uids_rows = []
    for size in sizes:
        fid_values = []
        uids_values = []
        for i in range(iterations):
            rng = np.random.default_rng((seed + i) & 0xFFFFFFFFFFFFFFFF)
            picks = rng.choice(query.n, size=size, replace=False)
            sub = query.take(int(j) for j in picks)
            fid_value, _ = frechet_distance_info(comparison_stats, compute_gaussian_stats(sub))
            fid_values.append(fid_value)
            uids_values.append(u_ids(comparison, sub, cfg))
        fid_rows.append(StabilityEntry(size, relative_std_percent(fid_values), iterations))
        uids_rows.append(StabilityEntry(size, relative_std_percent(uids_values), iterations))
    return StabilityTable(entries={"fid_star": tuple(fid_rows), "uids_star": tuple(uids_rows)})
