"""Model scoring and selection: SSE, correlation, AIC, folds, and sweeps.

The threshold sweep walks a weighted graph through increasing sparsity,
refits at every level, and locates the critical edge number: the smallest
support (largest threshold) whose held-out correlation stays within a margin
of the best seen. ``compare_models`` produces the cross-model table plus the
plot-ready metric-versus-parameter-count series.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NumericError
from .dynamics import ModelKind
from .graphs import BinaryGraph, FilterSpec, WeightedGraph, apply_support, filter_graph
from .staging import Cohort, OptimizerConfig, fit, stage_holdout


@dataclass(frozen=True)
class Metrics:
    sse: float
    pearson_r: float
    aic: float
    n_params: int
    n_obs: int

    def __post_init__(self):
        if self.n_params < 1 or self.n_obs < 1:
            raise DataError("n_params and n_obs must be positive")


def sse(predicted, observed) -> float:
    """Sum of squared differences over all scans and regions."""
    p = np.asarray(predicted, dtype=float)
    o = np.asarray(observed, dtype=float)
    if p.shape != o.shape:
        raise DataError(f"shape mismatch: {p.shape} vs {o.shape}")
    diff = p - o
    return float((diff * diff).sum())


def pearson_r(predicted, observed) -> float:
    """Pearson correlation over the flattened prediction/observation pairs."""
    p = np.asarray(predicted, dtype=float).ravel()
    o = np.asarray(observed, dtype=float).ravel()
    if p.shape != o.shape:
        raise DataError(f"shape mismatch: {p.shape} vs {o.shape}")
    if p.size < 2:
        raise DataError("need at least 2 elements for a correlation")
    pc = p - p.mean()
    oc = o - o.mean()
    denom = math.sqrt(float(pc @ pc) * float(oc @ oc))
    if denom == 0.0:
        raise NumericError("correlation undefined: zero variance input")
    return float(pc @ oc) / denom


def aic(sse_value: float, n_params: int, n_obs: int) -> float:
    """Gaussian-likelihood information criterion: n ln(SSE/n) + 2k."""
    if n_obs <= 0:
        raise DataError("n_obs must be positive")
    if n_params < 1:
        raise DataError("n_params must be positive")
    if sse_value < 0:
        raise DataError("sse must be nonnegative")
    if sse_value == 0.0:
        raise NumericError(
            "AIC undefined at zero SSE (log singularity); report -inf instead"
        )
    return n_obs * math.log(sse_value / n_obs) + 2.0 * n_params


def _aic_or_sentinel(sse_value: float, n_params: int, n_obs: int) -> float:
    try:
        return aic(sse_value, n_params, n_obs)
    except NumericError:
        return float("-inf")


@dataclass(frozen=True)
class FoldSpec:
    """Per-fold subject roles; every subject gets exactly one role per fold."""

    folds: tuple[dict[str, str], ...]

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def subjects(self, fold: int, role: str) -> tuple[str, ...]:
        return tuple(
            sid for sid, r in self.folds[fold].items() if r == role
        )

    def split(self, cohort: Cohort, fold: int) -> tuple[Cohort, Cohort, Cohort]:
        roles = self.folds[fold]
        missing = [s.id for s in cohort.subjects if s.id not in roles]
        if missing:
            raise DataError(f"subjects without fold assignment: {missing[:5]}")
        parts = {"train": [], "val": [], "test": []}
        for subject in cohort.subjects:
            parts[roles[subject.id]].append(subject)
        return tuple(
            Cohort(cohort.atlas, tuple(parts[r])) for r in ("train", "val", "test")
        )


def make_folds(
    cohort: Cohort,
    n_folds: int = 3,
    val_size: int = 35,
    test_size: int = 35,
    seed: int = 0,
) -> FoldSpec:
    """Subject-level splits: disjoint test blocks, disjoint validation blocks.

    All of a subject's scans travel together. Deterministic given the seed.
    """
    ids = sorted(s.id for s in cohort.subjects)
    n = len(ids)
    need = n_folds * (val_size + test_size)
    if need + 1 > n:
        raise DataError(
            f"cohort of {n} subjects cannot supply {n_folds} folds of "
            f"{val_size} validation + {test_size} test subjects"
        )
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    folds = []
    val_offset = n_folds * test_size
    for f in range(n_folds):
        roles = {sid: "train" for sid in ids}
        for sid in shuffled[f * test_size : (f + 1) * test_size]:
            roles[sid] = "test"
        for sid in shuffled[val_offset + f * val_size : val_offset + (f + 1) * val_size]:
            roles[sid] = "val"
        folds.append(roles)
    return FoldSpec(folds=tuple(folds))


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan")
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def _fit_and_score(
    cohort: Cohort,
    kind: ModelKind,
    support: BinaryGraph,
    folds: FoldSpec,
    cfg: OptimizerConfig,
) -> tuple[list[Metrics], list[float]]:
    """Per-fold test metrics plus per-fold training AIC."""
    n_params = support.edge_count + 3 + (len(kind.mix) if kind.mix else 0)
    test_metrics: list[Metrics] = []
    train_aics: list[float] = []
    for f in range(folds.n_folds):
        train, val, test = folds.split(cohort, f)
        # validation subjects are re-staged after every training epoch;
        # only test metrics enter the report
        state = fit(train, kind, support, cfg, validation=val)
        result = stage_holdout(test, state, kind, cfg)
        try:
            r = pearson_r(result.predicted, result.observed)
        except NumericError:
            r = float("nan")
        test_metrics.append(
            Metrics(
                sse=result.sse,
                pearson_r=r,
                aic=_aic_or_sentinel(result.sse, n_params, result.n_obs),
                n_params=n_params,
                n_obs=result.n_obs,
            )
        )
        train_aics.append(
            _aic_or_sentinel(
                state.final_loss, n_params, train.n_scans * train.atlas.count
            )
        )
    return test_metrics, train_aics


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    edge_count: int
    fold_metrics: tuple[Metrics, ...]
    mean_sse: float
    sd_sse: float
    mean_pearson: float
    sd_pearson: float
    mean_aic: float
    sd_aic: float
    flag: str = ""


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    critical_threshold: float
    critical_edge_number: int


def threshold_sweep(
    graph: WeightedGraph,
    thresholds: Sequence[float],
    cohort: Cohort,
    kind: ModelKind | str,
    cfg: OptimizerConfig,
    folds: FoldSpec | None = None,
    margin: float = 0.02,
) -> SweepResult:
    """Filter-fit-evaluate at every threshold and locate the critical support.

    Thresholds must be sorted ascending. Rows whose filtered support leaves
    every seed region isolated (or empty) are flagged "disconnected" and
    excluded from the critical-edge computation. The critical edge number is
    the edge count at the largest threshold whose mean test correlation stays
    within ``margin`` of the best over the sweep.
    """
    taus = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise DataError("thresholds must be sorted ascending")
    label = kind if isinstance(kind, str) else kind.label
    if label == "mixed":
        raise DataError(
            "sweeps threshold a single weighted graph; pre-mix the connectomes "
            "and sweep the combined graph"
        )
    if folds is None:
        folds = make_folds(cohort, seed=cfg.seed)

    seeds = cfg.resolve_seeds(cohort.atlas)
    seed_idx = [cohort.atlas.index_of(s) for s in seeds]
    rows: list[SweepRow] = []
    for tau in taus:
        support = filter_graph(graph, FilterSpec(threshold=tau))
        isolated = all(
            not support.mask[i].any() and not support.mask[:, i].any()
            for i in seed_idx
        )
        if support.edge_count == 0 or isolated:
            rows.append(
                SweepRow(
                    threshold=tau,
                    edge_count=support.edge_count,
                    fold_metrics=(),
                    mean_sse=float("nan"),
                    sd_sse=float("nan"),
                    mean_pearson=float("nan"),
                    sd_pearson=float("nan"),
                    mean_aic=float("nan"),
                    sd_aic=float("nan"),
                    flag="disconnected",
                )
            )
            continue
        pruned = ModelKind(label, (apply_support(support, graph.weights),))
        metrics, _ = _fit_and_score(cohort, pruned, support, folds, cfg)
        m_sse = _mean_sd([m.sse for m in metrics])
        m_r = _mean_sd([m.pearson_r for m in metrics])
        m_aic = _mean_sd([m.aic for m in metrics])
        rows.append(
            SweepRow(
                threshold=tau,
                edge_count=support.edge_count,
                fold_metrics=tuple(metrics),
                mean_sse=m_sse[0],
                sd_sse=m_sse[1],
                mean_pearson=m_r[0],
                sd_pearson=m_r[1],
                mean_aic=m_aic[0],
                sd_aic=m_aic[1],
            )
        )

    scored = [r for r in rows if not r.flag and np.isfinite(r.mean_pearson)]
    if not scored:
        raise NumericError("no threshold produced a scoreable support")
    best = max(r.mean_pearson for r in scored)
    candidates = [r for r in scored if r.mean_pearson >= best - margin]
    critical = max(candidates, key=lambda r: r.threshold)
    return SweepResult(
        rows=tuple(rows),
        critical_threshold=critical.threshold,
        critical_edge_number=critical.edge_count,
    )


@dataclass(frozen=True)
class ModelRow:
    name: str
    n_params: int
    mean_sse: float
    sd_sse: float
    mean_pearson: float
    sd_pearson: float
    mean_aic: float
    sd_aic: float
    mean_train_aic: float
    fold_metrics: tuple[Metrics, ...] = ()
    fold_train_aics: tuple[float, ...] = ()
    failed: bool = False
    error: str = ""


def compare_models(
    cohort: Cohort,
    specs: Sequence[tuple[str, ModelKind, BinaryGraph]],
    folds: FoldSpec,
    cfg: OptimizerConfig,
) -> list[ModelRow]:
    """Fit every named model across the folds and tabulate test metrics.

    A failing model gets a flagged row; the others are unaffected. Rows carry
    the parameter count so metric-versus-parameter-count series can be read
    straight off the table.
    """
    if not specs:
        raise DataError("no model specs to compare")
    rows: list[ModelRow] = []
    for name, kind, support in specs:
        n_params = support.edge_count + 3 + (len(kind.mix) if kind.mix else 0)
        try:
            metrics, train_aics = _fit_and_score(cohort, kind, support, folds, cfg)
        except Exception as exc:  # noqa: BLE001 - isolate per-model failures
            rows.append(
                ModelRow(
                    name=name, n_params=n_params,
                    mean_sse=float("nan"), sd_sse=float("nan"),
                    mean_pearson=float("nan"), sd_pearson=float("nan"),
                    mean_aic=float("nan"), sd_aic=float("nan"),
                    mean_train_aic=float("nan"),
                    failed=True, error=str(exc),
                )
            )
            continue
        m_sse = _mean_sd([m.sse for m in metrics])
        m_r = _mean_sd([m.pearson_r for m in metrics])
        m_aic = _mean_sd([m.aic for m in metrics])
        rows.append(
            ModelRow(
                name=name, n_params=n_params,
                mean_sse=m_sse[0], sd_sse=m_sse[1],
                mean_pearson=m_r[0], sd_pearson=m_r[1],
                mean_aic=m_aic[0], sd_aic=m_aic[1],
                mean_train_aic=_mean_sd(train_aics)[0],
                fold_metrics=tuple(metrics),
                fold_train_aics=tuple(train_aics),
            )
        )
    return rows


def comparison_series(rows: Sequence[ModelRow]) -> list[dict]:
    """Plot-ready series: correlation and training AIC versus parameter count."""
    ordered = sorted((r for r in rows if not r.failed), key=lambda r: r.n_params)
    return [
        {
            "n_params": r.n_params,
            "test_pearson": r.mean_pearson,
            "train_aic": r.mean_train_aic,
            "test_aic": r.mean_aic,
            "name": r.name,
        }
        for r in ordered
    ]


def write_sweep_csv(path, result: SweepResult) -> None:
    """One row per threshold/fold; flagged thresholds emit a single row."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["threshold", "edge_count", "fold", "test_sse", "test_pearson",
             "test_aic", "flag"]
        )
        for r in result.rows:
            if not r.fold_metrics:
                writer.writerow(
                    [r.threshold, r.edge_count, "", "", "", "", r.flag]
                )
                continue
            for f, m in enumerate(r.fold_metrics):
                writer.writerow(
                    [r.threshold, r.edge_count, f, m.sse, m.pearson_r, m.aic,
                     r.flag]
                )


def write_sweep_summary_json(path, result: SweepResult) -> None:
    doc = {
        "critical_edge_number": result.critical_edge_number,
        "critical_threshold": result.critical_threshold,
        "rows": [
            {
                "threshold": r.threshold,
                "edge_count": r.edge_count,
                "mean_sse": r.mean_sse,
                "sd_sse": r.sd_sse,
                "mean_pearson": r.mean_pearson,
                "sd_pearson": r.sd_pearson,
                "mean_aic": r.mean_aic,
                "sd_aic": r.sd_aic,
                "flag": r.flag,
            }
            for r in result.rows
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


def write_comparison_csv(path, rows: Sequence[ModelRow]) -> None:
    """One row per model/fold; failed models emit a single flagged row."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model", "fold", "n_params", "test_sse", "test_pearson",
             "test_aic", "train_aic", "failed", "error"]
        )
        for r in rows:
            if r.failed or not r.fold_metrics:
                writer.writerow(
                    [r.name, "", r.n_params, "", "", "", "", int(r.failed),
                     r.error]
                )
                continue
            for f, (m, ta) in enumerate(zip(r.fold_metrics, r.fold_train_aics)):
                writer.writerow(
                    [r.name, f, r.n_params, m.sse, m.pearson_r, m.aic, ta, 0, ""]
                )


def write_comparison_summary_json(path, rows: Sequence[ModelRow]) -> None:
    doc = [
        {
            "model": r.name,
            "n_params": r.n_params,
            "mean_test_sse": r.mean_sse,
            "sd_test_sse": r.sd_sse,
            "mean_test_pearson": r.mean_pearson,
            "sd_test_pearson": r.sd_pearson,
            "mean_test_aic": r.mean_aic,
            "sd_test_aic": r.sd_aic,
            "mean_train_aic": r.mean_train_aic,
            "failed": r.failed,
            "error": r.error,
        }
        for r in rows
    ]
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


def write_series_json(path, rows: Sequence[ModelRow]) -> None:
    Path(path).write_text(
        json.dumps(comparison_series(rows), indent=2), encoding="utf-8"
    )
