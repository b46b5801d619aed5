"""File formats, run configuration, and the persisted model artifact.

Observations travel as long-format CSV (one region value per row) so every
validation failure can cite its row. The atlas is a separate CSV that pins
region ordering across cohort and graph files. Fit results persist as a
versioned JSON artifact that reloads byte-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .dynamics import CarryingCapacity, ModelKind, ModelParams
from .graphs import BinaryGraph, MixWeights, RegionAtlas, WeightedGraph
from .llm import ProviderConfig
from .staging import (
    Cohort,
    FitState,
    OptimizerConfig,
    Scan,
    StageAssignment,
    Subject,
)

ARTIFACT_FORMAT_VERSION = "1"

OBSERVATION_HEADER = ["subject_id", "scan_index", "interval_years", "region_name", "value"]


def atomic_write_text(path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a torn file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# --- atlas CSV --------------------------------------------------------------

def save_atlas(path, atlas: RegionAtlas) -> None:
    lines = ["index,name,hemisphere"]
    lines += [f"{r.index},{r.name},{r.hemisphere}" for r in atlas.regions]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_atlas(path) -> RegionAtlas:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["index", "name", "hemisphere"]:
        raise DataError(f"{path}: expected header index,name,hemisphere")
    names, hemis = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise DataError(f"{path}: row {i}: expected 3 cells")
        try:
            index = int(row[0])
        except ValueError:
            raise DataError(f"{path}: row {i}: index {row[0]!r} is not an integer") from None
        if index != i - 2:
            raise DataError(f"{path}: row {i}: indices must be contiguous from 0")
        names.append(row[1])
        hemis.append(row[2])
    return RegionAtlas.from_names(names, hemis)


def atlas_hash(atlas: RegionAtlas) -> str:
    payload = ";".join(f"{r.name},{r.hemisphere}" for r in atlas.regions)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# --- observations CSV ---------------------------------------------------------

def load_cohort(path, atlas: RegionAtlas | None = None) -> Cohort:
    """Parse a long-format observation file into a validated cohort.

    Region order is taken from the provided atlas, or inferred from the
    first scan block's row order when no atlas is given. Every violation
    (out-of-range value, missing or duplicated region row, non-monotone
    intervals, inconsistent intervals within a scan) reports its row number.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != OBSERVATION_HEADER:
        raise DataError(
            f"{path}: expected header {','.join(OBSERVATION_HEADER)}"
        )

    # subject -> scan_index -> {region: value}, plus one interval per scan
    table: dict[str, dict[int, dict[str, float]]] = {}
    intervals: dict[tuple[str, int], float] = {}
    subject_order: list[str] = []
    first_block_regions: list[str] = []
    first_block_key: tuple[str, int] | None = None

    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 5:
            raise DataError(f"{path}: row {lineno}: expected 5 cells, got {len(row)}")
        sid, scan_raw, interval_raw, region, value_raw = row
        try:
            scan_idx = int(scan_raw)
            interval = float(interval_raw)
            value = float(value_raw)
        except ValueError as exc:
            raise DataError(f"{path}: row {lineno}: {exc}") from None
        if scan_idx < 0:
            raise DataError(f"{path}: row {lineno}: scan_index must be nonnegative")
        if not 0.0 <= value <= 1.0:
            raise DataError(
                f"{path}: row {lineno}: value {value} outside [0, 1]"
            )
        if atlas is not None and region not in atlas:
            raise DataError(f"{path}: row {lineno}: unknown region {region!r}")

        if sid not in table:
            table[sid] = {}
            subject_order.append(sid)
        scans = table[sid].setdefault(scan_idx, {})
        if region in scans:
            raise DataError(
                f"{path}: row {lineno}: duplicate region {region!r} for "
                f"subject {sid!r} scan {scan_idx}"
            )
        scans[region] = value

        key = (sid, scan_idx)
        if key in intervals:
            if intervals[key] != interval:
                raise DataError(
                    f"{path}: row {lineno}: interval {interval} disagrees with "
                    f"{intervals[key]} for subject {sid!r} scan {scan_idx}"
                )
        else:
            intervals[key] = interval
        if first_block_key is None:
            first_block_key = key
        if key == first_block_key:
            first_block_regions.append(region)

    if not table:
        raise DataError(f"{path}: no observation rows")
    if atlas is None:
        atlas = RegionAtlas.from_names(first_block_regions)

    subjects = []
    for sid in subject_order:
        scan_map = table[sid]
        indices = sorted(scan_map)
        if indices != list(range(len(indices))):
            raise DataError(
                f"{path}: subject {sid!r}: scan indices {indices} are not "
                "contiguous from 0"
            )
        scans = []
        for idx in indices:
            region_map = scan_map[idx]
            missing = [n for n in atlas.names if n not in region_map]
            if missing:
                raise DataError(
                    f"{path}: subject {sid!r} scan {idx}: missing region rows "
                    f"for {', '.join(missing[:5])}"
                )
            extra = [n for n in region_map if n not in atlas]
            if extra:
                raise DataError(
                    f"{path}: subject {sid!r} scan {idx}: unknown regions "
                    f"{', '.join(sorted(extra)[:5])}"
                )
            values = np.array([region_map[n] for n in atlas.names])
            scans.append(Scan(values, intervals[(sid, idx)]))
        if scans[0].interval_from_first != 0.0:
            raise DataError(
                f"{path}: subject {sid!r}: scan 0 interval must be 0"
            )
        ivals = [s.interval_from_first for s in scans]
        if any(b <= a for a, b in zip(ivals, ivals[1:])):
            raise DataError(
                f"{path}: subject {sid!r}: intervals {ivals} must strictly "
                "increase"
            )
        subjects.append(Subject(id=sid, scans=tuple(scans)))
    return Cohort(atlas=atlas, subjects=tuple(subjects))


def save_cohort(path, cohort: Cohort) -> None:
    lines = [",".join(OBSERVATION_HEADER)]
    for subject in cohort.subjects:
        for idx, scan in enumerate(subject.scans):
            for name, value in zip(cohort.atlas.names, scan.values):
                lines.append(
                    f"{subject.id},{idx},{scan.interval_from_first!r},"
                    f"{name},{float(value)!r}"
                )
    atomic_write_text(path, "\n".join(lines) + "\n")


# --- run configuration ----------------------------------------------------------

@dataclass(frozen=True)
class FoldSettings:
    n_folds: int = 3
    val_size: int = 35
    test_size: int = 35


@dataclass(frozen=True)
class RunConfig:
    """Parsed run configuration (JSON file)."""

    observations: str | None = None
    atlas: str | None = None
    connectomes: dict[str, str] = field(default_factory=dict)
    cache_dir: str = "cache"
    output_dir: str = "out"
    model_kind: str = "llm"
    filter_threshold: float | None = None
    filter_edges: int | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    folds: FoldSettings = field(default_factory=FoldSettings)
    fold_seed: int = 0
    providers: tuple[ProviderConfig, ...] = ()
    offline: bool = False
    factors: tuple[str, ...] = ()
    template_version: str = "v1"
    mix: tuple[float, ...] | None = None


def _optimizer_from_dict(doc: dict) -> OptimizerConfig:
    kwargs = dict(doc)
    if "seed_regions" in kwargs and kwargs["seed_regions"] is not None:
        kwargs["seed_regions"] = tuple(kwargs["seed_regions"])
    return OptimizerConfig(**kwargs)


def optimizer_to_dict(cfg: OptimizerConfig) -> dict:
    doc = asdict(cfg)
    if doc["seed_regions"] is not None:
        doc["seed_regions"] = list(doc["seed_regions"])
    return doc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None

    filt = doc.get("filter", {})
    providers = tuple(
        ProviderConfig(
            name=p["name"],
            endpoint_url=p["endpoint_url"],
            model_name=p["model_name"],
            temperature=p.get("temperature", 0.25),
            repeats=p.get("repeats", 3),
            timeout=p.get("timeout", 60.0),
            max_retries=p.get("max_retries", 3),
        )
        for p in doc.get("providers", [])
    )
    folds_doc = doc.get("folds", {})
    cfg = RunConfig(
        observations=doc.get("observations"),
        atlas=doc.get("atlas"),
        connectomes=dict(doc.get("connectomes", {})),
        cache_dir=doc.get("cache_dir", "cache"),
        output_dir=doc.get("output_dir", "out"),
        model_kind=doc.get("model_kind", "llm"),
        filter_threshold=filt.get("threshold"),
        filter_edges=filt.get("edges"),
        optimizer=_optimizer_from_dict(doc.get("optimizer", {})),
        folds=FoldSettings(
            n_folds=folds_doc.get("n_folds", 3),
            val_size=folds_doc.get("val_size", 35),
            test_size=folds_doc.get("test_size", 35),
        ),
        fold_seed=doc.get("fold_seed", 0),
        providers=providers,
        offline=bool(doc.get("offline", False)),
        factors=tuple(doc.get("factors", [])),
        template_version=doc.get("template_version", "v1"),
        mix=tuple(doc["mix"]) if doc.get("mix") else None,
    )
    base = path.parent
    for label, ref in [("observations", cfg.observations), ("atlas", cfg.atlas)] + [
        (f"connectome {name!r}", p) for name, p in cfg.connectomes.items()
    ]:
        if ref is not None and not (base / ref).exists() and not Path(ref).exists():
            raise DataError(f"{path}: {label} path {ref!r} does not exist")
    return cfg


def resolve_path(config_path, ref: str) -> Path:
    """Paths inside a config file resolve relative to the file itself."""
    p = Path(ref)
    if p.exists() or p.is_absolute():
        return p
    return Path(config_path).parent / ref


# --- model artifact ----------------------------------------------------------------

@dataclass(frozen=True)
class ModelArtifact:
    format_version: str
    atlas_hash: str
    label: str
    d: int
    fit: FitState
    support_mask: np.ndarray = field(repr=False)
    graph_masks: tuple[tuple[tuple[int, int], ...], ...] | None = None
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.array(self.support_mask, dtype=bool)
        m.flags.writeable = False
        object.__setattr__(self, "support_mask", m)

    def optimizer_config(self) -> OptimizerConfig:
        return _optimizer_from_dict(self.config)

    def support(self, atlas: RegionAtlas) -> BinaryGraph:
        return BinaryGraph(atlas, self.support_mask)

    def model_kind(self, atlas: RegionAtlas) -> ModelKind:
        """Rebuild the fitted coupling model against a caller-supplied atlas."""
        if atlas_hash(atlas) != self.atlas_hash:
            raise DataError(
                "atlas does not match the one this artifact was fitted on"
            )
        if self.label == "mixed":
            graphs = []
            for edge_list in self.graph_masks:
                mask = np.zeros((self.d, self.d), dtype=bool)
                for i, j in edge_list:
                    mask[i, j] = True
                graphs.append(
                    WeightedGraph(atlas, np.where(mask, self.fit.weights, 0.0))
                )
            return ModelKind("mixed", tuple(graphs), self.fit.mix)
        return ModelKind(self.label, (WeightedGraph(atlas, self.fit.weights),))


def build_artifact(
    atlas: RegionAtlas,
    label: str,
    fit_state: FitState,
    support: BinaryGraph,
    cfg: OptimizerConfig,
    metrics: dict,
    graph_masks: Sequence[BinaryGraph] | None = None,
) -> ModelArtifact:
    return ModelArtifact(
        format_version=ARTIFACT_FORMAT_VERSION,
        atlas_hash=atlas_hash(atlas),
        label=label,
        d=atlas.count,
        fit=fit_state,
        support_mask=support.mask,
        graph_masks=(
            tuple(tuple(b.edges()) for b in graph_masks) if graph_masks else None
        ),
        config=optimizer_to_dict(cfg),
        metrics=dict(metrics),
    )


def save_artifact(path, artifact: ModelArtifact) -> None:
    fit_state = artifact.fit
    rows, cols = np.nonzero(artifact.support_mask)
    triplets = [
        [int(i), int(j), float(fit_state.weights[i, j])]
        for i, j in zip(rows, cols)
    ]
    doc = {
        "format_version": artifact.format_version,
        "atlas_hash": artifact.atlas_hash,
        "label": artifact.label,
        "d": artifact.d,
        "params": {
            "k": fit_state.params.k,
            "alpha": fit_state.params.alpha,
            "v": fit_state.params.v,
        },
        "mix": list(fit_state.mix.values) if fit_state.mix else None,
        "weights": triplets,
        "graph_masks": (
            [[list(e) for e in edges] for edges in artifact.graph_masks]
            if artifact.graph_masks
            else None
        ),
        "stages": {k: float(v) for k, v in fit_state.stages.onsets.items()},
        "loss_history": [[int(e), float(l)] for e, l in fit_state.loss_history],
        "val_history": [[int(e), float(l)] for e, l in fit_state.val_history],
        "converged": fit_state.converged,
        "capacity": [float(v) for v in fit_state.capacity.values],
        "warnings": list(fit_state.warnings),
        "config": artifact.config,
        "metrics": artifact.metrics,
    }
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_artifact(path) -> ModelArtifact:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None
    version = doc.get("format_version")
    if version != ARTIFACT_FORMAT_VERSION:
        raise DataError(
            f"{path}: artifact format {version!r} is not supported "
            f"(expected {ARTIFACT_FORMAT_VERSION!r})"
        )
    d = int(doc["d"])
    weights = np.zeros((d, d))
    mask = np.zeros((d, d), dtype=bool)
    for i, j, w in doc["weights"]:
        weights[int(i), int(j)] = float(w)
        mask[int(i), int(j)] = True
    fit_state = FitState(
        params=ModelParams(**doc["params"]),
        weights=weights,
        mix=MixWeights(tuple(doc["mix"])) if doc.get("mix") else None,
        stages=StageAssignment(dict(doc["stages"])),
        loss_history=tuple((int(e), float(l)) for e, l in doc["loss_history"]),
        val_history=tuple(
            (int(e), float(l)) for e, l in doc.get("val_history", [])
        ),
        converged=bool(doc["converged"]),
        capacity=CarryingCapacity(np.array(doc["capacity"])),
        warnings=tuple(doc.get("warnings", [])),
    )
    return ModelArtifact(
        format_version=version,
        atlas_hash=doc["atlas_hash"],
        label=doc["label"],
        d=d,
        fit=fit_state,
        support_mask=mask,
        graph_masks=(
            tuple(tuple((int(i), int(j)) for i, j in edges)
                  for edges in doc["graph_masks"])
            if doc.get("graph_masks")
            else None
        ),
        config=doc["config"],
        metrics=doc.get("metrics", {}),
    )
