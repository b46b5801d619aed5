"""Synthetic ground-truth experiments.

A spatial-proximity diffusion generator over real city coordinates (pure
diffusion equalizes concentrations, so the endgame is checkable), cohort
generation from known dynamics for generate-then-recover tests, and
density-matched precision/recall scoring of estimated graphs against a known
truth graph. Estimated graphs from external structure-learning methods can be
imported as connectome CSVs and scored here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataError
from .dynamics import (
    CarryingCapacity,
    InitialState,
    ModelKind,
    ModelParams,
    Trajectory,
    integrate,
    sample_trajectory,
)
from .graphs import (
    BinaryGraph,
    FilterSpec,
    RegionAtlas,
    WeightedGraph,
    filter_graph,
)
from .staging import Cohort, Scan, Subject

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class City:
    name: str
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"{self.name}: latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise DataError(f"{self.name}: longitude {self.lon} out of range")


@dataclass(frozen=True)
class CityTable:
    cities: tuple[City, ...]

    def __post_init__(self):
        names = [c.name for c in self.cities]
        if len(set(names)) != len(names):
            raise DataError("duplicate city names")

    def __len__(self) -> int:
        return len(self.cities)

    @classmethod
    def from_csv(cls, path) -> "CityTable":
        path = Path(path)
        with path.open("r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(reader.fieldnames) < {"name", "lat", "lon"}:
                raise DataError(f"{path}: expected header name,lat,lon")
            cities = []
            for i, row in enumerate(reader, start=2):
                try:
                    cities.append(
                        City(row["name"], float(row["lat"]), float(row["lon"]))
                    )
                except (TypeError, ValueError) as exc:
                    raise DataError(f"{path}: row {i}: {exc}") from None
        return cls(tuple(cities))

    def to_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "lat", "lon"])
            for c in self.cities:
                writer.writerow([c.name, repr(c.lat), repr(c.lon)])

    def atlas(self) -> RegionAtlas:
        return RegionAtlas.from_names([c.name for c in self.cities])


def load_default_cities() -> CityTable:
    """The packaged 70-city coordinate table."""
    ref = resources.files("diffstage.data").joinpath("cities_cn.csv")
    with resources.as_file(ref) as path:
        return CityTable.from_csv(path)


def haversine_km(lat1, lon1, lat2, lon2) -> float:
    """Great-circle distance on a spherical earth."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def proximity_graph(cities: CityTable) -> WeightedGraph:
    """Inverse great-circle distance, symmetric, max-normalized to [0, 1]."""
    n = len(cities)
    if n < 2:
        raise DataError("need at least 2 cities")
    weights = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            a, b = cities.cities[i], cities.cities[j]
            d = haversine_km(a.lat, a.lon, b.lat, b.lon)
            if d == 0.0:
                raise DataError(
                    f"cities {a.name!r} and {b.name!r} share coordinates "
                    "(infinite proximity)"
                )
            weights[i, j] = weights[j, i] = 1.0 / d
    weights /= weights.max()
    return WeightedGraph(cities.atlas(), weights)


def simulate_diffusion(
    graph: WeightedGraph,
    c0: np.ndarray,
    rate: float,
    horizon: float,
    step: float,
) -> Trajectory:
    """Pure diffusion on the graph (no local growth term)."""
    params = ModelParams(k=rate, alpha=0.0, v=1.0)
    capacity = CarryingCapacity(np.ones(graph.atlas.count))
    return integrate(
        ModelKind("structural", (graph,)), params, capacity, np.asarray(c0, float),
        horizon=horizon, step=step,
    )


@dataclass(frozen=True)
class SyntheticTruth:
    """A fully known generator: graph, dynamics, and sampling noise."""

    graph: WeightedGraph
    params: ModelParams
    capacity: CarryingCapacity
    init: InitialState
    horizon: float
    step: float
    noise_sd: float = 0.0
    onsets: dict[str, float] | None = None

    def __post_init__(self):
        if self.noise_sd < 0:
            raise DataError("noise sd must be nonnegative")

    def trajectory(self) -> Trajectory:
        return integrate(
            ModelKind("structural", (self.graph,)),
            self.params,
            self.capacity,
            self.init,
            horizon=self.horizon,
            step=self.step,
        )


def gen_cohort(
    truth: SyntheticTruth,
    n_subjects: int,
    scans_per_subject: int | tuple[int, int],
    interval: float,
    seed: int = 0,
) -> tuple[Cohort, dict[str, float]]:
    """Sample a cohort from the truth trajectory; returns (cohort, true onsets).

    Scan counts may be a fixed integer or an inclusive (low, high) range drawn
    per subject. Gaussian noise of sd ``noise_sd`` is added and values are
    clamped to [0, 1]. Deterministic given the seed. When the truth carries
    explicit onsets those are used verbatim (and ``n_subjects`` must match).
    """
    rng = np.random.default_rng(seed)
    traj = truth.trajectory()
    atlas = truth.graph.atlas

    if isinstance(scans_per_subject, tuple):
        lo, hi = scans_per_subject
        if lo < 1 or hi < lo:
            raise DataError("scan count range must satisfy 1 <= low <= high")
    else:
        lo = hi = int(scans_per_subject)
        if lo < 1:
            raise DataError("scans_per_subject must be positive")
    if interval <= 0:
        raise DataError("interval must be positive")
    max_span = (hi - 1) * interval
    if max_span > truth.horizon:
        raise DataError(
            f"scan schedule spans {max_span} years, beyond the horizon "
            f"{truth.horizon}"
        )

    if truth.onsets is not None:
        if len(truth.onsets) != n_subjects:
            raise DataError(
                f"truth carries {len(truth.onsets)} onsets but n_subjects="
                f"{n_subjects}"
            )
        planned = sorted(truth.onsets.items())
    else:
        planned = None

    subjects = []
    onsets: dict[str, float] = {}
    for i in range(n_subjects):
        n_scans = int(rng.integers(lo, hi + 1)) if hi > lo else lo
        span = (n_scans - 1) * interval
        if planned is not None:
            sid, onset = planned[i]
            if onset < 0 or onset + span > truth.horizon:
                raise DataError(
                    f"onset {onset} with span {span} exceeds the horizon"
                )
        else:
            sid = f"s{i:04d}"
            onset = float(rng.uniform(0.0, truth.horizon - span))
        scans = []
        for j in range(n_scans):
            values = sample_trajectory(traj, onset + j * interval)
            if truth.noise_sd > 0:
                values = values + rng.normal(0.0, truth.noise_sd, size=values.size)
            scans.append(Scan(np.clip(values, 0.0, 1.0), j * interval))
        subjects.append(Subject(id=sid, scans=tuple(scans)))
        onsets[sid] = onset
    return Cohort(atlas=atlas, subjects=tuple(subjects)), onsets


@dataclass(frozen=True)
class RecoveryScore:
    precision: float
    recall: float
    f1: float
    matched_density: float


def recovery_score(
    estimated: WeightedGraph,
    truth: WeightedGraph,
    density: float,
) -> RecoveryScore:
    """Edge-set agreement after filtering both graphs to the same density.

    Both graphs keep their top-k weights with k = round(density * D * (D-1)),
    so precision equals recall and F1 collapses to precision.
    """
    if estimated.atlas != truth.atlas:
        raise DataError("graphs do not share an atlas")
    if not 0.0 < density <= 1.0:
        raise DataError("density must lie in (0, 1]")
    d = truth.atlas.count
    k = int(round(density * d * (d - 1)))
    if k < 1:
        raise DataError(f"density {density} keeps no edges on a {d}-region atlas")
    spec = FilterSpec(target_edge_count=k)
    est = filter_graph(estimated, spec)
    tru = filter_graph(truth, spec)
    hits = int(np.count_nonzero(est.mask & tru.mask))
    precision = hits / est.edge_count if est.edge_count else 0.0
    recall = hits / tru.edge_count if tru.edge_count else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if (precision + recall) > 0
        else 0.0
    )
    return RecoveryScore(
        precision=precision, recall=recall, f1=f1,
        matched_density=k / (d * (d - 1)),
    )


def random_graph(atlas: RegionAtlas, seed: int, sparsity: float = 1.0) -> WeightedGraph:
    """Uniform(0,1) weights with zero diagonal; optionally sparsified."""
    rng = np.random.default_rng(seed)
    d = atlas.count
    w = rng.random((d, d))
    if sparsity < 1.0:
        w *= rng.random((d, d)) < sparsity
    np.fill_diagonal(w, 0.0)
    return WeightedGraph(atlas, w)


def degree_preserving_shuffle(
    support: BinaryGraph, seed: int, swaps_per_edge: int = 10
) -> BinaryGraph:
    """Rewire a directed support with double-edge swaps.

    Each swap exchanges targets of two edges (a->b, c->d) -> (a->d, c->b),
    preserving every node's in- and out-degree while destroying the edge set.
    """
    rng = np.random.default_rng(seed)
    mask = support.mask.copy()
    edges = list(zip(*np.nonzero(mask)))
    n = len(edges)
    if n < 2:
        return BinaryGraph(support.atlas, mask)
    target_swaps = swaps_per_edge * n
    done = 0
    attempts = 0
    while done < target_swaps and attempts < 100 * target_swaps:
        attempts += 1
        i, j = rng.integers(n, size=2)
        if i == j:
            continue
        (a, b), (c, d) = edges[i], edges[j]
        if a == d or c == b or a == c or b == d:
            continue
        if mask[a, d] or mask[c, b]:
            continue
        mask[a, b] = mask[c, d] = False
        mask[a, d] = mask[c, b] = True
        edges[i] = (a, d)
        edges[j] = (c, b)
        done += 1
    return BinaryGraph(support.atlas, mask)
