"""Graph algebra over region-indexed matrices.

Adjacency, degree and Laplacian construction, threshold filtering to binary
supports, linear mixing of Laplacians, pairwise similarity metrics, and the
novel-link frequency analysis. Graphs are directed throughout; symmetry is a
property of particular inputs, never an assumption.

All operations are pure functions on immutable inputs (matrices are stored
read-only), so they are safe to call concurrently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

HEMISPHERES = ("left", "right")

# Row-sum residual allowed when validating a Laplacian, relative to the
# magnitude of its entries.
_ROW_SUM_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Region:
    name: str
    hemisphere: str
    index: int

    def __post_init__(self):
        if self.hemisphere not in HEMISPHERES:
            raise DataError(
                f"region {self.name!r}: hemisphere must be one of {HEMISPHERES}, "
                f"got {self.hemisphere!r}"
            )


@dataclass(frozen=True)
class RegionAtlas:
    """Ordered parcellation: unique region names with contiguous indices."""

    regions: tuple[Region, ...]

    def __post_init__(self):
        names = [r.name for r in self.regions]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise DataError(f"duplicate region names in atlas: {dupes}")
        for i, r in enumerate(self.regions):
            if r.index != i:
                raise DataError(
                    f"region indices must be contiguous from 0; "
                    f"found index {r.index} at position {i}"
                )

    @property
    def count(self) -> int:
        return len(self.regions)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.regions)

    def index_of(self, name: str) -> int:
        for r in self.regions:
            if r.name == name:
                return r.index
        raise DataError(f"unknown region {name!r}")

    def __contains__(self, name: str) -> bool:
        return any(r.name == name for r in self.regions)

    @classmethod
    def from_names(
        cls, names: Sequence[str], hemispheres: Sequence[str] | None = None
    ) -> "RegionAtlas":
        """Build an atlas from ordered names.

        Hemisphere tags are taken from ``hemispheres`` when given, otherwise
        inferred from common name conventions (``ctx_lh_``/``lh.``/``Left-``
        and the right-side equivalents); names carrying no convention default
        to "left" (the tag is inert for non-cortical node sets such as the
        synthetic city tables).
        """
        if hemispheres is None:
            hemispheres = [_infer_hemisphere(n) for n in names]
        if len(hemispheres) != len(names):
            raise DataError("names and hemispheres must have equal length")
        regions = tuple(
            Region(name=n, hemisphere=h, index=i)
            for i, (n, h) in enumerate(zip(names, hemispheres))
        )
        return cls(regions)


def _infer_hemisphere(name: str) -> str:
    low = name.lower()
    for marker in ("ctx_rh_", "rh.", "rh_", "right"):
        if low.startswith(marker) or f"_{marker}" in low:
            return "right"
    return "left"


# The 34 cortical labels of the standard two-hemisphere parcellation used for
# regional tau measurements (68 regions total).
_CORTICAL_LABELS = (
    "bankssts", "caudalanteriorcingulate", "caudalmiddlefrontal", "cuneus",
    "entorhinal", "frontalpole", "fusiform", "inferiorparietal",
    "inferiortemporal", "insula", "isthmuscingulate", "lateraloccipital",
    "lateralorbitofrontal", "lingual", "medialorbitofrontal", "middletemporal",
    "paracentral", "parahippocampal", "parsopercularis", "parsorbitalis",
    "parstriangularis", "pericalcarine", "postcentral", "posteriorcingulate",
    "precentral", "precuneus", "rostralanteriorcingulate",
    "rostralmiddlefrontal", "superiorfrontal", "superiorparietal",
    "superiortemporal", "supramarginal", "temporalpole", "transversetemporal",
)


def desikan_killiany_atlas() -> RegionAtlas:
    """The 68-region cortical atlas (``ctx_lh_*`` then ``ctx_rh_*``)."""
    names = [f"ctx_lh_{label}" for label in _CORTICAL_LABELS]
    names += [f"ctx_rh_{label}" for label in _CORTICAL_LABELS]
    hemis = ["left"] * len(_CORTICAL_LABELS) + ["right"] * len(_CORTICAL_LABELS)
    return RegionAtlas.from_names(names, hemis)


@dataclass(frozen=True)
class WeightedGraph:
    """Dense nonnegative inter-region influence matrix with zero diagonal."""

    atlas: RegionAtlas
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        d = self.atlas.count
        if w.shape != (d, d):
            raise DataError(f"weights shape {w.shape} does not match atlas ({d}x{d})")
        if not np.all(np.isfinite(w)):
            raise DataError("weights must be finite")
        if np.any(w < 0):
            raise DataError("weights must be nonnegative")
        if np.any(np.diag(w) != 0):
            raise DataError("diagonal weights must be zero")
        object.__setattr__(self, "weights", _readonly(w))

    @property
    def edge_count(self) -> int:
        return int(np.count_nonzero(self.weights))

    def support(self) -> "BinaryGraph":
        return BinaryGraph(self.atlas, self.weights > 0)


@dataclass(frozen=True)
class BinaryGraph:
    """Sparse binary support: which directed edges exist at all."""

    atlas: RegionAtlas
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        d = self.atlas.count
        if m.shape != (d, d):
            raise DataError(f"mask shape {m.shape} does not match atlas ({d}x{d})")
        if np.any(np.diag(m)):
            raise DataError("diagonal entries of a binary graph must be false")
        out = m.copy()
        out.flags.writeable = False
        object.__setattr__(self, "mask", out)

    @property
    def edge_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    def edges(self) -> list[tuple[int, int]]:
        """Directed edges in lexicographic (row, col) order."""
        rows, cols = np.nonzero(self.mask)
        return list(zip(rows.tolist(), cols.tolist()))

    def to_weighted(self) -> WeightedGraph:
        return WeightedGraph(self.atlas, self.mask.astype(float))


@dataclass(frozen=True)
class LaplacianMatrix:
    """Graph Laplacian: zero row sums, nonpositive off-diagonal."""

    atlas: RegionAtlas
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        d = self.atlas.count
        if v.shape != (d, d):
            raise DataError(f"values shape {v.shape} does not match atlas ({d}x{d})")
        scale = max(1.0, float(np.abs(v).max(initial=0.0))) * max(d, 1)
        if np.any(np.abs(v.sum(axis=1)) > _ROW_SUM_TOL * scale):
            raise DataError("Laplacian rows must sum to zero")
        off = v.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off > _ROW_SUM_TOL * scale):
            raise DataError("Laplacian off-diagonal entries must be nonpositive")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def max_degree(self) -> float:
        return float(np.diag(self.values).max(initial=0.0))


@dataclass(frozen=True)
class MixWeights:
    """Nonnegative combination weights for blending connectome Laplacians."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise DataError("mix weights must be nonempty")
        if any(v < 0 for v in vals):
            raise DataError("mix weights must be nonnegative")
        if not any(v > 0 for v in vals):
            raise DataError("at least one mix weight must be positive")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    @classmethod
    def uniform(cls, n: int = 5) -> "MixWeights":
        return cls(tuple(1.0 / n for _ in range(n)))


@dataclass(frozen=True)
class SimilarityReport:
    frobenius: float
    pearson: float
    spearman: float
    edge_overlap: float


@dataclass(frozen=True)
class FilterSpec:
    """Either a weight threshold or an exact surviving edge count."""

    threshold: float | None = None
    target_edge_count: int | None = None

    def __post_init__(self):
        has_tau = self.threshold is not None
        has_k = self.target_edge_count is not None
        if has_tau == has_k:
            raise DataError("exactly one of threshold / target_edge_count must be set")
        if has_tau and not 0.0 <= self.threshold <= 1.0:
            raise DataError(f"threshold must lie in [0, 1], got {self.threshold}")
        if has_k and self.target_edge_count < 1:
            raise DataError("target_edge_count must be positive")


@dataclass(frozen=True)
class NovelLink:
    source: str
    target: str
    bio_frequency: int
    llm_weight: float | None = None


def _check_same_atlas(*graphs) -> RegionAtlas:
    atlas = graphs[0].atlas
    for g in graphs[1:]:
        if g.atlas != atlas:
            raise DataError("graphs do not share an atlas")
    return atlas


def degree_matrix(g: WeightedGraph) -> np.ndarray:
    """Diagonal matrix of row sums of the adjacency weights."""
    return np.diag(g.weights.sum(axis=1))


def laplacian(g: WeightedGraph, normalized: bool = False) -> LaplacianMatrix:
    """L = D - A, with D the diagonal of row sums.

    With ``normalized=True`` returns the row-normalized variant
    D^{-1}(D - A); rows of zero degree stay zero.
    """
    deg = g.weights.sum(axis=1)
    values = np.diag(deg) - g.weights
    if normalized:
        inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
        values = inv[:, None] * values
    return LaplacianMatrix(g.atlas, values)


def apply_support(support: BinaryGraph, weights: np.ndarray) -> WeightedGraph:
    """Mask a weight matrix onto a binary support (entrywise product)."""
    w = np.asarray(weights, dtype=float)
    d = support.atlas.count
    if w.shape != (d, d):
        raise DataError(f"weight matrix shape {w.shape} does not match support ({d}x{d})")
    return WeightedGraph(support.atlas, np.where(support.mask, w, 0.0))


def filter_graph(g: WeightedGraph, spec: FilterSpec) -> BinaryGraph:
    """Sparsify a weighted graph to a binary support.

    Threshold mode keeps edges with weight strictly above tau. Edge-count
    mode keeps exactly the top-k weights, breaking ties among equal weights
    in lexicographic (row, col) order.
    """
    if spec.threshold is not None:
        return BinaryGraph(g.atlas, g.weights > spec.threshold)

    k = spec.target_edge_count
    rows, cols = np.nonzero(g.weights)
    available = rows.size
    if k > available:
        raise DataError(
            f"target_edge_count={k} exceeds the {available} nonzero edges "
            f"available (short by {k - available})"
        )
    w = g.weights[rows, cols]
    # np.lexsort: last key is primary. Sort by descending weight, then (row, col).
    order = np.lexsort((cols, rows, -w))[:k]
    mask = np.zeros_like(g.weights, dtype=bool)
    mask[rows[order], cols[order]] = True
    return BinaryGraph(g.atlas, mask)


def mix_laplacians(
    laplacians: Sequence[LaplacianMatrix], mix: MixWeights
) -> LaplacianMatrix:
    """Weighted sum of Laplacians; zero row sums are preserved by linearity."""
    if not laplacians:
        raise DataError("need at least one Laplacian to mix")
    if len(laplacians) != len(mix):
        raise DataError(
            f"got {len(laplacians)} Laplacians but {len(mix)} mix weights"
        )
    atlas = _check_same_atlas(*laplacians)
    total = np.zeros((atlas.count, atlas.count))
    for w, lap in zip(mix.values, laplacians):
        total += w * lap.values
    return LaplacianMatrix(atlas, total)


def _offdiag(values: np.ndarray) -> np.ndarray:
    d = values.shape[0]
    return values[~np.eye(d, dtype=bool)]


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        return float("nan")
    return float((xc * yc).sum() / denom)


def graph_similarity(a: BinaryGraph, b: BinaryGraph) -> SimilarityReport:
    """Global similarity of two binary graphs over one atlas.

    Pearson and Spearman are computed over the flattened off-diagonal
    entries; edge overlap is the Jaccard index of the directed edge sets;
    the Frobenius score is the normalized matrix inner product (0 when
    either graph is empty). Identical graphs score correlation 1 even when
    degenerate (empty or complete); otherwise a zero-variance side yields
    NaN correlations.
    """
    _check_same_atlas(a, b)
    x = _offdiag(a.mask).astype(float)
    y = _offdiag(b.mask).astype(float)

    inter = int(np.count_nonzero(a.mask & b.mask))
    union = int(np.count_nonzero(a.mask | b.mask))
    overlap = inter / union if union else 0.0

    ca = int(np.count_nonzero(a.mask))
    cb = int(np.count_nonzero(b.mask))
    frob = inter / np.sqrt(ca * cb) if ca and cb else 0.0

    if np.array_equal(x, y) and x.size:
        pear = spear = 1.0
    else:
        pear = _pearson(x, y)
        spear = _pearson(rankdata(x), rankdata(y))
    return SimilarityReport(
        frobenius=frob, pearson=pear, spearman=spear, edge_overlap=overlap
    )


def novel_links(
    llm: BinaryGraph,
    bios: Sequence[BinaryGraph],
    top_n: int,
    llm_weights: WeightedGraph | None = None,
) -> list[NovelLink]:
    """Edges the inferred graph asserts but reference graphs rarely contain.

    Every edge of ``llm`` is scored by how many of the reference graphs also
    contain it, and the list is sorted rarest first. Ties resolve by higher
    inferred weight (when ``llm_weights`` is given), then lexicographic edge
    order, so the output is a deterministic function of the inputs.
    """
    if not bios:
        raise DataError("need at least one reference graph")
    _check_same_atlas(llm, *bios)
    if llm_weights is not None and llm_weights.atlas != llm.atlas:
        raise DataError("llm_weights atlas does not match")
    if top_n < 0:
        raise DataError("top_n must be nonnegative")

    freq = np.zeros_like(llm.mask, dtype=int)
    for b in bios:
        freq += b.mask.astype(int)

    names = llm.atlas.names
    entries = []
    for i, j in llm.edges():
        w = float(llm_weights.weights[i, j]) if llm_weights is not None else None
        entries.append((int(freq[i, j]), -(w if w is not None else 0.0), i, j, w))
    entries.sort()
    return [
        NovelLink(source=names[i], target=names[j], bio_frequency=f, llm_weight=w)
        for f, _, i, j, w in entries[:top_n]
    ]


# ---------------------------------------------------------------------------
# Connectome CSV format: square matrix, first row and first column carry the
# region names, cell (i, j) is the weight from region i to region j.
# ---------------------------------------------------------------------------

def write_matrix_csv(path, atlas: RegionAtlas, values: np.ndarray) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", *atlas.names])
        for name, row in zip(atlas.names, np.asarray(values, dtype=float)):
            writer.writerow([name, *[repr(float(v)) for v in row]])


def read_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty matrix file")
    header = rows[0][1:]
    d = len(header)
    if len(rows) - 1 != d:
        raise DataError(
            f"{path}: expected {d} data rows to match header, found {len(rows) - 1}"
        )
    values = np.zeros((d, d))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != d + 1:
            raise DataError(f"{path}: row {i} has {len(row)} cells, expected {d + 1}")
        if row[0] != header[i - 2]:
            raise DataError(
                f"{path}: row {i} is labelled {row[0]!r} but column order says "
                f"{header[i - 2]!r}"
            )
        try:
            values[i - 2] = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise DataError(f"{path}: row {i}: {exc}") from None
    return list(header), values


def _resolve_atlas(names: list[str], atlas: RegionAtlas | None, path) -> RegionAtlas:
    if atlas is None:
        return RegionAtlas.from_names(names)
    if list(atlas.names) != names:
        raise DataError(f"{path}: region names do not match the provided atlas")
    return atlas


def write_connectome(path, g: WeightedGraph) -> None:
    write_matrix_csv(path, g.atlas, g.weights)


def read_connectome(path, atlas: RegionAtlas | None = None) -> WeightedGraph:
    names, values = read_matrix_csv(path)
    return WeightedGraph(_resolve_atlas(names, atlas, path), values)


def write_support(path, b: BinaryGraph) -> None:
    write_matrix_csv(path, b.atlas, b.mask.astype(float))


def read_support(path, atlas: RegionAtlas | None = None) -> BinaryGraph:
    names, values = read_matrix_csv(path)
    if not np.isin(values, (0.0, 1.0)).all():
        raise DataError(f"{path}: a binary graph file may only contain 0 and 1")
    return BinaryGraph(_resolve_atlas(names, atlas, path), values.astype(bool))


def write_laplacian(path, lap: LaplacianMatrix) -> None:
    write_matrix_csv(path, lap.atlas, lap.values)


def read_laplacian(path, atlas: RegionAtlas | None = None) -> LaplacianMatrix:
    names, values = read_matrix_csv(path)
    return LaplacianMatrix(_resolve_atlas(names, atlas, path), values)
