"""The graph-coupled flow that generates progression trajectories.

Regional burden c(t) evolves by diffusion along a graph Laplacian plus
logistic local growth toward a per-region carrying capacity:

    dc/dt = -k L c + alpha * c * (v p - c)

Integration is classical fixed-step RK4 on a uniform pseudo-time grid, which
keeps downstream staging losses deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NumericError
from .graphs import (
    BinaryGraph,
    LaplacianMatrix,
    MixWeights,
    RegionAtlas,
    WeightedGraph,
    apply_support,
    laplacian,
)

DEFAULT_HORIZON = 30.0
DEFAULT_STEP = 0.05
DEFAULT_SEED_VALUE = 0.01
DEFAULT_SEED_REGIONS = ("ctx_lh_inferiortemporal", "ctx_rh_inferiortemporal")

# Step undershoot below zero tolerated (clamped) before it counts as failure.
UNDERSHOOT_TOL = 1e-12
# A state exceeding this multiple of the saturation level aborts integration.
OVERSHOOT_FACTOR = 10.0

MODEL_LABELS = ("structural", "mixed", "llm")


@dataclass(frozen=True)
class ModelParams:
    """Global rates: diffusion k, aggregation alpha, convergence level v."""

    k: float
    alpha: float
    v: float

    def __post_init__(self):
        if self.k < 0 or self.alpha < 0:
            raise DataError("rates k and alpha must be nonnegative")
        if self.v <= 0:
            raise DataError("convergence level v must be positive")


@dataclass(frozen=True)
class CarryingCapacity:
    """Per-region saturation level in normalized biomarker units, in (0, 1]."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1:
            raise DataError("carrying capacity must be a vector")
        if np.any(v <= 0) or np.any(v > 1):
            raise DataError("carrying capacity entries must lie in (0, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def max(self) -> float:
        return float(self.values.max())


def carrying_capacity(observations, floor: float = 1e-6) -> CarryingCapacity:
    """99th percentile of each region's observed values (linear interpolation).

    ``observations`` is an (n_obs, D) array of stacked scan vectors (a Cohort
    is accepted and stacked); NaN marks a missing value. Each region needs at
    least two observations. Percentiles are clamped into (0, 1]: all-zero
    regions get ``floor``.
    """
    if hasattr(observations, "stacked_values"):
        observations = observations.stacked_values()
    obs = np.asarray(observations, dtype=float)
    if obs.ndim != 2:
        raise DataError("observations must be a 2-D (n_obs, regions) array")
    counts = np.sum(~np.isnan(obs), axis=0)
    if np.any(counts == 0):
        bad = np.nonzero(counts == 0)[0].tolist()
        raise DataError(f"regions with no observations: columns {bad}")
    if np.any(counts < 2):
        bad = np.nonzero(counts < 2)[0].tolist()
        raise DataError(
            f"need at least 2 observations per region; columns {bad} have fewer"
        )
    p = np.nanpercentile(obs, 99, axis=0, method="linear")
    p = np.clip(p, floor, 1.0)
    return CarryingCapacity(p)


@dataclass(frozen=True)
class InitialState:
    """Seed burden: epsilon at the seed regions, zero elsewhere."""

    c0: np.ndarray = field(repr=False)
    seed_regions: tuple[str, ...]
    seed_value: float

    def __post_init__(self):
        c = np.array(self.c0, dtype=float)
        if c.ndim != 1 or np.any(c < 0):
            raise DataError("initial state must be a nonnegative vector")
        c.flags.writeable = False
        object.__setattr__(self, "c0", c)


def seed_initial(
    atlas: RegionAtlas,
    seed_regions: Sequence[str],
    seed_value: float = DEFAULT_SEED_VALUE,
) -> InitialState:
    if not seed_regions:
        raise DataError("seed region list is empty")
    if seed_value <= 0:
        raise DataError("seed value must be positive (a zero seed cannot spread)")
    c0 = np.zeros(atlas.count)
    for name in seed_regions:
        c0[atlas.index_of(name)] = seed_value
    return InitialState(c0=c0, seed_regions=tuple(seed_regions), seed_value=seed_value)


@dataclass(frozen=True)
class Trajectory:
    """States on a uniform pseudo-time grid starting at t = 0."""

    times: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.states, dtype=float)
        if t.ndim != 1 or s.ndim != 2 or s.shape[0] != t.size:
            raise DataError("times and states are inconsistent")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise DataError("time grid must start at 0 and strictly increase")
        steps = np.diff(t)
        if t.size > 2 and not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise DataError("time grid must be uniform")
        for a in (t, s):
            a.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])

    def sample(self, t) -> np.ndarray:
        return sample_trajectory(self, t)


def _bracket(t_arr: np.ndarray, step: float, horizon: float, n_states: int):
    """Grid bracket (lower index, fraction) for linear interpolation."""
    pos = np.clip(t_arr, 0.0, horizon) / step
    i0 = np.minimum(pos.astype(int), n_states - 2)
    return i0, pos - i0


def sample_trajectory(traj: Trajectory, t) -> np.ndarray:
    """Linear interpolation between bracketing grid states.

    Accepts a scalar or an array of times; all must lie in [0, horizon].
    """
    t_arr = np.asarray(t, dtype=float)
    horizon = traj.horizon
    if np.any(t_arr < -1e-9) or np.any(t_arr > horizon + 1e-9):
        raise DataError(f"sample time outside [0, {horizon}]")
    i0, frac = _bracket(t_arr, traj.step, horizon, traj.states.shape[0])
    lo = traj.states[i0]
    hi = traj.states[i0 + 1]
    if t_arr.ndim == 0:
        return lo * (1.0 - frac) + hi * frac
    return lo * (1.0 - frac)[..., None] + hi * frac[..., None]


@dataclass(frozen=True)
class ModelKind:
    """A coupling-graph choice for the flow.

    ``structural`` and ``llm`` carry one weighted adjacency source; ``mixed``
    carries several plus combination weights for their Laplacians. The label
    records provenance only: two kinds with equal Laplacians generate
    identical flows.
    """

    label: str
    graphs: tuple[WeightedGraph, ...]
    mix: MixWeights | None = None

    def __post_init__(self):
        if self.label not in MODEL_LABELS:
            raise DataError(f"model label must be one of {MODEL_LABELS}")
        if not self.graphs:
            raise DataError("model needs at least one graph")
        atlas = self.graphs[0].atlas
        if any(g.atlas != atlas for g in self.graphs):
            raise DataError("model graphs do not share an atlas")
        if self.label == "mixed":
            if self.mix is None:
                raise DataError("mixed model requires mix weights")
            if len(self.mix) != len(self.graphs):
                raise DataError(
                    f"{len(self.graphs)} graphs but {len(self.mix)} mix weights"
                )
        elif len(self.graphs) != 1:
            raise DataError(f"{self.label} model takes exactly one graph")
        object.__setattr__(self, "graphs", tuple(self.graphs))

    @property
    def atlas(self) -> RegionAtlas:
        return self.graphs[0].atlas

    def laplacian(self) -> LaplacianMatrix:
        # The mixed model blends adjacencies before the degree subtraction;
        # by linearity this equals mixing the per-graph Laplacians, but doing
        # it one way keeps results bit-identical across call sites.
        if self.label == "mixed":
            adj = np.zeros((self.atlas.count,) * 2)
            for w, g in zip(self.mix.values, self.graphs):
                adj += w * g.weights
            return LaplacianMatrix(self.atlas, np.diag(adj.sum(axis=1)) - adj)
        return laplacian(self.graphs[0])

    def support(self) -> BinaryGraph:
        """Union of the nonzero patterns: where learnable weights live."""
        mask = np.zeros((self.atlas.count,) * 2, dtype=bool)
        for g in self.graphs:
            mask |= g.weights > 0
        return BinaryGraph(self.atlas, mask)

    def with_weights(self, weights: np.ndarray) -> "ModelKind":
        """Re-weight every graph's support with a shared weight matrix."""
        new = tuple(apply_support(g.support(), weights) for g in self.graphs)
        return replace(self, graphs=new)

    def with_mix(self, mix: MixWeights) -> "ModelKind":
        if self.label != "mixed":
            raise DataError("only mixed models carry mix weights")
        return replace(self, mix=mix)

    def n_params(self) -> int:
        """Learnable parameter count: support edges plus global rates."""
        n = self.support().edge_count + 3
        if self.label == "mixed":
            n += len(self.mix)
        return n


def ndm_rhs(
    c: np.ndarray,
    lap: LaplacianMatrix,
    params: ModelParams,
    p: CarryingCapacity,
) -> np.ndarray:
    """-k L c + alpha c (v p - c)."""
    c = np.asarray(c, dtype=float)
    d = lap.atlas.count
    if c.shape != (d,) or p.values.shape != (d,):
        raise DataError("state, Laplacian, and capacity dimensions disagree")
    return _rhs(c, lap.values, params.k, params.alpha, params.v, p.values)


def _rhs(c, lap_values, k, alpha, v, p):
    return -k * (lap_values @ c) + alpha * c * (v * p - c)


def stability_limit(
    lap: LaplacianMatrix, params: ModelParams, p: CarryingCapacity
) -> float:
    """Explicit-step bound: h <= 0.5 / (k * max_degree + alpha * v * max p)."""
    rate = params.k * lap.max_degree + params.alpha * params.v * p.max
    if rate <= 0:
        return float("inf")
    return 0.5 / rate


def integrate(
    kind: ModelKind | LaplacianMatrix,
    params: ModelParams,
    p: CarryingCapacity,
    init: InitialState | np.ndarray,
    horizon: float = DEFAULT_HORIZON,
    step: float = DEFAULT_STEP,
) -> Trajectory:
    """Classical RK4 solution of the flow on the uniform grid [0, horizon].

    The step must divide the horizon and respect the stability bound. Tiny
    negative undershoots (< 1e-12) are clamped to zero; anything larger, or a
    state exceeding ten times the saturation level, raises ``NumericError``
    advising a smaller step.
    """
    lap = kind.laplacian() if isinstance(kind, ModelKind) else kind
    c0 = init.c0 if isinstance(init, InitialState) else np.asarray(init, dtype=float)
    d = lap.atlas.count
    if c0.shape != (d,):
        raise DataError(f"initial state has dimension {c0.shape}, expected ({d},)")
    if step <= 0:
        raise DataError("step must be positive")
    n_steps = horizon / step
    if abs(n_steps - round(n_steps)) > 1e-9:
        raise DataError(f"horizon {horizon} is not an integral number of steps {step}")
    n_steps = int(round(n_steps))
    if n_steps < 1:
        raise DataError("horizon must cover at least one step")
    h_max = stability_limit(lap, params, p)
    if step > h_max:
        raise NumericError(
            f"step {step} exceeds the stability bound {h_max:.6g}; reduce the step"
        )

    ceiling = OVERSHOOT_FACTOR * params.v * p.max
    states, failure = _rk4_core(
        lap.values, params.k, params.alpha, params.v, p.values, c0, n_steps,
        step, ceiling,
    )
    if failure is not None:
        raise NumericError(failure)
    times = np.linspace(0.0, horizon, n_steps + 1)
    return Trajectory(times=times, states=states)


def _rk4_core(lap_values, k, alpha, v, pv, c0, n_steps, h, ceiling):
    """Shared RK4 loop. Returns (states, None) or (None, failure reason)."""
    states = np.empty((n_steps + 1, c0.size))
    states[0] = c0
    c = c0.copy()
    for i in range(n_steps):
        k1 = _rhs(c, lap_values, k, alpha, v, pv)
        k2 = _rhs(c + 0.5 * h * k1, lap_values, k, alpha, v, pv)
        k3 = _rhs(c + 0.5 * h * k2, lap_values, k, alpha, v, pv)
        k4 = _rhs(c + h * k3, lap_values, k, alpha, v, pv)
        c = c + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        low = c.min()
        if low < 0.0:
            if low < -UNDERSHOOT_TOL:
                return None, (
                    f"state undershot zero by {-low:.3g} at t={(i + 1) * h:.4g}; "
                    "reduce the step"
                )
            c = np.maximum(c, 0.0)
        if np.abs(c).max() > ceiling:
            return None, (
                f"state magnitude exceeded {ceiling:.3g} at t={(i + 1) * h:.4g}; "
                "reduce the step"
            )
        states[i + 1] = c
    return states, None


def write_trajectory(path, traj: Trajectory, atlas: RegionAtlas) -> None:
    """CSV export: time plus one column per region, 9 significant digits."""
    if atlas.count != traj.states.shape[1]:
        raise DataError("atlas does not match trajectory dimension")
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", *atlas.names])
        for t, row in zip(traj.times, traj.states):
            writer.writerow([f"{t:.9g}", *[f"{x:.9g}" for x in row]])
