"""Dual optimization: subject placement and model refinement.

Each epoch alternates two moves that both drive the cohort sum of squared
errors down: (A) every subject is re-placed at its best-fitting onset on the
current trajectory, and (B) the global rates, the edge weights on the fixed
binary support, and (for the mixed model) the connectome blend weights take
a descent step, with candidate steps accepted only when they lower the loss.
Gradients are estimated by central differences, batched so one vectorized
RK4 sweep prices every perturbed parameter at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import DataError, NumericError
from .dynamics import (
    DEFAULT_HORIZON,
    DEFAULT_SEED_REGIONS,
    DEFAULT_SEED_VALUE,
    DEFAULT_STEP,
    OVERSHOOT_FACTOR,
    CarryingCapacity,
    ModelKind,
    ModelParams,
    Trajectory,
    _bracket,
    _rk4_core,
    carrying_capacity,
    sample_trajectory,
    seed_initial,
)
from .graphs import BinaryGraph, MixWeights, RegionAtlas


@dataclass(frozen=True)
class Scan:
    """One exam: a normalized biomarker vector and the years since scan 0."""

    values: np.ndarray = field(repr=False)
    interval_from_first: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1:
            raise DataError("scan values must be a vector")
        if np.any(v < 0) or np.any(v > 1):
            raise DataError("scan values must lie in [0, 1]")
        if self.interval_from_first < 0:
            raise DataError("scan interval must be nonnegative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Subject:
    id: str
    scans: tuple[Scan, ...]

    def __post_init__(self):
        if not self.scans:
            raise DataError(f"subject {self.id!r} has no scans")
        object.__setattr__(self, "scans", tuple(self.scans))
        if self.scans[0].interval_from_first != 0.0:
            raise DataError(f"subject {self.id!r}: first scan interval must be 0")
        intervals = [s.interval_from_first for s in self.scans]
        if any(b <= a for a, b in zip(intervals, intervals[1:])):
            raise DataError(
                f"subject {self.id!r}: scan intervals must strictly increase"
            )
        dims = {s.values.size for s in self.scans}
        if len(dims) > 1:
            raise DataError(f"subject {self.id!r}: scans have mixed dimensions")

    @property
    def span(self) -> float:
        return self.scans[-1].interval_from_first

    @property
    def dim(self) -> int:
        return self.scans[0].values.size


@dataclass(frozen=True)
class Cohort:
    atlas: RegionAtlas
    subjects: tuple[Subject, ...]

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate subject ids: {dupes}")
        d = self.atlas.count
        for s in self.subjects:
            if s.dim != d:
                raise DataError(
                    f"subject {s.id!r} has dimension {s.dim}, atlas has {d}"
                )

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_scans(self) -> int:
        return sum(len(s.scans) for s in self.subjects)

    def stacked_values(self) -> np.ndarray:
        """All scan vectors as one (n_scans, D) array."""
        return np.array([sc.values for s in self.subjects for sc in s.scans])


@dataclass(frozen=True)
class StageAssignment:
    """Onset (pseudo-time of scan 0) per subject id."""

    onsets: dict[str, float]

    def onset_of(self, subject_id: str) -> float:
        try:
            return self.onsets[subject_id]
        except KeyError:
            raise DataError(f"no stage assigned for subject {subject_id!r}") from None


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs for the alternating fit.

    ``stage_grid`` is the number of onset-grid intervals across the horizon;
    ``fd_step`` the central-difference probe; ``descent_iters`` caps the
    bounded quasi-Newton iterations per epoch. The fit stops once the
    relative loss improvement stays below ``tolerance`` for ``patience``
    consecutive epochs.
    """

    max_epochs: int = 60
    stage_grid: int = 200
    fd_step: float = 1e-4
    descent_iters: int = 10
    tolerance: float = 1e-4
    patience: int = 10
    seed: int = 0
    horizon: float = DEFAULT_HORIZON
    step: float = DEFAULT_STEP
    seed_regions: tuple[str, ...] | None = None
    seed_value: float = DEFAULT_SEED_VALUE
    init_k: float = 0.1
    init_alpha: float = 0.1
    init_v: float = 1.0

    def __post_init__(self):
        if self.tolerance <= 0:
            raise DataError("tolerance must be positive")
        if self.max_epochs < 1 or self.stage_grid < 2 or self.descent_iters < 1:
            raise DataError("max_epochs, stage_grid, descent_iters must be positive")

    def resolve_seeds(self, atlas: RegionAtlas) -> tuple[str, ...]:
        if self.seed_regions:
            return tuple(self.seed_regions)
        if all(name in atlas for name in DEFAULT_SEED_REGIONS):
            return DEFAULT_SEED_REGIONS
        raise DataError(
            "no seed regions configured and the default bilateral seeds are "
            "not in this atlas"
        )


@dataclass(frozen=True)
class FitState:
    """Everything the fit learned, plus its loss audit trail.

    ``val_history`` tracks the staging loss of the validation subjects
    re-allocated on the trajectory after each training epoch (present only
    when the fit was given a validation cohort; it does not influence the
    optimization or the convergence rule).
    """

    params: ModelParams
    weights: np.ndarray = field(repr=False)
    mix: MixWeights | None
    stages: StageAssignment
    loss_history: tuple[tuple[int, float], ...]
    converged: bool
    capacity: CarryingCapacity
    warnings: tuple[str, ...] = ()
    val_history: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        losses = [l for _, l in self.loss_history]
        if any(b > a + 1e-9 * max(1.0, a) for a, b in zip(losses, losses[1:])):
            raise NumericError("loss history must be non-increasing")

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1][1] if self.loss_history else float("nan")


@dataclass(frozen=True)
class HoldoutResult:
    stages: StageAssignment
    per_subject_sse: dict[str, float]
    predicted: np.ndarray = field(repr=False)
    observed: np.ndarray = field(repr=False)

    @property
    def sse(self) -> float:
        diff = self.predicted - self.observed
        return float((diff * diff).sum())

    @property
    def n_obs(self) -> int:
        return int(self.observed.size)


class DivergenceError(NumericError):
    """Loss went up beyond what the line search could recover.

    ``state`` carries the last good FitState.
    """

    def __init__(self, message, state: FitState):
        super().__init__(message)
        self.state = state


# --- staging -------------------------------------------------------------

def _sse_at(subject: Subject, traj: Trajectory, onset: float) -> float:
    total = 0.0
    for scan in subject.scans:
        diff = sample_trajectory(traj, onset + scan.interval_from_first) - scan.values
        total += float(diff @ diff)
    return total


def _sse_on_grid(subject: Subject, traj: Trajectory, onsets: np.ndarray) -> np.ndarray:
    total = np.zeros(onsets.size)
    for scan in subject.scans:
        sampled = sample_trajectory(traj, onsets + scan.interval_from_first)
        diff = sampled - scan.values
        total += (diff * diff).sum(axis=1)
    return total


def subject_sse(subject: Subject, stages: StageAssignment, traj: Trajectory) -> float:
    """Squared error of one staged subject against the trajectory."""
    onset = stages.onset_of(subject.id)
    if onset < -1e-9 or onset + subject.span > traj.horizon + 1e-9:
        raise DataError(
            f"subject {subject.id!r} staged at {onset} falls outside the horizon"
        )
    return _sse_at(subject, traj, onset)


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_min(f, lo: float, hi: float, tol: float) -> tuple[float, float]:
    """Golden-section minimization; returns the best evaluated (x, f(x))."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    best_x, best_f = (c, fc) if fc <= fd else (d, fd)
    for _ in range(80):
        if (b - a) <= tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
            if fc < best_f:
                best_x, best_f = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
            if fd < best_f:
                best_x, best_f = d, fd
    return best_x, best_f


def stage_subject(
    subject: Subject, traj: Trajectory, grid_step: float | None = None
) -> float:
    """Best-fit onset on [0, horizon - span].

    Grid argmin (earliest onset wins ties) followed by one golden-section
    refinement between the best grid point's neighbors; the refined point is
    kept only when it is strictly better.
    """
    horizon = traj.horizon
    span = subject.span
    if span > horizon + 1e-9:
        raise DataError(
            f"subject {subject.id!r} spans {span} years, beyond the horizon "
            f"{horizon}"
        )
    if grid_step is None:
        grid_step = horizon / 200.0
    reach = max(horizon - span, 0.0)
    n_cells = max(1, int(math.ceil(reach / grid_step - 1e-9))) if reach > 0 else 1
    grid = np.linspace(0.0, reach, n_cells + 1)
    sse = _sse_on_grid(subject, traj, grid)
    best = int(np.argmin(sse))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, grid.size - 1)]
    if hi > lo:
        x, fx = _golden_min(
            lambda t: _sse_at(subject, traj, t), lo, hi, tol=grid_step * 1e-3
        )
        if fx < sse[best]:
            return float(x)
    return float(grid[best])


def stage_cohort(
    cohort: Cohort, traj: Trajectory, grid_step: float | None = None
) -> StageAssignment:
    return StageAssignment(
        {s.id: stage_subject(s, traj, grid_step) for s in cohort.subjects}
    )


# --- fitting ---------------------------------------------------------------

class _Problem:
    """Precomputed structures for loss/gradient evaluation on one cohort."""

    def __init__(self, cohort: Cohort, kind: ModelKind, support: BinaryGraph,
                 cfg: OptimizerConfig):
        if kind.atlas != cohort.atlas or support.atlas != cohort.atlas:
            raise DataError("cohort, model, and support atlases must agree")
        self.cohort = cohort
        self.cfg = cfg
        self.kind = kind
        self.support = support
        d = cohort.atlas.count
        self.d = d

        self.rows, self.cols = np.nonzero(support.mask)
        self.n_edges = self.rows.size
        self.is_mixed = kind.label == "mixed"
        self.n_mix = len(kind.mix) if self.is_mixed else 0

        # Per-connectome supports restricted to where W may be nonzero.
        masks = np.stack([g.weights > 0 for g in kind.graphs]).astype(float)
        if self.is_mixed:
            masks *= support.mask
            self.masks = masks
        else:
            self.masks = support.mask.astype(float)[None, :, :]

        stacked = cohort.stacked_values()
        if stacked.shape[0] >= 2:
            self.p = carrying_capacity(stacked)
        else:
            # Degenerate cohort: fall back to the observed ceiling.
            self.p = CarryingCapacity(np.clip(stacked.max(axis=0), 1e-6, 1.0))
        seeds = cfg.resolve_seeds(cohort.atlas)
        self.init = seed_initial(cohort.atlas, seeds, cfg.seed_value)
        self.horizon = cfg.horizon
        self.h = cfg.step
        n = self.horizon / self.h
        if abs(n - round(n)) > 1e-9:
            raise DataError("horizon must be an integral number of steps")
        self.n_steps = int(round(n))
        self.grid_step = self.horizon / cfg.stage_grid

        # scan table for staged-loss evaluation
        self.scan_subject = [s.id for s in cohort.subjects for _ in s.scans]
        self.scan_interval = np.array(
            [sc.interval_from_first for s in cohort.subjects for sc in s.scans]
        )
        self.obs = cohort.stacked_values()

        # box constraints: rates and weights nonnegative, v strictly positive
        self.bounds = (
            [(0.0, None), (0.0, None), (1e-9, None)]
            + [(0.0, None)] * self.n_mix
            + [(0.0, None)] * self.n_edges
        )

    # -- parameter vector layout: [k, alpha, v, mix..., w_edges...] --

    def theta0(self) -> np.ndarray:
        cfg = self.cfg
        head = [cfg.init_k, cfg.init_alpha, cfg.init_v]
        if self.is_mixed:
            head.extend(self.kind.mix.values)
        gw = np.stack([g.weights for g in self.kind.graphs])
        present = (gw > 0).sum(axis=0)
        mean_w = gw.sum(axis=0) / np.maximum(present, 1)
        w0 = mean_w[self.rows, self.cols]
        return np.concatenate([head, w0])

    def unpack(self, theta: np.ndarray):
        k, alpha, v = theta[0], theta[1], theta[2]
        mix = theta[3 : 3 + self.n_mix]
        w = theta[3 + self.n_mix :]
        return float(k), float(alpha), float(v), mix, w

    def project(self, theta: np.ndarray) -> np.ndarray:
        out = theta.copy()
        out[0] = max(out[0], 0.0)
        out[1] = max(out[1], 0.0)
        out[2] = max(out[2], 1e-9)
        if self.n_mix:
            sl = slice(3, 3 + self.n_mix)
            clipped = np.maximum(out[sl], 0.0)
            if clipped.max() <= 0.0:
                clipped = np.asarray(self.kind.mix.values)
            out[sl] = clipped
        out[3 + self.n_mix :] = np.maximum(out[3 + self.n_mix :], 0.0)
        return out

    def weight_matrix(self, theta: np.ndarray) -> np.ndarray:
        w = np.zeros((self.d, self.d))
        w[self.rows, self.cols] = theta[3 + self.n_mix :]
        return w

    def _smix(self, mix: np.ndarray) -> np.ndarray:
        if self.is_mixed:
            return np.einsum("m,mij->ij", mix, self.masks)
        return self.masks[0]

    def lap_values(self, theta: np.ndarray) -> np.ndarray:
        # Accumulation order mirrors ModelKind.laplacian() exactly so fit-time
        # trajectories match artifact-time rebuilds bit for bit.
        _, _, _, mix, _ = self.unpack(theta)
        w = self.weight_matrix(theta)
        if self.is_mixed:
            adj = np.zeros((self.d, self.d))
            for w_m, mask in zip(mix, self.masks):
                adj += w_m * np.where(mask > 0, w, 0.0)
        else:
            adj = np.where(self.masks[0] > 0, w, 0.0)
        return np.diag(adj.sum(axis=1)) - adj

    def trajectory(self, theta: np.ndarray) -> Trajectory | None:
        k, alpha, v, mix, _ = self.unpack(theta)
        lap = self.lap_values(theta)
        rate = k * float(np.diag(lap).max(initial=0.0)) + alpha * v * self.p.max
        if rate > 0 and self.h > 0.5 / rate:
            return None
        ceiling = OVERSHOOT_FACTOR * v * self.p.max
        states, failure = _rk4_core(
            lap, k, alpha, v, self.p.values, self.init.c0, self.n_steps, self.h,
            ceiling,
        )
        if failure is not None:
            return None
        times = np.linspace(0.0, self.horizon, self.n_steps + 1)
        return Trajectory(times=times, states=states)

    def schedule(self, stages: StageAssignment):
        """Fixed staged scan times -> interpolation brackets and snapshots."""
        times = np.array(
            [stages.onset_of(sid) for sid in self.scan_subject]
        ) + self.scan_interval
        i0, frac = _bracket(times, self.h, self.horizon, self.n_steps + 1)
        needed = np.unique(np.concatenate([i0, i0 + 1]))
        return {
            "lo": np.searchsorted(needed, i0),
            "hi": np.searchsorted(needed, i0 + 1),
            "frac": frac,
            "needed": needed,
        }

    def loss(self, theta: np.ndarray, sched) -> float:
        traj = self.trajectory(theta)
        if traj is None:
            return float("inf")
        return self.loss_on(traj, sched)

    def loss_on(self, traj: Trajectory, sched) -> float:
        snaps = traj.states[sched["needed"]]
        frac = sched["frac"][:, None]
        sampled = snaps[sched["lo"]] * (1.0 - frac) + snaps[sched["hi"]] * frac
        diff = sampled - self.obs
        return float((diff * diff).sum())

    def grad(self, theta: np.ndarray, sched) -> np.ndarray:
        """Central differences over all parameters in one batched RK4 sweep."""
        n_par = theta.size
        deltas = np.maximum(self.cfg.fd_step, 1e-3 * np.abs(theta))
        m_cols = 2 * n_par
        k, alpha, v, mix, _ = self.unpack(theta)
        lap0 = self.lap_values(theta)
        smix = self._smix(mix)

        k_col = np.full(m_cols, k)
        a_col = np.full(m_cols, alpha)
        v_col = np.full(m_cols, v)
        for idx, col_arr in ((0, k_col), (1, a_col), (2, v_col)):
            col_arr[2 * idx] += deltas[idx]
            col_arr[2 * idx + 1] -= deltas[idx]

        mix_cols = []  # (column, correction Laplacian)
        for mi in range(self.n_mix):
            adj_m = self.masks[mi] * self.weight_matrix(theta)
            lap_m = np.diag(adj_m.sum(axis=1)) - adj_m
            par = 3 + mi
            mix_cols.append((2 * par, deltas[par] * lap_m))
            mix_cols.append((2 * par + 1, -deltas[par] * lap_m))

        first_edge_par = 3 + self.n_mix
        e_count = self.n_edges
        if e_count:
            e_par = np.arange(first_edge_par, n_par)
            e_cols = np.concatenate([2 * e_par, 2 * e_par + 1])
            e_rows = np.concatenate([self.rows, self.rows])
            e_js = np.concatenate([self.cols, self.cols])
            scale = smix[self.rows, self.cols]
            e_delta = np.concatenate(
                [deltas[e_par] * scale, -deltas[e_par] * scale]
            )
        else:
            e_cols = e_rows = e_js = e_delta = np.zeros(0, dtype=int)

        pcol = self.p.values[:, None]

        def rhs(c_mat):
            z = lap0 @ c_mat
            if e_count:
                z[e_rows, e_cols] += e_delta * (
                    c_mat[e_rows, e_cols] - c_mat[e_js, e_cols]
                )
            for col, lap_corr in mix_cols:
                z[:, col] += lap_corr @ c_mat[:, col]
            return -k_col * z + a_col * c_mat * (v_col * pcol - c_mat)

        needed = sched["needed"]
        need_ptr = 0
        snaps = np.empty((needed.size, self.d, m_cols))
        c_mat = np.repeat(self.init.c0[:, None], m_cols, axis=1)
        if needed.size and needed[0] == 0:
            snaps[0] = c_mat
            need_ptr = 1
        h = self.h
        for step_idx in range(self.n_steps):
            k1 = rhs(c_mat)
            k2 = rhs(c_mat + 0.5 * h * k1)
            k3 = rhs(c_mat + 0.5 * h * k2)
            k4 = rhs(c_mat + h * k3)
            c_mat = c_mat + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            np.maximum(c_mat, 0.0, out=c_mat)
            if need_ptr < needed.size and needed[need_ptr] == step_idx + 1:
                snaps[need_ptr] = c_mat
                need_ptr += 1

        frac = sched["frac"][:, None, None]
        sampled = snaps[sched["lo"]] * (1.0 - frac) + snaps[sched["hi"]] * frac
        diff = sampled - self.obs[:, :, None]
        losses = np.einsum("sdm,sdm->m", diff, diff)
        losses = np.where(np.isfinite(losses), losses, 1e30)
        return (losses[0::2] - losses[1::2]) / (2.0 * deltas)


def _reachability_warning(cohort: Cohort, support: BinaryGraph,
                          seeds: Sequence[str]) -> str | None:
    """Regions with observable signal that diffusion from the seeds cannot feed."""
    atlas = cohort.atlas
    receives_from = support.mask.T  # receives_from[u, r]: mass at u feeds r
    reached = np.zeros(atlas.count, dtype=bool)
    frontier = [atlas.index_of(s) for s in seeds]
    reached[frontier] = True
    while frontier:
        u = frontier.pop()
        for r in np.nonzero(receives_from[u])[0]:
            if not reached[r]:
                reached[r] = True
                frontier.append(r)
    signal = cohort.stacked_values().max(axis=0) > 1e-6
    dark = np.nonzero(signal & ~reached)[0]
    if dark.size:
        names = [atlas.names[i] for i in dark[:5]]
        more = f" (+{dark.size - 5} more)" if dark.size > 5 else ""
        return (
            f"{dark.size} regions with observed signal are unreachable from "
            f"the seeds on this support: {', '.join(names)}{more}"
        )
    return None


def fit(
    cohort: Cohort,
    kind: ModelKind,
    support: BinaryGraph,
    cfg: OptimizerConfig | None = None,
    validation: Cohort | None = None,
) -> FitState:
    """Alternate staging and descent until the loss improvement stalls.

    Descent moves are accepted only when they strictly reduce the staged
    cohort SSE, so the recorded loss history is non-increasing across
    epochs. Rates and edge weights are projected to stay nonnegative. When a
    ``validation`` cohort is given, its subjects are re-allocated on the
    trajectory after every epoch and their staging loss is recorded, without
    feeding back into the optimization.
    """
    cfg = cfg or OptimizerConfig()
    problem = _Problem(cohort, kind, support, cfg)
    warnings: list[str] = []
    if validation is not None and validation.atlas != cohort.atlas:
        raise DataError("validation cohort atlas does not match")

    reach = _reachability_warning(cohort, support, problem.init.seed_regions)
    if reach:
        warnings.append(reach)
    n_par = 3 + problem.n_mix + problem.n_edges
    if cohort.stacked_values().size <= n_par:
        warnings.append(
            f"weight update is underdetermined: {cohort.stacked_values().size} "
            f"observations for {n_par} parameters"
        )

    theta = problem.project(problem.theta0())
    traj = problem.trajectory(theta)
    if traj is None:
        raise NumericError(
            "initial parameters are unstable at the configured step; reduce "
            "the step or the initial rates"
        )

    history: list[tuple[int, float]] = []
    val_history: list[tuple[int, float]] = []
    stages = stage_cohort(cohort, traj, problem.grid_step)
    prev_loss = float("inf")
    prev_theta = None
    streak = 0
    converged = False

    def track_validation(epoch: int, current_traj: Trajectory) -> None:
        if validation is None or not validation.subjects:
            return
        v_stages = stage_cohort(validation, current_traj, problem.grid_step)
        v_loss = sum(
            _sse_at(s, current_traj, v_stages.onsets[s.id])
            for s in validation.subjects
        )
        val_history.append((epoch, v_loss))

    for epoch in range(1, cfg.max_epochs + 1):
        if epoch > 1:
            traj = problem.trajectory(theta)
            stages = stage_cohort(cohort, traj, problem.grid_step)
        sched = problem.schedule(stages)
        loss_cur = problem.loss_on(traj, sched)
        if epoch == 1:
            # Pre-descent baseline: the loss at the warm start.
            history.append((0, loss_cur))
            prev_loss = loss_cur

        result = minimize(
            fun=lambda th: problem.loss(th, sched),
            x0=theta,
            jac=lambda th: problem.grad(th, sched),
            method="L-BFGS-B",
            bounds=problem.bounds,
            options={"maxiter": cfg.descent_iters, "ftol": 1e-14, "gtol": 1e-12},
        )
        if np.isfinite(result.fun) and result.fun < loss_cur:
            candidate = problem.project(np.asarray(result.x))
            cand_loss = problem.loss(candidate, sched)
            if cand_loss < loss_cur:
                theta, loss_cur = candidate, cand_loss

        # Alternating schemes crawl along curved staging/parameter valleys;
        # over-extrapolating the last accepted epoch-to-epoch move (with a
        # fully re-staged loss check) collapses that zigzag.
        if prev_theta is not None:
            momentum = theta - prev_theta
            if np.abs(momentum).max() > 0:
                for beta in (8.0, 4.0, 2.0, 1.0):
                    cand = problem.project(theta + beta * momentum)
                    cand_traj = problem.trajectory(cand)
                    if cand_traj is None:
                        continue
                    cand_stages = stage_cohort(cohort, cand_traj, problem.grid_step)
                    cand_loss = problem.loss_on(
                        cand_traj, problem.schedule(cand_stages)
                    )
                    if cand_loss < loss_cur:
                        theta, loss_cur = cand, cand_loss
                        break
        prev_theta = theta

        if loss_cur > prev_loss + 1e-9 * max(1.0, prev_loss):
            state = _build_state(
                problem, theta, stages, history, False, warnings, val_history
            )
            raise DivergenceError(
                f"loss increased from {prev_loss} to {loss_cur} at epoch {epoch}",
                state,
            )
        history.append((epoch, loss_cur))
        if validation is not None:
            track_validation(epoch, problem.trajectory(theta))
        rel = (prev_loss - loss_cur) / max(prev_loss, 1e-30)
        streak = streak + 1 if rel < cfg.tolerance else 0
        prev_loss = loss_cur
        if streak >= cfg.patience:
            converged = True
            break

    traj = problem.trajectory(theta)
    stages = stage_cohort(cohort, traj, problem.grid_step)
    return _build_state(
        problem, theta, stages, history, converged, warnings, val_history
    )


def _build_state(problem, theta, stages, history, converged, warnings,
                 val_history=()) -> FitState:
    k, alpha, v, mix, _ = problem.unpack(theta)
    return FitState(
        params=ModelParams(k=k, alpha=alpha, v=v),
        weights=problem.weight_matrix(theta),
        mix=MixWeights(tuple(mix)) if problem.is_mixed else None,
        stages=stages,
        loss_history=tuple(history),
        converged=converged,
        capacity=problem.p,
        warnings=tuple(warnings),
        val_history=tuple(val_history),
    )


def trajectory_from_fit(
    fit_state: FitState, kind: ModelKind, cfg: OptimizerConfig
) -> Trajectory:
    """Rebuild the fitted trajectory from a FitState (deterministic)."""
    current = kind.with_weights(fit_state.weights)
    if fit_state.mix is not None:
        current = current.with_mix(fit_state.mix)
    atlas = kind.atlas
    init = seed_initial(atlas, cfg.resolve_seeds(atlas), cfg.seed_value)
    from .dynamics import integrate

    return integrate(
        current, fit_state.params, fit_state.capacity, init,
        horizon=cfg.horizon, step=cfg.step,
    )


def stage_holdout(
    holdout: Cohort,
    fit_state: FitState,
    kind: ModelKind,
    cfg: OptimizerConfig,
) -> HoldoutResult:
    """Place held-out subjects on the fitted trajectory with frozen parameters.

    ``cfg`` must be the configuration the model was fitted under (an
    artifact's config echo), since it pins the horizon, step, and seeds the
    trajectory is rebuilt with.
    """
    if not holdout.subjects:
        return HoldoutResult(
            stages=StageAssignment({}),
            per_subject_sse={},
            predicted=np.zeros((0, holdout.atlas.count)),
            observed=np.zeros((0, holdout.atlas.count)),
        )
    traj = trajectory_from_fit(fit_state, kind, cfg)
    grid_step = cfg.horizon / cfg.stage_grid
    onsets: dict[str, float] = {}
    per_subject: dict[str, float] = {}
    predicted = []
    observed = []
    for subject in holdout.subjects:
        onset = stage_subject(subject, traj, grid_step)
        onsets[subject.id] = onset
        per_subject[subject.id] = _sse_at(subject, traj, onset)
        for scan in subject.scans:
            predicted.append(
                sample_trajectory(traj, onset + scan.interval_from_first)
            )
            observed.append(scan.values)
    return HoldoutResult(
        stages=StageAssignment(onsets),
        per_subject_sse=per_subject,
        predicted=np.array(predicted),
        observed=np.array(observed),
    )
