"""Doubly reflected backward equations between two optional barriers.

The solver never constructs reflection terms a priori: each backward
transition first solves the unconstrained implicit step, then clamps into
the barrier interval, and the clamped distance *is* the reflection
increment.  Complementarity (the increment acts only where the value sits
on its barrier) and mutual singularity (at most one side acts per
transition) hold by construction; :func:`check_minimality` re-derives them
from the stored solution so a corrupted or reloaded solution cannot pass by
fiat.

Reflection increments on the diffusion transition AFTER(k) -> AT(k+1) are
predictable (per step-k parent) and are paired with the interval values
``(Y, L, U)`` at AFTER(k) — the grid reading of the left-limit pairing in
the minimality condition.  Increments on the phase transition AT(k) ->
AFTER(k) are paired with the values at AT(k).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expectation import (
    BSDESolution,
    Driver,
    TransitionIncrements,
    implicit_step,
    solve_bsde,
)
from .lattice import OptionalProcess, Phase, StoppingTime, TwoPhaseTree

__all__ = [
    "Barriers",
    "RBSDESolution",
    "MinimalityReport",
    "DynamicsReport",
    "Witness",
    "SeparationFailure",
    "TruncationReport",
    "ContinuityAnalogueReport",
    "solve_rbsde",
    "continuity_analogue",
    "check_minimality",
    "verify_dynamics",
    "snell_envelopes",
    "mokobodzki_witness",
    "truncation_scheme",
    "growth_points",
    "clipped_driver",
]


@dataclass
class Barriers:
    """Lower/upper obstacle processes plus the terminal variable.

    Requires ``lower <= upper`` at every (node, phase) and the terminal
    sandwich ``lower_T <= terminal <= upper_T`` on every leaf.
    """

    lower: OptionalProcess
    upper: OptionalProcess
    terminal: np.ndarray

    def __post_init__(self) -> None:
        if not self.lower.tree.same_grid(self.upper.tree):
            raise ValueError("barriers live on different grids")
        self.terminal = np.asarray(self.terminal, dtype=float)
        tree = self.lower.tree
        if self.terminal.shape != (tree.n_leaves,):
            raise ValueError("terminal must have one value per leaf")
        for key in range(2 * tree.n_steps + 1):
            step, ph = key >> 1, key & 1
            lv = (self.lower.at if ph == 0 else self.lower.after)[step]
            uv = (self.upper.at if ph == 0 else self.upper.after)[step]
            bad = np.nonzero(lv > uv)[0]
            if bad.size:
                name = "at" if ph == 0 else "after"
                raise ValueError(f"lower barrier exceeds upper barrier at step {step} "
                                 f"({name}), node {int(bad[0])}")
        if np.any(self.terminal < self.lower.terminal) or np.any(self.terminal > self.upper.terminal):
            raise ValueError("terminal variable leaves the barrier interval at the horizon")

    @property
    def tree(self) -> TwoPhaseTree:
        return self.lower.tree

    def lower_with_terminal(self) -> OptionalProcess:
        """Lower obstacle with the terminal slot replaced by xi."""
        return self.lower.with_terminal(self.terminal)

    def upper_with_terminal(self) -> OptionalProcess:
        return self.upper.with_terminal(self.terminal)

    def restrict(self, step: int, node: int) -> "Barriers":
        stride = self.tree.leaf_stride(step)
        return Barriers(self.lower.restrict(step, node), self.upper.restrict(step, node),
                        self.terminal[node * stride:(node + 1) * stride].copy())


@dataclass
class RBSDESolution:
    """Reflected solution: value, integrand and the two reflection measures."""

    y: OptionalProcess
    z: list[np.ndarray]
    r_plus: TransitionIncrements
    r_minus: TransitionIncrements

    def reflection_drift(self) -> TransitionIncrements:
        """Net signed increments ``dR+ - dR-`` (feedable back to solve_bsde)."""
        return self.r_plus.combine(self.r_minus, sign=-1.0)

    def as_bsde(self) -> BSDESolution:
        return BSDESolution(y=self.y, z=self.z)


def solve_rbsde(tree: TwoPhaseTree, barriers: Barriers, driver: Driver, *,
                step_offset: int = 0, tol_root: float = 1e-12, max_iter: int = 200) -> RBSDESolution:
    """Backward clamped solve of the doubly reflected equation."""
    if not tree.same_grid(barriers.tree):
        raise ValueError("barriers live on a different grid")
    n, dt = tree.n_steps, tree.dt
    low, up = barriers.lower, barriers.upper
    y_at: list[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    y_after: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    zs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    rp_phase = [np.zeros(tree.nodes_at(k)) for k in range(n)]
    rm_phase = [np.zeros(tree.nodes_at(k)) for k in range(n)]
    rp_step = [np.zeros(tree.nodes_at(k)) for k in range(n)]
    rm_step = [np.zeros(tree.nodes_at(k)) for k in range(n)]
    y_at[n] = barriers.terminal.copy()
    for k in range(n - 1, -1, -1):
        nxt = y_at[k + 1]
        e = 0.5 * (nxt[0::2] + nxt[1::2])
        zs[k] = (nxt[0::2] - nxt[1::2]) / (2.0 * tree.sqrt_dt)
        t_k = (step_offset + k) * dt
        unconstrained = implicit_step(e, zs[k], t_k, driver, dt,
                                      tol=tol_root, max_iter=max_iter)
        y_after[k] = np.clip(unconstrained, low.after[k], up.after[k])
        # the increment balances the step at the clamped value, so the
        # driver must be re-read there; off contact both sides stay an
        # exact zero rather than inheriting root-solve noise
        residual = y_after[k] - e - dt * driver(t_k, y_after[k], zs[k])
        rp_step[k] = np.where(y_after[k] > unconstrained, np.maximum(residual, 0.0), 0.0)
        rm_step[k] = np.where(y_after[k] < unconstrained, np.maximum(-residual, 0.0), 0.0)
        y_at[k] = np.clip(y_after[k], low.at[k], up.at[k])
        rp_phase[k] = np.maximum(y_at[k] - y_after[k], 0.0)
        rm_phase[k] = np.maximum(y_after[k] - y_at[k], 0.0)
    return RBSDESolution(
        y=OptionalProcess(tree, y_at, y_after),
        z=zs,
        r_plus=TransitionIncrements(tree, rp_phase, rp_step),
        r_minus=TransitionIncrements(tree, rm_phase, rm_step),
    )


@dataclass
class MinimalityReport:
    passed: bool
    max_product: float
    max_overlap: float
    nonnegative: bool
    violations: list[dict] = field(default_factory=list)


def check_minimality(solution: RBSDESolution, barriers: Barriers, tol_comp: float = 1e-10) -> MinimalityReport:
    """Independent re-check of complementarity and mutual singularity.

    Four products per transition family: the diffusion increments pair with
    the interval values at AFTER(k); the phase increments pair with the
    values at AT(k).  Mutual singularity ``min(dR+, dR-) = 0`` is required
    exactly, not to tolerance.
    """
    tree = solution.y.tree
    low, up = barriers.lower, barriers.upper
    y = solution.y
    worst = 0.0
    overlap = 0.0
    nonneg = solution.r_plus.is_nonnegative() and solution.r_minus.is_nonnegative()
    violations: list[dict] = []

    def record(kind: str, step: int, node: int, value: float) -> None:
        nonlocal worst
        worst = max(worst, abs(value))
        if abs(value) > tol_comp and len(violations) < 32:
            violations.append({"kind": kind, "step": step, "node": node, "value": float(value)})

    for k in range(tree.n_steps):
        prods = {
            "step_lower": (y.after[k] - low.after[k]) * solution.r_plus.step[k],
            "step_upper": (up.after[k] - y.after[k]) * solution.r_minus.step[k],
            "phase_lower": (y.at[k] - low.at[k]) * solution.r_plus.phase[k],
            "phase_upper": (up.at[k] - y.at[k]) * solution.r_minus.phase[k],
        }
        for kind, arr in prods.items():
            j = int(np.argmax(np.abs(arr)))
            record(kind, k, j, float(arr[j]))
        overlap = max(overlap,
                      float(np.max(np.minimum(solution.r_plus.step[k], solution.r_minus.step[k]))),
                      float(np.max(np.minimum(solution.r_plus.phase[k], solution.r_minus.phase[k]))))
    passed = worst <= tol_comp and overlap == 0.0 and nonneg
    return MinimalityReport(passed=passed, max_product=worst, max_overlap=overlap,
                            nonnegative=nonneg, violations=violations)


@dataclass
class DynamicsReport:
    passed: bool
    max_step_residual: float
    max_phase_residual: float
    max_representation_gap: float
    barrier_breach: float
    terminal_gap: float


def verify_dynamics(solution: RBSDESolution, barriers: Barriers, driver: Driver, *,
                    step_offset: int = 0, tol: float = 1e-12) -> DynamicsReport:
    """Residuals of the reflected one-step equations, evaluated directly.

    Works on any stored solution (including one reloaded from a dump), so
    round-trips can be re-verified without re-solving.
    """
    tree = solution.y.tree
    y = solution.y
    step_res = phase_res = rep = 0.0
    for k in range(tree.n_steps):
        nxt = y.at[k + 1]
        e = 0.5 * (nxt[0::2] + nxt[1::2])
        z_implied = (nxt[0::2] - nxt[1::2]) / (2.0 * tree.sqrt_dt)
        rep = max(rep, float(np.max(np.abs(z_implied - solution.z[k]))))
        f_val = driver.fn((step_offset + k) * tree.dt, y.after[k], solution.z[k])
        resid = y.after[k] - e - tree.dt * f_val - solution.r_plus.step[k] + solution.r_minus.step[k]
        step_res = max(step_res, float(np.max(np.abs(resid))))
        presid = y.at[k] - y.after[k] - solution.r_plus.phase[k] + solution.r_minus.phase[k]
        phase_res = max(phase_res, float(np.max(np.abs(presid))))
    breach = max(barriers.lower.max_exceedance(y), y.max_exceedance(barriers.upper))
    terminal_gap = float(np.max(np.abs(y.terminal - barriers.terminal)))
    passed = max(step_res, phase_res, rep, breach, terminal_gap) <= tol
    return DynamicsReport(passed=passed, max_step_residual=step_res, max_phase_residual=phase_res,
                          max_representation_gap=rep, barrier_breach=max(breach, 0.0),
                          terminal_gap=terminal_gap)


def snell_envelopes(tree: TwoPhaseTree, barriers: Barriers) -> tuple[OptionalProcess, OptionalProcess]:
    """Smallest supermartingale above -L and above U, under the plain
    (driverless) expectation: the lower envelope minimises over stopping
    points, the upper one maximises.  Phase points participate: the AT
    envelope also sees the interval slot of the same step."""
    low, up = barriers.lower, barriers.upper
    n = tree.n_steps
    lhat_at: list[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    lhat_after: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    uhat_at: list[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    uhat_after: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    lhat_at[n] = low.at[n].copy()
    uhat_at[n] = up.at[n].copy()
    for k in range(n - 1, -1, -1):
        le = 0.5 * (lhat_at[k + 1][0::2] + lhat_at[k + 1][1::2])
        ue = 0.5 * (uhat_at[k + 1][0::2] + uhat_at[k + 1][1::2])
        lhat_after[k] = np.minimum(low.after[k], le)
        uhat_after[k] = np.maximum(up.after[k], ue)
        lhat_at[k] = np.minimum(low.at[k], lhat_after[k])
        uhat_at[k] = np.maximum(up.at[k], uhat_after[k])
    return OptionalProcess(tree, lhat_at, lhat_after), OptionalProcess(tree, uhat_at, uhat_after)


@dataclass(frozen=True)
class SeparationFailure:
    """Strict separation fails at this point (lower >= upper)."""

    step: int
    phase: Phase
    node: int
    lower: float
    upper: float


@dataclass
class Witness:
    """Midpoint semimartingale lying between the barriers, plus its cut times."""

    x: OptionalProcess
    cut_times: list[StoppingTime]


def mokobodzki_witness(tree: TwoPhaseTree, barriers: Barriers) -> Witness | SeparationFailure:
    """Construct the piecewise-midpoint process between strictly separated
    barriers, or report the first point where strict separation fails.

    Cut times restart the anchor: the process holds the interval midpoint
    ``(L + U)/2`` read just after the previous cut until that anchor first
    exits the moving band strictly; each cut point itself takes the local
    midpoint.  The horizon always takes the local midpoint.
    """
    low, up = barriers.lower, barriers.upper
    n = tree.n_steps
    for key in range(2 * n + 1):
        step, ph = key >> 1, key & 1
        lv = low.at[step] if ph == 0 else low.after[step]
        uv = up.at[step] if ph == 0 else up.after[step]
        bad = np.nonzero(lv >= uv)[0]
        if bad.size:
            j = int(bad[0])
            return SeparationFailure(step=step, phase=Phase(ph), node=j,
                                     lower=float(lv[j]), upper=float(uv[j]))
    x_at = [np.full(tree.nodes_at(k), np.nan) for k in range(n + 1)]
    x_after = [np.full(tree.nodes_at(k), np.nan) for k in range(n)]
    cut_keys: list[list[int]] = []
    for leaf in range(tree.n_leaves):
        anchor = math.nan
        cuts: list[int] = []
        for key in range(2 * n + 1):
            step, ph = key >> 1, key & 1
            node = leaf >> (n - step)
            lv = float((low.at if ph == 0 else low.after)[step][node])
            uv = float((up.at if ph == 0 else up.after)[step][node])
            is_cut = key == 0 or key == 2 * n or anchor < lv or anchor > uv
            if is_cut:
                val = 0.5 * (lv + uv)
                cuts.append(key)
                if step < n:
                    anchor = 0.5 * (float(low.after[step][node]) + float(up.after[step][node]))
            else:
                val = anchor
            (x_at if ph == 0 else x_after)[step][node] = val
        cut_keys.append(cuts)
    x = OptionalProcess(tree, x_at, x_after)
    if not (low.pointwise_leq(x) and x.pointwise_leq(up)):  # pragma: no cover - construction guarantees it
        raise AssertionError("witness left the barrier band")
    max_cuts = max(len(c) for c in cut_keys)
    cut_times = []
    for i in range(max_cuts):
        keys = np.array([c[i] if i < len(c) else 2 * n for c in cut_keys], dtype=np.int64)
        cut_times.append(StoppingTime.from_realized(tree, keys >> 1, keys & 1))
    return Witness(x=x, cut_times=cut_times)


def growth_points(incr: TransitionIncrements, tol: float = 0.0) -> OptionalProcess:
    """Indicator process of reflection growth, attributed to each
    transition's left endpoint: phase increments flag AT(k), diffusion
    increments flag AFTER(k)."""
    tree = incr.tree
    at = [np.asarray(incr.phase[k] > tol, dtype=float) for k in range(tree.n_steps)]
    at.append(np.zeros(tree.n_leaves))
    after = [np.asarray(incr.step[k] > tol, dtype=float) for k in range(tree.n_steps)]
    return OptionalProcess(tree, at, after)


@dataclass
class ContinuityAnalogueReport:
    """Jump behaviour of Y across reflection-growth transitions.

    A diffusion-transition growth of R+ pins Y to the lower barrier on the
    interval slot (``step_contact_*``, restating minimality).  When the
    lower barrier is left-USC across the following grid time, Y cannot jump
    downward over that transition (``downward_jump_lower``); symmetric for
    R- and a left-LSC upper barrier with upward jumps.  The jump checks are
    only accumulated on edges where the needed one-sided inequality holds,
    so the report stays meaningful on barriers with mixed regularity;
    ``*_edges_checked`` counts how many growth edges that covered.
    """

    passed: bool
    step_contact_lower: float
    step_contact_upper: float
    downward_jump_lower: float
    upward_jump_upper: float
    lower_edges_checked: int
    upper_edges_checked: int


def continuity_analogue(solution: RBSDESolution, barriers: Barriers,
                        tol: float = 1e-12) -> ContinuityAnalogueReport:
    """Check the no-jump consequences of minimality at growth transitions."""
    tree = solution.y.tree
    y, low, up = solution.y, barriers.lower, barriers.upper
    contact_l = contact_u = 0.0
    down_l = up_u = 0.0
    n_l = n_u = 0
    for k in range(tree.n_steps):
        grow_p = solution.r_plus.step[k] > 0.0
        grow_m = solution.r_minus.step[k] > 0.0
        if grow_p.any():
            contact_l = max(contact_l, float(np.max(np.abs(y.after[k] - low.after[k])[grow_p])))
        if grow_m.any():
            contact_u = max(contact_u, float(np.max(np.abs(up.after[k] - y.after[k])[grow_m])))
        # edge-wise left-semicontinuity: parent interval value vs child value
        l_parent = np.repeat(low.after[k], 2)
        u_parent = np.repeat(up.after[k], 2)
        l_usc_edge = l_parent <= low.at[k + 1]
        u_lsc_edge = u_parent >= up.at[k + 1]
        gp = np.repeat(grow_p, 2) & l_usc_edge
        gm = np.repeat(grow_m, 2) & u_lsc_edge
        if gp.any():
            n_l += int(gp.sum())
            drop = np.repeat(y.after[k], 2) - y.at[k + 1]
            down_l = max(down_l, float(np.max(drop[gp])))
        if gm.any():
            n_u += int(gm.sum())
            rise = y.at[k + 1] - np.repeat(y.after[k], 2)
            up_u = max(up_u, float(np.max(rise[gm])))
    passed = max(contact_l, contact_u, down_l, up_u) <= tol
    return ContinuityAnalogueReport(passed=passed, step_contact_lower=contact_l,
                                    step_contact_upper=contact_u,
                                    downward_jump_lower=max(down_l, 0.0),
                                    upward_jump_upper=max(up_u, 0.0),
                                    lower_edges_checked=n_l, upper_edges_checked=n_u)


def clipped_driver(driver: Driver, lower_level: float, upper_level: float) -> Driver:
    """``max(min(f, upper_level), -lower_level)``: the truncation grid member.

    Clipping is monotone and 1-Lipschitz, so the z-Lipschitz constant
    carries over and the monotonicity constant can only move toward zero.
    """
    lo, hi = -float(lower_level), float(upper_level)
    if lo > hi:
        raise ValueError("empty truncation band")
    base = driver.fn
    return Driver(fn=lambda t, y, z: np.clip(base(t, y, z), lo, hi),
                  lambda_z=driver.lambda_z, mu=max(driver.mu, 0.0),
                  tag=f"{driver.tag}|clip[{lo:g},{hi:g}]")


@dataclass
class TruncationReport:
    n_max: int
    m_max: int
    cut_step: int | None
    monotone_n_violation: float
    monotone_m_violation: float
    limit_gap: float
    n_gaps: list[float]
    m_gaps: list[float]
    passed: bool
    y_limit: OptionalProcess
    reference: RBSDESolution


def _swapped_barrier(original: OptionalProcess, envelope: OptionalProcess, threshold_key: int) -> OptionalProcess:
    """Original values up to the cut (inclusive), envelope values after."""
    tree = original.tree
    at = [(original.at[k] if 2 * k <= threshold_key else envelope.at[k]).copy() for k in range(tree.n_steps + 1)]
    after = [(original.after[k] if 2 * k + 1 <= threshold_key else envelope.after[k]).copy() for k in range(tree.n_steps)]
    return OptionalProcess(tree, at, after)


def truncation_scheme(tree: TwoPhaseTree, barriers: Barriers, driver: Driver,
                      n_max: int | None = None, m_max: int | None = None,
                      cut_step: int | None = None, *, tol_conv: float = 1e-8,
                      tol_mono: float = 1e-10, tol_root: float = 1e-12,
                      max_iter: int = 200) -> TruncationReport:
    """Monotone approximation grid: clipped drivers and envelope-swapped
    barriers, climbing to the reflected solution.

    ``Y^{n,m}`` uses driver ``max(min(f, n), -m)``; it must be nondecreasing
    in ``n`` and nonincreasing in ``m`` pointwise, and the corner
    ``Y^{n_max, m_max}`` (the sup-inf limit on this finite grid) must match
    the directly solved reference.  Levels default to just beyond the range
    the driver actually attains on the reference solution, which makes the
    top corner exact.  ``cut_step`` forces artificial barrier cuts: stage
    ``j`` keeps the true barriers up to step ``min(cut_step * j, N)`` and
    swaps to the one-sided envelopes beyond, exercising the swap path while
    leaving the limit unchanged.  Non-monotonicity beyond tolerance is a
    solver bug, so it fails the report rather than raising.
    """
    reference = solve_rbsde(tree, barriers, driver, tol_root=tol_root, max_iter=max_iter)
    if n_max is None or m_max is None:
        fmax = 0.0
        for k in range(tree.n_steps):
            fmax = max(fmax, float(np.max(np.abs(driver.fn(tree.time(k), reference.y.after[k], reference.z[k])))))
        level = max(2, int(np.ceil(fmax)) + 1)
        if cut_step is not None:
            # the artificial barrier cuts must reach the horizon by the
            # last stage, else the corner stays short of the reference
            level = max(level, -(-tree.n_steps // cut_step))
        n_max = level if n_max is None else n_max
        m_max = level if m_max is None else m_max
    if n_max < 1 or m_max < 1:
        raise ValueError("truncation levels must be >= 1")
    if cut_step is not None and cut_step < 1:
        raise ValueError("cut_step must be >= 1")
    lhat, uhat = snell_envelopes(tree, barriers)

    def threshold(stage: int) -> int:
        if cut_step is None:
            return 2 * tree.n_steps
        return 2 * min(cut_step * stage, tree.n_steps)

    grid: list[list[OptionalProcess]] = []
    for i in range(1, n_max + 1):
        row = []
        low_i = _swapped_barrier(barriers.lower, lhat, threshold(i))
        for j in range(1, m_max + 1):
            up_j = _swapped_barrier(barriers.upper, uhat, threshold(j))
            bij = Barriers(low_i, up_j, barriers.terminal)
            sol = solve_rbsde(tree, bij, clipped_driver(driver, j, i), tol_root=tol_root, max_iter=max_iter)
            row.append(sol.y)
        grid.append(row)
    mono_n = 0.0
    mono_m = 0.0
    for i in range(n_max):
        for j in range(m_max):
            if i + 1 < n_max:
                mono_n = max(mono_n, grid[i][j].max_exceedance(grid[i + 1][j]))
            if j + 1 < m_max:
                mono_m = max(mono_m, grid[i][j + 1].max_exceedance(grid[i][j]))
    y_limit = grid[n_max - 1][m_max - 1]
    limit_gap = y_limit.sup_abs_diff(reference.y)
    n_gaps = [grid[i][m_max - 1].sup_abs_diff(y_limit) for i in range(n_max)]
    m_gaps = [grid[n_max - 1][j].sup_abs_diff(y_limit) for j in range(m_max)]
    passed = mono_n <= tol_mono and mono_m <= tol_mono and limit_gap <= tol_conv
    return TruncationReport(n_max=n_max, m_max=m_max, cut_step=cut_step,
                            monotone_n_violation=mono_n, monotone_m_violation=mono_m,
                            limit_gap=limit_gap, n_gaps=n_gaps, m_gaps=m_gaps,
                            passed=passed, y_limit=y_limit, reference=reference)
