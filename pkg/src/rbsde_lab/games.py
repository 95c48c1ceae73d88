"""Nonlinear Dynkin games resolved by brute force.

Two strategy classes share one payoff convention.  A *plain* strategy stops
at grid times only and the payoff reads the barrier at the stop.  An
*extended* strategy carries a membership bit: on the member atoms the
barrier is read at the stop, off them it is read as the one-sided right
limit (the interval slot).  Extended strategies are enumerated directly as
phase-resolved stop vectors — stopping "just after" t_k is the same data as
stopping at the AFTER(k) point — which keeps the census exact: 3, 11, 123
per player at depths 1, 2, 3.

Payoff branches compare real stop times (step indices), never phases: two
stops in the same step tie, and the tie goes to the lower-barrier player.
The driver acts up to the earlier stop; the phase of that stop is
irrelevant to it because an open interval entered for an instant carries no
dt-mass.

Values are computed per theta-atom: the subgame below a node is a fresh
game on the remaining depth, so conditional values come from restricting
barriers and offsetting driver time, never from re-weighting paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .expectation import (
    Driver,
    EnumerationBoundError,
    constant_driver,
    ef_backward_batch,
    _gather_process,
)
from .lattice import (
    HittingResult,
    OptionalProcess,
    SemicontinuityFlags,
    StoppingSystem,
    StoppingTime,
    TwoPhaseTree,
    build_tree,
    enumerate_stopping_times,
    eval_lower,
    eval_upper,
    first_hitting,
    semicontinuity,
)
from .reflect import Barriers, RBSDESolution, growth_points, solve_rbsde

__all__ = [
    "PayoffSpec",
    "GameValues",
    "ThetaCheck",
    "GameCheck",
    "EpsilonSaddle",
    "SaddleReport",
    "payoff_extended",
    "payoff_plain",
    "brute_force_values",
    "game_value_at",
    "value_identity_applicable",
    "game_equals_rbsde",
    "epsilon_saddle",
    "saddle_points",
    "right_jump_counterexample",
]


@dataclass
class PayoffSpec:
    """A game instance: obstacles, terminal variable, driver, and the
    evaluation time (defaults to time zero when None)."""

    barriers: Barriers
    driver: Driver
    theta: StoppingTime | None = None


def payoff_extended(barriers: Barriers, rho_tau: StoppingSystem, rho_sigma: StoppingSystem) -> np.ndarray:
    """Per-leaf payoff of an extended strategy pair.

    The maximiser collects the lower barrier (upper one-sided reading off
    the member set), the minimiser pays the upper barrier (lower reading),
    ties on the stop step go to the maximiser, and a joint stop at the
    horizon pays the terminal variable.
    """
    tree = barriers.tree
    if not (tree.same_grid(rho_tau.tau.tree) and tree.same_grid(rho_sigma.tau.tree)):
        raise ValueError("stopping systems live on a different grid")
    n = tree.n_steps
    ts, ss = rho_tau.tau.steps, rho_sigma.tau.steps
    lower_read = eval_upper(barriers.lower, rho_tau)
    upper_read = eval_lower(barriers.upper, rho_sigma)
    return np.where((ts <= ss) & (ts < n), lower_read,
                    np.where(ss < ts, upper_read, barriers.terminal))


def payoff_plain(barriers: Barriers, tau: StoppingTime, sigma: StoppingTime) -> np.ndarray:
    """Per-leaf payoff for plain (grid-time) strategies: barriers are read
    exactly at the stop, with the same branch rules as the extended game."""
    for stop in (tau, sigma):
        if not stop.always_at_phase():
            raise ValueError("plain strategies must stop at grid times")
    member = np.ones(barriers.tree.n_leaves, dtype=bool)
    return payoff_extended(barriers, StoppingSystem(tau, member), StoppingSystem(sigma, member))


def _payoff_tensor(sub_barriers: Barriers, tau_steps: np.ndarray, tau_phases: np.ndarray,
                   sigma_steps: np.ndarray, sigma_phases: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Payoff J and the freeze step min(tau, sigma) for every strategy pair.

    Returns (S_tau, S_sigma, n_leaves) arrays.  The phase of a stop picks
    the slot that is read (AT value on the member side, interval value off
    it); the branch itself only sees steps.
    """
    n = sub_barriers.tree.n_steps
    low_read = _gather_process(sub_barriers.lower, 2 * tau_steps + tau_phases)
    up_read = _gather_process(sub_barriers.upper, 2 * sigma_steps + sigma_phases)
    ts = tau_steps[:, None, :]
    ss = sigma_steps[None, :, :]
    j = np.where((ts <= ss) & (ts < n), low_read[:, None, :],
                 np.where(ss < ts, up_read[None, :, :],
                          sub_barriers.terminal[None, None, :]))
    return j, np.minimum(ts, ss)


def _root_values(subtree: TwoPhaseTree, driver: Driver, j: np.ndarray, min_steps: np.ndarray,
                 step_offset: int, tol_root: float, max_iter: int) -> np.ndarray:
    """Game expectation at the subgame root for every strategy pair."""
    s_tau, s_sigma, p = j.shape
    term = j.reshape(s_tau * s_sigma, p)
    flat = np.broadcast_to(min_steps, j.shape).reshape(s_tau * s_sigma, p)
    masks = [flat[:, ::subtree.leaf_stride(k)] >= k + 1 for k in range(subtree.n_steps)]
    vals = ef_backward_batch(subtree, driver, term, masks, step_offset=step_offset,
                             tol_root=tol_root, max_iter=max_iter)
    return vals[0][:, 0].reshape(s_tau, s_sigma)


def _guard_depth(depth: int, enum_bound: int) -> None:
    if depth > enum_bound:
        raise EnumerationBoundError(
            f"enumeration bound exceeded: subgame depth {depth} > {enum_bound}; strategy "
            "counts grow doubly exponentially — use the reflected-solver identity "
            "(solve_rbsde) for values on deeper trees")


@dataclass
class GameValues:
    """Brute-force minimax data for one subgame."""

    upper: float
    lower: float
    n_tau: int
    n_sigma: int
    matrix: np.ndarray

    @property
    def gap(self) -> float:
        return self.upper - self.lower


def brute_force_values(tree: TwoPhaseTree, barriers: Barriers, driver: Driver, *,
                       mode: str = "extended", theta_step: int = 0, theta_node: int = 0,
                       enum_bound: int = 3, tol_root: float = 1e-12,
                       max_iter: int = 200) -> GameValues:
    """Upper (min-max) and lower (max-min) values over every strategy pair.

    ``theta`` must be a grid-time node strictly before the horizon (the
    horizon subgame has no choices left).
    """
    if mode not in ("extended", "plain"):
        raise ValueError(f"unknown game mode {mode!r}")
    _guard_depth(tree.n_steps - theta_step, enum_bound)
    subtree = tree.subtree(theta_step)
    sub_b = barriers.restrict(theta_step, theta_node)
    steps, phases = enumerate_stopping_times(subtree, phase_resolved=mode == "extended")
    j, ms = _payoff_tensor(sub_b, steps, phases, steps, phases)
    matrix = _root_values(subtree, driver, j, ms, theta_step, tol_root, max_iter)
    return GameValues(upper=float(matrix.max(axis=0).min()),
                      lower=float(matrix.min(axis=1).max()),
                      n_tau=steps.shape[0], n_sigma=steps.shape[0], matrix=matrix)


def game_value_at(tree: TwoPhaseTree, barriers: Barriers, driver: Driver, theta: StoppingTime, *,
                  mode: str = "extended", enum_bound: int = 3, tol_root: float = 1e-12,
                  max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Per-leaf (upper, lower) game values at a grid-time stopping time.

    Conditional values compose atom-wise: each theta-atom is its own
    subgame, so the arrays are filled one stop node at a time.  Horizon
    atoms have no game left and take the terminal variable.
    """
    if not theta.always_at_phase():
        raise ValueError("theta must stop at grid times")
    upper = np.empty(tree.n_leaves)
    lower = np.empty(tree.n_leaves)
    nodes = theta.stop_nodes()
    seen: set[tuple[int, int]] = set()
    for leaf in range(tree.n_leaves):
        step, node = int(theta.steps[leaf]), int(nodes[leaf])
        if (step, node) in seen:
            continue
        seen.add((step, node))
        stride = tree.leaf_stride(step)
        sl = slice(node * stride, (node + 1) * stride)
        if step == tree.n_steps:
            upper[sl] = lower[sl] = barriers.terminal[sl]
            continue
        gv = brute_force_values(tree, barriers, driver, mode=mode, theta_step=step,
                                theta_node=node, enum_bound=enum_bound,
                                tol_root=tol_root, max_iter=max_iter)
        upper[sl] = gv.upper
        lower[sl] = gv.lower
    return upper, lower


@dataclass
class ThetaCheck:
    step: int
    node: int
    y: float
    extended_upper: float
    extended_lower: float
    plain_upper: float | None = None
    plain_lower: float | None = None


@dataclass
class GameCheck:
    """Game values against the reflected solution at every checkable node."""

    solution: RBSDESolution
    checks: list[ThetaCheck]
    max_extended_gap: float
    passed_extended: bool
    max_plain_internal_gap: float | None = None
    max_plain_to_y_gap: float | None = None
    identity_applicable: bool = True


def value_identity_applicable(barriers: Barriers) -> bool:
    """True when the lower barrier's interval value never exceeds the upper
    barrier at the grid time opening that interval.

    Where ``lower.after[k] > upper.at[k]`` the maximizer can stop just after
    t_k and collect more than the minimizer can ever defend: the minimizer's
    best reply is to stop at t_k itself, but a same-step tie pays the lower
    barrier, so the extended values detach upward from the reflected
    solution wherever its step value was pulled down to ``upper.at``.  With
    the comparison below holding everywhere, the tie read is defendable and
    both extended values coincide with the reflected solution.
    """
    low, up = barriers.lower, barriers.upper
    return all(bool(np.all(low.after[k] <= up.at[k]))
               for k in range(low.tree.n_steps))


def game_equals_rbsde(tree: TwoPhaseTree, barriers: Barriers, driver: Driver, *,
                      include_plain: bool = False, enum_bound: int = 3,
                      tol_game: float = 1e-8, tol_root: float = 1e-12,
                      max_iter: int = 200) -> GameCheck:
    """Verify that both extended game values coincide with Y at every grid
    node whose subgame depth fits under the enumeration bound.

    The identity is only promised on barrier pairs that pass
    :func:`value_identity_applicable`; the check still runs on the others
    (the recorded gap is honest either way) and the report carries the
    applicability bit so a failure can be told apart from a detachment.

    With ``include_plain`` the plain values are recorded as well.  They are
    not asserted against Y: the plain game always has a value on this grid
    (classical finite dynamic programming), but that value can sit strictly
    away from Y, and it does exactly that whenever reaching Y requires
    stopping on an interval slot — see :func:`right_jump_counterexample`.
    """
    sol = solve_rbsde(tree, barriers, driver, tol_root=tol_root, max_iter=max_iter)
    checks: list[ThetaCheck] = []
    ext_gap = 0.0
    plain_internal = 0.0 if include_plain else None
    plain_to_y = 0.0 if include_plain else None
    for k in range(max(0, tree.n_steps - enum_bound), tree.n_steps):
        for node in range(tree.nodes_at(k)):
            y = float(sol.y.at[k][node])
            ext = brute_force_values(tree, barriers, driver, mode="extended", theta_step=k,
                                     theta_node=node, enum_bound=enum_bound,
                                     tol_root=tol_root, max_iter=max_iter)
            ext_gap = max(ext_gap, abs(ext.upper - y), abs(ext.lower - y))
            row = ThetaCheck(step=k, node=node, y=y,
                             extended_upper=ext.upper, extended_lower=ext.lower)
            if include_plain:
                plain = brute_force_values(tree, barriers, driver, mode="plain", theta_step=k,
                                           theta_node=node, enum_bound=enum_bound,
                                           tol_root=tol_root, max_iter=max_iter)
                row.plain_upper, row.plain_lower = plain.upper, plain.lower
                plain_internal = max(plain_internal, plain.gap)  # type: ignore[arg-type]
                plain_to_y = max(plain_to_y, abs(plain.upper - y), abs(plain.lower - y))  # type: ignore[arg-type]
            checks.append(row)
    return GameCheck(solution=sol, checks=checks, max_extended_gap=ext_gap,
                     passed_extended=ext_gap <= tol_game,
                     max_plain_internal_gap=plain_internal,
                     max_plain_to_y_gap=plain_to_y,
                     identity_applicable=value_identity_applicable(barriers))


def _hit_system(tree: TwoPhaseTree, hit: HittingResult) -> StoppingSystem:
    """Canonical system of a first-hitting point: an AFTER(k) hit becomes
    the grid stop AT(k) with the membership bit cleared."""
    steps = hit.stop.steps
    tau = StoppingTime.from_realized(tree, steps, np.zeros_like(steps))
    return StoppingSystem(tau, hit.stop.phases == 0)


def _stopped_mass(incr, stop: StoppingTime) -> np.ndarray:
    """Per-leaf reflection mass accumulated by the stop (transitions whose
    right endpoint lies at or before it)."""
    tree = incr.tree
    keys = stop.keys
    total = np.zeros(tree.n_leaves)
    for k in range(tree.n_steps):
        total += tree.spread(incr.phase[k], k) * (keys >= 2 * k + 1)
        total += tree.spread(incr.step[k], k) * (keys >= 2 * (k + 1))
    return total


@dataclass
class EpsilonSaddle:
    """An epsilon-optimal pair built from barrier proximity, with evidence.

    ``residual_up`` is how far the maximiser falls short of the reflected
    value when committed to ``tau`` against a worst-case opponent (clipped
    at zero); ``residual_down`` mirrors it.  Both are exhaustive over the
    opponent's strategies when ``opponents_checked``.  ``hit_gap_*`` and
    ``reflection_mass_*`` re-check the two structural facts the pair is
    built on: the barrier is within epsilon at the stop, and no reflection
    acts strictly inside the stopped interval.
    """

    epsilon: float
    y_theta: float
    tau: StoppingSystem
    sigma: StoppingSystem
    pair_value: float
    residual_up: float
    residual_down: float
    hit_gap_lower: float
    hit_gap_upper: float
    reflection_mass_lower: float
    reflection_mass_upper: float
    opponents_checked: bool


def epsilon_saddle(tree: TwoPhaseTree, barriers: Barriers, driver: Driver, epsilon: float, *,
                   theta_step: int = 0, theta_node: int = 0, enum_bound: int = 3,
                   check_opponents: bool = True, tol_root: float = 1e-12,
                   max_iter: int = 200) -> EpsilonSaddle:
    """Construct the epsilon-saddle pair at a node and measure its slack.

    The maximiser stops on first entry of Y into the epsilon-neighbourhood
    of the terminal-patched lower barrier; entry on an interval slot is
    realised as the grid stop with the membership bit cleared.  The
    minimiser is symmetric about the upper barrier.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    subtree = tree.subtree(theta_step)
    sub_b = barriers.restrict(theta_step, theta_node)
    sol = solve_rbsde(subtree, sub_b, driver, step_offset=theta_step,
                      tol_root=tol_root, max_iter=max_iter)
    lxi = sub_b.lower_with_terminal()
    uxi = sub_b.upper_with_terminal()
    tau_hit = first_hitting(OptionalProcess.combine(
        lambda y, l: (y <= l + epsilon).astype(float), sol.y, lxi))
    sigma_hit = first_hitting(OptionalProcess.combine(
        lambda y, u: (y >= u - epsilon).astype(float), sol.y, uxi))
    # the terminal slot satisfies both conditions, so the scans always hit
    assert tau_hit.hit.all() and sigma_hit.hit.all()
    y_theta = float(sol.y.at[0][0])

    y_at_tau = _gather_process(sol.y, tau_hit.stop.keys)[0]
    l_at_tau = _gather_process(lxi, tau_hit.stop.keys)[0]
    hit_gap_lower = max(0.0, float(np.max(y_at_tau - l_at_tau - epsilon)))
    y_at_sigma = _gather_process(sol.y, sigma_hit.stop.keys)[0]
    u_at_sigma = _gather_process(uxi, sigma_hit.stop.keys)[0]
    hit_gap_upper = max(0.0, float(np.max(u_at_sigma - epsilon - y_at_sigma)))
    mass_lower = float(np.max(_stopped_mass(sol.r_plus, tau_hit.stop)))
    mass_upper = float(np.max(_stopped_mass(sol.r_minus, sigma_hit.stop)))

    t_steps, t_phases = tau_hit.stop.steps[None, :], tau_hit.stop.phases[None, :]
    s_steps, s_phases = sigma_hit.stop.steps[None, :], sigma_hit.stop.phases[None, :]
    j, ms = _payoff_tensor(sub_b, t_steps, t_phases, s_steps, s_phases)
    pair_value = float(_root_values(subtree, driver, j, ms, theta_step, tol_root, max_iter)[0, 0])

    residual_up = residual_down = float("nan")
    opponents_checked = False
    if check_opponents:
        _guard_depth(subtree.n_steps, enum_bound)
        steps, phases = enumerate_stopping_times(subtree, phase_resolved=True)
        j_up, ms_up = _payoff_tensor(sub_b, t_steps, t_phases, steps, phases)
        worst_sigma = _root_values(subtree, driver, j_up, ms_up, theta_step, tol_root, max_iter).min()
        residual_up = max(0.0, y_theta - float(worst_sigma))
        j_dn, ms_dn = _payoff_tensor(sub_b, steps, phases, s_steps, s_phases)
        worst_tau = _root_values(subtree, driver, j_dn, ms_dn, theta_step, tol_root, max_iter).max()
        residual_down = max(0.0, float(worst_tau) - y_theta)
        opponents_checked = True

    return EpsilonSaddle(epsilon=epsilon, y_theta=y_theta,
                         tau=_hit_system(subtree, tau_hit), sigma=_hit_system(subtree, sigma_hit),
                         pair_value=pair_value, residual_up=residual_up,
                         residual_down=residual_down, hit_gap_lower=hit_gap_lower,
                         hit_gap_upper=hit_gap_upper, reflection_mass_lower=mass_lower,
                         reflection_mass_upper=mass_upper, opponents_checked=opponents_checked)


@dataclass
class SaddleReport:
    """Exact optimal stops and the identities binding them to the solution.

    Two candidate pairs are reported.  The *contact* pair enters on first
    touch of the (terminal-patched) barrier; the *action* pair enters on
    first growth of the matching reflection measure, attributed to the
    transition's left endpoint.  On this grid the contact stop never comes
    later than the action stop, and the barrier is touched exactly where
    reflection acts; both are checked, not assumed.

    Residuals are exhaustive over the opponent's strategies: ``*_up`` is
    the maximiser's shortfall below the reflected value when committed to
    the pair's tau, ``*_down`` the minimiser's overshoot, both clipped at
    zero.  Extended-game residuals are always computed.  Plain-game
    residuals (grid-time opponents, on-time barrier reads) are only
    meaningful when the barriers have the one-sided regularity that keeps
    optimal stops on grid times; otherwise they are skipped with a warning.
    """

    y_theta: float
    tau_star: StoppingSystem
    sigma_star: StoppingSystem
    tau_bar: StoppingTime
    sigma_bar: StoppingTime
    tau_bar_attained: np.ndarray
    sigma_bar_attained: np.ndarray
    order_tau_ok: bool
    order_sigma_ok: bool
    star_contact_lower: float
    star_contact_upper: float
    bar_contact_lower: float
    bar_contact_upper: float
    star_extended_up: float
    star_extended_down: float
    bar_extended_up: float
    bar_extended_down: float
    lower_flags: SemicontinuityFlags
    upper_flags: SemicontinuityFlags
    star_plain_up: float | None = None
    star_plain_down: float | None = None
    bar_plain_up: float | None = None
    bar_plain_down: float | None = None
    epsilon_saddles: list[EpsilonSaddle] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def residuals(self) -> list[float]:
        out = [self.star_extended_up, self.star_extended_down,
               self.bar_extended_up, self.bar_extended_down]
        out += [r for r in (self.star_plain_up, self.star_plain_down,
                            self.bar_plain_up, self.bar_plain_down) if r is not None]
        return out

    def passed(self, tol_game: float) -> bool:
        ok = (self.order_tau_ok and self.order_sigma_ok
              and self.star_contact_lower <= tol_game and self.star_contact_upper <= tol_game
              and self.bar_contact_lower <= tol_game and self.bar_contact_upper <= tol_game)
        return ok and all(r <= tol_game for r in self.residuals() if not np.isnan(r))


def saddle_points(tree: TwoPhaseTree, barriers: Barriers, driver: Driver, *,
                  theta_step: int = 0, theta_node: int = 0, enum_bound: int = 3,
                  check_opponents: bool = True, epsilons: tuple[float, ...] = (),
                  tol_root: float = 1e-12, max_iter: int = 200) -> SaddleReport:
    """First-contact and first-action stops of the reflected solution,
    verified against every opposing strategy when the depth permits."""
    subtree = tree.subtree(theta_step)
    sub_b = barriers.restrict(theta_step, theta_node)
    sol = solve_rbsde(subtree, sub_b, driver, step_offset=theta_step,
                      tol_root=tol_root, max_iter=max_iter)
    lxi = sub_b.lower_with_terminal()
    uxi = sub_b.upper_with_terminal()
    y_theta = float(sol.y.at[0][0])

    tau_star_hit = first_hitting(OptionalProcess.combine(
        lambda y, l: (np.abs(y - l) <= tol_root).astype(float), sol.y, lxi))
    sigma_star_hit = first_hitting(OptionalProcess.combine(
        lambda y, u: (np.abs(y - u) <= tol_root).astype(float), sol.y, uxi))
    assert tau_star_hit.hit.all() and sigma_star_hit.hit.all()
    tau_bar_hit = first_hitting(growth_points(sol.r_plus))
    sigma_bar_hit = first_hitting(growth_points(sol.r_minus))

    order_tau = bool(np.all(tau_star_hit.stop.keys <= tau_bar_hit.stop.keys))
    order_sigma = bool(np.all(sigma_star_hit.stop.keys <= sigma_bar_hit.stop.keys))

    def contact_gap(hit: HittingResult, barrier: OptionalProcess, everywhere: bool) -> float:
        if not (everywhere or hit.hit.any()):
            return 0.0
        y_read = _gather_process(sol.y, hit.stop.keys)[0]
        b_read = _gather_process(barrier, hit.stop.keys)[0]
        gaps = np.abs(y_read - b_read)
        return float(np.max(gaps if everywhere else gaps[hit.hit]))

    # the star stops satisfy their condition on every leaf (the terminal
    # slot of the patched barrier is a guaranteed hit); the bar stops touch
    # only where growth was actually attained
    star_contact_lower = contact_gap(tau_star_hit, lxi, True)
    star_contact_upper = contact_gap(sigma_star_hit, uxi, True)
    bar_contact_lower = contact_gap(tau_bar_hit, sub_b.lower, False)
    bar_contact_upper = contact_gap(sigma_bar_hit, sub_b.upper, False)

    star_ext = [float("nan"), float("nan")]
    bar_ext = [float("nan"), float("nan")]
    star_plain: list[float | None] = [None, None]
    bar_plain: list[float | None] = [None, None]
    lower_flags = semicontinuity(sub_b.lower)
    upper_flags = semicontinuity(sub_b.upper)
    warnings: list[str] = []
    if check_opponents:
        _guard_depth(subtree.n_steps, enum_bound)
        x_steps, x_phases = enumerate_stopping_times(subtree, phase_resolved=True)
        p_steps, p_phases = enumerate_stopping_times(subtree, phase_resolved=False)

        def against_all(tau_hit: HittingResult | None, sigma_hit: HittingResult | None,
                        opp_steps: np.ndarray, opp_phases: np.ndarray,
                        project: bool) -> float:
            """Worst-case shortfall of one committed player over all opponents."""
            if tau_hit is not None:
                own = (tau_hit.stop.steps[None, :],
                       np.zeros((1, subtree.n_leaves), np.int64) if project else tau_hit.stop.phases[None, :])
                j, ms = _payoff_tensor(sub_b, own[0], own[1], opp_steps, opp_phases)
                vals = _root_values(subtree, driver, j, ms, theta_step, tol_root, max_iter)
                return max(0.0, y_theta - float(vals.min()))
            assert sigma_hit is not None
            own = (sigma_hit.stop.steps[None, :],
                   np.zeros((1, subtree.n_leaves), np.int64) if project else sigma_hit.stop.phases[None, :])
            j, ms = _payoff_tensor(sub_b, opp_steps, opp_phases, own[0], own[1])
            vals = _root_values(subtree, driver, j, ms, theta_step, tol_root, max_iter)
            return max(0.0, float(vals.max()) - y_theta)

        star_ext = [against_all(tau_star_hit, None, x_steps, x_phases, False),
                    against_all(None, sigma_star_hit, x_steps, x_phases, False)]
        bar_ext = [against_all(tau_bar_hit, None, x_steps, x_phases, False),
                   against_all(None, sigma_bar_hit, x_steps, x_phases, False)]
        two_sided = (lower_flags.right_usc and lower_flags.left_usc
                     and upper_flags.right_lsc and upper_flags.left_lsc)
        if two_sided:
            star_plain = [against_all(tau_star_hit, None, p_steps, p_phases, True),
                          against_all(None, sigma_star_hit, p_steps, p_phases, True)]
            bar_plain = [against_all(tau_bar_hit, None, p_steps, p_phases, True),
                         against_all(None, sigma_bar_hit, p_steps, p_phases, True)]
        else:
            warnings.append("plain saddle residuals skipped: grid-time stops are only "
                            "optimal when the lower barrier is USC and the upper "
                            "barrier is LSC on both sides")

    eps_reports = [epsilon_saddle(tree, barriers, driver, e, theta_step=theta_step,
                                  theta_node=theta_node, enum_bound=enum_bound,
                                  check_opponents=check_opponents, tol_root=tol_root,
                                  max_iter=max_iter) for e in epsilons]

    return SaddleReport(y_theta=y_theta,
                        tau_star=_hit_system(subtree, tau_star_hit),
                        sigma_star=_hit_system(subtree, sigma_star_hit),
                        tau_bar=tau_bar_hit.stop, sigma_bar=sigma_bar_hit.stop,
                        tau_bar_attained=tau_bar_hit.hit, sigma_bar_attained=sigma_bar_hit.hit,
                        order_tau_ok=order_tau, order_sigma_ok=order_sigma,
                        star_contact_lower=star_contact_lower, star_contact_upper=star_contact_upper,
                        bar_contact_lower=bar_contact_lower, bar_contact_upper=bar_contact_upper,
                        star_extended_up=star_ext[0], star_extended_down=star_ext[1],
                        bar_extended_up=bar_ext[0], bar_extended_down=bar_ext[1],
                        lower_flags=lower_flags, upper_flags=upper_flags,
                        star_plain_up=star_plain[0], star_plain_down=star_plain[1],
                        bar_plain_up=bar_plain[0], bar_plain_down=bar_plain[1],
                        epsilon_saddles=eps_reports, warnings=warnings)


def epsilon_ratio_ok(saddles: list[EpsilonSaddle], *, factor: float = 4.0,
                     tol: float = 1e-8) -> tuple[bool, list[float]]:
    """Check residual(eps)/eps stays bounded across a halving sweep.

    The quantity q(eps) = residual(eps)/eps should be bounded by a constant
    independent of eps.  Across one halving we require q not to grow by
    more than ``factor``, flooring the previous quotient at ``tol`` so that
    residuals at numerical zero don't produce 0/0 verdicts.
    """
    order = sorted(saddles, key=lambda s: -s.epsilon)
    quotients = [max(s.residual_up, s.residual_down) / s.epsilon for s in order]
    ok = all(qb <= factor * max(qa, tol) for qa, qb in zip(quotients, quotients[1:]))
    return ok, quotients


def right_jump_counterexample() -> tuple[TwoPhaseTree, Barriers, Driver, dict[str, float]]:
    """One-step game whose plain value misses the reflected value.

    The lower barrier jumps up on the open interval (worth 0.9 there, 0 at
    grid times) and the terminal payoff is 0.2.  The reflected solution
    takes the interval value 0.9, and so does the extended game: the
    maximiser stops just after time zero.  A plain maximiser can only
    collect 0 now or 0.2 at the horizon, so both plain values land on 0.2
    and sit 0.7 away — grid-time strategies cannot see interval slots, and
    no tolerance tightening changes that.
    """
    tree = build_tree(1, 1.0)
    lower = OptionalProcess(tree, [np.array([0.0]), np.zeros(2)], [np.array([0.9])])
    upper = OptionalProcess.from_constant(tree, 1.0)
    barriers = Barriers(lower, upper, np.full(2, 0.2))
    driver = constant_driver(0.0)
    expected = {"rbsde_value": 0.9, "extended_value": 0.9, "plain_value": 0.2, "plain_gap_to_y": 0.7}
    return tree, barriers, driver, expected
