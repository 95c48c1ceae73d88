"""Clamped solver, minimality, envelopes, witness, truncation scheme."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsde_lab import (
    Barriers,
    OptionalProcess,
    Phase,
    RBSDESolution,
    SeparationFailure,
    TransitionIncrements,
    Witness,
    build_tree,
    check_minimality,
    classify_ef,
    constant_driver,
    continuity_analogue,
    linear_driver,
    mokobodzki_witness,
    random_scenario,
    snell_envelopes,
    solve_bsde,
    solve_rbsde,
    truncation_scheme,
    verify_dynamics,
)


def _const_barriers(tree, low, high, terminal):
    return Barriers(OptionalProcess.from_constant(tree, low),
                    OptionalProcess.from_constant(tree, high),
                    np.full(tree.n_leaves, float(terminal)))


def _proc(tree, at, after):
    return OptionalProcess(tree, [np.asarray(a, dtype=float) for a in at],
                           [np.asarray(a, dtype=float) for a in after])


# -- frozen solves ------------------------------------------------------------

def test_unconstrained_martingale_stays_put():
    tree = build_tree(2, 1.0)
    b = _const_barriers(tree, -1.0, 1.0, 0.0)
    sol = solve_rbsde(tree, b, constant_driver(0.0))
    assert sol.y.sup_abs_diff(OptionalProcess.from_constant(tree, 0.0)) == 0.0
    assert sol.r_plus.max_abs() == 0.0 and sol.r_minus.max_abs() == 0.0


def test_lower_clamp_single_step():
    # y* = E[xi] = 0 < 0.5 = L, so the interval value is pushed up by the
    # step reflection and the grid value needs no further push
    tree = build_tree(1, 1.0)
    lower = _proc(tree, [[0.5], [0.0, 0.0]], [[0.5]])
    upper = _proc(tree, [[2.0], [2.0, 2.0]], [[2.0]])
    b = Barriers(lower, upper, np.zeros(2))
    sol = solve_rbsde(tree, b, constant_driver(0.0))
    assert sol.y.at[0][0] == 0.5
    assert sol.y.after[0][0] == 0.5
    assert sol.r_plus.step[0][0] == 0.5
    assert sol.r_plus.phase[0][0] == 0.0
    assert sol.r_minus.max_abs() == 0.0
    assert check_minimality(sol, b).passed


def test_upper_clamp_single_step():
    tree = build_tree(1, 1.0)
    lower = _proc(tree, [[-2.0], [-2.0, -2.0]], [[-2.0]])
    upper = _proc(tree, [[-0.5], [0.0, 0.0]], [[-0.5]])
    b = Barriers(lower, upper, np.zeros(2))
    sol = solve_rbsde(tree, b, constant_driver(0.0))
    assert sol.y.after[0][0] == -0.5
    assert sol.r_minus.step[0][0] == 0.5
    assert sol.r_plus.max_abs() == 0.0


def test_barrier_crossing_rejected_with_location():
    tree = build_tree(1, 1.0)
    lower = OptionalProcess.from_constant(tree, 1.0)
    upper = OptionalProcess.from_constant(tree, 0.0)
    with pytest.raises(ValueError, match=r"step 0 \(at\), node 0"):
        Barriers(lower, upper, np.full(2, 0.5))


def test_terminal_sandwich_enforced():
    tree = build_tree(1, 1.0)
    with pytest.raises(ValueError, match="terminal"):
        _const_barriers(tree, -1.0, 1.0, 3.0)


# -- dynamics and increments --------------------------------------------------

def test_increments_balance_dynamics_with_y_dependent_driver():
    # regression: the increment must absorb the driver read at the clamped
    # value, not at the unconstrained root, or the step equation fails
    # wherever clamping binds and f depends on y
    tree = build_tree(2, 0.8)
    lower = OptionalProcess.from_constant(tree, 0.4)
    upper = OptionalProcess.from_constant(tree, 3.0)
    b = Barriers(lower, upper, np.full(4, 0.4))
    drv = linear_driver(const=-1.0, y_coef=-1.2)
    sol = solve_rbsde(tree, b, drv)
    assert sol.r_plus.total_variation() > 0.1  # clamping really happened
    rep = verify_dynamics(sol, b, drv, tol=4e-12)
    assert rep.passed, rep


def test_increments_are_exact_zero_off_contact():
    sc = random_scenario(321, n_steps=3, driver_kind="linear")
    sol = solve_rbsde(sc.tree, sc.barriers, sc.driver)
    for k in range(3):
        on_lower = sol.y.after[k] == sc.barriers.lower.after[k]
        on_upper = sol.y.after[k] == sc.barriers.upper.after[k]
        assert np.all(sol.r_plus.step[k][~on_lower] == 0.0)
        assert np.all(sol.r_minus.step[k][~on_upper] == 0.0)


def test_reflection_drift_feeds_back_to_the_same_solution():
    # (Y, Z) solves the unreflected equation driven by dR+ - dR-; with the
    # increments read at the clamped value this holds to machine precision
    for seed in (0, 5, 9):
        sc = random_scenario(seed, n_steps=3)
        sol = solve_rbsde(sc.tree, sc.barriers, sc.driver)
        fed = solve_bsde(sc.tree, sc.barriers.terminal, sc.driver,
                         dv=sol.reflection_drift())
        assert fed.y.sup_abs_diff(sol.y) < 5e-13


def test_verify_dynamics_catches_tampered_solution():
    sc = random_scenario(17, n_steps=2)
    sol = solve_rbsde(sc.tree, sc.barriers, sc.driver)
    assert verify_dynamics(sol, sc.barriers, sc.driver, tol=4e-12).passed
    bad = RBSDESolution(y=sol.y.copy(), z=[z.copy() for z in sol.z],
                        r_plus=sol.r_plus, r_minus=sol.r_minus)
    bad.y.after[0][0] += 1e-6
    assert not verify_dynamics(bad, sc.barriers, sc.driver, tol=4e-12).passed


# -- minimality ---------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_solver_output_always_minimal(seed):
    sc = random_scenario(seed)
    sol = solve_rbsde(sc.tree, sc.barriers, sc.driver)
    rep = check_minimality(sol, sc.barriers)
    assert rep.passed
    assert rep.max_overlap == 0.0  # mutual singularity is exact, not approximate


def test_minimality_flags_handmade_violation():
    tree = build_tree(1, 1.0)
    b = _const_barriers(tree, -1.0, 1.0, 0.0)
    zeros = [np.zeros(1)]
    grow = [np.array([0.4])]
    sol = RBSDESolution(
        y=OptionalProcess.from_constant(tree, -0.7),
        z=[np.zeros(1)],
        r_plus=TransitionIncrements(tree, zeros, grow),
        r_minus=TransitionIncrements(tree, zeros, zeros),
    )
    rep = check_minimality(sol, b)
    assert not rep.passed
    # dR+ = 0.4 while Y - L = 0.3 on the interval slot
    assert any(abs(v["value"] - 0.12) < 1e-12 for v in rep.violations)


def test_unreflected_solution_passes_inside_wide_barriers():
    tree = build_tree(2, 0.5)
    rng = np.random.default_rng(4)
    xi = rng.uniform(-0.5, 0.5, 4)
    drv = linear_driver(0.0, -0.5, 0.3)
    plain = solve_bsde(tree, xi, drv)
    sol = RBSDESolution(y=plain.y, z=plain.z,
                        r_plus=TransitionIncrements.zeros(tree),
                        r_minus=TransitionIncrements.zeros(tree))
    b = _const_barriers(tree, -5.0, 5.0, 0.0)
    b = Barriers(b.lower, b.upper, xi)
    assert check_minimality(sol, b).passed
    assert verify_dynamics(sol, b, drv, tol=4e-12).passed


# -- Snell envelopes ----------------------------------------------------------

def test_martingale_barrier_is_its_own_envelope():
    tree = build_tree(2, 1.0)
    xi = np.array([2.0, 0.5, -0.5, 1.0])
    mart = solve_bsde(tree, xi, constant_driver(0.0)).y
    b = Barriers(mart, OptionalProcess.combine(lambda v: v + 1.0, mart), xi + 0.5)
    lhat, _ = snell_envelopes(tree, b)
    assert lhat.sup_abs_diff(mart) == 0.0


def test_deterministic_monotone_barriers():
    # increasing lower barrier: stopping now is optimal, so the lower
    # envelope equals the barrier; increasing upper barrier: wait to the
    # horizon, so the upper envelope is the terminal value everywhere
    tree = build_tree(2, 1.0)
    low = _proc(tree, [[0.0], [1.0, 1.0], [2.0] * 4], [[0.5], [1.5, 1.5]])
    up = _proc(tree, [[10.0], [11.0, 11.0], [12.0] * 4], [[10.5], [11.5, 11.5]])
    b = Barriers(low, up, np.full(4, 2.0))
    lhat, uhat = snell_envelopes(tree, b)
    assert lhat.sup_abs_diff(low) == 0.0
    assert uhat.sup_abs_diff(OptionalProcess.from_constant(tree, 12.0)) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_envelope_ordering_and_supermartingale(seed):
    sc = random_scenario(seed)
    lhat, uhat = snell_envelopes(sc.tree, sc.barriers)
    assert lhat.pointwise_leq(sc.barriers.lower)
    assert sc.barriers.upper.pointwise_leq(uhat)
    neg_lhat = OptionalProcess.combine(lambda v: -v, lhat)
    assert classify_ef(neg_lhat, constant_driver(0.0), mode="brute").is_supermartingale
    assert classify_ef(uhat, constant_driver(0.0), mode="brute").is_supermartingale


# -- separation witness -------------------------------------------------------

def test_constant_band_witness_is_midpoint():
    tree = build_tree(2, 1.0)
    b = _const_barriers(tree, -1.0, 1.0, 0.0)
    wit = mokobodzki_witness(tree, b)
    assert isinstance(wit, Witness)
    # only the mandatory cuts: the time-zero anchor and the horizon
    assert len(wit.cut_times) == 2
    assert np.all(wit.cut_times[0].steps == 0) and wit.cut_times[0].always_at_phase()
    assert np.all(wit.cut_times[1].steps == tree.n_steps)
    assert wit.x.sup_abs_diff(OptionalProcess.from_constant(tree, 0.0)) == 0.0


def test_touching_at_root_reported():
    tree = build_tree(1, 1.0)
    b = _const_barriers(tree, 0.0, 1.0, 0.5)
    b.upper.at[0][0] = 0.0
    fail = mokobodzki_witness(tree, b)
    assert isinstance(fail, SeparationFailure)
    assert (fail.step, fail.phase, fail.node) == (0, Phase.AT, 0)


def test_witness_reanchors_on_exit():
    # the running midpoint from time zero is 0.5; the band later rises to
    # [2, 3], so the witness must cut and re-anchor to stay inside
    tree = build_tree(2, 1.0)
    low = _proc(tree, [[0.0], [2.0, 2.0], [2.0] * 4], [[0.0], [2.0, 2.0]])
    up = _proc(tree, [[1.0], [3.0, 3.0], [3.0] * 4], [[1.0], [3.0, 3.0]])
    b = Barriers(low, up, np.full(4, 2.5))
    wit = mokobodzki_witness(tree, b)
    assert isinstance(wit, Witness)
    assert len(wit.cut_times) >= 3  # a genuine re-anchor beyond the two mandatory cuts
    assert b.lower.pointwise_leq(wit.x) and wit.x.pointwise_leq(b.upper)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_witness_sandwich_or_correct_failure(seed):
    touch = seed % 2 == 1
    sc = random_scenario(seed, touching=touch)
    out = mokobodzki_witness(sc.tree, sc.barriers)
    if isinstance(out, Witness):
        assert sc.barriers.lower.pointwise_leq(out.x)
        assert out.x.pointwise_leq(sc.barriers.upper)
    else:
        lv = sc.barriers.lower.value(out.step, out.phase, out.node)
        uv = sc.barriers.upper.value(out.step, out.phase, out.node)
        assert lv >= uv


# -- truncation scheme --------------------------------------------------------

def test_truncation_inactive_for_bounded_driver():
    tree = build_tree(2, 0.5)
    b = _const_barriers(tree, -4.0, 4.0, 0.5)
    rep = truncation_scheme(tree, b, constant_driver(2.5), n_max=4, m_max=4)
    assert rep.passed
    # clipping at 4 never bites a constant 2.5; only the root-solve route
    # differs (the wrapper hides linearity), so the gap is solver noise
    assert rep.limit_gap <= 1e-12


def test_truncation_monotone_for_stiff_linear_driver():
    tree = build_tree(2, 0.4)
    b = _const_barriers(tree, -1.0, 1.0, 0.3)
    rep = truncation_scheme(tree, b, linear_driver(y_coef=-5.0), n_max=3, m_max=3)
    assert rep.monotone_n_violation <= 1e-10
    assert rep.monotone_m_violation <= 1e-10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_truncation_reaches_reference_on_cubic_drivers(seed):
    sc = random_scenario(seed, n_steps=2, driver_kind="cubic")
    rep = truncation_scheme(sc.tree, sc.barriers, sc.driver)
    assert rep.passed, (rep.monotone_n_violation, rep.monotone_m_violation, rep.limit_gap)
    assert rep.n_gaps[-1] <= 1e-10 and rep.m_gaps[-1] <= 1e-10


def test_cut_step_swaps_barriers_without_moving_the_limit():
    sc = random_scenario(8, n_steps=3, driver_kind="cubic")
    rep = truncation_scheme(sc.tree, sc.barriers, sc.driver, cut_step=1)
    assert rep.passed
    assert rep.n_max >= 3  # enough stages for the cuts to reach the horizon


# -- continuity analogue ------------------------------------------------------

def test_no_downward_jump_at_growth_under_left_usc():
    for seed in range(6):
        sc = random_scenario(seed, lower_left_usc=True, upper_left_lsc=True)
        sol = solve_rbsde(sc.tree, sc.barriers, sc.driver)
        rep = continuity_analogue(sol, sc.barriers, tol=4e-12)
        assert rep.passed, rep
