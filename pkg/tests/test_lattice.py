"""Grid skeleton: tree geometry, phase ordering, process reads, stops."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsde_lab import (
    OptionalProcess,
    Phase,
    StoppingSystem,
    StoppingTime,
    build_tree,
    enumerate_stopping_times,
    eval_lower,
    eval_upper,
    first_hitting,
    semicontinuity,
)
from rbsde_lab.lattice import process_to_rows


def _process(tree, at, after):
    return OptionalProcess(tree, [np.asarray(a, dtype=float) for a in at],
                           [np.asarray(a, dtype=float) for a in after])


# -- tree geometry ----------------------------------------------------------

def test_one_step_tree_geometry():
    tree = build_tree(1, 1.0)
    assert tree.n_nodes == 3
    assert tree.n_leaves == 2
    np.testing.assert_allclose(tree.brownian(1), [1.0, -1.0])
    assert tree.terminal_time == 1.0


def test_two_step_tree_walk_values():
    tree = build_tree(2, 0.5)
    assert tree.n_nodes == 7
    s = math.sqrt(0.5)
    np.testing.assert_allclose(tree.brownian(2), [2 * s, 0.0, 0.0, -2 * s])


def test_zero_step_tree_rejected():
    with pytest.raises(ValueError):
        build_tree(0, 1.0)
    with pytest.raises(ValueError):
        build_tree(2, 0.0)


def test_point_order_exhaustive_small_depths():
    # total order AT(k) < AFTER(k) < AT(k+1), checked on every pair
    for n in range(1, 5):
        tree = build_tree(n, 0.3)
        points = list(tree.iter_points())
        assert len(points) == 2 * n + 1
        for i, p in enumerate(points):
            for j, q in enumerate(points):
                assert (p < q) == (i < j)
                assert p.key() == 2 * p.step + int(p.phase)


def test_after_horizon_point_does_not_exist():
    tree = build_tree(2, 1.0)
    with pytest.raises(ValueError):
        tree.point(2, Phase.AFTER)
    proc = OptionalProcess.from_constant(tree, 0.0)
    with pytest.raises(ValueError):
        proc.value(2, Phase.AFTER, 0)


def test_node_of_leaf_prefix_arithmetic():
    tree = build_tree(3, 1.0)
    # leaf 5 = paths bits 101 (down, up, down); ancestors are bit prefixes
    assert tree.node_of_leaf(5, 0) == 0
    assert tree.node_of_leaf(5, 1) == 1
    assert tree.node_of_leaf(5, 2) == 2
    assert tree.node_of_leaf(5, 3) == 5


# -- optional processes -----------------------------------------------------

def test_one_sided_limits_read_the_interval_slot():
    tree = build_tree(1, 1.0)
    proc = _process(tree, [[1.0], [5.0, 6.0]], [[2.0]])
    assert proc.right_limit(0, 0) == 2.0
    assert proc.left_limit(1, 0) == 2.0
    assert proc.left_limit(1, 1) == 2.0
    assert proc.value(0, Phase.AFTER, 0) == 2.0


def test_restrict_matches_direct_subtree_read():
    tree = build_tree(3, 0.25)
    rng = np.random.default_rng(7)
    proc = OptionalProcess(tree, [rng.normal(size=tree.nodes_at(k)) for k in range(4)],
                           [rng.normal(size=tree.nodes_at(k)) for k in range(3)])
    sub = proc.restrict(1, 1)
    assert sub.tree.n_steps == 2
    assert sub.at[0][0] == proc.at[1][1]
    np.testing.assert_array_equal(sub.at[2], proc.at[3][4:8])
    np.testing.assert_array_equal(sub.after[1], proc.after[2][2:4])


def test_process_rows_serialization_shape():
    tree = build_tree(2, 1.0)
    proc = OptionalProcess.from_constant(tree, 1.5)
    rows = process_to_rows(proc)
    # 1 + 2 + 4 AT rows plus 1 + 2 AFTER rows
    assert len(rows) == 10
    assert rows[0] == (0, "at", "", 1.5)
    assert all(len(r) == 4 for r in rows)


# -- evaluation at stopping systems -----------------------------------------

def test_eval_constant_process_any_system():
    tree = build_tree(2, 1.0)
    proc = OptionalProcess.from_constant(tree, 3.25)
    tau = StoppingTime.constant(tree, 1, Phase.AFTER)
    for member in (np.ones(4, dtype=bool), np.zeros(4, dtype=bool)):
        rho = StoppingSystem(tau, member)
        np.testing.assert_array_equal(eval_upper(proc, rho), np.full(4, 3.25))


def test_eval_on_and_off_membership_reads():
    tree = build_tree(1, 1.0)
    proc = _process(tree, [[1.0], [9.0, 9.0]], [[2.0]])
    tau = StoppingTime.constant(tree, 0, Phase.AT)
    on = StoppingSystem.everywhere(tau)
    off = StoppingSystem(tau, np.zeros(2, dtype=bool))
    np.testing.assert_array_equal(eval_upper(proc, on), [1.0, 1.0])
    np.testing.assert_array_equal(eval_upper(proc, off), [2.0, 2.0])
    # the two one-sided readings coincide on the grid
    np.testing.assert_array_equal(eval_lower(proc, off), eval_upper(proc, off))


def test_eval_full_membership_equals_plain_read():
    tree = build_tree(2, 0.5)
    rng = np.random.default_rng(3)
    proc = OptionalProcess(tree, [rng.normal(size=tree.nodes_at(k)) for k in range(3)],
                           [rng.normal(size=tree.nodes_at(k)) for k in range(2)])
    steps, phases = enumerate_stopping_times(tree, phase_resolved=True)
    for row in range(steps.shape[0]):
        tau = StoppingTime.from_realized(tree, steps[row], phases[row])
        rho = StoppingSystem.everywhere(tau)
        direct = np.array([proc.value(int(tau.steps[lf]), Phase(int(tau.phases[lf])),
                                      int(tau.stop_nodes()[lf])) for lf in range(4)])
        np.testing.assert_array_equal(eval_upper(proc, rho), direct)
        np.testing.assert_array_equal(eval_lower(proc, rho), direct)


# -- first hitting ----------------------------------------------------------

def test_hitting_everywhere_condition_stops_at_theta():
    tree = build_tree(2, 1.0)
    cond = OptionalProcess.from_constant(tree, 1.0)
    res = first_hitting(cond)
    assert res.hit.all()
    assert np.all(res.stop.keys == 0)


def test_hitting_never_capped_at_horizon():
    tree = build_tree(2, 1.0)
    cond = OptionalProcess.from_constant(tree, 0.0)
    res = first_hitting(cond)
    assert not res.hit.any()
    assert np.all(res.stop.steps == 2) and np.all(res.stop.phases == 0)


def test_hitting_one_sided_interval_slot():
    # condition holds only on the open interval entered from the up node:
    # paths through it stop at AFTER(1); the rest run capped to the horizon
    # (step 0 has a single shared node, so the branch split needs step 1)
    tree = build_tree(2, 1.0)
    cond = _process(tree, [[0.0], [0.0, 0.0], [0.0] * 4], [[0.0], [1.0, 0.0]])
    res = first_hitting(cond)
    assert np.all(res.stop.steps[:2] == 1) and np.all(res.stop.phases[:2] == 1)
    assert res.hit[:2].all()
    assert np.all(res.stop.steps[2:] == 2) and np.all(res.stop.phases[2:] == 0)
    assert not res.hit[2:].any()


def test_hitting_respects_theta_floor():
    tree = build_tree(2, 1.0)
    cond = OptionalProcess.from_constant(tree, 1.0)
    theta = StoppingTime.constant(tree, 1, Phase.AFTER)
    res = first_hitting(cond, theta)
    assert np.all(res.stop.keys == 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**12 - 1), st.integers(0, 2**12 - 1), st.integers(1, 3))
def test_hitting_monotone_in_condition(bits_a, bits_extra, n):
    """Enlarging the condition set never delays the hit."""
    tree = build_tree(n, 0.5)
    n_slots = 2 * n + 1

    def mk(bits):
        at = [np.zeros(tree.nodes_at(k)) for k in range(n + 1)]
        after = [np.zeros(tree.nodes_at(k)) for k in range(n)]
        proc = OptionalProcess(tree, at, after)
        i = 0
        for key in range(n_slots):
            arr = proc.slot(key)
            for node in range(arr.size):
                if bits >> (i % 12) & 1:
                    arr[node] = 1.0
                i += 1
        return proc

    small = mk(bits_a)
    big = OptionalProcess.combine(lambda a, b: np.maximum(a, b), small, mk(bits_extra))
    res_small = first_hitting(small)
    res_big = first_hitting(big)
    assert np.all(res_big.stop.keys <= res_small.stop.keys)


# -- semicontinuity flags ----------------------------------------------------

def test_constant_process_all_flags():
    tree = build_tree(2, 1.0)
    flags = semicontinuity(OptionalProcess.from_constant(tree, 1.0))
    assert flags.right_usc and flags.right_lsc and flags.left_usc and flags.left_lsc


def test_right_jump_up_breaks_right_usc():
    tree = build_tree(1, 1.0)
    flags = semicontinuity(_process(tree, [[0.0], [1.0, 1.0]], [[1.0]]))
    assert not flags.right_usc
    assert flags.right_lsc


def test_left_flags_evaluated_edge_by_edge():
    # interval value 2, both children 1: the value drops across the grid
    # time, so left-USC fails (1 >= 2 is false) while left-LSC holds
    tree = build_tree(1, 1.0)
    flags = semicontinuity(_process(tree, [[2.0], [1.0, 1.0]], [[2.0]]))
    assert not flags.left_usc
    assert flags.left_lsc


# -- stopping time census ----------------------------------------------------

def test_stopping_time_census_plain_and_phase_resolved():
    # S(d) = 1 + S(d-1)^2 -> 2, 5, 26;  U(d) = 2 + U(d-1)^2 -> 3, 11, 123
    for depth, plain, extended in ((1, 2, 3), (2, 5, 11), (3, 26, 123)):
        tree = build_tree(depth, 1.0)
        steps, _ = enumerate_stopping_times(tree, phase_resolved=False)
        assert steps.shape == (plain, tree.n_leaves)
        steps, phases = enumerate_stopping_times(tree, phase_resolved=True)
        assert steps.shape == (extended, tree.n_leaves)
        # every enumerated vector really is a stopping time
        seen = set()
        for row in range(steps.shape[0]):
            tau = StoppingTime.from_realized(tree, steps[row], phases[row])
            seen.add(tau)
        assert len(seen) == extended


def test_non_adapted_stop_rejected():
    tree = build_tree(2, 1.0)
    # leaves 0 and 1 share the step-1 node but claim different stops
    steps = np.array([1, 2, 2, 2])
    phases = np.zeros(4, dtype=np.int64)
    with pytest.raises(ValueError, match="not adapted"):
        StoppingTime.from_realized(tree, steps, phases)


def test_membership_must_cover_horizon_and_atoms():
    tree = build_tree(1, 1.0)
    tau = StoppingTime.constant(tree, 1, Phase.AT)
    with pytest.raises(ValueError, match="horizon"):
        StoppingSystem(tau, np.array([True, False]))
    early = StoppingTime.constant(tree, 0, Phase.AT)
    with pytest.raises(ValueError, match="stop atom"):
        StoppingSystem(early, np.array([True, False]))
