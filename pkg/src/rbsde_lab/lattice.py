"""Two-phase binary lattice: the filtration skeleton everything else runs on.

The grid has steps ``0..N``.  Each step ``k < N`` carries two phase points:
``AT(k)`` (the value at time ``t_k``) and ``AFTER(k)`` (the value on the open
interval ``(t_k, t_{k+1})``, i.e. the right limit at ``t_k`` and the left
limit at ``t_{k+1}``).  Step ``N`` has only ``AT(N)``.  Phase points are
totally ordered ``AT(0) < AFTER(0) < AT(1) < ... < AT(N)``.

The underlying randomness is the non-recombining binary walk: node ``i`` at
step ``k`` has children ``2i`` (up move, ``+sqrt(dt)``) and ``2i + 1`` (down
move), each with probability one half.  A "leaf" is a full path, indexed by
the integer whose bits (most significant first) record the down moves.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Phase",
    "TimePoint",
    "TwoPhaseTree",
    "OptionalProcess",
    "StoppingTime",
    "StoppingSystem",
    "HittingResult",
    "SemicontinuityFlags",
    "build_tree",
    "eval_upper",
    "eval_lower",
    "first_hitting",
    "semicontinuity",
    "enumerate_stopping_times",
    "process_to_rows",
]


class Phase(enum.IntEnum):
    """Phase within a step; AT is the grid time, AFTER the open interval."""

    AT = 0
    AFTER = 1


@dataclass(frozen=True, order=True)
class TimePoint:
    """A (step, phase) pair; ordering is the temporal total order."""

    step: int
    phase: Phase

    def key(self) -> int:
        """Position in the total order: AT(k) -> 2k, AFTER(k) -> 2k+1."""
        return 2 * self.step + int(self.phase)


def _point_from_key(key: int) -> TimePoint:
    return TimePoint(key >> 1, Phase(key & 1))


class TwoPhaseTree:
    """Binary path tree of depth ``n_steps`` with two-phase time points.

    Nodes at step ``k`` are indexed ``0 .. 2**k - 1``; the walk value at a
    node is determined by the path bits, so the tree stores one array of
    walk values per step.  There is no recombination: distinct paths are
    distinct nodes.
    """

    __slots__ = ("n_steps", "dt", "sqrt_dt", "_brownian")

    def __init__(self, n_steps: int, dt: float) -> None:
        if not isinstance(n_steps, (int, np.integer)) or n_steps < 1:
            raise ValueError(f"n_steps must be an integer >= 1, got {n_steps!r}")
        if not (float(dt) > 0.0):
            raise ValueError(f"dt must be positive, got {dt!r}")
        self.n_steps = int(n_steps)
        self.dt = float(dt)
        self.sqrt_dt = float(np.sqrt(self.dt))
        walks = [np.zeros(1)]
        for _ in range(self.n_steps):
            prev = walks[-1]
            nxt = np.empty(2 * prev.size)
            nxt[0::2] = prev + self.sqrt_dt
            nxt[1::2] = prev - self.sqrt_dt
            walks.append(nxt)
        self._brownian = walks

    # -- basic geometry -------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return 1 << self.n_steps

    @property
    def n_nodes(self) -> int:
        return (1 << (self.n_steps + 1)) - 1

    @property
    def terminal_time(self) -> float:
        return self.n_steps * self.dt

    def nodes_at(self, step: int) -> int:
        if not 0 <= step <= self.n_steps:
            raise ValueError(f"step {step} outside [0, {self.n_steps}]")
        return 1 << step

    def brownian(self, step: int) -> np.ndarray:
        """Walk values at the nodes of ``step`` (read-only view)."""
        self.nodes_at(step)
        return self._brownian[step]

    def time(self, step: int) -> float:
        return step * self.dt

    def point(self, step: int, phase: Phase) -> TimePoint:
        """Validated time point; AFTER at the final step does not exist."""
        self.nodes_at(step)
        phase = Phase(phase)
        if step == self.n_steps and phase == Phase.AFTER:
            raise ValueError("the final step has no AFTER phase")
        return TimePoint(step, phase)

    def iter_points(self) -> Iterator[TimePoint]:
        for key in range(2 * self.n_steps + 1):
            yield _point_from_key(key)

    def node_of_leaf(self, leaf: np.ndarray | int, step: int) -> np.ndarray | int:
        """Ancestor node index of a leaf (full path) at ``step``."""
        return leaf >> (self.n_steps - step)

    def leaf_stride(self, step: int) -> int:
        """Number of leaves below each node of ``step``."""
        return 1 << (self.n_steps - step)

    def spread(self, values: np.ndarray, step: int) -> np.ndarray:
        """Broadcast per-node values at ``step`` to per-leaf values."""
        return np.repeat(values, self.leaf_stride(step))

    def same_grid(self, other: "TwoPhaseTree") -> bool:
        return self.n_steps == other.n_steps and self.dt == other.dt

    def subtree(self, step: int) -> "TwoPhaseTree":
        """A fresh tree of the remaining depth (walk restarts at zero)."""
        if not 0 <= step < self.n_steps:
            raise ValueError("subtree root must lie strictly before the horizon")
        return TwoPhaseTree(self.n_steps - step, self.dt)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"TwoPhaseTree(n_steps={self.n_steps}, dt={self.dt})"


def build_tree(n_steps: int, dt: float) -> TwoPhaseTree:
    """Construct the two-phase binary tree (``n_steps >= 1``, ``dt > 0``)."""
    return TwoPhaseTree(n_steps, dt)


class OptionalProcess:
    """A real value for every (node, phase) point of a tree.

    ``at[k]`` has one entry per node of step ``k`` (``k = 0..N``);
    ``after[k]`` likewise for ``k = 0..N-1``.  The AFTER slot doubles as
    every one-sided limit the grid can express: the right limsup and right
    liminf at ``AT(k)`` and the left limsup and left liminf at ``AT(k+1)``
    along the same path all equal ``after[k]``, because the process is
    constant on the open interval.
    """

    __slots__ = ("tree", "at", "after")

    def __init__(self, tree: TwoPhaseTree, at: Sequence[np.ndarray], after: Sequence[np.ndarray]) -> None:
        if len(at) != tree.n_steps + 1 or len(after) != tree.n_steps:
            raise ValueError("slot count does not match the tree depth")
        self.tree = tree
        self.at = [np.asarray(a, dtype=float) for a in at]
        self.after = [np.asarray(a, dtype=float) for a in after]
        for k, arr in enumerate(self.at):
            if arr.shape != (tree.nodes_at(k),):
                raise ValueError(f"at[{k}] has shape {arr.shape}, expected ({tree.nodes_at(k)},)")
        for k, arr in enumerate(self.after):
            if arr.shape != (tree.nodes_at(k),):
                raise ValueError(f"after[{k}] has shape {arr.shape}, expected ({tree.nodes_at(k)},)")

    # -- constructors ---------------------------------------------------

    @classmethod
    def from_constant(cls, tree: TwoPhaseTree, value: float) -> "OptionalProcess":
        at = [np.full(tree.nodes_at(k), float(value)) for k in range(tree.n_steps + 1)]
        after = [np.full(tree.nodes_at(k), float(value)) for k in range(tree.n_steps)]
        return cls(tree, at, after)

    @classmethod
    def from_callable(cls, tree: TwoPhaseTree, fn: Callable[[int, Phase, np.ndarray], np.ndarray]) -> "OptionalProcess":
        """Build from ``fn(step, phase, walk_values) -> values`` (vectorised)."""
        at = [np.broadcast_to(np.asarray(fn(k, Phase.AT, tree.brownian(k)), dtype=float), (tree.nodes_at(k),)).copy()
              for k in range(tree.n_steps + 1)]
        after = [np.broadcast_to(np.asarray(fn(k, Phase.AFTER, tree.brownian(k)), dtype=float), (tree.nodes_at(k),)).copy()
                 for k in range(tree.n_steps)]
        return cls(tree, at, after)

    @classmethod
    def combine(cls, fn: Callable[..., np.ndarray], *procs: "OptionalProcess") -> "OptionalProcess":
        """Pointwise combination of processes on the same grid."""
        tree = procs[0].tree
        for p in procs[1:]:
            if not tree.same_grid(p.tree):
                raise ValueError("processes live on different grids")
        at = [np.asarray(fn(*(p.at[k] for p in procs)), dtype=float) for k in range(tree.n_steps + 1)]
        after = [np.asarray(fn(*(p.after[k] for p in procs)), dtype=float) for k in range(tree.n_steps)]
        return cls(tree, at, after)

    # -- accessors ------------------------------------------------------

    def value(self, step: int, phase: Phase, node: int) -> float:
        if Phase(phase) == Phase.AT:
            return float(self.at[step][node])
        if step >= self.tree.n_steps:
            raise ValueError("the final step has no AFTER phase")
        return float(self.after[step][node])

    def slot(self, key: int) -> np.ndarray:
        """Node array of the phase point with order key ``key``."""
        step, ph = key >> 1, key & 1
        return self.at[step] if ph == 0 else self.after[step]

    def right_limit(self, step: int, node: int) -> float:
        """Right limsup = right liminf at AT(step); undefined at the horizon."""
        return float(self.after[step][node])

    def left_limit(self, step: int, node: int) -> float:
        """Left limsup = left liminf at AT(step) along the path (step >= 1)."""
        return float(self.after[step - 1][node >> 1])

    @property
    def terminal(self) -> np.ndarray:
        return self.at[self.tree.n_steps]

    def leaf_values(self, step: int, phase: Phase) -> np.ndarray:
        arr = self.at[step] if Phase(phase) == Phase.AT else self.after[step]
        return self.tree.spread(arr, step)

    # -- transforms -----------------------------------------------------

    def copy(self) -> "OptionalProcess":
        return OptionalProcess(self.tree, [a.copy() for a in self.at], [a.copy() for a in self.after])

    def with_terminal(self, values: np.ndarray) -> "OptionalProcess":
        """Same process with the AT(N) slot replaced (used for xi-patched barriers)."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.tree.n_leaves,):
            raise ValueError("terminal replacement has the wrong shape")
        out = self.copy()
        out.at[self.tree.n_steps] = values.copy()
        return out

    def restrict(self, step: int, node: int) -> "OptionalProcess":
        """Restriction to the subtree rooted at (step, node)."""
        sub = self.tree.subtree(step)
        at = [self.at[step + j][node << j:(node + 1) << j].copy() for j in range(sub.n_steps + 1)]
        after = [self.after[step + j][node << j:(node + 1) << j].copy() for j in range(sub.n_steps)]
        return OptionalProcess(sub, at, after)

    def sup_abs_diff(self, other: "OptionalProcess") -> float:
        d = 0.0
        for k in range(self.tree.n_steps + 1):
            d = max(d, float(np.max(np.abs(self.at[k] - other.at[k]))))
        for k in range(self.tree.n_steps):
            d = max(d, float(np.max(np.abs(self.after[k] - other.after[k]))))
        return d

    def pointwise_leq(self, other: "OptionalProcess", tol: float = 0.0) -> bool:
        for k in range(self.tree.n_steps + 1):
            if np.any(self.at[k] > other.at[k] + tol):
                return False
        for k in range(self.tree.n_steps):
            if np.any(self.after[k] > other.after[k] + tol):
                return False
        return True

    def max_exceedance(self, other: "OptionalProcess") -> float:
        """sup of (self - other) over all points; <= 0 means self <= other."""
        d = -np.inf
        for k in range(self.tree.n_steps + 1):
            d = max(d, float(np.max(self.at[k] - other.at[k])))
        for k in range(self.tree.n_steps):
            d = max(d, float(np.max(self.after[k] - other.after[k])))
        return d


def _realize_flags(tree: TwoPhaseTree, flag_at: list[np.ndarray], flag_after: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """First flagged point per leaf, capped at AT(N).  Returns (steps, phases)."""
    n_leaves = tree.n_leaves
    stop_key = np.full(n_leaves, 2 * tree.n_steps, dtype=np.int64)
    unresolved = np.ones(n_leaves, dtype=bool)
    for key in range(2 * tree.n_steps + 1):
        step, ph = key >> 1, key & 1
        flags = flag_at[step] if ph == 0 else flag_after[step]
        here = unresolved & tree.spread(flags, step).astype(bool)
        stop_key[here] = key
        unresolved &= ~here
        if not unresolved.any():
            break
    return stop_key >> 1, stop_key & 1


class StoppingTime:
    """A stop flag per (node, phase) with a mandatory stop at the horizon.

    The realized stop of a path is its first flagged point; flags strictly
    after an earlier flag on the same path are inert.  Adaptedness is
    structural: a flag sits on a node, so all paths through that node take
    the same decision.
    """

    __slots__ = ("tree", "flag_at", "flag_after", "_steps", "_phases")

    def __init__(self, tree: TwoPhaseTree, flag_at: Sequence[np.ndarray], flag_after: Sequence[np.ndarray]) -> None:
        if len(flag_at) != tree.n_steps + 1 or len(flag_after) != tree.n_steps:
            raise ValueError("flag slot count does not match the tree depth")
        self.tree = tree
        self.flag_at = [np.asarray(a, dtype=bool).copy() for a in flag_at]
        self.flag_after = [np.asarray(a, dtype=bool).copy() for a in flag_after]
        self.flag_at[tree.n_steps] = np.ones(tree.n_leaves, dtype=bool)  # horizon cap
        self._steps, self._phases = _realize_flags(tree, self.flag_at, self.flag_after)

    @classmethod
    def constant(cls, tree: TwoPhaseTree, step: int, phase: Phase = Phase.AT) -> "StoppingTime":
        tree.point(step, phase)
        flag_at = [np.zeros(tree.nodes_at(k), dtype=bool) for k in range(tree.n_steps + 1)]
        flag_after = [np.zeros(tree.nodes_at(k), dtype=bool) for k in range(tree.n_steps)]
        if Phase(phase) == Phase.AT:
            flag_at[step][:] = True
        else:
            flag_after[step][:] = True
        return cls(tree, flag_at, flag_after)

    @classmethod
    def from_realized(cls, tree: TwoPhaseTree, steps: np.ndarray, phases: np.ndarray) -> "StoppingTime":
        """Build from per-leaf stop points, checking they form a stopping time."""
        steps = np.asarray(steps, dtype=np.int64)
        phases = np.asarray(phases, dtype=np.int64)
        if steps.shape != (tree.n_leaves,) or phases.shape != (tree.n_leaves,):
            raise ValueError("realized stop arrays must have one entry per leaf")
        flag_at = [np.zeros(tree.nodes_at(k), dtype=bool) for k in range(tree.n_steps + 1)]
        flag_after = [np.zeros(tree.nodes_at(k), dtype=bool) for k in range(tree.n_steps)]
        for leaf in range(tree.n_leaves):
            k, ph = int(steps[leaf]), int(phases[leaf])
            tree.point(k, Phase(ph))
            node = leaf >> (tree.n_steps - k)
            (flag_at if ph == 0 else flag_after)[k][node] = True
        st = cls(tree, flag_at, flag_after)
        if not (np.array_equal(st.steps, steps) and np.array_equal(st.phases, phases)):
            raise ValueError("realized stops are not adapted (not a stopping time)")
        return st

    @property
    def steps(self) -> np.ndarray:
        """Per-leaf stop step (read-only)."""
        return self._steps

    @property
    def phases(self) -> np.ndarray:
        """Per-leaf stop phase (0 = AT, 1 = AFTER)."""
        return self._phases

    @property
    def keys(self) -> np.ndarray:
        """Per-leaf order key of the stop point."""
        return 2 * self._steps + self._phases

    def stop_nodes(self) -> np.ndarray:
        """Per-leaf node index at the stop step."""
        return np.asarray([leaf >> (self.tree.n_steps - int(k)) for leaf, k in enumerate(self._steps)], dtype=np.int64)

    def leq(self, other: "StoppingTime") -> bool:
        return bool(np.all(self.keys <= other.keys))

    def always_at_phase(self) -> bool:
        return bool(np.all(self._phases == int(Phase.AT)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StoppingTime):
            return NotImplemented
        return self.tree.same_grid(other.tree) and np.array_equal(self.keys, other.keys)

    def __hash__(self) -> int:  # realized stops define identity
        return hash((self.tree.n_steps, self.tree.dt, self.keys.tobytes()))


class StoppingSystem:
    """A stopping time together with an H flag on its stop atoms.

    ``membership[leaf]`` says whether the path lies in H.  The flag must be
    constant on each stop atom (all paths through the stop node), and paths
    stopping exactly at the horizon must lie in H.
    """

    __slots__ = ("tau", "membership")

    def __init__(self, tau: StoppingTime, membership: np.ndarray) -> None:
        membership = np.asarray(membership, dtype=bool)
        if membership.shape != (tau.tree.n_leaves,):
            raise ValueError("membership must have one entry per leaf")
        n = tau.tree.n_steps
        for leaf in range(tau.tree.n_leaves):
            k = int(tau.steps[leaf])
            leader = (leaf >> (n - k)) << (n - k)
            if membership[leaf] != membership[leader]:
                raise ValueError("H flag differs within a stop atom")
        if np.any((tau.steps == n) & ~membership):
            raise ValueError("paths stopping at the horizon must belong to H")
        self.tau = tau
        self.membership = membership.copy()

    @classmethod
    def everywhere(cls, tau: StoppingTime) -> "StoppingSystem":
        return cls(tau, np.ones(tau.tree.n_leaves, dtype=bool))


@dataclass(frozen=True)
class HittingResult:
    """First point satisfying a condition, with a per-leaf attainment flag.

    ``hit[leaf]`` is False exactly when the scan was capped at the horizon
    without the condition ever holding.
    """

    stop: StoppingTime
    hit: np.ndarray


@dataclass(frozen=True)
class SemicontinuityFlags:
    right_usc: bool
    right_lsc: bool
    left_usc: bool
    left_lsc: bool


def _eval_at_system(process: OptionalProcess, system: StoppingSystem, side: str) -> np.ndarray:
    """Shared evaluator: process at the stop point on H, one-sided right
    limit off H.  ``side`` picks the limsup or liminf reading; the grid
    carries a single value on each open interval, so the two coincide, but
    both entry points are kept."""
    assert side in ("limsup", "liminf")
    tree = process.tree
    if not tree.same_grid(system.tau.tree):
        raise ValueError("process and stopping system live on different grids")
    steps, phases, member = system.tau.steps, system.tau.phases, system.membership
    out = np.empty(tree.n_leaves)
    for leaf in range(tree.n_leaves):
        k, ph = int(steps[leaf]), int(phases[leaf])
        node = leaf >> (tree.n_steps - k)
        if member[leaf]:
            out[leaf] = process.at[k][node] if ph == 0 else process.after[k][node]
        else:
            # off H the stop cannot sit at the horizon, so AFTER(k) exists;
            # right limsup and right liminf both read the interval slot
            out[leaf] = process.after[k][node]
    return out


def eval_upper(process: OptionalProcess, system: StoppingSystem) -> np.ndarray:
    """Evaluation ``X_tau 1_H + (right limsup X)_tau 1_{H^c}`` per leaf."""
    return _eval_at_system(process, system, "limsup")


def eval_lower(process: OptionalProcess, system: StoppingSystem) -> np.ndarray:
    """Evaluation ``X_tau 1_H + (right liminf X)_tau 1_{H^c}`` per leaf."""
    return _eval_at_system(process, system, "liminf")


def first_hitting(condition: OptionalProcess, theta: StoppingTime | None = None) -> HittingResult:
    """First (node, phase) point at or after ``theta`` where the condition
    holds (nonzero), capped at the horizon.

    The companion ``hit`` flag distinguishes an exact hit from a capped
    scan; callers that need membership sets build them from it.
    """
    tree = condition.tree
    if theta is None:
        theta = StoppingTime.constant(tree, 0, Phase.AT)
    if not tree.same_grid(theta.tree):
        raise ValueError("condition and theta live on different grids")
    n_leaves = tree.n_leaves
    theta_keys = theta.keys
    stop_key = np.full(n_leaves, 2 * tree.n_steps, dtype=np.int64)
    hit = np.zeros(n_leaves, dtype=bool)
    unresolved = np.ones(n_leaves, dtype=bool)
    for key in range(2 * tree.n_steps + 1):
        step = key >> 1
        vals = condition.at[step] if key & 1 == 0 else condition.after[step]
        here = unresolved & (theta_keys <= key) & (tree.spread(vals, step) != 0.0)
        stop_key[here] = key
        hit[here] = True
        unresolved &= ~here
        if not unresolved.any():
            break
    stop = StoppingTime.from_realized(tree, stop_key >> 1, stop_key & 1)
    return HittingResult(stop=stop, hit=hit)


def semicontinuity(process: OptionalProcess, tol: float = 0.0) -> SemicontinuityFlags:
    """One-sided semicontinuity read off the grid.

    Right flags compare AT(k) with AFTER(k) at each node (k < N); left
    flags compare AT(k+1) with AFTER(k) along each edge.
    """
    tree = process.tree
    right_usc = right_lsc = left_usc = left_lsc = True
    for k in range(tree.n_steps):
        at_k, after_k = process.at[k], process.after[k]
        right_usc &= bool(np.all(at_k >= after_k - tol))
        right_lsc &= bool(np.all(at_k <= after_k + tol))
        child = np.repeat(after_k, 2)
        left_usc &= bool(np.all(process.at[k + 1] >= child - tol))
        left_lsc &= bool(np.all(process.at[k + 1] <= child + tol))
    return SemicontinuityFlags(right_usc, right_lsc, left_usc, left_lsc)


@functools.lru_cache(maxsize=32)
def _stop_vectors(n_steps: int, phase_resolved: bool) -> tuple[np.ndarray, np.ndarray]:
    """All stopping times of a depth-``n_steps`` tree as stacked per-leaf
    (steps, phases) matrices.  ``phase_resolved`` admits AFTER-phase stops."""

    def gen(depth_left: int) -> list[tuple[np.ndarray, np.ndarray]]:
        step_here = n_steps - depth_left
        width = 1 << depth_left
        if depth_left == 0:
            return [(np.array([step_here], dtype=np.int16), np.array([0], dtype=np.int8))]
        out = [(np.full(width, step_here, dtype=np.int16), np.zeros(width, dtype=np.int8))]
        if phase_resolved:
            out.append((np.full(width, step_here, dtype=np.int16), np.ones(width, dtype=np.int8)))
        children = gen(depth_left - 1)
        for up_s, up_p in children:
            for dn_s, dn_p in children:
                out.append((np.concatenate([up_s, dn_s]), np.concatenate([up_p, dn_p])))
        return out

    combos = gen(n_steps)
    steps = np.stack([s for s, _ in combos])
    phases = np.stack([p for _, p in combos])
    steps.setflags(write=False)
    phases.setflags(write=False)
    return steps, phases


def enumerate_stopping_times(tree: TwoPhaseTree, phase_resolved: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (steps, phases) per-leaf matrices of every stopping time.

    With ``phase_resolved`` the AFTER slots are admissible stop points;
    counts grow as s(d) = 2 + s(d-1)^2 (vs 1 + s(d-1)^2 for AT-only), so
    callers should gate the depth.
    """
    return _stop_vectors(tree.n_steps, bool(phase_resolved))


def process_to_rows(process: OptionalProcess) -> list[tuple[int, str, str, float]]:
    """Flatten to (step, phase, path-bits, value) rows in scan order."""
    rows = []
    for key in range(2 * process.tree.n_steps + 1):
        step, ph = key >> 1, key & 1
        name = "at" if ph == 0 else "after"
        vals = process.at[step] if ph == 0 else process.after[step]
        for node in range(process.tree.nodes_at(step)):
            bits = format(node, f"0{step}b") if step else ""
            rows.append((step, name, bits, float(vals[node])))
    return rows
