"""Backward equations and the induced conditional nonlinear expectation.

The diffusion transition AFTER(k) -> AT(k+1) carries the driver over one
time slice and is solved implicitly: with ``E`` the equal-weight average of
the two children and ``Z = (Y_up - Y_down) / (2 sqrt(dt))``, the interval
value solves ``y = E + f(t_k, y, Z) dt (+ dV)``.  The map ``y -> y - dt
f(t, y, z)`` is strictly increasing whenever ``dt * max(0, mu) < 1``, so the
root is unique and a safeguarded bisection finds it to tolerance.  The
phase transition AT(k) -> AFTER(k) carries no noise and no driver time;
only finite-variation increments act there.

Martingale representation is exact by construction: ``Y_up - Y_down =
2 Z sqrt(dt)`` at every diffusion transition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lattice import OptionalProcess, Phase, StoppingTime, TwoPhaseTree

__all__ = [
    "Driver",
    "BSDESolution",
    "TransitionIncrements",
    "NonlinearExpectation",
    "ClassifyResult",
    "RootSolveError",
    "EnumerationBoundError",
    "constant_driver",
    "linear_driver",
    "truncated_driver",
    "polynomial_driver",
    "solve_bsde",
    "nonlinear_expectation",
    "classify_ef",
    "ef_backward_batch",
    "gather_at_keys",
]


class RootSolveError(RuntimeError):
    """Implicit one-step equation could not be solved to tolerance."""


class EnumerationBoundError(ValueError):
    """Brute-force enumeration refused beyond the configured depth."""


@dataclass(frozen=True)
class Driver:
    """Generator ``f(t, y, z)`` with its declared structure constants.

    ``lambda_z`` is the Lipschitz constant in ``z``, ``mu`` the monotonicity
    constant in ``y`` (non-positive for drivers non-increasing in ``y``).
    ``z_growth`` optionally records sublinear-growth data ``(gamma, eta,
    g_bound)``; the constants are validated and spot-checkable but play no
    quantitative role in the finite recursion.  ``linear`` caches ``(a, b,
    c)`` when ``f = a + b y + c z`` so one-step solves can go closed-form.
    """

    fn: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    lambda_z: float
    mu: float
    tag: str = "custom"
    linear: tuple[float, float, float] | None = None
    z_growth: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        if self.lambda_z < 0:
            raise ValueError("lambda_z must be nonnegative")
        if self.z_growth is not None:
            gamma, eta, g_bound = self.z_growth
            if gamma < 0 or g_bound < 0 or not (0.0 <= eta < 1.0):
                raise ValueError("z-growth data requires gamma >= 0, g >= 0, eta in [0, 1)")

    def __call__(self, t: float, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.fn(t, y, z)

    def spot_check(self, rng: np.random.Generator, samples: int = 256, scale: float = 5.0, tol: float = 1e-9) -> dict[str, float]:
        """Worst observed violation of each declared hypothesis on random data."""
        t = rng.uniform(0.0, 1.0, samples)
        y, y2 = rng.uniform(-scale, scale, (2, samples))
        z, z2 = rng.uniform(-scale, scale, (2, samples))
        out: dict[str, float] = {}
        lip = np.abs(self.fn(t, y, z) - self.fn(t, y, z2)) - self.lambda_z * np.abs(z - z2)
        out["lipschitz_z"] = float(np.max(lip))
        mono = (y - y2) * (self.fn(t, y, z) - self.fn(t, y2, z)) - self.mu * (y - y2) ** 2
        out["monotone_y"] = float(np.max(mono))
        if self.z_growth is not None:
            gamma, eta, g_bound = self.z_growth
            grow = np.abs(self.fn(t, y, z) - self.fn(t, y, np.zeros_like(z)))
            out["z_growth"] = float(np.max(grow - gamma * (g_bound + np.abs(y) + np.abs(z)) ** eta))
        for name, worst in out.items():
            if worst > tol:
                raise ValueError(f"driver {self.tag!r} violates declared {name} bound by {worst:.3e}")
        return out


def constant_driver(value: float) -> Driver:
    value = float(value)
    return Driver(fn=lambda t, y, z: np.full_like(np.asarray(y, dtype=float), value),
                  lambda_z=0.0, mu=0.0, tag="constant", linear=(value, 0.0, 0.0))


def linear_driver(const: float = 0.0, y_coef: float = 0.0, z_coef: float = 0.0) -> Driver:
    a, b, c = float(const), float(y_coef), float(z_coef)
    return Driver(fn=lambda t, y, z: a + b * np.asarray(y, dtype=float) + c * np.asarray(z, dtype=float),
                  lambda_z=abs(c), mu=b, tag="linear", linear=(a, b, c))


def truncated_driver(const: float, y_coef: float, z_coef: float, bound: float) -> Driver:
    """Linear driver clipped to ``[-bound, bound]``; clipping keeps the
    z-Lipschitz constant and can only improve the monotonicity constant."""
    a, b, c = float(const), float(y_coef), float(z_coef)
    bound = float(bound)
    if bound <= 0:
        raise ValueError("truncation bound must be positive")
    fn = lambda t, y, z: np.clip(a + b * np.asarray(y, dtype=float) + c * np.asarray(z, dtype=float), -bound, bound)
    return Driver(fn=fn, lambda_z=abs(c), mu=max(b, 0.0), tag="truncated")


def polynomial_driver(terms: Sequence[tuple[int, int, float]], lambda_z: float, mu: float,
                      z_growth: tuple[float, float, float] | None = None, tag: str = "polynomial") -> Driver:
    """Driver ``f(t, y, z) = sum c * y**i * z**j`` with declared constants."""
    terms = [(int(i), int(j), float(c)) for i, j, c in terms]
    for i, j, _ in terms:
        if i < 0 or j < 0:
            raise ValueError("polynomial powers must be nonnegative")

    def fn(t, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        acc = np.zeros(np.broadcast(y, z).shape)
        for i, j, c in terms:
            acc += c * y**i * z**j
        return acc

    linear = None
    if all(i <= 1 and j <= 1 and i + j <= 1 for i, j, _ in terms):
        a = sum(c for i, j, c in terms if i == 0 and j == 0)
        b = sum(c for i, j, c in terms if i == 1)
        cz = sum(c for i, j, c in terms if j == 1)
        linear = (a, b, cz)
    return Driver(fn=fn, lambda_z=float(lambda_z), mu=float(mu), tag=tag, linear=linear, z_growth=z_growth)


def cfl_margin(driver: Driver, tree: TwoPhaseTree) -> float:
    """``1 - lambda * sqrt(dt)``; comparison-based laws need this >= 0."""
    return 1.0 - driver.lambda_z * tree.sqrt_dt


def _check_mu(driver: Driver, dt: float) -> None:
    if dt * max(0.0, driver.mu) >= 1.0:
        raise ValueError(f"implicit step ill-posed: dt * max(0, mu) = {dt * max(0.0, driver.mu):.3g} >= 1")


def implicit_step(e: np.ndarray, z: np.ndarray, t: float, driver: Driver, dt: float,
                  active: np.ndarray | None = None, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Solve ``y = e + f(t, y, z) dt`` elementwise (identity where inactive).

    The closed form is used for affine drivers; otherwise a bracketed
    bisection on the strictly increasing residual ``y - f dt - e``.
    """
    e = np.asarray(e, dtype=float)
    z = np.asarray(z, dtype=float)
    if driver.linear is not None:
        a, b, c = driver.linear
        y = (e + dt * (a + c * z)) / (1.0 - dt * b)
    else:
        def resid(y: np.ndarray) -> np.ndarray:
            return y - dt * driver.fn(t, y, z) - e

        f0 = driver.fn(t, e, z)
        width = dt * np.abs(f0) + 1e-3 * (1.0 + np.abs(e))
        lo = e - width
        hi = e + width
        for _ in range(200):
            bad_lo = resid(lo) > 0.0
            bad_hi = resid(hi) < 0.0
            if not (bad_lo.any() or bad_hi.any()):
                break
            width = width * 2.0
            lo = np.where(bad_lo, e - width, lo)
            hi = np.where(bad_hi, e + width, hi)
        else:  # pragma: no cover - pathological driver
            raise RootSolveError("could not bracket the implicit one-step root")
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            go_lo = resid(mid) <= 0.0
            lo = np.where(go_lo, mid, lo)
            hi = np.where(go_lo, hi, mid)
            if np.max(hi - lo) <= 1e-15 * (1.0 + np.max(np.abs(mid))):
                break
        y = 0.5 * (lo + hi)
        worst = float(np.max(np.abs(resid(y))))
        if worst > max(tol, tol * float(np.max(np.abs(y)))):
            raise RootSolveError(f"one-step residual {worst:.3e} above tolerance {tol:.3e}")
    if active is not None:
        y = np.where(active, y, e)
    if not np.all(np.isfinite(y)):
        raise RootSolveError("implicit step produced non-finite values")
    return y


class TransitionIncrements:
    """Signed increments attached to the transitions of a tree.

    ``phase[k]`` acts on AT(k) -> AFTER(k) (one entry per step-k node);
    ``step[k]`` acts on AFTER(k) -> AT(k+1) and is predictable: one entry
    per step-k parent, applied to both children.
    """

    __slots__ = ("tree", "phase", "step")

    def __init__(self, tree: TwoPhaseTree, phase: Sequence[np.ndarray], step: Sequence[np.ndarray]) -> None:
        if len(phase) != tree.n_steps or len(step) != tree.n_steps:
            raise ValueError("increment slot count does not match the tree depth")
        self.tree = tree
        self.phase = [np.asarray(a, dtype=float) for a in phase]
        self.step = [np.asarray(a, dtype=float) for a in step]
        for k in range(tree.n_steps):
            if self.phase[k].shape != (tree.nodes_at(k),) or self.step[k].shape != (tree.nodes_at(k),):
                raise ValueError(f"increment arrays at step {k} have wrong shape")

    @classmethod
    def zeros(cls, tree: TwoPhaseTree) -> "TransitionIncrements":
        return cls(tree, [np.zeros(tree.nodes_at(k)) for k in range(tree.n_steps)],
                   [np.zeros(tree.nodes_at(k)) for k in range(tree.n_steps)])

    def combine(self, other: "TransitionIncrements", sign: float = 1.0) -> "TransitionIncrements":
        return TransitionIncrements(
            self.tree,
            [a + sign * b for a, b in zip(self.phase, other.phase)],
            [a + sign * b for a, b in zip(self.step, other.step)],
        )

    def is_nonnegative(self, tol: float = 0.0) -> bool:
        return all(np.all(a >= -tol) for a in self.phase) and all(np.all(a >= -tol) for a in self.step)

    def total_variation(self) -> float:
        return float(sum(np.sum(np.abs(a)) for a in self.phase) + sum(np.sum(np.abs(a)) for a in self.step))

    def max_abs(self) -> float:
        vals = [np.max(np.abs(a), initial=0.0) for a in self.phase] + [np.max(np.abs(a), initial=0.0) for a in self.step]
        return float(max(vals, default=0.0))


@dataclass
class BSDESolution:
    """Value process and integrand; ``z[k]`` sits at the step-k parents."""

    y: OptionalProcess
    z: list[np.ndarray]

    def martingale_representation_gap(self) -> float:
        """Exactness of ``Y_up - Y_down = 2 Z sqrt(dt)`` (should be 0.0)."""
        tree = self.y.tree
        gap = 0.0
        for k in range(tree.n_steps):
            nxt = self.y.at[k + 1]
            gap = max(gap, float(np.max(np.abs((nxt[0::2] - nxt[1::2]) - 2.0 * self.z[k] * tree.sqrt_dt))))
        return gap


def solve_bsde(tree: TwoPhaseTree, terminal: np.ndarray, driver: Driver,
               dv: TransitionIncrements | None = None, *,
               driver_mask: Sequence[np.ndarray] | None = None, step_offset: int = 0,
               tol_root: float = 1e-12, max_iter: int = 200) -> BSDESolution:
    """Backward solve of the unreflected equation with optional drift ``dV``.

    ``driver_mask[k]`` (per step-k parent, boolean) switches the driver off
    on masked diffusion transitions; used to realise horizon cuts and
    locality masks.  ``step_offset`` shifts the time argument fed to the
    driver when solving on an extracted subtree.
    """
    _check_mu(driver, tree.dt)
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (tree.n_leaves,):
        raise ValueError("terminal condition must have one value per leaf")
    n, dt = tree.n_steps, tree.dt
    y_at: list[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    y_after: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    zs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    y_at[n] = terminal.copy()
    for k in range(n - 1, -1, -1):
        nxt = y_at[k + 1]
        e = 0.5 * (nxt[0::2] + nxt[1::2])
        zs[k] = (nxt[0::2] - nxt[1::2]) / (2.0 * tree.sqrt_dt)
        if dv is not None:
            e = e + dv.step[k]
        active = None if driver_mask is None else np.asarray(driver_mask[k], dtype=bool)
        y_after[k] = implicit_step(e, zs[k], (step_offset + k) * dt, driver, dt,
                                   active=active, tol=tol_root, max_iter=max_iter)
        y_at[k] = y_after[k] + dv.phase[k] if dv is not None else y_after[k].copy()
    return BSDESolution(y=OptionalProcess(tree, y_at, y_after), z=zs)


def ef_backward_batch(tree: TwoPhaseTree, driver: Driver, terminal_rows: np.ndarray,
                      masks: Sequence[np.ndarray] | None = None, *, step_offset: int = 0,
                      tol_root: float = 1e-12, max_iter: int = 200) -> list[np.ndarray]:
    """Vectorised batch of unreflected backward recursions.

    ``terminal_rows`` has shape (R, n_leaves); ``masks[k]`` (R, 2**k)
    activates the driver per row and parent.  Returns per-step value
    matrices ``val[k]`` of shape (R, 2**k); phase transitions carry nothing
    here, so ``val[k]`` is the value at both AT(k) and AFTER(k).
    """
    _check_mu(driver, tree.dt)
    terminal_rows = np.asarray(terminal_rows, dtype=float)
    if terminal_rows.ndim != 2 or terminal_rows.shape[1] != tree.n_leaves:
        raise ValueError("terminal_rows must have shape (rows, n_leaves)")
    n, dt = tree.n_steps, tree.dt
    vals: list[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    vals[n] = terminal_rows
    for k in range(n - 1, -1, -1):
        nxt = vals[k + 1]
        e = 0.5 * (nxt[:, 0::2] + nxt[:, 1::2])
        z = (nxt[:, 0::2] - nxt[:, 1::2]) / (2.0 * tree.sqrt_dt)
        active = None if masks is None else np.asarray(masks[k], dtype=bool)
        vals[k] = implicit_step(e, z, (step_offset + k) * dt, driver, dt,
                                active=active, tol=tol_root, max_iter=max_iter)
    return vals


def gather_at_keys(tree: TwoPhaseTree, vals: Sequence[np.ndarray], keys: np.ndarray) -> np.ndarray:
    """Read batch values at per-leaf phase points.

    ``vals[k]`` has shape (R, 2**k) (one merged value per step, as produced
    by :func:`ef_backward_batch`); ``keys`` is (n_leaves,) or (R, n_leaves)
    of phase-order keys.  Returns an (R, n_leaves) matrix.
    """
    rows = vals[0].shape[0]
    keys = np.asarray(keys)
    if keys.ndim == 1:
        keys = np.broadcast_to(keys, (rows, tree.n_leaves))
    out = np.empty((rows, tree.n_leaves))
    for key in range(2 * tree.n_steps + 1):
        mask = keys == key
        if not mask.any():
            continue
        step = key >> 1
        spread = np.repeat(vals[step], tree.leaf_stride(step), axis=1)
        out[mask] = spread[mask]
    return out


@dataclass
class NonlinearExpectation:
    """Result of the conditional operator: per-leaf values at alpha plus the
    full backward value table (valid on [[alpha, beta]], frozen beyond)."""

    values: np.ndarray
    process: OptionalProcess


def nonlinear_expectation(tree: TwoPhaseTree, alpha: StoppingTime, beta: StoppingTime,
                          xi: np.ndarray, driver: Driver, *, step_offset: int = 0,
                          tol_root: float = 1e-12, max_iter: int = 200) -> NonlinearExpectation:
    """Conditional nonlinear expectation of ``xi`` over ``[[alpha, beta]]``.

    ``xi`` (per leaf) must be measurable at ``beta``: constant on every
    beta-atom.  The driver is switched off strictly after ``beta``, which
    freezes ``xi`` along each path, so extending the recursion to the full
    horizon changes nothing — that identity is what makes the masked
    implementation valid.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (tree.n_leaves,):
        raise ValueError("xi must have one value per leaf")
    if not (tree.same_grid(alpha.tree) and tree.same_grid(beta.tree)):
        raise ValueError("stopping times live on a different grid")
    if not alpha.leq(beta):
        raise ValueError("alpha must not exceed beta")
    n = tree.n_steps
    beta_keys = beta.keys
    for leaf in range(tree.n_leaves):
        k = int(beta.steps[leaf])
        leader = (leaf >> (n - k)) << (n - k)
        if xi[leaf] != xi[leader]:
            raise ValueError("xi is not measurable at beta (differs within a beta-atom)")
    masks = []
    for k in range(n):
        stride = tree.leaf_stride(k)
        masks.append((beta_keys[::stride] >= 2 * (k + 1)))
    vals = ef_backward_batch(tree, driver, xi[None, :], masks,
                             step_offset=step_offset, tol_root=tol_root, max_iter=max_iter)
    at = [vals[k][0] for k in range(n + 1)]
    after = [vals[k][0].copy() for k in range(n)]
    process = OptionalProcess(tree, [a.copy() for a in at], after)
    values = gather_at_keys(tree, vals, alpha.keys)[0]
    return NonlinearExpectation(values=values, process=process)


@dataclass
class ClassifyResult:
    is_supermartingale: bool
    is_submartingale: bool
    verdict: str
    max_super_violation: float
    max_sub_violation: float
    mode: str

    @staticmethod
    def from_violations(sup_v: float, sub_v: float, tol: float, mode: str) -> "ClassifyResult":
        is_super = sup_v <= tol
        is_sub = sub_v <= tol
        verdict = ("martingale" if is_super and is_sub
                   else "supermartingale" if is_super
                   else "submartingale" if is_sub
                   else "neither")
        return ClassifyResult(is_super, is_sub, verdict, sup_v, sub_v, mode)


def classify_ef(process: OptionalProcess, driver: Driver, *, from_time: StoppingTime | None = None,
                to_time: StoppingTime | None = None, mode: str = "onestep", tol: float = 1e-12,
                enum_bound: int = 3, tol_root: float = 1e-12, max_iter: int = 200) -> ClassifyResult:
    """Classify a process as a super/sub-martingale for the nonlinear operator.

    ``onestep`` checks every transition inside the window: AT(k) >= AFTER(k)
    across phases (the operator is the identity there) and AFTER(k) against
    the implicit one-step value of the children.  ``brute`` enumerates all
    phase-resolved stopping pairs sigma <= tau in the window and tests the
    operator inequality at every atom; the two modes agree by backward
    induction and that agreement is itself a tested invariant.
    """
    tree = process.tree
    if from_time is None:
        from_time = StoppingTime.constant(tree, 0, Phase.AT)
    if to_time is None:
        to_time = StoppingTime.constant(tree, tree.n_steps, Phase.AT)
    if not from_time.leq(to_time):
        raise ValueError("empty window: from_time exceeds to_time")
    if mode == "onestep":
        sup_v = sub_v = 0.0
        for k in range(tree.n_steps):
            stride = tree.leaf_stride(k)
            fk = from_time.keys[::stride]
            tk = to_time.keys[::stride]
            phase_in = (fk <= 2 * k) & (tk >= 2 * k + 1)
            if phase_in.any():
                diff = process.after[k] - process.at[k]  # >0 breaks supermartingale
                sup_v = max(sup_v, float(np.max(diff[phase_in], initial=-np.inf)))
                sub_v = max(sub_v, float(np.max(-diff[phase_in], initial=-np.inf)))
            step_in = (fk <= 2 * k + 1) & (tk >= 2 * (k + 1))
            if step_in.any():
                nxt = process.at[k + 1]
                e = 0.5 * (nxt[0::2] + nxt[1::2])
                z = (nxt[0::2] - nxt[1::2]) / (2.0 * tree.sqrt_dt)
                pred = implicit_step(e, z, tree.time(k), driver, tree.dt, tol=tol_root, max_iter=max_iter)
                diff = pred - process.after[k]
                sup_v = max(sup_v, float(np.max(diff[step_in], initial=-np.inf)))
                sub_v = max(sub_v, float(np.max(-diff[step_in], initial=-np.inf)))
        return ClassifyResult.from_violations(max(sup_v, 0.0), max(sub_v, 0.0), tol, mode)
    if mode != "brute":
        raise ValueError(f"unknown mode {mode!r}")
    if tree.n_steps > enum_bound:
        raise EnumerationBoundError(
            f"brute classification enumerates stopping pairs and is capped at depth {enum_bound}; "
            "use mode='onestep' for deeper trees")
    from .lattice import enumerate_stopping_times  # local import to keep module load light

    steps_m, phases_m = enumerate_stopping_times(tree, phase_resolved=True)
    keys_m = 2 * steps_m.astype(np.int64) + phases_m
    fk, tk = from_time.keys, to_time.keys
    in_window = (np.all(keys_m >= fk, axis=1) & np.all(keys_m <= tk, axis=1))
    idx = np.nonzero(in_window)[0]
    pairs = [(i, j) for i in idx for j in idx if np.all(keys_m[i] <= keys_m[j])]
    if not pairs:
        return ClassifyResult.from_violations(0.0, 0.0, tol, mode)
    sig_rows = np.array([i for i, _ in pairs])
    tau_rows = np.array([j for _, j in pairs])
    # terminal per pair: X read at tau's slot
    x_at_tau = _gather_process(process, keys_m[tau_rows])
    masks = []
    for k in range(tree.n_steps):
        stride = tree.leaf_stride(k)
        masks.append(keys_m[tau_rows][:, ::stride] >= 2 * (k + 1))
    vals = ef_backward_batch(tree, driver, x_at_tau, masks, tol_root=tol_root, max_iter=max_iter)
    at_sigma = gather_at_keys(tree, vals, keys_m[sig_rows])
    x_at_sigma = _gather_process(process, keys_m[sig_rows])
    diff = at_sigma - x_at_sigma  # >0 breaks supermartingale
    sup_v = float(np.max(diff, initial=0.0))
    sub_v = float(np.max(-diff, initial=0.0))
    return ClassifyResult.from_violations(max(sup_v, 0.0), max(sub_v, 0.0), tol, mode)


def _gather_process(process: OptionalProcess, keys: np.ndarray) -> np.ndarray:
    """Process values at per-leaf phase points, one row per key row."""
    tree = process.tree
    keys = np.asarray(keys)
    if keys.ndim == 1:
        keys = keys[None, :]
    out = np.empty((keys.shape[0], tree.n_leaves))
    for key in range(2 * tree.n_steps + 1):
        mask = keys == key
        if not mask.any():
            continue
        step, ph = key >> 1, key & 1
        arr = process.at[step] if ph == 0 else process.after[step]
        spread = np.broadcast_to(tree.spread(arr, step), out.shape)
        out[mask] = spread[mask]
    return out
