"""Verification laboratory for doubly-reflected backward equations and
two-player optional-stopping games on finite binary two-phase lattices.

Everything is exactly computable: solver outputs can be cross-checked by
exhaustive enumeration of strategies and stopping systems, so each
structural claim (minimality, saddle points, envelope ordering,
truncation limits) ships with a brute-force verifier.
"""

from .expectation import (
    BSDESolution,
    ClassifyResult,
    Driver,
    EnumerationBoundError,
    NonlinearExpectation,
    RootSolveError,
    TransitionIncrements,
    cfl_margin,
    classify_ef,
    constant_driver,
    implicit_step,
    linear_driver,
    nonlinear_expectation,
    polynomial_driver,
    solve_bsde,
    truncated_driver,
)
from .games import (
    EpsilonSaddle,
    GameCheck,
    GameValues,
    SaddleReport,
    brute_force_values,
    epsilon_ratio_ok,
    epsilon_saddle,
    game_equals_rbsde,
    game_value_at,
    payoff_extended,
    payoff_plain,
    right_jump_counterexample,
    saddle_points,
    value_identity_applicable,
)
from .lattice import (
    HittingResult,
    OptionalProcess,
    Phase,
    SemicontinuityFlags,
    StoppingSystem,
    StoppingTime,
    TimePoint,
    TwoPhaseTree,
    build_tree,
    enumerate_stopping_times,
    eval_lower,
    eval_upper,
    first_hitting,
    process_to_rows,
    semicontinuity,
)
from .reflect import (
    Barriers,
    ContinuityAnalogueReport,
    DynamicsReport,
    MinimalityReport,
    RBSDESolution,
    SeparationFailure,
    TruncationReport,
    Witness,
    check_minimality,
    clipped_driver,
    continuity_analogue,
    growth_points,
    mokobodzki_witness,
    snell_envelopes,
    solve_rbsde,
    truncation_scheme,
    verify_dynamics,
)
from .scenario import (
    DEFAULT_TOLERANCES,
    Scenario,
    ScenarioError,
    load_scenario,
    random_scenario,
    scenario_from_dict,
)

__version__ = "0.1.0"
