"""Variable-order fractional kinetics of mean-field interacting particles.

The package simulates the particle chain with power-tail waiting times,
solves the limiting kinetic flow, runs the variable-order subordinator and
its inverse, evaluates the explicit solution formulas, and checks that the
solution satisfies the mixed fractional differential equation.
"""

from .errors import (
    ConfigError,
    HorizonError,
    ParameterError,
    PositivityError,
    QuadratureError,
    StatisticsError,
    StepSizeError,
)
from .model import (
    EmpiricalMeasure,
    GridDensity,
    ModelSpec,
    TestFunctional,
    make_coefficient,
    make_kernel,
    mean_field_drift,
    order_of,
    total_intensity,
)
from .streams import (
    RngStream,
    sample_onesided_stable,
    sample_pareto_waiting,
)
from .kinetic import (
    FlowSolution,
    flow_functional,
    solve_flow_ensemble,
    solve_flow_grid,
    stable_dt,
)
from .subordinator import (
    DIRECT,
    FORMULA_DENSITY,
    FORMULA_PATH,
    DensityEstimate,
    SolutionEstimate,
    SubordinatorPath,
    estimate_density,
    evaluate_direct,
    evaluate_formula,
    increment_scale,
    inverse_time,
    simulate_subordinator,
)
from .fractional import (
    ResidualParams,
    ResidualReport,
    TimeProfile,
    limit_generator_apply,
    residual_eq4,
    rhs_spatial,
    right_caputo_variable,
)
from .ctrw import (
    ChainState,
    CtrwParams,
    CtrwResult,
    chain_step,
    jump_kernel_sample,
    prelimit_generator_apply,
    run_chain_ensemble,
    run_ctrw_ensemble,
    scaled_ctrw_evaluate,
)
from .rates import (
    RateCase,
    RateTestFunction,
    lhs_scaled_integral,
    rate_bound_check,
    rhs_stable_integral,
)

__version__ = "0.1.0"
