"""Consistent (forward) stochastic utility fields built from simulated flows.

Build a utility random field U(t,x) from coupled optimal-wealth and
state-price-density flows (or from closed-form families), conjugate it,
change numeraire, and verify every dynamic identity it must satisfy by
Monte Carlo residuals and martingale tests.
"""

from .errors import (
    ConstraintViolationError,
    CouplingError,
    FlowUtilityError,
    InvalidConfigError,
    InvalidFieldError,
    InvalidInputError,
    NoArbitrageViolationError,
    NonInvertibleFlowError,
    RangeError,
    SimulationBlowupError,
    SingularMarketError,
)
from .market import (
    MarketSpec,
    minimal_risk_premium,
    project_sigma,
    spd_local_dynamics,
    wealth_local_dynamics,
)
from .lattice import (
    BrownianLattice,
    DualPolicyField,
    FlowBundle,
    PolicyField,
    generate_lattice,
    require_coupled,
    simulate_scalar,
    simulate_spd_flow,
    simulate_wealth_flow,
)
from .flows import (
    InverseFlowField,
    MonotonicityAudit,
    audit_monotone,
    compose_flows,
    flow_initial_derivative,
    invert_flow,
    inverse_flow_dynamics_residual,
)
from .utility import (
    DualField,
    InitialUtility,
    MeasureMixture,
    UtilityField,
    build_utility_field,
    closed_form_ZN,
    conjugate_field,
    decreasing_utility,
    default_x_grid,
    dual_optimal_nu,
    make_initial_utility,
    optimal_policy_from_field,
)
from .verify import (
    FieldCharacteristics,
    dual_drift_residual,
    estimate_characteristics,
    hjb_drift_residual,
    ito_ventzel_residual,
    marginal_dynamics_check,
    martingale_test,
    risk_tolerance_check,
)
from .numeraire import (
    NumeraireSpec,
    change_numeraire_market,
    numeraire_portfolio,
    transform_utility,
    transform_wealth,
)
from .reports import MartingaleVerdict, ResidualReport

__version__ = "0.1.0"
