"""lemsim: a desk-scale two-tier local electricity market simulator on
three-phase unbalanced distribution networks."""

from .network import (
    Branch,
    Bus,
    NetworkValidationError,
    PowerFlowResult,
    ThreePhaseNetwork,
    build_admittance,
    build_incidence,
    power_flow_oracle,
)
from .convexprog import ConvexProgram, KktReport, SolveResult, kkt_residuals, solve
from .secondary import (
    CommoditySets,
    DcaBid,
    PmSetpoint,
    SmClearingResult,
    TariffLedger,
    aggregate_smo_bid_ranges,
    classify_commodity_sets,
    clear_sm_lexicographic,
    compute_price_multipliers,
    compute_retail_tariffs,
)
from .primary import (
    CiOpfSolution,
    Dlmp,
    GapReport,
    PmWeights,
    SmoBid,
    VarBounds,
    assemble_ciopf,
    build_mce,
    equivalent_rate,
    extract_dlmp,
    preprocess_bounds,
    relaxation_gap,
    solve_pm,
)
from .cosim import (
    DcaSpec,
    MarketLog,
    Metrics,
    Scenario,
    ScenarioError,
    SmoSpec,
    compute_metrics,
    generate_synthetic_bids,
    prepare_population,
    run,
)
from .scenario_io import (
    SchemaError,
    parse_scenario,
    parse_scenario_dict,
    serialize_scenario,
    write_result_bundle,
)

__version__ = "0.1.0"
