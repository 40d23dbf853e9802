"""Patch-growing land-use change simulation toolkit.

Pipeline: mine per-class growth probability surfaces from two land-use
dates and a driving-factor stack (random-forest expansion rules), project
per-class demand (Markov baseline or optimization scenarios), allocate the
demand spatially with a seeded patch-growth cellular automaton, and
validate against observed change (figure of merit, landscape metrics).
"""

__version__ = "0.1.0"

from .ca import (
    SimulationConfig,
    SimulationResult,
    TransitionMatrix,
    descend_threshold,
    gate_change,
    neighborhood_effect,
    overall_probability,
    roulette_select,
    simulate,
    update_demand_coeff,
)
from .demand import (
    Constraint,
    DemandSchedule,
    LinearProgram,
    MarkovMatrix,
    estimate_markov,
    hectares_to_cells,
    interpolate_demand,
    load_scenario_config,
    project_baseline,
    project_markov,
    solve_lp,
    solve_scenario,
)
from .errors import (
    DataError,
    DemandInfeasibleError,
    PatchSimError,
    SolverError,
)
from .expansion import (
    ExpansionMap,
    GrowthSurfaceSet,
    MiningResult,
    build_training,
    extract_expansion,
    mine_growth_surfaces,
)
from .forest import (
    Forest,
    TrainingSet,
    VariableImportance,
    fit_forest,
    load_forest,
    predict_proba,
    predict_proba_batch,
    save_forest,
    variable_importance,
)
from .metrics import (
    FomResult,
    MetricsReport,
    Patch,
    compare_reports,
    figure_of_merit,
    landscape_metrics,
    patchify,
)
from .raster import (
    CategoricalRaster,
    ContinuousRaster,
    FactorStack,
    assert_aligned,
    class_areas,
    cells_to_hectares,
    load_ascii_grid,
    load_binary_grid,
    load_grid,
    save_ascii_grid,
    save_binary_grid,
)

__all__ = [name for name in dir() if not name.startswith("_")]
