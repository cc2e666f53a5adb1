"""
shsagg: populations of responsive electric loads as stochastic hybrid
systems.

The package has two routes to the aggregate power of a load population
and exists to cross-validate them:

* `mc` simulates every load's hybrid trajectory (Euler-Maruyama plus
  guard crossings and hazard-driven jumps) and sums the outputs;
* `pde` advances the coupled mode-conditional density equations (a
  Fokker-Planck system tied together by switching boundary conditions)
  with a Donor-Cell finite-volume scheme and dimensional splitting.

`model` defines the load families (HVAC thermostats on a second-order
thermal model, deferrable PEV charging), `hetero` reduces heterogeneous
parameter populations to weighted cluster representatives, `scenario`
wires full demand-response studies and writes comparable CSV outputs.
"""

from .model import (
    OFF, ON, PEV_WAITING, PEV_CHARGING, PEV_DONE,
    HouseParameters, EtpParameters, HvacControl, PevParameters,
    HybridState, LoadModel, AffineThresholdSystem,
    etp_matrices, make_hvac_etp, make_price_responsive, hvac_from_house,
    make_pev, evaluate_drift, evaluate_jump_intensity, gram,
    etp_feature_vector, etp_from_features, ETP_FEATURE_NAMES,
)
from .mc import (
    ControlSchedule, JumpEvent, Trajectory, PowerSeries, PopulationState,
    PopulationResult, ZenoError, BlowupError,
    step_euler_maruyama, locate_crossing, sample_random_jump,
    simulate_trajectory, simulate_population, empirical_density,
)
from .hetero import (
    Coordinate, ParameterDistribution, LoadSample, ClusterSet,
    default_hvac_distribution, sample_parameters, models_from_samples,
    kmeans, cluster_models, mixture_density, mixture_power,
    save_clusters, load_clusters,
)
from .partition import (
    Component, GuardFace, DomainPartition, build_partition,
    WALL, TRUNCATION, GUARD, PERIODIC,
)
from .pde import (
    ConservationError, MassRoutingError, GridSpec, Grid, DensityField,
    FluxField, SolveResult, make_grid, band_uniform_density,
    box_uniform_density, bump_density, cell_density, compute_flux,
    advect_diffuse_step, jump_exchange_step, apply_boundary,
    guard_face_values, cfl_dt, step_dt_max, solve, total_mass,
    aggregated_power,
)
from .scenario import (
    ScenarioConfig, ComparisonReport,
    run_setback, run_price_response, run_pev, run_scenario,
    run_mc_pipeline, run_pde_pipeline, compare_series,
    settling_values, rebound_period,
    write_power_csv, write_states_csv, write_density_csv, write_report,
)

__version__ = "0.1.0"
