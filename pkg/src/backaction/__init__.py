"""Simulation of feedback control of continuously measured qubits (and
N-level systems) by adaptive choice of the measured observable.

Submodules: `core` (states and error metric), `sde` (stochastic integrator
and ensembles), `protocols` (feedback laws and reduced models), `sme`
(stochastic master equation), `fokker_planck` (density evolution oracle),
`analysis` (rates, first passage, steady state), `cli`.
"""

from .analysis import (EnsembleSeries, EnsembleSpec, FirstPassageResult, RateFit,
                       SteadyState, SweepResult, ensemble_average_error, first_passage_times,
                       fit_asymptotic_rate, passage_rate, resampled_error_series,
                       simulate_errors, steady_state_error, sweep_optimal_k)
from .config import ConfigError, RunConfig, load_config
from .core import (BlochState, MeasurementSetting, ReducedState, TargetSpec,
                   bloch_to_density, density_to_bloch, error_probability, reduced_coords)
from .fokker_planck import DensityField, Grid1D, decay_rate_from_fp, fp_evolve
from .protocols import ControlParams, NoiseParams, ProtocolKind, select_measurement
from .sde import NoiseStream, SdeModel, run_ensemble, run_trajectory
from .sme import (ControlledNLevel, ControlledQubit, LindbladNoise, run_controlled_sme,
                  run_nlevel_control, sme_step)

__version__ = "0.1.0"
