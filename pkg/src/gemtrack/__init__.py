"""Sensor-subset scheduling and Markov chain tracking with online EM.

A Gibbs sampler picks which sensors report at each step, a Lagrange
multiplier keeps the average number of active sensors at a budget, a
Kalman-like tracker follows the chain's belief vector, and online EM learns
the transition matrix (and optionally the sensor means) along the way.
"""

from .chain import (ChainSampler, TransitionMatrix, new_transition_matrix,
                    random_transition_matrix, stationary_distribution, step_chain)
from .errors import (CholeskyFailure, DegenerateFilter, DimensionMismatch, EmptyMatrix, GemError,
                     InvalidIndex, NoConvergence, NonStochastic, ParseError, SingularCovariance,
                     SingularInnovation, ValidationError)
from .estimator import EstimatorState, belief_cov, estimate_step, predict, project_to_simplex
from .harness import (RunSummary, RunTimeSeries, ScenarioConfig, compare, parse_config,
                      run_scenario, write_outputs)
from .online_em import (EMState, OnlineEM, e_step, em_init, filter_update, gaussian_weight, m_step,
                        retrospective, writeback)
from .scheduler import (ALPHA, GAMMA, CostTable, Multiplier, StepSchedule, cost, flip_probability,
                        gibbs_step, step_size, update_f, update_lambda)
from .sensors import (Observation, SensorLibrary, SubsetParams, observe, random_sensor_params,
                      subset_params)

__version__ = "0.1.0"
