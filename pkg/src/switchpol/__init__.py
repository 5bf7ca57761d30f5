"""Switching mixture-of-experts driving policies learned from state trajectories."""

__version__ = "0.1.0"

from .core import (GENERAL, MODE_DEPENDENT, STATE_DEPENDENT, STATIC, HistoryLayout, HistoryVector,
                   NaturalParams, PolicyParams, Trajectory, from_natural, gate_probs, to_natural)
from .errors import *  # noqa: F401,F403
from .inference import (SupervisedSequence, brute_force_loglik, brute_force_posterior, forward_backward,
                        forward_filter, neg_loglik)
from .learning import FitConfig, FitReport, RegConfig, em_fit, initialize
from .stability import StabilityCertificate, check_feasibility, contraction_rollout_test
from .bicycle import VehicleParams, invert_input, invert_inputs, step_euler, step_rk4
from .track import TrackGeometry, centerline_yaw_rates, to_frenet
from .datagen import FeatureSpec, ScenarioSpec, build_features, downsample, make_suite, read_trajectory, \
    simulate_closed_loop, write_trajectory
from .evaluation import (MetricTable, PredictionRun, baseline_cc, joint_prediction, mae, recursive_one_step,
                         segment_eval, trimmed_mean)
