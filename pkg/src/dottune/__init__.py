"""Dynamic knob-set tuning: BO with online RFECV pruning, an LRT stay/expand policy and adaptive benchmarking."""

from .bench import BenchPolicy, Measurement, evaluate_batch_adaptive, evaluate_throughput_adaptive, mape
from .bo import BoResult, bo_propose, bo_run
from .forest import Forest, RegressionTree, cv_score, forest_fit, rfecv, rfecv_select, tree_fit
from .policy import LrtState, PolicyDecision, always_expand_step, lrt_step, thompson_step
from .session import TuningSession
from .space import (KnobCatalog, KnobSpec, Observation, ObservationSet, encode, project, sample_lhs,
                    sample_random, validate)
from .stats import (convergence_olap, convergence_oltp, friedman_test, jaccard, replicate, stability_study,
                    welch_t_test)
from .surrogate import GpSurrogate, acquisition_ei, gp_fit, gp_predict
from .targets import (ExternalTarget, SyntheticSurface, SyntheticTarget, brute_force_optimum, external_eval,
                      fixture, simulate_batch, simulate_throughput, surface_eval)
from .tuner import RunLog, TuneParams, bo_fixed_tune, dot_tune, incremental_tune, statistical_elimination_tune, tune

__version__ = "0.1.0"
