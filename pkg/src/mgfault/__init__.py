"""Optimization-based ground-fault detection for inverter-based microgrids."""

from .model import (ContinuousModel, DiscreteModel, DisturbanceSplit,
                    MicrogridParams, StateVector, build_faulty_model,
                    build_normal_model, discretize, dq_transform,
                    inverse_dq_transform, split_disturbance, steady_state,
                    unified_model)
from .dae import (DaeSystem, FeasibilityReport, InfeasibleError, NumericalError,
                  StackedDae, build_dae, feasibility_check, left_pseudo_inverse,
                  stack_matrices)
from .synthesis import (Denominator, DetectabilityResult, FilterCoefficients,
                        SignatureMatrix, Threshold, average_signature,
                        build_gamma, compute_threshold, detectability_check,
                        impulse_response, load_filter_artifact,
                        save_filter_artifact, signature_instance, solve_analytic,
                        solve_qp)
from .simulate import (DisturbanceSpec, Scenario, Trace, UncertaintySpec,
                       generate_disturbance_instances,
                       generate_uncertainty_instances, perfect_setting_models,
                       simulate_scenario)
from .detect import AlarmEvent, Detector, false_alarm_rate, run_detection

__version__ = "0.1.0"
