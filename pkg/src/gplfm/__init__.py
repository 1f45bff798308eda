"""Gaussian-process latent force models for structural virtual sensing."""

__version__ = "0.1.0"

from .calibration import (HyperFitReport, NoiseTuneReport, count_local_minima, empirical_output_cov,
                          fit_hyperparameters, hellinger_gaussian, model_output_cov,
                          tune_measurement_noise)
from .estimator import (EstimationResult, GaussianBelief, MeasurementSet, denormalize,
                        estimate, kalman_filter, normalize_channels, recover_latents,
                        rts_smooth)
from .fatigue import (CycleSet, FatigueReport, accuracy_metrics, damage_equivalent_load,
                      rainflow, sn_histogram)
from .kernels import (GpSsm, KernelSpec, discretize_gp, kernel_from_ssm, matern_cov,
                      matern_ssm, solve_lyapunov)
from .lfm import AugmentedSsm, GplfmSetup, augment, block_force_model, discretize, steady_state
from .structural import (MeasurementMap, ModalModel, Sensor, StructuralModel,
                         assemble_cantilever_beam, assemble_chain, build_measurement,
                         discretize_zoh, mac, modal_decompose, strain_matrix, to_continuous_ss)

__all__ = [n for n in dir() if not n.startswith("_")]
