"""Gridless super-resolution of fluorescence fluctuation stacks.

Spikes are recovered off the grid by Sliding Frank-Wolfe, either from the
temporal mean of a stack or from its pixel covariance.
"""
from .measure import (DiscreteMeasure, Domain, SpikeFileError, merge_close_spikes,
                      prune_zero_amplitudes, read_spikes, tv_norm, write_spikes)
from .operators import (PsfModel, atom, atom_gradient, gaussian_1d_pixel_integral,
                        lambda_adjoint_eval, lambda_adjoint_gradient, lambda_apply,
                        phi_adjoint_eval, phi_apply)
from .temporal import (ImageStack, StackFormatError, empirical_covariance, empirical_mean,
                       read_covariance, read_stack, write_covariance, write_stack)
from .simulate import (NoiseModel, PhotoPhysics, SimulationConfig, simulate_amplitude_traces,
                       simulate_stack)
from .sfw import (ProblemInstance, ProblemKind, SolverOptions, SolverReport, Termination,
                  certificate, insert_spike, lambda_max, lasso_amplitudes, objective, slide,
                  solve)
from .evaluation import (jaccard_index, localization_rmse, match_spikes, metrics,
                         render_measure)

__version__ = "0.1.0"

__all__ = [
    "DiscreteMeasure", "Domain", "SpikeFileError", "merge_close_spikes", "prune_zero_amplitudes",
    "read_spikes", "tv_norm", "write_spikes",
    "PsfModel", "atom", "atom_gradient", "gaussian_1d_pixel_integral", "lambda_adjoint_eval",
    "lambda_adjoint_gradient", "lambda_apply", "phi_adjoint_eval", "phi_apply",
    "ImageStack", "StackFormatError", "empirical_covariance", "empirical_mean",
    "read_covariance", "read_stack", "write_covariance", "write_stack",
    "NoiseModel", "PhotoPhysics", "SimulationConfig", "simulate_amplitude_traces",
    "simulate_stack",
    "ProblemInstance", "ProblemKind", "SolverOptions", "SolverReport", "Termination",
    "certificate", "insert_spike", "lambda_max", "lasso_amplitudes", "objective", "slide",
    "solve",
    "jaccard_index", "localization_rmse", "match_spikes", "metrics", "render_measure",
]
