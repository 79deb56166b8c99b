"""Stochastic trajectory simulator for open quantum systems that start in
thermal equilibrium with their harmonic environment.

The workflow: diagonalise the bath into normal modes, tabulate its memory
kernels, synthesise correlated complex Gaussian noise on a real-time plus
imaginary-time grid, quench each trajectory through imaginary time to build
the equilibrated initial state, evolve it through real time, and average many
trajectories into the physical reduced density matrix.  An exact
small-system reference (full diagonalization of system plus truncated bath)
validates the whole chain.
"""

from .config import RunConfig, emit_config, load_config, parse_config
from .ensemble import (EnsembleResult, HermiticityReport, Pipeline, build_pipeline,
                       compare_series, hermiticity_trace_report, run_ensemble,
                       run_equilibration, write_csv, write_document)
from .kernels import (KernelContext, k_complex, k_imag_even, k_imag_odd, k_real_i,
                      k_real_r, l_matrix)
from .model import (BathSpec, Drive, NormalModes, SystemSpec, diagonalize_bath,
                    hamiltonian_at, mode_couplings)
from .noise import (NoiseBundle, NoiseCovariance, NoiseFactor, TimeGrids,
                    build_covariance, factorize, hs_identity_check, sample, takagi,
                    verify_empirical)
from .oracle import TruncatedBath, build_total_hamiltonian, exact_reduced_dynamics
from .propagate import (TrajectoryOutput, TrajectoryState, commutator_step_generator,
                        equilibrate, evolve, run_trajectory)

__version__ = "0.1.0"

__all__ = [
    "BathSpec", "Drive", "EnsembleResult", "HermiticityReport", "KernelContext",
    "NoiseBundle", "NoiseCovariance", "NoiseFactor", "NormalModes", "Pipeline",
    "RunConfig", "SystemSpec", "TimeGrids", "TrajectoryOutput", "TrajectoryState",
    "TruncatedBath", "build_covariance", "build_pipeline", "build_total_hamiltonian",
    "commutator_step_generator", "compare_series", "diagonalize_bath", "emit_config",
    "equilibrate", "evolve", "exact_reduced_dynamics", "factorize", "hamiltonian_at",
    "hermiticity_trace_report", "hs_identity_check", "k_complex", "k_imag_even",
    "k_imag_odd", "k_real_i", "k_real_r", "l_matrix", "load_config", "mode_couplings",
    "parse_config", "run_ensemble", "run_equilibration", "run_trajectory", "sample",
    "takagi", "verify_empirical", "write_csv", "write_document",
]
