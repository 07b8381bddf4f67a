"""Small-mass hierarchy for Langevin systems with state-dependent drag and noise.

Modules: ``coeffs`` (model coefficients, drift and tensors), ``tensorops``
(Lyapunov solves, matrix exponentials), ``noisegrid`` (reproducible Brownian
increments), ``dynamics`` (underdamped and homogenized steppers),
``hierarchy`` (fast process, remainders, levels), ``harness`` (Monte Carlo
studies) and ``cli``.
"""

from .coeffs import ModelSpec, cutoff_model, noise_induced_drift, qg_tensor, validate_model
from .config import RunConfig, load_config, parse_config
from .dynamics import PhaseState, Trajectory, simulate_homogenized, simulate_underdamped, step_underdamped
from .harness import convergence_study, fit_slope, prob_convergence_study, strong_error
from .hierarchy import HierarchyRun, RemainderState, remainder_increment, run_level, run_level_special, step_z
from .models import build_model
from .noisegrid import WienerGrid, coarsen, generate_path
from .tensorops import mat_exp, solve_lyapunov

__version__ = "0.1.0"
