"""Smoothing operators, Cameron-Martin gradients and mild HJB solves for controlled OU processes."""

__version__ = "0.1.0"

from .control_sim import Policy, cross_validate, evaluate_cost, greedy_policy, simulate_state
from .hjb import (ControlSet, CostSpec, HamiltonianSpec, SolverConfig, ValueField, check_contraction_horizon,
                  evaluate_value, hamiltonian_argmin, hamiltonian_min, lipschitz_constant, mild_residual,
                  picard_step, solve_hjb)
from .models import (DelayConfig, HeatConfig, TrajectoryGrid, build_delay_model, build_heat_model, scalar_model)
from .ou_core import GaussianMeasure, StateVector, apply_transition, cameron_martin_density, ou_covariance
from .smoothing import (c_gradient_base, c_gradient_convolution, c_gradient_lifted, lambda_base, lambda_conv,
                        lambda_lifted, verify_hypotheses)
