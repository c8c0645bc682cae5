"""Simulated SLO-driven autoscaling of co-located stream processing services."""

from .agent import Agent, RegressionModel, StructuralKnowledge, explore_action, fit, predict
from .core import (
    Assignment, MetricRecord, ParameterSpec, ServiceSpec, SloSpec, default_specs,
    global_fulfillment, service_fulfillment, slo_fulfillment, validate_assignment,
)
from .env import Environment, GroundTruthModel, default_truth
from .harness import ExperimentConfig, Trace, report, run_experiment
from .metrics import MetricStore, MetricTable
from .solver import ObjectiveSpec, SolverSettings, assemble_objective, oracle_solve, solve

__version__ = "0.1.0"
