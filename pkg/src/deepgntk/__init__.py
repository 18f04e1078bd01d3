"""Graph neural tangent kernels at large depth: exact recursion, convergence
and trainability diagnostics, edge sampling and a finite-width oracle."""

__version__ = "0.1.0"

from .errors import DataError, DisconnectedGraphError, GntkError, NumericalError
from .graph import (DatasetSplit, FeatureMatrix, Graph, LabelVector, generate_sbm,
                    load_dataset, load_features, load_graph, load_labels, load_split)
from .aggregation import AggregationOperator, build_operator, spectral_summary
from .engine import GntkConfig, compute_gntk, mlp_correlation_trace, run_gntk
from .diagnostics import (condition_number, fit_rate, kernel_regression, simulate_dynamics,
                          trace_convergence)
from .sampling import (SampleConfig, critical_rate, er_graph, largest_component,
                       percolation_sweep, sample_edges)
from .network import NetConfig, empirical_ntk, grad_check, train_gcn

__all__ = [
    "AggregationOperator", "DataError", "DatasetSplit", "DisconnectedGraphError",
    "FeatureMatrix", "GntkConfig", "GntkError", "Graph", "LabelVector", "NetConfig",
    "NumericalError", "SampleConfig", "build_operator", "compute_gntk", "condition_number",
    "critical_rate", "empirical_ntk", "er_graph", "fit_rate", "generate_sbm", "grad_check",
    "kernel_regression", "largest_component", "load_dataset", "load_features", "load_graph",
    "load_labels", "load_split", "mlp_correlation_trace", "percolation_sweep", "run_gntk",
    "sample_edges", "simulate_dynamics", "spectral_summary", "trace_convergence", "train_gcn",
]
