"""Posterior-perturbation defenses against model extraction, with a desk-scale attack harness."""

__version__ = "0.1.0"

from .config import ExperimentConfig, parse_config
from .datagen import LabeledDataset, QueryPool, load_csv, make_blobs, make_query_pool, make_rings
from .defenses import (
    DEFENSES,
    AdaptiveMisinformation,
    DeceptivePerturbation,
    DefenseConfig,
    HardLabel,
    NoDefense,
    RandomNoise,
    ReverseSigmoid,
    TopKTruncate,
    am_defend,
    calibrate_beta,
    dcp_defend,
    make_defense,
    rs_defend,
)
from .exceptions import *  # noqa: F401,F403
from .extraction import DefendedOracle, build_transfer_set, run_knockoff, sweep_beta
from .metrics import CurvePoint, constrained_max, latency_summary, pareto_curve
from .models import SoftmaxMLP, TrainConfig, evaluate_error, gradient_check, train
from .runner import bench_latency, emit_plot_data, run_experiment
from .simplex import l1_distance, normalize, reverse_sigmoid, sigmoid
