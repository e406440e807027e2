"""Diffeomorphic image registration by initial-momentum geodesic shooting,
with a patch-wise momentum prediction network that learns to replace the
numerical optimizer."""

__version__ = "0.1.0"

from .grid import (
    GridGeometry,
    ScalarImage,
    VectorField,
    DeformationMap,
    identity_map,
    interpolate_scalar,
    warp_image,
    compose_maps,
    spatial_gradient,
    jacobian_determinant,
    histogram_equalize,
)
from .fileio import read_field, write_field, QsfError
from .kernel import FluidKernelOp, make_kernel
from .shooting import ShootingConfig, GeodesicState, ad_star, shoot, shoot_trajectory
from .optimize import (
    RegistrationProblem,
    OptimizeConfig,
    OptimizeResult,
    energy,
    energy_gradient,
    optimize,
)
from .patches import PatchSpec, PatchBatch, grid_locations, extract, prune_background, assemble
from .network import RegressionNet, TrainConfig, train, save_qsnet, load_qsnet
from .predict import (
    PredictionResult,
    CorrectionDatasetEntry,
    predict_full,
    build_correction_dataset,
    collate_correction_entries,
    predict_corrected,
    mc_predict,
)
from .evaluate import (
    deformation_error_percentiles,
    detj_positive_ratio,
    target_overlap,
    energy_report,
    logdetj_histogram,
    timing_report,
)
from .synth import SynthConfig, make_template, sample_momentum, generate_pairs, load_manifest
