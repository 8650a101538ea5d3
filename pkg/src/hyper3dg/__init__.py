"""Gaussian-cloud optimization with diffusion guidance and patch hypergraph refinement."""

from .camera import CameraPose, sample_poses
from .errors import (
    ConfigError, ExtractorError, Hyper3DGError, NumericalError, PlyParseError,
)
from .gaussians import (
    Gaussian, GaussianCloud, covariance, from_attribute_matrix, load_ply, save_ply,
    synth_init, to_attribute_matrix,
)
from .guidance import (
    DiffusionSchedule, IsmConfig, IsmResult, PointMassPredictor, ViewCondition,
    ZeroPredictor, ddim_invert, ddim_step, ism_grad, point_mass_predictor, schedule_linear,
)
from .hypergraph import (
    Hypergraph, build_knn_hypergraph, concat_hypergraphs, gcn_forward, hgnn_forward,
    normalized_operator,
)
from .patchify import PatchAssignment, kmeans, patch_means
from .pipeline import (
    Adam, PipelineConfig, RefinerCache, RunReport, ddim_update, hg_refine_step, optimize,
    theta_gradient,
)
from .render import Rasterization, RenderedImage, backprop, render, render_patch

__version__ = "0.1.0"

__all__ = [
    "Adam", "CameraPose", "ConfigError", "DiffusionSchedule", "ExtractorError", "Gaussian",
    "GaussianCloud", "Hyper3DGError", "Hypergraph", "IsmConfig", "IsmResult", "NumericalError",
    "PatchAssignment", "PipelineConfig", "PlyParseError", "PointMassPredictor", "Rasterization",
    "RefinerCache", "RenderedImage", "RunReport", "ViewCondition", "ZeroPredictor", "backprop",
    "build_knn_hypergraph", "concat_hypergraphs", "covariance", "ddim_invert", "ddim_step",
    "ddim_update", "from_attribute_matrix", "gcn_forward", "hg_refine_step", "hgnn_forward",
    "ism_grad", "kmeans", "load_ply", "normalized_operator", "optimize", "patch_means",
    "point_mass_predictor", "render", "render_patch", "sample_poses", "save_ply",
    "schedule_linear", "synth_init", "theta_gradient", "to_attribute_matrix",
]
