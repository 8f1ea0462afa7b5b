"""R2N2: deformable image registration as a short sequence of Gaussian local deformations.

A recurrent convolutional network proposes one local deformation per step;
the accumulated field aligns a moving image to a fixed one. The package also
carries a multi-resolution B-spline baseline, synthetic ground-truth data and
an evaluation harness.
"""
from .bspline import BaselineConfig, count_transform_params, register_bspline
from .deform_models import (BSplineModel, DenseModel, LocalDeformParams, bspline_field, dense_field,
                            gaussian_local_field, render_sequence)
from .field_geometry import (DisplacementField, Grid2D, Image2D, ShapeError, accumulate,
                             finite_diff_gradient_check, load_field, load_image, make_grid, save_field,
                             save_image, warp)
from .network import R2N2, NetConfig, R2N2State, load_checkpoint, r2n2_step, save_checkpoint
from .objectives import classic_objective, mse_loss, sequence_objective, tv_loss
from .training import TrainConfig, train_epoch

__version__ = "0.1.0"

__all__ = [
    "BSplineModel", "BaselineConfig", "DenseModel", "DisplacementField", "Grid2D", "Image2D",
    "LocalDeformParams", "NetConfig", "R2N2", "R2N2State", "ShapeError", "TrainConfig", "accumulate",
    "bspline_field", "classic_objective", "count_transform_params", "dense_field",
    "finite_diff_gradient_check", "gaussian_local_field", "load_checkpoint", "load_field", "load_image",
    "make_grid", "mse_loss", "r2n2_step", "register_bspline", "render_sequence", "save_checkpoint",
    "save_field", "save_image", "sequence_objective", "train_epoch", "tv_loss", "warp",
]
