from ._nictkit import (
    Error,
    Geometry,
    Model,
    back_project,
    ddel_total,
    default_geometry,
    fbp,
    forward_project,
    gradcheck,
    make_geometry,
    psnr,
    random_phantom,
    reader_metrics,
    rmse_hu,
    shepp_logan,
    simulate,
    ssim_pct,
)
from . import _nictkit

# error classes by name, e.g. nictkit.errors.ShapeMismatch
errors = _nictkit

__all__ = [
    "Error",
    "Geometry",
    "Model",
    "back_project",
    "ddel_total",
    "default_geometry",
    "fbp",
    "forward_project",
    "gradcheck",
    "make_geometry",
    "psnr",
    "random_phantom",
    "reader_metrics",
    "rmse_hu",
    "shepp_logan",
    "simulate",
    "ssim_pct",
]
