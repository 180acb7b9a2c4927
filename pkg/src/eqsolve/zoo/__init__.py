"""Small models that exercise the engine end to end."""

from .ddim import (
    DiffusionChain,
    affine_denoiser,
    ddim_chunk,
    ddim_matrices,
    ddim_operator,
    ddim_parallel,
    ddim_sequential,
    make_chain,
)
from .ignn import IGNN, ToyGraph, ignn_layer, two_community_graph
from .linear import LinearDeq, regression_data
from .siren import SirenDeq, SirenMLP, coordinate_grid, fit_image, psnr, siren_deq_layer, sinusoid_image

__all__ = [
    "DiffusionChain", "affine_denoiser", "ddim_chunk", "ddim_matrices", "ddim_operator",
    "ddim_parallel", "ddim_sequential", "make_chain",
    "IGNN", "ToyGraph", "ignn_layer", "two_community_graph",
    "LinearDeq", "regression_data",
    "SirenDeq", "SirenMLP", "coordinate_grid", "fit_image", "psnr", "siren_deq_layer", "sinusoid_image",
]
