from .kernels import ALPHA_MAX, ALPHA_MIN, TILE
from .oracle import render_oracle
from .rasterize import T_MIN, RasterState, StaleStateError, blend_matrix, rasterize, rasterize_backward, rasterize_torch
from .render import BlendView, Channel, RenderGrads, RenderOutput, render, render_backward, render_id_map

__all__ = [
    "ALPHA_MAX",
    "ALPHA_MIN",
    "TILE",
    "T_MIN",
    "BlendView",
    "Channel",
    "RasterState",
    "RenderGrads",
    "RenderOutput",
    "StaleStateError",
    "blend_matrix",
    "rasterize",
    "rasterize_backward",
    "rasterize_torch",
    "render",
    "render_backward",
    "render_id_map",
    "render_oracle",
]
