"""Semantic texture fusion for posed images over meshes reconstructed from lidar."""

from .atlas import UNLABELED, TexelTable, TexturedMesh, build_texel_table, generate_uv_atlas, load_mesh
from .camera import CameraFrame, CameraModel, add_pose_noise, render_depth, visible
from .color import ColorTexture, fuse_color_frame
from .scan import OrganizedScan
from .semantic import FusionParams, SegmentationResult, fuse_semantic_frame
from .sparse import SparseSemanticTexture

__version__ = "0.1.0"

__all__ = [
    "UNLABELED",
    "CameraFrame",
    "CameraModel",
    "ColorTexture",
    "FusionParams",
    "OrganizedScan",
    "SegmentationResult",
    "SparseSemanticTexture",
    "TexelTable",
    "TexturedMesh",
    "add_pose_noise",
    "build_texel_table",
    "fuse_color_frame",
    "fuse_semantic_frame",
    "generate_uv_atlas",
    "load_mesh",
    "render_depth",
    "visible",
]
