"""Synthetic verification harness: scenes, dataset I/O, metrics, pipeline."""

from .dataset import Dataset, export_dataset, ingest_dataset
from .metrics import TrajectoryReport, compute_alignment_error, umeyama_sim3
from .pipeline import (
    STAGE_NAMES,
    DatasetStream,
    FrameData,
    SceneStream,
    run_odometry,
)
from .scene import (
    SyntheticScene,
    TexturedPlane,
    TextureSpec,
    orbit_scene,
    render_frame,
    scene_from_toml,
    subsample_scene,
    texture_deprived_scene,
)

__all__ = [
    "Dataset",
    "DatasetStream",
    "FrameData",
    "STAGE_NAMES",
    "SceneStream",
    "SyntheticScene",
    "TextureSpec",
    "TexturedPlane",
    "TrajectoryReport",
    "compute_alignment_error",
    "export_dataset",
    "ingest_dataset",
    "orbit_scene",
    "render_frame",
    "run_odometry",
    "scene_from_toml",
    "subsample_scene",
    "texture_deprived_scene",
    "umeyama_sim3",
]
