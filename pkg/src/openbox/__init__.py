"""Two-stage LiDAR auto-labeling toolkit.

Stage 1 aligns 2D instance cues with LiDAR clusters; stage 2 fits oriented
boxes adapted to each object's motion state and physical type. Ships with a
detection evaluator, a synthetic-scene generator for testing, and a CLI.
"""

from .config import PipelineConfig
from .evaluation import EvalConfig, EvalReport, evaluate
from .geometry import (AxisAlignedBox2, CameraModel, OrientedBox3, Pose,
                       iou2d, iou3d, iou_bev)
from .pipeline import PipelineResult, annotate_scene
from .scene_io import (Annotation, AnnotationSet, ClassPrior, FrameBundle,
                       InstanceCue2D, NoFramesError, SceneFormatError,
                       default_priors, load_priors, load_sequence,
                       read_annotations, save_sequence, write_annotations,
                       write_priors)
from .synth import GeneratedScene, ObjectSpec, SceneSpec, WallSpec, generate, oracle_check

__version__ = "0.1.0"

__all__ = [
    "Annotation", "AnnotationSet", "AxisAlignedBox2", "CameraModel",
    "ClassPrior", "EvalConfig", "EvalReport", "FrameBundle", "GeneratedScene",
    "InstanceCue2D", "NoFramesError", "ObjectSpec", "OrientedBox3",
    "PipelineConfig", "PipelineResult", "Pose", "SceneFormatError",
    "SceneSpec", "WallSpec", "annotate_scene", "default_priors", "evaluate",
    "generate", "iou2d", "iou3d", "iou_bev", "load_priors", "load_sequence",
    "oracle_check", "read_annotations", "save_sequence", "write_annotations",
    "write_priors",
]
