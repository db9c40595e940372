"""Desk-scale neural sensor simulation.

Compositional neural feature fields (static background + dynamic actors)
trained on posed camera images and LiDAR sweeps from a built-in analytic
oracle scene; re-renders both modalities, supports scene edits, and drives
a deterministic closed-loop evaluation of a toy autonomy agent.
"""

__version__ = "0.1.0"

from .geometry import Aabb, Pose, Ray, Rotation6D, rot6d_to_matrix  # noqa: F401
from .scene import ActorModel, ComposeConfig, SceneGraph, make_actor  # noqa: F401
from .render import (CameraModel, ImageRender, LidarModel,  # noqa: F401
                     RenderConfig, SweepRender, render_image, render_lidar)
from .oracle import OracleScene, gen_dataset, standard_dataset  # noqa: F401
from .metrics import lidar_metrics, psnr, ssim  # noqa: F401
from .train import (LossWeights, TrainConfig, build_graph,  # noqa: F401
                    refine_tracklets)
from .train import train as fit  # noqa: F401  (keeps fieldsim.train the module)
from .simloop import (AutonomyStub, BehaviorModel, Scenario,  # noqa: F401
                      SceneEdits, closed_loop_run, open_loop_replay)

# "from .train import train" would shadow the submodule attribute; restore it.
from . import train  # noqa: F401
