"""Visual kinematic chain forecasting on toy planar-arm environments."""

from . import autograd, camera, cli, envsim, harness, pointset_ot, robot_model, transforms, vkt
from .camera import CameraModel, ImagePolyline, project_chain, project_point
from .harness import MetricsRecord, TrainRecipe, evaluate, render_overlay, report, train_bct, train_head, train_vkt
from .pointset_ot import EmdResult, TransportPlan, emd, exact_emd_oracle, sample_chain_points, sinkhorn
from .robot_model import KinematicChain, forward_kinematics, parse_chain, serialize_chain
from .transforms import Transform, look_at
from .vkt import VKT, VKTConfig, load_model, save_model, vkt_loss

__version__ = "0.1.0"
