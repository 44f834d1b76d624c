"""Desk-scale transformer SLAM engine: a small autodiff core, a frame-blocked
attention backbone with a KV cache, frontend/backend orchestration, losses and
evaluation."""
from .attention import FrameLayout, KVCache, MaskKind, build_mask, cache_append, cache_replace_prefix
from .backend import BackendConfig, refine_map, share_cache, should_trigger
from .data import SequenceSource, SyntheticSpec, generate_synthetic_sequence, load_tum_sequence
from .errors import ConfigError, ContractError, DataIOError, SlamFormerError
from .evaluation import ate_rmse, recon_metrics, timing_summary
from .formats import Trajectory, read_ply, read_trajectory, write_pointcloud, write_trajectory
from .frontend import FrontendConfig, TokenMapState, detect_keyframe, initialize_map, track_and_map
from .geometry import SE3Pose, Sim3Transform, solve_scale, umeyama_sim3
from .losses import ClipTargets, LossConfig, LossReport
from .model import ImageFrame, MapTokens, ModelConfig, SlamFormer
from .pipeline import Ablation, PipelineConfig, RunArtifacts, run_sequence
from .training import TrainConfig, training_iteration

__version__ = "0.1.0"
