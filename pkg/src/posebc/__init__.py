"""Diffusion behavior cloning for multiparty facilitator pose dynamics."""

from .schedule import NoiseSchedule, build_linear_schedule, coefficients_at
from .pose import (
    ACTION_DIM,
    JOINT_NAMES,
    NUM_JOINTS,
    DemoDataset,
    FacilitatorTrace,
    KeypointFrame,
    apply_delta,
    compute_deltas,
    displacement_stats,
    joint_id,
    mpjpe,
)
from .observation import (
    BONES,
    OBS_SIZE,
    PERSON_PALETTE,
    ImageGrid,
    ObsMode,
    make_observation,
    rasterize_keypoints,
    read_netpbm,
    resize_bilinear,
    write_netpbm,
)
from .denoiser import (
    DenoiserConfig,
    DenoiserParams,
    init_params,
    loss_and_gradients,
    param_count,
    predict_noise,
)
from .trainer import (
    DenoiserCheckpoint,
    TrainConfig,
    forward_diffuse,
    load_checkpoint,
    save_checkpoint,
    split_dataset,
    train,
)
from .sampler import SamplerConfig, diffusion_x_sample, rollout
from .synthscene import SceneConfig, Session, export_dataset, generate_session, load_dataset, render_raw
from .evalbench import EvalReport, bench, emit_report, evaluate, percent_diff

__version__ = "0.1.0"
