from src.trainer.config import DensifyConfig, IncrementalSamplerConfig, TrainSchedule, load_schedule
from src.trainer.densify import densify_and_prune
from src.trainer.optimizer import Adam
from src.trainer.sampler import FrameScheduler, incremental_sample
from src.trainer.stages import (
    DivergenceError,
    evaluate,
    stage_finetune,
    stage_motion_learning,
    stage_static_init,
    train_all,
)
