from .layers import Conv3D, Dense, Flatten, MaxPool3D, apply_activation, init_uniform
from .network import (
    ConvSpec,
    FcSpec,
    Network,
    NetworkArch,
    ShapeTrace,
    case_study_arch,
    desk_arch,
    shape_trace,
    transfer_arch,
)
from .training import (
    Adam,
    LabelScaling,
    TrainConfig,
    TrainingLog,
    mse,
    train_network,
)
from .io import Checkpoint, export_feature_maps, load_checkpoint, save_checkpoint
