"""voxelnext: a numpy re-implementation of MedNeXt-v2 style 3D segmentation.

The package ships its own reverse-mode autodiff, numba-compiled 3D
convolutions, the network, training loop, sliding-window inference, metrics,
synthetic phantom data and activation diagnostics.
"""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint  # noqa: E402
from .data import (  # noqa: E402
    PhantomSpec,
    VolumeSample,
    derive_seed,
    generate_dataset,
    generate_phantom,
    load_dataset,
    read_volume,
    resample_isotropic,
    write_volume,
    zscore_normalize,
)
from .diagnostics import ActivationStats, activation_stats, export_activation_grid  # noqa: E402
from .errors import (  # noqa: E402
    CheckpointError,
    ConfigError,
    ContractError,
    PlacementError,
    StructuralError,
    TrainingDivergedError,
    VolumeFormatError,
    VoxelNextError,
)
from .inference import gaussian_weight_map, plan_windows, sliding_window_predict  # noqa: E402
from .losses import deep_supervision_loss, dice_ce_loss  # noqa: E402
from .metrics import aggregate, cross_validate, dsc, evaluate, nsd  # noqa: E402
from .network import (  # noqa: E402
    Network,
    NetworkConfig,
    build_network,
    count_parameters,
    forward,
    scale_config,
    tiny_config,
)
from .ops import ConvSpec, conv3d, gelu, grn3d, instance_norm  # noqa: E402
from .optim import AdamWState, adamw_step  # noqa: E402
from .tensor import Tensor, grad_check, no_grad, precision  # noqa: E402
from .training import TrainConfig, TrainLog, finetune, lr_schedule, train  # noqa: E402
