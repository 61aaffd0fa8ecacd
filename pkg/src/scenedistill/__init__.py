"""Scene-specific distillation of per-pixel 3D pointmap regressors.

Small student networks (a vanilla CNN, a backbone+head CNN, and a ViT) are
trained to regress a world-frame 3D point for every pixel of an RGB image,
using pre-computed teacher pointmaps as labels. Pairwise camera-frame
teacher maps are fused into one world frame by closed-form similarity
estimation over a spanning tree.
"""

from .alignment import (
    Edge,
    PairPrediction,
    PointMap,
    SceneGraph,
    Sim3Transform,
    alignment_residual,
    apply_sim3,
    estimate_edge,
    export_ply,
    global_align,
    load_pointmap,
    save_pointmap,
    umeyama,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    Frame,
    PairSpec,
    SceneDataset,
    SplitSpec,
    SynthSpec,
    generate_pairs,
    load_scene,
    scale_labels,
    split,
    synth_pair_predictions,
    synth_scene,
    write_scene_dir,
)
from .errors import (
    AlignmentError,
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    GenerationError,
    LoadError,
    NumericsError,
    SceneDistillError,
)
from .models import (
    BackboneHeadConfig,
    StudentModel,
    VanillaCNNConfig,
    ViTConfig,
    build_backbone_head,
    build_model,
    build_vanilla_cnn,
    build_vit,
    param_count,
    set_frozen,
)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward, mse_loss_masked, parameter
from .training import (
    EvalReport,
    TrainConfig,
    TrainReport,
    ablate,
    evaluate,
    train,
)

__version__ = "0.1.0"
