"""Multitask breast-ultrasound network: shared depthwise-separable encoder
with classification and segmentation heads, trained with a weighted
cross-entropy plus Dice objective.  Pure numpy, no framework."""

from .tensor import (
    BatchNormState,
    Tensor,
    add,
    batch_norm,
    cmul,
    dense,
    dropout,
    global_avg_pool,
    no_grad,
    relu,
    scale,
    sigmoid,
    stable_sigmoid,
    tsum,
)
from .convolution import (
    ConvSpec,
    col2im,
    conv2d,
    conv2d_reference,
    conv_output_size,
    depthwise_conv2d,
    depthwise_conv2d_reference,
    im2col,
    transposed_conv2d,
    transposed_conv2d_reference,
    transposed_padding,
)
from .loss import (
    LossWeights,
    dice_loss,
    dice_loss_op,
    logit,
    multitask_loss,
    ns_wbce,
    ns_wbce_op,
    positive_term_coefficient,
    stable_softplus,
    wbce,
)
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    classify_confusion,
    kfold_aggregate,
    report_from_parts,
    seg_scores,
)
from .data import (
    DatasetManifest,
    ManifestRecord,
    Sample,
    SplitSpec,
    load_arrays,
    load_manifest,
    load_sample,
    normalize,
    pad_to_square,
    resize_to,
    split,
    synth_generate,
    to_network_input,
)
from .model import (
    EMT_NET,
    SINGLE_CLF,
    SINGLE_SGM,
    VARIANTS,
    HeadOutputs,
    NetworkGraph,
    WeightStore,
    assemble,
    build_classification_head,
    build_encoder,
    build_segmentation_branch,
    count_params,
    forward,
    graph_from_store,
    init_weights,
    load_weights,
    save_weights,
)
from .trainer import (
    Adam,
    RunRecord,
    SGD,
    TrainConfig,
    TrainingDiverged,
    ablation,
    evaluate,
    make_optimizer,
    optimizer_step,
    sweep_grid,
    sweep_wp,
    train,
)

__version__ = "0.1.0"
