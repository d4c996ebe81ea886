"""Density-regression cell counting with deep supervision."""

from .dataio import (
    AnnotatedImage,
    FormatError,
    SynthConfig,
    load_checkpoint,
    load_dataset,
    read_centroids,
    read_dmap,
    read_pgm,
    save_checkpoint,
    save_dataset,
    synth_generate,
    write_centroids,
    write_dmap,
    write_pgm,
)
from .density import (
    GaussianKernel,
    count_from_density,
    downsample_block_sum,
    gaussian_kernel,
    render_density_map,
)
from .model import (
    ForwardOutputs,
    ModelParams,
    VARIANTS,
    backward,
    build_model,
    forward,
    layer_specs,
)
from .training import (
    EvalReport,
    TrainConfig,
    TrainResult,
    evaluate,
    gradient_check_report,
    kfold_split,
    loss_overall,
    sgd_step,
    train,
)

__version__ = "0.1.0"
