"""rscnet: a small CNN engine and experiment harness for winter road surface
condition classification, built around a pre-train / freeze / fine-tune
transfer procedure."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    Dataset,
    FiveClassLabel,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    make_view,
    map_label,
    save_dataset,
    split_train_test,
)
from .metrics import ConfusionMatrix, accuracy, box_stats, confusion  # noqa: F401
from .network import (  # noqa: F401
    ArchitectureProfile,
    Network,
    build_network,
    load_weights,
    mini_32,
    save_weights,
    set_freeze_by_blocks,
    total_parameters,
    truncate_to_conv_base,
    vgg16_150,
)
from .tensor import SeededRng, im2col, matmul, uniform_init, zeros  # noqa: F401
from .training import (  # noqa: F401
    TrainConfig,
    TrainReport,
    extract_features,
    fine_tune,
    train_epochs,
    train_head_on_cache,
    transfer_pipeline,
)
