"""Pooling probes for frozen audio token maps.

Trains lightweight heads (linear, attentive, prototypical, binarized
prototypical) over cached encoder embeddings, with the full benchmark
protocol: binary embedding stores, asymmetric loss, AdamW + cosine
schedule, Sobol/TPE hyperparameter search under successive halving, and
pairwise win-matrix reporting.
"""

from .heads import (
    HEAD_KINDS,
    ProbeOutput,
    TokenBatch,
    binarize,
    load_checkpoint,
    make_head,
    pack_prototypes,
    param_count,
    save_checkpoint,
    unpack_prototypes,
)
from .numerics import cosine, grad_check, matvec, rng_stream
from .objective import (
    AslConfig,
    asl_loss,
    average_precision,
    mean_average_precision,
    top1_accuracy,
)
from .optim import AdamW, CosineSchedule, cosine_lr
from .probe import (
    PoolingProbe,
    RunResult,
    TrainConfig,
    evaluate,
    multi_seed,
    split_train_val,
    train,
)
from .report import ResultCell, WinMatrix, emit_table, win_matrix
from .search import (
    SearchSpace,
    SobolState,
    TrialRecord,
    run_search,
    select_and_finalize,
    sobol_next,
    successive_halving,
    to_loguniform,
    tpe_suggest,
)
from .store import (
    EmbeddingDataset,
    EmbeddingRecord,
    StoreHeader,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    read_record,
    write_store,
    write_synthetic_store,
)

__version__ = "0.1.0"
