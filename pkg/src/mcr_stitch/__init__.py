"""mcr-stitch: align one frozen contrastive embedding space onto another.

The pipeline: load unit-normalized embedding sets (store), synthesize
semantically consistent pseudo quadruples across the two spaces
(aggregation), train a decoupled linear + MLP projector against the frozen
base space (projector, training), and score the result with single-relevant
retrieval and zero-shot classification metrics (evaluation). A synthetic
world generator (synth) provides exact ground truth at desk scale, and the
``mcr-stitch`` CLI wires everything into reproducible experiments.
"""

from .aggregation import (
    AggregationConfig,
    Centricity,
    PseudoQuadruple,
    QuadrupleSet,
    add_gaussian_noise,
    build_training_set,
    generate_nonoverlap_centric,
    generate_overlap_centric,
    load_quadruples,
    save_quadruples,
    softmax_weighted_aggregate,
    transfer_weights_aggregate,
)
from .evaluation import (
    ClassificationReport,
    PreservationResult,
    RetrievalReport,
    base_preservation_check,
    cross_space_eval,
    retrieval_eval,
    simulate_random_ranking,
    zero_shot_classify,
)
from .projector import (
    CheckpointError,
    LinearParams,
    MlpParams,
    ProjectorConfig,
    ProjectorParams,
    forward_linear,
    forward_mlp,
    init_projector,
    load_checkpoint,
    project_nonoverlap,
    project_overlap,
    save_checkpoint,
)
from .store import (
    EmbeddingMatrix,
    EmbeddingStoreError,
    SpaceManifest,
    cosine_similarity,
    l2_normalize,
    load_embeddings,
    save_embeddings,
)
from .synth import (
    GroundTruth,
    SynthWorld,
    SynthWorldConfig,
    generate_world,
    make_fourmodality_scenario,
    oracle_retrieval,
    write_world,
)
from .training import (
    LossReport,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    backward,
    cosine_lr,
    dense_alignment_loss,
    info_nce,
    intra_mcr_loss,
    total_loss,
    train_extension,
)

__version__ = "0.1.0"
