"""Set-compatibility learning engine.

Trains a relational scorer over precomputed item feature vectors and
evaluates it with ranking AUC and fill-in-the-blank retrieval; item
compatibility embeddings can be exported and projected to 2D.
"""

from .data import (
    FeatureStore,
    FitbQuery,
    ItemMeta,
    ItemRecord,
    Outfit,
    SyntheticConfig,
    Vocabulary,
    build_fitb,
    build_vocabulary,
    encode_description,
    gen_synthetic,
    labeled_outfits,
    load_manifest,
    materialize_items,
    read_features,
    sample_negatives,
    split_dataset,
    tokenize,
    write_features,
    write_manifest,
)
from .evaluation import (
    EvalReport,
    FitbReport,
    auc,
    eval_compat,
    eval_fitb,
    export_embeddings,
    pca2d,
)
from .gradcheck import GradCheckReport, grad_check
from .model import (
    CompatibilityScore,
    ItemInput,
    ModelConfig,
    ModelParams,
    build_pairs,
    embed_item,
    init_params,
    relation,
    score_outfit,
    score_outfit_vse,
    score_outfits,
)
from .tensor import Tape, Tensor, backward
from .training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    TrainReport,
    adam_step,
    batch_loss,
    init_adam_state,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
