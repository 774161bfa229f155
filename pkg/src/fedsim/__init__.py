"""Desk-scale federated learning simulator with backdoor attacks and defenses."""

from .attacks import (
    InjectionConfig,
    LocalTrainConfig,
    PatchSpec,
    TextTrigger,
    TextTriggerConfig,
    TriggerOptConfig,
    VisionTrigger,
    baseline_fixed_patch,
    baseline_pgd_trigger,
    baseline_scale_update,
    neurotoxin_mask,
    optimize_vision_trigger,
    position_scores,
    select_positions,
    should_refresh,
    train_backdoored_local,
    train_honest_local,
)
from .data import (
    ClientPartition,
    PoisonSpec,
    TextDataset,
    VisionDataset,
    dirichlet_partition,
    make_text_dataset,
    make_vision_dataset,
    poison_text_sequence,
    poison_vision_batch,
)
from .defenses import (
    AggregatorConfig,
    DefenseDiagnostics,
    aggregate,
    coordinate_median,
    fedavg,
    flame_lite,
    freqfed_lite,
    krum,
    multi_krum,
    norm_clip,
)
from .engine import (
    AttackConfig,
    DatasetConfig,
    ExperimentConfig,
    ScenarioConfig,
    run_experiment,
    select_clients,
)
from .metrics import RoundRecord, backdoor_accuracy, lifespan, main_accuracy
from .nn import (
    ClientUpdate,
    FlatParams,
    MlpModel,
    SeqModel,
    SgdState,
    cosine_loss,
    forward,
    grad_input,
    grad_params,
    init_mlp,
    init_seq,
    sgd_step,
)

__version__ = "0.1.0"
