from .generator import ConditionalGenerator, diversity_loss
from .methods import (
    METHODS,
    Attack,
    AttackContext,
    CraftME,
    GanME,
    GmME,
    NaiveBaseline,
    SoftTrainME,
    TrainME,
    drive,
)
from .soft import compute_soft_labels, soft_labels_batch
from .surrogate import (
    AttackError,
    LabelledSet,
    SurrogateModel,
    SurrogateSettings,
    Variant,
    fit_server,
    train_full,
    train_surrogate,
    variant_units,
)

__all__ = [
    "ConditionalGenerator", "diversity_loss", "METHODS", "Attack", "AttackContext", "CraftME", "GanME", "GmME",
    "NaiveBaseline", "SoftTrainME", "TrainME", "drive", "compute_soft_labels", "soft_labels_batch", "AttackError",
    "LabelledSet", "SurrogateModel", "SurrogateSettings", "Variant", "fit_server", "train_full", "train_surrogate",
    "variant_units",
]
