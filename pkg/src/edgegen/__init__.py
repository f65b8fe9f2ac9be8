"""Generate task- and resource-customized static subnets from one jointly
trained gated supernet, without per-scenario training."""

from .tasks import (
    EdgeScenario,
    Quantifier,
    Subject,
    TaskDescriptor,
    all_tasks,
    encode_limit,
    encode_task,
    enumerate_task_space,
    evaluate_predicate,
)
from .dataset import LabeledSample, load_dataset, save_dataset, synthesize_dataset
from .supernet import (
    GateConfiguration,
    GateLayout,
    ResourceCount,
    SupernetSpec,
    build_supernet,
    count_resources,
)
from .extraction import SubnetArtifact, extract_subnet
from .assembler import (
    Assembler,
    GenerationRequest,
    build_assembler,
    encode_requirement,
    gate_similarity,
    generate_gates,
    semhash_discretize,
)
from .training import (
    JointCheckpoint,
    TrainingConfig,
    evaluate,
    gate_loss,
    load_checkpoint,
    make_batches,
    save_checkpoint,
    total_loss,
    train_joint,
)
from .perfmodel import (
    DeviceProfile,
    PerformancePredictor,
    fit_predictor,
    profile_subnets,
    sample_random_gates,
)
from .search import SearchConfig, SearchResult, enforce_limit, generate_model, search

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
