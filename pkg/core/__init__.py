# julia-tc core modules

from .errors import (
    JuliaError, ConfigError, TensorDataError, DuplicateIndexError, ShapeMismatchError,
    CheckpointError, CheckpointVersionError, DivergenceError, EvaluationError
)
from .models import SparseTensor, DatasetSplit, MetricsReport, AlignmentReport
from .config import TrainConfig, RunConfig
from .cp import CpFactors, cp_predict, cp_warmstart, fit_cp
from .head import HeadInterface, NonlinearParams, init_head, head_predict
from .model import JuliaModel, loss, save_checkpoint, load_checkpoint
from .trainer import JuliaTrainer, TrainReport, ao_initialize, refine, train_with_restarts
from .metrics import compute_metrics, success_rate, hungarian, align_components
from .synth import SyntheticSpec, generate, identifiability_experiment
