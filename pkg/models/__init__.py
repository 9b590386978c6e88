# KDSM - 数据模型包

from .enums import PipelineMode, Setting, AssignmentMode, SuperCategory
from .errors import (
    KDSMError, ConfigValidationError, DimensionError, PromptValidationError,
    CapacityError, UsageError, DataError, GroupLookupError,
    EmbeddingParseError, CheckpointError, NumericFailure,
)
from .keypoint_types import (
    PromptSpec, PromptBatch, KeypointSet, HeatmapStack, DecodedKeypoint,
    SpeciesTemplate, Sample, SplitPlan,
)
from .matching_types import Grouping, DomainMatrix, PredictedMatrix, Assignment
from .metric_report import FoldMetrics, MetricReport
from .train_config import TrainConfig, WorldConfig
