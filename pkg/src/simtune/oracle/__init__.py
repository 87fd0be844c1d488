"""Performance oracle: datasets, preprocessing, regressors and LOGO-CV."""
from .cv import CVConfig, CVReport, SplitRecord, logo_cv, logo_splits, make_grid, metrics
from .data import (
    GROUP_COLUMN,
    TARGETS,
    Dataset,
    DatasetRow,
    DatasetSchema,
    EmptyDatasetError,
    clean_dataset,
    make_row,
)
from .model import SchemaMismatchError, TrainedOracle, train
from .pipeline import (
    FittedPipeline,
    PipelineSpec,
    RawMatrix,
    TransformedMatrix,
    correlation_scores,
    fit_pipeline,
)
from .regressors import GRIDS, KNeighbors, TreeEnsemble, check_hyperparams, make_regressor

__all__ = [
    "GRIDS",
    "GROUP_COLUMN",
    "TARGETS",
    "CVConfig",
    "CVReport",
    "Dataset",
    "DatasetRow",
    "DatasetSchema",
    "EmptyDatasetError",
    "FittedPipeline",
    "KNeighbors",
    "PipelineSpec",
    "RawMatrix",
    "SchemaMismatchError",
    "SplitRecord",
    "TrainedOracle",
    "TransformedMatrix",
    "TreeEnsemble",
    "check_hyperparams",
    "clean_dataset",
    "correlation_scores",
    "fit_pipeline",
    "logo_cv",
    "logo_splits",
    "make_grid",
    "make_regressor",
    "metrics",
    "train",
]
