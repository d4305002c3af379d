"""Volumetric renal-structure segmentation pipeline engine."""

from .volume import (ARTERY, BACKGROUND, CLASS_CODES, KIDNEY, NUM_CLASSES, STRUCTURES, TUMOR,
                     VEIN, LabelVolume, ProbVolume, ScalarVolume, VolumeHeader, voxel_to_world,
                     world_to_voxel)
from .nifti import parse_nifti, write_nifti
from .fileio import load_volume, save_volume
from .preprocess import (AugmentParams, ForegroundStats, RoiBox, augment,
                         compute_foreground_stats, resample, resample_to_grid,
                         self_adapting_crop, zscore_normalize)
from .losses import LossConfig, LossResult, StageCombo, combined_loss, hra_ce, hra_dice, soft_dice
from .components import (Component, ComponentSet, PooledGrid, avg_pool3, centroid_distance,
                         connected_components, max_component)
from .postprocess import (PostprocessConfig, cyst_filter, ensemble_vein, filter_artery_hu,
                          filter_kidney, filter_vessel, fuse_artery, fuse_labels, size_filter,
                          vote_tumor)
from .metrics import avg_hausdorff, case_metrics, dsc, evaluate_dataset, hausdorff
from .phantom import generate_phantom, generate_phantom_with_layout
from .pipeline import (COARSE_I, COARSE_II, FINE_TUMOR, CaseResult, PipelineConfig,
                       PredictorHandle, PreprocessSettings, StageConfig, make_stub_predictor,
                       run_case, sliding_window_predict)
from .predictors import (ExternalProcessPredictor, FileBackedPredictor, InjectedComponent,
                         StubPredictor)
from .config import load_pipeline_config, pipeline_config_from_dict

__version__ = "0.1.0"
